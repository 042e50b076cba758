//! Named parameter storage shared by the codec, context encoder and
//! denoiser, plus the JSON checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::special::standard_normal;
use crate::math::tape::{Tape, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Flat list of named parameter matrices. Lookup by id is O(1); names exist
/// for checkpoints and diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "param `{name}`: data length mismatch");
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "param `{name}` registered twice"
        );
        self.params.push(Param { name: name.to_string(), rows, cols, data });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn add_normal<R: rand::Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| scale * standard_normal(rng)).collect();
        self.add(name, rows, cols, data)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![1.0; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Insert the parameter as a differentiable leaf on a tape.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.leaf(p.rows, p.cols, &p.data)
    }

    /// Insert the parameter as a detached constant (teacher weights, frozen
    /// codec).
    pub fn constant(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.constant(p.rows, p.cols, &p.data)
    }

    /// Elementwise convex combination `self = (1 - alpha) * other + alpha * self`,
    /// the teacher update. The result is plain data, detached by construction.
    pub fn ema_from(&mut self, other: &ParamStore, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("ema: alpha {alpha} outside [0,1]")));
        }
        if self.params.len() != other.params.len() {
            return Err(Error::contract("ema: param count mismatch"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.data.len() != src.data.len() {
                return Err(Error::contract(format!("ema: shape mismatch for `{}`", dst.name)));
            }
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = (1.0 - alpha) * s + alpha * *d;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// On-disk model container: student and teacher weights side by side with a
/// format version so old files fail loudly instead of silently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub student: ParamStore,
    pub teacher: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&raw)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format version {} (expected {})",
                ck.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ck)
    }
}
