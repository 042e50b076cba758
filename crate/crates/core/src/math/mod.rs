//! Dense f64 tensor arithmetic, reverse-mode autodiff and AdamW.

pub mod adamw;
pub mod fdcheck;
pub mod grad_check;
pub mod params;
pub mod special;
pub mod tape;

pub use adamw::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{Checkpoint, Param, ParamId, ParamStore, CHECKPOINT_FORMAT_VERSION};
pub use special::{erf, fill_standard_normal, standard_normal};
pub use tape::{Gradients, Tape, Var};
