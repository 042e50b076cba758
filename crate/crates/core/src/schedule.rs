//! Noise-level and curriculum machinery: the power-law sigma grid with its
//! zero left-pad, the discrete lognormal index sampler, the three-stage
//! discretization curriculum, and the teacher-index rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::special::erf;

pub const SIGMA_MIN_DEFAULT: f64 = 0.002;
pub const SIGMA_MAX_DEFAULT: f64 = 1.0;
pub const RHO_DEFAULT: f64 = 7.0;
pub const LOGNORMAL_MU_DEFAULT: f64 = -1.1;
pub const LOGNORMAL_SIGMA_DEFAULT: f64 = 2.0;
pub const BASE_N_DEFAULT: usize = 10;

/// Discretized noise grid. `sigmas[0] = 0` is the left-pad; `sigmas[1..=n]`
/// strictly increase from `sigma_min` to `sigma_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub n: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigmas: Vec<f64>,
}

/// Power-law interpolation between `sigma_min^(1/rho)` and `sigma_max^(1/rho)`
/// over `n` steps, zero-padded at index 0.
pub fn build_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n < 2 {
        return Err(Error::contract(format!("build_sigmas: n = {n} < 2")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(Error::contract(format!(
            "build_sigmas: need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    if rho <= 0.0 {
        return Err(Error::contract(format!("build_sigmas: rho = {rho} <= 0")));
    }
    let lo = sigma_min.powf(1.0 / rho);
    let hi = sigma_max.powf(1.0 / rho);
    let mut sigmas = Vec::with_capacity(n + 1);
    sigmas.push(0.0);
    for t in 1..=n {
        let frac = (t - 1) as f64 / (n - 1) as f64;
        sigmas.push((lo + frac * (hi - lo)).powf(rho));
    }
    // Pin the endpoints exactly; powf round-trips can wobble in the last ulp.
    sigmas[1] = sigma_min;
    sigmas[n] = sigma_max;
    Ok(SigmaSchedule { n, sigma_min, sigma_max, rho, sigmas })
}

impl SigmaSchedule {
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// Discrete lognormal distribution over student indices `1..=n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub mu: f64,
    pub big_sigma: f64,
    /// Normalized over indices 1..=n; `pmf[0]` corresponds to index 1.
    pub pmf: Vec<f64>,
    /// Inclusive-prefix CDF used for inverse sampling.
    cdf: Vec<f64>,
}

/// Mass of index i is proportional to
/// `erf((ln s_i - mu)/(sqrt(2) S)) - erf((ln s_{i-1} - mu)/(sqrt(2) S))`,
/// where the i = 1 term uses `erf(-inf) = -1` because `s_0 = 0`.
pub fn build_pmf(schedule: &SigmaSchedule, mu: f64, big_sigma: f64) -> Result<TimestepSampler> {
    if big_sigma <= 0.0 {
        return Err(Error::contract(format!("build_pmf: Sigma = {big_sigma} <= 0")));
    }
    let z = |sigma: f64| (sigma.ln() - mu) / (std::f64::consts::SQRT_2 * big_sigma);
    let mut raw = Vec::with_capacity(schedule.n);
    let mut prev = -1.0; // erf(-inf)
    for t in 1..=schedule.n {
        let cur = erf(z(schedule.sigma(t)));
        raw.push(cur - prev);
        prev = cur;
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::numerical("build_pmf", "non-positive total mass"));
    }
    let pmf: Vec<f64> = raw.iter().map(|m| m / total).collect();
    let mut cdf = Vec::with_capacity(pmf.len());
    let mut acc = 0.0;
    for p in &pmf {
        acc += p;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;
    Ok(TimestepSampler { mu, big_sigma, pmf, cdf })
}

/// Unnormalized masses, exposed for diagnostics and the schedule dump.
pub fn raw_pmf(schedule: &SigmaSchedule, mu: f64, big_sigma: f64) -> Vec<f64> {
    let z = |sigma: f64| (sigma.ln() - mu) / (std::f64::consts::SQRT_2 * big_sigma);
    let mut raw = Vec::with_capacity(schedule.n);
    let mut prev = -1.0;
    for t in 1..=schedule.n {
        let cur = erf(z(schedule.sigma(t)));
        raw.push(cur - prev);
        prev = cur;
    }
    raw
}

impl TimestepSampler {
    /// Draw a student index in `1..=n` by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => (i + 1).min(self.pmf.len()),
        }
    }
}

/// Which teacher-index rule the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Shrinking student-teacher gap driven by the stage exponent.
    Ect,
    /// Adjacent discretization step (`r = t - 1`).
    Ict,
}

/// Teacher-index rule parameters. `k` and `b` are fixed across runs;
/// `q` is the tunable contraction base; `d = floor(E/3)` aligns the exponent
/// with the discretization curriculum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherScheduler {
    pub k: f64,
    pub b: f64,
    pub q: u32,
    pub max_epochs: usize,
    pub mode: ScheduleMode,
}

impl TeacherScheduler {
    pub fn new(q: u32, max_epochs: usize, mode: ScheduleMode) -> Self {
        TeacherScheduler { k: 8.0, b: 1.0, q, max_epochs, mode }
    }

    /// Threshold epoch: one curriculum stage length.
    pub fn d(&self) -> usize {
        (self.max_epochs / 3).max(1)
    }
}

/// `n(t') = 1 + k/(1 + e^(b t'))`.
fn gap_fn(k: f64, b: f64, t_prime: f64) -> f64 {
    1.0 + k / (1.0 + (b * t_prime).exp())
}

/// Continuous teacher/student factor `max(0, 1 - n(t')/q^stage)` for
/// `t' = t/N`. The floor of `t * factor` is the teacher index.
pub fn teacher_factor(t_prime: f64, q: u32, stage: u32, k: f64, b: f64) -> f64 {
    let denom = (q as f64).powi(stage as i32);
    (1.0 - gap_fn(k, b, t_prime) / denom).max(0.0)
}

/// Range (min, max) of the clamped continuous factor over `t' in [0, 1]`.
/// `n(t')` decreases in `t'`, so the factor is monotone increasing and the
/// extremes sit at the endpoints.
pub fn teacher_factor_range(q: u32, stage: u32, k: f64, b: f64) -> (f64, f64) {
    (teacher_factor(0.0, q, stage, k, b), teacher_factor(1.0, q, stage, k, b))
}

/// Teacher index under the shrinking-gap rule, clamped so `0 <= r < t`.
pub fn teacher_index(t: usize, epoch: usize, sched: &TeacherScheduler, n: usize) -> Result<usize> {
    if t < 1 || t > n {
        return Err(Error::contract(format!("teacher_index: t = {t} outside 1..={n}")));
    }
    if epoch < 1 || epoch > sched.max_epochs {
        return Err(Error::contract(format!(
            "teacher_index: epoch {epoch} outside 1..={}",
            sched.max_epochs
        )));
    }
    let stage = curriculum_stage(epoch, sched.max_epochs);
    let t_prime = t as f64 / n as f64;
    let factor = teacher_factor(t_prime, sched.q, stage, sched.k, sched.b);
    let r = (t as f64 * factor).floor() as usize;
    Ok(r.min(t - 1))
}

/// Adjacent-step teacher rule.
pub fn teacher_index_ict(t: usize) -> usize {
    t.saturating_sub(1)
}

/// Curriculum stage in {1, 2, 3}: doubles the discretization every
/// `floor(E/3)` epochs, with the final stage absorbing remainder epochs.
pub fn curriculum_stage(epoch: usize, max_epochs: usize) -> u32 {
    let d = (max_epochs / 3).max(1);
    ((1 + (epoch - 1) / d) as u32).min(3)
}

/// Discretization count for the epoch: `base_n * 2^(stage - 1)`.
pub fn curriculum_n(epoch: usize, max_epochs: usize, base_n: usize) -> usize {
    base_n * (1usize << (curriculum_stage(epoch, max_epochs) - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule(n: usize) -> SigmaSchedule {
        build_sigmas(n, SIGMA_MIN_DEFAULT, SIGMA_MAX_DEFAULT, RHO_DEFAULT).unwrap()
    }

    #[test]
    fn sigma_endpoints_and_monotonicity() {
        for n in [2, 10, 20, 40] {
            let s = default_schedule(n);
            assert_eq!(s.sigma(0), 0.0);
            assert_eq!(s.sigma(1), 0.002);
            assert_eq!(s.sigma(n), 1.0);
            for t in 1..n {
                assert!(s.sigma(t) < s.sigma(t + 1), "n={n} t={t}");
            }
        }
    }

    #[test]
    fn sigma_midpoint_matches_high_precision_evaluation() {
        // Oracle: closed form evaluated with mpmath at 50 digits.
        let s = default_schedule(10);
        let expected = 0.06259018452023675;
        assert!((s.sigma(5) - expected).abs() < 1e-15, "sigma(5) = {}", s.sigma(5));
    }

    #[test]
    fn sigma_rejects_bad_inputs() {
        assert!(matches!(build_sigmas(1, 0.002, 1.0, 7.0), Err(Error::Contract(_))));
        assert!(matches!(build_sigmas(10, 0.0, 1.0, 7.0), Err(Error::Contract(_))));
        assert!(matches!(build_sigmas(10, 2.0, 1.0, 7.0), Err(Error::Contract(_))));
        assert!(matches!(build_sigmas(10, 0.002, 1.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn rebuilding_after_stage_change_preserves_endpoints() {
        for n in [10, 20, 40] {
            let s = default_schedule(n);
            assert_eq!(s.sigma(1), 0.002);
            assert_eq!(s.sigma(n), 1.0);
        }
    }

    #[test]
    fn pmf_is_normalized_and_non_negative() {
        for n in [2, 10, 20, 40] {
            let s = default_schedule(n);
            let sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
            assert_eq!(sampler.pmf.len(), n);
            assert!(sampler.pmf.iter().all(|&p| p >= 0.0));
            let total: f64 = sampler.pmf.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n} total={total}");
        }
    }

    #[test]
    fn pmf_n10_matches_erf_oracle_values() {
        // Oracle: mpmath erf over the closed form, 50 digits.
        let s = default_schedule(10);
        let raw = raw_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT);
        let total: f64 = raw.iter().sum();
        assert!((raw[0] - 0.010548697049250726).abs() < 1e-12, "raw[0] = {}", raw[0]);
        assert!((total - 1.4176806264233073).abs() < 1e-12, "total = {total}");
        let sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
        assert!((sampler.pmf[0] - 0.007440813433321883).abs() < 1e-12, "p1 = {}", sampler.pmf[0]);
    }

    #[test]
    fn pmf_n20_is_unimodal_with_mode_near_mu() {
        let s = default_schedule(20);
        let sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
        let argmax = sampler
            .pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // Strictly increasing up to the mode, strictly decreasing after.
        for i in 0..argmax {
            assert!(sampler.pmf[i] < sampler.pmf[i + 1], "rise at {i}");
        }
        for i in argmax..sampler.pmf.len() - 1 {
            assert!(sampler.pmf[i] > sampler.pmf[i + 1], "fall at {i}");
        }
        // Mode sits where the grid crosses ln(sigma) ~ mu (enumerated: index 14).
        assert_eq!(argmax + 1, 14, "mode index");
        let ln_sig = s.sigma(argmax + 1).ln();
        assert!((ln_sig - LOGNORMAL_MU_DEFAULT).abs() < 0.6, "ln sigma at mode = {ln_sig}");
    }

    #[test]
    fn sampler_degenerate_pmf_always_returns_its_index() {
        let s = default_schedule(5);
        let mut sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
        sampler.pmf = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        sampler.cdf = vec![0.0, 0.0, 1.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            assert_eq!(sampler.sample(&mut rng), 3);
        }
    }

    #[test]
    fn sampler_same_seed_same_sequence() {
        let s = default_schedule(10);
        let sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| sampler.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn sampler_frequencies_follow_pmf() {
        let s = default_schedule(10);
        let sampler = build_pmf(&s, LOGNORMAL_MU_DEFAULT, LOGNORMAL_SIGMA_DEFAULT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n_draws = 100_000usize;
        let mut counts = vec![0usize; 10];
        for _ in 0..n_draws {
            counts[sampler.sample(&mut rng) - 1] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = sampler.pmf[i];
            let sd = (p * (1.0 - p) / n_draws as f64).sqrt();
            let freq = c as f64 / n_draws as f64;
            assert!((freq - p).abs() <= 4.0 * sd + 1e-9, "index {}: freq {freq} vs p {p}", i + 1);
        }
    }

    #[test]
    fn teacher_index_hand_case() {
        // q=4, stage 2 (N=20), t=20: n(1) = 1 + 8/(1+e), factor ~ 0.80303, r=16.
        let sched = TeacherScheduler::new(4, 60, ScheduleMode::Ect);
        let r = teacher_index(20, 25, &sched, 20).unwrap();
        assert_eq!(r, 16);
    }

    #[test]
    fn teacher_index_clamps_to_zero_in_first_stage() {
        // q=4, stage 1 (N=10): factor range [0, 0.21]; small t floors to 0.
        let sched = TeacherScheduler::new(4, 60, ScheduleMode::Ect);
        for t in 1..=4 {
            assert_eq!(teacher_index(t, 1, &sched, 10).unwrap(), 0);
        }
    }

    #[test]
    fn teacher_index_always_below_student_index() {
        for q in [2u32, 4, 6, 8] {
            let sched = TeacherScheduler::new(q, 60, ScheduleMode::Ect);
            for (epoch, n) in [(1usize, 10usize), (25, 20), (60, 40)] {
                for t in 1..=n {
                    let r = teacher_index(t, epoch, &sched, n).unwrap();
                    assert!(r < t, "q={q} epoch={epoch} t={t} r={r}");
                }
            }
        }
    }

    #[test]
    fn teacher_factor_ranges_match_published_table() {
        // (q, stage) -> published two-decimal range of the clamped factor.
        let table: [(u32, u32, f64, f64); 12] = [
            (2, 1, 0.00, 0.00),
            (2, 2, 0.00, 0.21),
            (2, 3, 0.38, 0.60),
            (4, 1, 0.00, 0.21),
            (4, 2, 0.69, 0.80),
            (4, 3, 0.92, 0.96),
            (6, 1, 0.17, 0.48),
            (6, 2, 0.86, 0.91),
            (6, 3, 0.98, 0.99),
            (8, 1, 0.38, 0.60),
            (8, 2, 0.92, 0.96),
            (8, 3, 0.98, 0.99),
        ];
        for (q, stage, lo, hi) in table {
            let (min, max) = teacher_factor_range(q, stage, 8.0, 1.0);
            let round2 = |x: f64| (x * 100.0).round() / 100.0;
            assert!(
                (round2(min) - lo).abs() <= 0.01 + 1e-12,
                "q={q} stage={stage}: min {min} vs {lo}"
            );
            assert!(
                (round2(max) - hi).abs() <= 0.01 + 1e-12,
                "q={q} stage={stage}: max {max} vs {hi}"
            );
        }
    }

    #[test]
    fn ict_rule_is_adjacent_step() {
        assert_eq!(teacher_index_ict(5), 4);
        assert_eq!(teacher_index_ict(1), 0);
    }

    #[test]
    fn curriculum_doubles_every_third_of_training() {
        assert_eq!(curriculum_n(1, 60, 10), 10);
        assert_eq!(curriculum_n(20, 60, 10), 10);
        assert_eq!(curriculum_n(21, 60, 10), 20);
        assert_eq!(curriculum_n(25, 60, 10), 20);
        assert_eq!(curriculum_n(40, 60, 10), 20);
        assert_eq!(curriculum_n(41, 60, 10), 40);
        assert_eq!(curriculum_n(60, 60, 10), 40);
        // E not divisible by 3: the final stage absorbs the remainder.
        assert_eq!(curriculum_n(64, 64, 10), 40);
        assert_eq!(curriculum_n(43, 64, 10), 40);
        assert_eq!(curriculum_n(42, 64, 10), 20);
    }
}
