//! Scalar special functions and random draws used by the schedule and the
//! noising machinery.

use rand::Rng;

/// Gauss error function.
///
/// Series expansion for small arguments, Lentz continued fraction for the
/// complementary function at large arguments. Absolute error is near machine
/// precision over the whole real line (cross-checked against an independent
/// implementation in the tests), far inside the 1e-7 the schedule requires.
pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ax = x.abs();
    let v = if ax < 3.0 { erf_series(ax) } else { 1.0 - erfc_cf(ax) };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// erf via the non-alternating series
/// erf(x) = (2/sqrt(pi)) * exp(-x^2) * sum_{n>=0} x^(2n+1) * 2^n / (1*3*...*(2n+1)).
/// All terms are positive, so there is no cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0u32;
    loop {
        n += 1;
        term *= 2.0 * x2 / (2.0 * n as f64 + 1.0);
        let prev = sum;
        sum += term;
        if sum == prev || n > 200 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x2).exp() * sum
}

/// erfc via the continued fraction
/// erfc(x) = exp(-x^2)/(x*sqrt(pi)) * 1/(1 + 1/(2x^2)/(1 + 2/(2x^2)/(1 + ...)))
/// evaluated with the modified Lentz algorithm. Accurate for x >= ~2.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let x2 = x * x;
    let mut f = 1.0f64;
    let mut c = f;
    let mut d = 0.0f64;
    for n in 1..200 {
        let a = n as f64 / (2.0 * x2);
        d = 1.0 + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x2).exp() / (x * std::f64::consts::PI.sqrt()) * f
}

/// One standard-normal draw via Box-Muller. Self-contained so that the byte
/// layout of every sampled stream is pinned by this crate alone.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] to keep ln finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fill a buffer with standard-normal draws.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn erf_matches_independent_oracle() {
        // statrs ships its own erf; compare on a dense grid.
        let mut worst = 0.0f64;
        let mut x = -6.0;
        while x <= 6.0 {
            let got = erf(x);
            let want = statrs::function::erf::erf(x);
            worst = worst.max((got - want).abs());
            x += 0.01;
        }
        assert!(worst < 1e-13, "max abs erf error {worst}");
    }

    #[test]
    fn erf_limits_and_symmetry() {
        assert_eq!(erf(0.0), 0.0);
        assert!((erf(10.0) - 1.0).abs() < 1e-15);
        assert!((erf(-10.0) + 1.0).abs() < 1e-15);
        for x in [0.3, 1.7, 2.9, 4.2] {
            assert_eq!(erf(-x), -erf(x));
        }
    }

    #[test]
    fn normal_draws_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z = standard_normal(&mut rng);
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn normal_stream_is_deterministic() {
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..32).map(|_| standard_normal(&mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..32).map(|_| standard_normal(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }
}
