//! Finite-difference checks for every differentiable tape op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::fdcheck::{central_diff, max_rel_err, FD_STEP};
use crate::math::special::standard_normal;
use crate::math::tape::{Tape, Var};

#[cfg(test)]
const TOL: f64 = 1e-4;

/// Run one op spec: build random inputs of the given shapes, compare the
/// backward gradients for every input against central differences.
pub fn check_op<F>(seed: u64, shapes: &[(usize, usize)], positive: bool, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|&(r, c)| {
            (0..r * c)
                .map(|_| {
                    let v = standard_normal(&mut rng);
                    if positive {
                        v.abs() + 0.5
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    let eval = |datas: &[Vec<f64>]| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = datas
            .iter()
            .zip(shapes)
            .map(|(d, &(r, c))| tape.leaf(r, c, d))
            .collect();
        let out = build(&mut tape, &vars);
        // Reduce any output to a scalar with fixed mixing weights.
        let (r, c) = (tape.rows(out), tape.cols(out));
        let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.1 * (i as f64 + 1.0).sin()).collect();
        let wv = tape.constant(r, c, &w);
        let prod = tape.mul(out, wv);
        let loss = tape.sum_all(prod);
        let val = tape.scalar(loss);
        let grads = tape.backward(loss).expect("backward failed");
        let g = vars.iter().map(|&v| grads.get(v).to_vec()).collect();
        (val, Some(g))
    };

    let (_, analytic) = eval(&inputs);
    let analytic = analytic.unwrap();

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let numeric = central_diff(
            |x| {
                let mut datas = inputs.clone();
                datas[i] = x.to_vec();
                eval(&datas).0
            },
            &inputs[i],
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Every op spec exercised by the suite, so the full-op sweep is reusable
/// from the acceptance tests via `check_all_ops`.
pub fn op_specs() -> Vec<(&'static str, Vec<(usize, usize)>, bool, fn(&mut Tape, &[Var]) -> Var)> {
    vec![
        ("add", vec![(3, 4), (3, 4)], false, |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], false, |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], false, |t, v| t.mul(v[0], v[1])),
        ("mul_same_input", vec![(2, 3)], false, |t, v| t.mul(v[0], v[0])),
        ("scale", vec![(3, 4)], false, |t, v| t.scale(v[0], -1.7)),
        ("add_row", vec![(3, 4), (1, 4)], false, |t, v| t.add_row(v[0], v[1])),
        ("add_scalar", vec![(3, 4), (1, 1)], false, |t, v| t.add_scalar(v[0], v[1], false)),
        ("sub_scalar", vec![(3, 4), (1, 1)], false, |t, v| t.add_scalar(v[0], v[1], true)),
        ("mul_scalar", vec![(3, 4), (1, 1)], false, |t, v| t.mul_scalar(v[0], v[1])),
        ("matmul", vec![(3, 4), (4, 2)], false, |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![(3, 4)], false, |t, v| t.transpose(v[0])),
        ("tanh", vec![(3, 4)], false, |t, v| t.tanh(v[0])),
        ("sqrt_eps", vec![(3, 4)], true, |t, v| t.sqrt_eps(v[0], 1e-12)),
        ("softmax_rows", vec![(3, 5)], false, |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![(3, 6), (1, 6), (1, 6)], false, |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("sum_all", vec![(3, 4)], false, |t, v| t.sum_all(v[0])),
        ("mean_all", vec![(3, 4)], false, |t, v| t.mean_all(v[0])),
        ("sum_axis0", vec![(3, 4)], false, |t, v| t.sum_axis0(v[0])),
        ("sum_axis1", vec![(3, 4)], false, |t, v| t.sum_axis1(v[0])),
        ("slice_rows", vec![(5, 3)], false, |t, v| t.slice_rows(v[0], 1, 3)),
        ("gather_rows", vec![(4, 3)], false, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ("concat_rows", vec![(2, 3), (3, 3)], false, |t, v| t.concat_rows(&[v[0], v[1]])),
        ("l2_norm", vec![(3, 4)], false, |t, v| t.l2_norm(v[0])),
        ("attention", vec![(2, 4), (3, 4), (4, 4), (4, 4), (4, 4), (4, 4)], false, |t, v| {
            t.attention(v[0], v[1], v[2], v[3], v[4], v[5], 2, None)
        }),
        ("attention_biased", vec![(2, 4), (3, 4), (4, 4), (4, 4), (4, 4), (4, 4)], false, |t, v| {
            t.attention(v[0], v[1], v[2], v[3], v[4], v[5], 2, Some(&[0.3, -1.1, 0.4]))
        }),
        ("self_attention", vec![(3, 4), (4, 4), (4, 4), (4, 4), (4, 4)], false, |t, v| {
            t.attention(v[0], v[0], v[1], v[2], v[3], v[4], 2, None)
        }),
    ]
}

/// Worst relative error across all ops and `seeds` random draws per op.
pub fn check_all_ops(seeds: u64) -> (f64, &'static str) {
    let mut worst = (0.0f64, "");
    for (name, shapes, positive, build) in op_specs() {
        for seed in 0..seeds {
            let err = check_op(seed * 1013 + 7, &shapes, positive, build);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for (name, shapes, positive, build) in op_specs() {
            for seed in 0..5u64 {
                let err = check_op(seed * 31 + 1, &shapes, positive, build);
                assert!(err < TOL, "op `{name}` seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, &[0.4, -2.0, 7.5]);
        let loss = tape.sum_all(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_the_vector() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, &[2.0, -3.0]);
        let sq = tape.mul(x, x);
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), &[2.0, -3.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        // 12 scalar params: w1 [2x3]=6, b1 [1x3]=3, w2 [3x1]=3.
        let err = check_op(99, &[(2, 3), (1, 3), (3, 1), (1, 2)], false, |t, v| {
            let h = t.matmul(v[3], v[0]);
            let h = t.add_row(h, v[1]);
            let h = t.tanh(h);
            t.matmul(h, v[2])
        });
        assert!(err < TOL, "mlp rel err {err}");
    }

    #[test]
    fn untouched_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, &[1.0, 2.0]);
        let unused = tape.leaf(2, 2, &[1.0; 4]);
        let loss = tape.sum_all(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.leaf(2, 2, &[1.0; 4]);
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn nan_in_forward_is_numerical_failure_naming_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 1, &[-2.0]);
        let y = tape.sqrt_eps(x, 0.0); // sqrt of a negative: NaN
        let loss = tape.sum_all(y);
        match tape.backward(loss) {
            Err(crate::Error::Numerical { op, .. }) => assert_eq!(op, "sqrt_eps"),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let data: Vec<f64> = (0..12).map(|_| standard_normal(&mut rng)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(3, 4, &data);
            let s = tape.softmax_rows(x);
            let n = tape.l2_norm(s);
            let g = tape.backward(n).unwrap();
            g.get(x).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tape_reset_reuses_cleanly() {
        let mut tape = Tape::new();
        for _ in 0..3 {
            tape.reset();
            let x = tape.leaf(2, 2, &[1.0, 2.0, 3.0, 4.0]);
            let y = tape.tanh(x);
            let loss = tape.sum_all(y);
            assert!(tape.backward(loss).is_ok());
        }
    }
}
