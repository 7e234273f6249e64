//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};
use crate::math::{Matrix, Tape, Var};

/// Compares tape gradients of `f` with central differences at `params`.
///
/// `f` receives a fresh tape with one trainable leaf per parameter and must
/// return a 1x1 node. The result is the maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Matrix<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Matrix<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
        for k in 0..p.len() {
            let orig = p.data()[k];
            probe[pi].data_mut()[k] = orig + epsilon;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - epsilon;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn rand(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::random_normal(rows, cols, 1.0, rng)
    }

    /// Reduces any node to a scalar through a fixed random projection so
    /// every output entry carries a distinct weight.
    fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
        let (r, c) = tape.value(v).shape();
        let mut rng = Rng::new(seed);
        let w = tape.leaf(Matrix::random_normal(r, c, 1.0, &mut rng), false);
        let prod = tape.mul(v, w)?;
        let ones_c = tape.leaf(Matrix::filled(c, 1, 1.0), false);
        let ones_r = tape.leaf(Matrix::filled(1, r, 1.0), false);
        let col = tape.matmul(prod, ones_c)?;
        tape.matmul(ones_r, col)
    }

    #[test]
    fn square_at_three() {
        let x = Matrix::from_rows(&[&[3.0]]);
        let err = grad_check(|t, v| t.mul(v[0], v[0]), &[x], 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Matrix::from_rows(&[&[3.0, -1.0]]);
        let err = grad_check(|t, _| Ok(t.leaf(Matrix::filled(1, 1, 7.0), false)), &[x], 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_epsilon_and_nan() {
        let x = Matrix::from_rows(&[&[1.0]]);
        assert!(grad_check(|t, v| Ok(v[0]).map(|v| t.scale(v, 1.0)), std::slice::from_ref(&x), 0.0).is_err());
        let r = grad_check(|t, _| Ok(t.leaf(Matrix::filled(1, 1, f64::NAN), false)), &[x], 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn every_primitive_passes_central_differences() {
        let mut rng = Rng::new(2024);
        for trial in 0..4u64 {
            let m = 3 + rng.below(6);
            let n = 3 + rng.below(6);
            let k = 3 + rng.below(6);
            let a = rand(m, k, &mut rng);
            let b = rand(k, n, &mut rng);
            let bt = rand(n, k, &mut rng);
            let c = rand(m, k, &mut rng);
            let sq = rand(m, m, &mut rng);
            let gain = rand(1, k, &mut rng);
            let seed = 100 + trial;

            let cases: Vec<(&str, f64)> = vec![
                (
                    "matmul",
                    grad_check(
                        |t, v| {
                            let y = t.matmul(v[0], v[1])?;
                            project(t, y, seed)
                        },
                        &[a.clone(), b.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "matmul_bt",
                    grad_check(
                        |t, v| {
                            let y = t.matmul_bt(v[0], v[1])?;
                            project(t, y, seed)
                        },
                        &[a.clone(), bt.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "add",
                    grad_check(
                        |t, v| {
                            let y = t.add(v[0], v[1])?;
                            project(t, y, seed)
                        },
                        &[a.clone(), c.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "gelu",
                    grad_check(
                        |t, v| {
                            let y = t.gelu(v[0]);
                            project(t, y, seed)
                        },
                        std::slice::from_ref(&a),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "softmax",
                    grad_check(
                        |t, v| {
                            let y = t.softmax(v[0], false)?;
                            project(t, y, seed)
                        },
                        std::slice::from_ref(&a),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "causal_softmax",
                    grad_check(
                        |t, v| {
                            let y = t.softmax(v[0], true)?;
                            project(t, y, seed)
                        },
                        std::slice::from_ref(&sq),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "rms_norm",
                    grad_check(
                        |t, v| {
                            let y = t.rms_norm(v[0], v[1])?;
                            project(t, y, seed)
                        },
                        &[a.clone(), gain.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "embedding",
                    grad_check(
                        |t, v| {
                            let y = t.embedding(v[0], &[0, 2, 2, 1])?;
                            project(t, y, seed)
                        },
                        std::slice::from_ref(&a),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "slice_concat",
                    grad_check(
                        |t, v| {
                            let l = t.slice_cols(v[0], 0, 1)?;
                            let r = t.slice_cols(v[0], 1, k - 1)?;
                            let y = t.concat_cols(&[r, l])?;
                            project(t, y, seed)
                        },
                        std::slice::from_ref(&a),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "cross_entropy",
                    grad_check(
                        |t, v| {
                            let targets: Vec<Option<usize>> =
                                (0..m).map(|i| if i % 3 == 1 { None } else { Some(i % k) }).collect();
                            t.cross_entropy(v[0], &targets, 2.5)
                        },
                        std::slice::from_ref(&a),
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "{name} trial {trial}: {err}");
            }
        }
    }
}
