//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Result, Tape, Tensor, TensorError, Var};

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Worst component found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare the tape gradient of a scalar function against central finite
/// differences `(f(θ+eps) − f(θ−eps)) / 2eps`, component by component.
///
/// `f` records its computation on the supplied tape using the given
/// parameter handles and returns the scalar output.
pub fn grad_check<F, E>(f: F, params: &[Tensor], eps: f64) -> std::result::Result<GradCheckResult, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_with_fault(f, params, eps, None)
}

/// [`grad_check`] with a deliberately corrupted backward rule, for negative
/// controls.
pub fn grad_check_with_fault<F, E>(
    f: F,
    params: &[Tensor],
    eps: f64,
    fault: Option<OpKind>,
) -> std::result::Result<GradCheckResult, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut result = GradCheckResult {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let n = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, n);
            result.components += 1;
            if err > result.max_rel_error || result.worst.is_none() {
                result.max_rel_error = err;
                result.worst = Some((pi, ei));
                result.analytic = a;
                result.numeric = n;
            }
        }
    }
    Ok(result)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Values with magnitude in `[0.1, 1)` and random sign, keeping clear of kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduce `out` to a scalar as `sum(out ⊙ R)` with a fixed random `R`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let weights = if shape.is_empty() {
        Tensor::scalar(rng.random_range(0.5..1.5))
    } else {
        uniform(&mut rng, &shape, -1.0, 1.0)
    };
    let r = tape.constant(weights);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Finite-difference check of a single operator on a small random case.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DEFAULT_EPS;
    macro_rules! run {
        ($params:expr, |$tape:ident, $v:ident| $body:expr) => {
            grad_check_with_fault::<_, TensorError>(
                |$tape: &mut Tape, $v: &[Var]| {
                    let out = $body;
                    project($tape, out, seed)
                },
                &$params,
                eps,
                fault,
            )
        };
    }
    match kind {
        OpKind::Leaf => run!([uniform(&mut rng, &[3], -1.0, 1.0)], |t, v| v[0]),
        OpKind::Add => run!(
            [uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[1, 4], -1.0, 1.0)],
            |t, v| t.add(v[0], v[1])?
        ),
        OpKind::Sub => run!(
            [uniform(&mut rng, &[2, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3], -1.0, 1.0)],
            |t, v| t.sub(v[0], v[1])?
        ),
        OpKind::Mul => run!(
            [uniform(&mut rng, &[2, 3, 2], -1.0, 1.0), uniform(&mut rng, &[2, 1, 2], -1.0, 1.0)],
            |t, v| t.mul(v[0], v[1])?
        ),
        OpKind::Scale => run!([uniform(&mut rng, &[5], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7)),
        OpKind::AddScalar => run!([uniform(&mut rng, &[5], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        OpKind::Relu => run!([away_from_zero(&mut rng, &[3, 4])], |t, v| t.relu(v[0])),
        OpKind::Exp => run!([uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| t.exp(v[0])),
        OpKind::Sigmoid => run!([uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| t.sigmoid(v[0])),
        OpKind::Abs => run!([away_from_zero(&mut rng, &[3, 4])], |t, v| t.abs(v[0])),
        OpKind::Pow => run!([uniform(&mut rng, &[6], 0.5, 2.0)], |t, v| t.pow(v[0], 0.5)),
        OpKind::Concat => run!(
            [uniform(&mut rng, &[2, 1, 3], -1.0, 1.0), uniform(&mut rng, &[2, 2, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 1)?
        ),
        OpKind::Split => run!([uniform(&mut rng, &[2, 5], -1.0, 1.0)], |t, v| {
            let parts = t.split(v[0], 1, &[2, 3])?;
            let a = t.scale(parts[0], 2.0);
            let b = t.exp(parts[1]);
            t.concat(&[b, a], 1)?
        }),
        OpKind::Reshape => run!([uniform(&mut rng, &[2, 3], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 2])?),
        OpKind::Mean => run!([uniform(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| t.mean(v[0])),
        OpKind::SumAxis => run!([uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)], |t, v| t.sum_axis(v[0], 1)?),
        OpKind::Softmax => run!([uniform(&mut rng, &[2, 3, 4], -2.0, 2.0)], |t, v| t.softmax_axis(v[0], 1)?),
        OpKind::Matmul => run!(
            [uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1])?
        ),
        OpKind::Conv2d => run!(
            [
                uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 1, 1], -1.0, 1.0),
            ],
            |t, v| {
                let strided = t.conv2d(v[0], v[1], 2, 1)?;
                t.conv2d(strided, v[2], 1, 0)?
            }
        ),
        OpKind::L2NormalizeRows => run!([uniform(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.l2_normalize_rows(v[0])?),
        OpKind::IndexRows => run!([uniform(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| t.index_rows(v[0], &[0, 2, 2, 3])?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let w = Tensor::from_slice(&[0.3, -1.2, 2.5, 0.7]);
        let res = grad_check::<_, TensorError>(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(res.max_rel_error < 1e-9, "{res:?}");
        assert_eq!(res.components, 4);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::from_slice(&[1.0, 2.0]);
        let res = grad_check::<_, TensorError>(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &[w], DEFAULT_EPS).unwrap();
        assert_eq!(res.max_rel_error, 0.0);
        assert_eq!((res.analytic, res.numeric), (0.0, 0.0));
    }

    #[test]
    fn every_op_passes() {
        for kind in OpKind::DIFFERENTIABLE {
            for seed in 0..3 {
                let res = check_op(kind, seed, None).unwrap();
                assert!(res.max_rel_error < 1e-6, "{} seed {seed}: {res:?}", kind.name());
            }
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        for kind in OpKind::DIFFERENTIABLE {
            let res = check_op(kind, 7, Some(kind)).unwrap();
            assert!(res.max_rel_error > 0.1, "{}: {res:?}", kind.name());
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
