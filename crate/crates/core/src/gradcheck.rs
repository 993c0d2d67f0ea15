//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::CrowdFormer;
use crate::params::ParamStore;
use crate::tape::{GeluApprox, Tape, Var};
use crate::tensor::Tensor;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Coordinates checked individually per input before falling back to sampling.
const FULL_CHECK_LIMIT: usize = 48;
const SAMPLED_COORDS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub checks: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(op_name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max = errors.iter().copied().fold(0.0, f64::max);
        Self {
            op_name: op_name.to_string(),
            max_relative_error: max,
            tolerance,
            checks: errors.len(),
            // NaN compares false, so a NaN error never passes.
            passed: errors.iter().all(|e| *e <= tolerance),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds a scalar from the op output by contracting with fixed weights, so
/// every output element contributes with an independent coefficient.
fn contract(tape: &mut Tape, y: &Var, weights: &Tensor) -> Result<Var> {
    let w = Var::constant(weights.clone());
    let prod = tape.mul(y, &w)?;
    Ok(tape.sum(&prod))
}

/// Checks `op` against central differences over `trials` random points.
///
/// `sample` draws the op's inputs for one trial; every input is treated as
/// differentiable. The op output is contracted with random weights into a
/// scalar, then both individual coordinates and a random direction per
/// input are compared.
pub fn finite_diff_check<R, S, F>(
    op_name: &str,
    rng: &mut R,
    trials: usize,
    step: f64,
    tolerance: f64,
    mut sample: S,
    op: F,
) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut errors = Vec::new();
    for _ in 0..trials {
        let inputs = sample(rng);
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = op(&mut tape, &leaves)?;
        let weights = Tensor::uniform(y.shape(), -1.0, 1.0, rng);
        let loss = contract(&mut tape, &y, &weights)?;
        let grads = tape.backward(&loss)?;

        let eval = |point: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::no_grad();
            let vars: Vec<Var> = point.iter().cloned().map(Var::constant).collect();
            let y = op(&mut tape, &vars)?;
            Ok(contract(&mut tape, &y, &weights)?.value().item())
        };

        for (i, leaf) in leaves.iter().enumerate() {
            let zeros;
            let analytic = match grads.wrt(leaf) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; inputs[i].numel()];
                    &zeros
                }
            };
            let n = inputs[i].numel();
            let coords: Vec<usize> = if n <= FULL_CHECK_LIMIT {
                (0..n).collect()
            } else {
                (0..SAMPLED_COORDS).map(|_| rng.random_range(0..n)).collect()
            };
            for c in coords {
                let numeric = central_difference(&eval, &inputs, i, step, |d, s| d[c] += s)?;
                errors.push(relative_error(analytic[c], numeric));
            }
            let dir = Tensor::uniform(inputs[i].shape(), -1.0, 1.0, rng);
            let numeric = central_difference(&eval, &inputs, i, step, |d, s| {
                d.iter_mut().zip(dir.data()).for_each(|(x, v)| *x += s * v)
            })?;
            let jvp: f64 = analytic.iter().zip(dir.data()).map(|(g, v)| g * v).sum();
            errors.push(relative_error(jvp, numeric));
        }
    }
    Ok(GradCheckReport::new(op_name, &errors, tolerance))
}

fn central_difference<E, P>(
    eval: &E,
    inputs: &[Tensor],
    which: usize,
    step: f64,
    perturb: P,
) -> Result<f64>
where
    E: Fn(&[Tensor]) -> Result<f64>,
    P: Fn(&mut [f64], f64),
{
    let mut point = inputs.to_vec();
    perturb(point[which].data_mut(), step);
    let plus = eval(&point)?;
    let mut point = inputs.to_vec();
    perturb(point[which].data_mut(), -step);
    let minus = eval(&point)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Checks a scalar function of a parameter store along one random direction
/// per parameter tensor, plus one joint direction over all of them.
pub fn check_params<R, F>(
    name: &str,
    store: &ParamStore,
    rng: &mut R,
    step: f64,
    tolerance: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut working = store.clone();
    working.zero_grad();
    let mut tape = Tape::new();
    let value = loss(&mut tape, &working)?;
    tape.backward(&value)?.accumulate_into(&mut working)?;
    drop(tape);

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::no_grad();
        Ok(loss(&mut tape, params)?.value().item())
    };

    let ids: Vec<_> = working.ids().filter(|&id| working.get(id).requires_grad()).collect();
    let mut errors = Vec::new();
    let dirs: Vec<Tensor> = ids
        .iter()
        .map(|&id| Tensor::uniform(working.get(id).shape(), -1.0, 1.0, rng))
        .collect();
    let mut joint_analytic = 0.0;
    for (&id, dir) in ids.iter().zip(&dirs) {
        let t = working.get(id);
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let analytic: f64 = grad.iter().zip(dir.data()).map(|(g, v)| g * v).sum();
        joint_analytic += analytic;
        let numeric = params_difference(&eval, &working, &[(id, dir)], step)?;
        errors.push(relative_error(analytic, numeric));
    }
    let joint: Vec<_> = ids.iter().copied().zip(dirs.iter()).collect();
    let numeric = params_difference(&eval, &working, &joint, step)?;
    errors.push(relative_error(joint_analytic, numeric));
    Ok(GradCheckReport::new(name, &errors, tolerance))
}

fn params_difference<E>(
    eval: &E,
    store: &ParamStore,
    dirs: &[(crate::params::ParamId, &Tensor)],
    step: f64,
) -> Result<f64>
where
    E: Fn(&ParamStore) -> Result<f64>,
{
    let shifted = |s: f64| {
        let mut p = store.clone();
        for (id, dir) in dirs {
            p.get_mut(*id)
                .data_mut()
                .iter_mut()
                .zip(dir.data())
                .for_each(|(x, v)| *x += s * v);
        }
        p
    };
    let plus = eval(&shifted(step))?;
    let minus = eval(&shifted(-step))?;
    Ok((plus - minus) / (2.0 * step))
}

/// Tolerance for individual ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;
type SampleFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn op_cases() -> Vec<(&'static str, SampleFn, OpFn)> {
    vec![
        ("add", |r| vec![u(&[3, 4], r), u(&[3, 4], r)], |t, x| t.add(&x[0], &x[1])),
        ("mul", |r| vec![u(&[3, 4], r), u(&[3, 4], r)], |t, x| t.mul(&x[0], &x[1])),
        ("scale", |r| vec![u(&[5], r)], |t, x| Ok(t.scale(&x[0], -1.7))),
        ("sum", |r| vec![u(&[2, 3], r)], |t, x| Ok(t.sum(&x[0]))),
        ("mean", |r| vec![u(&[2, 3], r)], |t, x| Ok(t.mean(&x[0]))),
        ("reshape", |r| vec![u(&[2, 6], r)], |t, x| t.reshape(&x[0], &[3, 4])),
        ("permute", |r| vec![u(&[2, 3, 4], r)], |t, x| t.permute(&x[0], &[2, 0, 1])),
        ("concat_last", |r| vec![u(&[2, 3], r), u(&[2, 2], r)], |t, x| t.concat_last(&[&x[0], &x[1]])),
        ("linear", |r| vec![u(&[2, 3, 4], r), u(&[5, 4], r), u(&[5], r)], |t, x| {
            t.linear(&x[0], &x[1], Some(&x[2]))
        }),
        ("matmul", |r| vec![u(&[2, 3, 4], r), u(&[2, 4, 2], r)], |t, x| t.matmul(&x[0], &x[1], false)),
        ("matmul_trans_b", |r| vec![u(&[2, 3, 4], r), u(&[2, 5, 4], r)], |t, x| {
            t.matmul(&x[0], &x[1], true)
        }),
        ("conv2d", |r| vec![u(&[2, 2, 5, 5], r), u(&[3, 2, 3, 3], r), u(&[3], r)], |t, x| {
            t.conv2d(&x[0], &x[1], Some(&x[2]), 1, 1, 1)
        }),
        ("conv2d_strided", |r| vec![u(&[1, 3, 7, 7], r), u(&[4, 3, 3, 3], r), u(&[4], r)], |t, x| {
            t.conv2d(&x[0], &x[1], Some(&x[2]), 2, 1, 1)
        }),
        ("conv2d_patch", |r| vec![u(&[1, 2, 8, 8], r), u(&[3, 2, 4, 4], r)], |t, x| {
            t.conv2d(&x[0], &x[1], None, 4, 0, 1)
        }),
        ("conv2d_depthwise", |r| vec![u(&[2, 3, 4, 4], r), u(&[3, 1, 3, 3], r), u(&[3], r)], |t, x| {
            t.conv2d(&x[0], &x[1], Some(&x[2]), 1, 1, 3)
        }),
        ("layer_norm", |r| vec![u(&[3, 5], r), u(&[5], r), u(&[5], r)], |t, x| {
            t.layer_norm(&x[0], &x[1], &x[2], 1e-6)
        }),
        ("softmax", |r| vec![Tensor::uniform(&[3, 4], -3.0, 3.0, r)], |t, x| Ok(t.softmax(&x[0]))),
        ("gelu", |r| vec![Tensor::uniform(&[8], -3.0, 3.0, r)], |t, x| Ok(t.gelu(&x[0], GeluApprox::Erf))),
        ("gelu_tanh", |r| vec![Tensor::uniform(&[8], -3.0, 3.0, r)], |t, x| {
            Ok(t.gelu(&x[0], GeluApprox::Tanh))
        }),
        ("global_avg_pool", |r| vec![u(&[2, 3, 3, 4], r)], |t, x| t.global_avg_pool(&x[0])),
        ("smooth_l1", |r| vec![Tensor::uniform(&[6], -4.0, 4.0, r)], |t, x| {
            let target = Tensor::new(vec![6], vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.5])?;
            t.smooth_l1(&x[0], &target, 1.0)
        }),
    ]
}

/// Checks every tape op over `trials` random inputs drawn from `seed`.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, sample, op)| finite_diff_check(name, &mut rng, trials, STEP, OP_TOLERANCE, sample, op))
        .collect()
}

/// Checks the smooth-L1 loss of the whole model with respect to every
/// parameter. Each trial draws fresh weights, crops and targets.
pub fn model_suite(run: &RunConfig, seed: u64, trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = run.model.input_size;
    let mut all = Vec::new();
    for trial in 0..trials {
        let model = CrowdFormer::new(&run.model, seed.wrapping_add(trial as u64))?;
        let crops = Tensor::uniform(&[2, run.model.in_channels, side, side], -2.0, 2.0, &mut rng);
        let target = Tensor::uniform(&[2], 0.0, 4.0, &mut rng);
        let beta = run.loss.beta;
        let report = check_params("model", &model.params, &mut rng, STEP, MODEL_TOLERANCE, |tape, store| {
            let pred = model.forward_with(tape, store, &Var::constant(crops.clone()))?;
            tape.smooth_l1(&pred, &target, beta)
        })?;
        all.push(report);
    }
    let max = all.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: "model".into(),
        max_relative_error: max,
        tolerance: MODEL_TOLERANCE,
        checks: all.iter().map(|r| r.checks).sum(),
        passed: all.iter().all(|r| r.passed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Forward computes x² but only a zero-slope term is recorded.
        let report = finite_diff_check(
            "broken_square",
            &mut rng,
            3,
            1e-5,
            1e-4,
            |r| vec![Tensor::uniform(&[4], 0.5, 2.0, r)],
            |tape, xs| {
                let sq: Vec<f64> = xs[0].data().iter().map(|v| v * v).collect();
                let detached = Var::constant(Tensor::new(xs[0].shape().to_vec(), sq)?);
                let tracked = tape.scale(&xs[0], 0.0);
                tape.add(&detached, &tracked)
            },
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_relative_error > 0.5);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
