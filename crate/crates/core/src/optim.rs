//! AdamW with decoupled weight decay.
//!
//! Per trainable parameter, with step count `t` after increment:
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! p ← p − lr · (m / (1−β1ᵗ)) / (√(v / (1−β2ᵗ)) + eps)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Optimizer moments, step counter and the training RNG stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
}

/// Stream index for training randomness, distinct from initialization.
pub const TRAIN_STREAM: u64 = 1;

impl TrainState {
    pub fn new(params: &ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            first_moments: zeros(),
            second_moments: zeros(),
            rng,
        }
    }

    /// Moment buffers must line up one-to-one with the parameters.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.first_moments.len() == params.len()
            && self.second_moments.len() == params.len()
            && params.iter().zip(&self.first_moments).zip(&self.second_moments).all(
                |(((_, t), m), v)| m.len() == t.numel() && v.len() == t.numel(),
            )
    }
}

/// Applies one AdamW update to every trainable parameter using its `grad`.
pub fn adamw_step(params: &mut ParamStore, state: &mut TrainState, cfg: &OptimConfig) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the parameter layout".into(),
        ));
    }
    for (name, t) in params.iter() {
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (((_, p), m), v) in params
        .iter_mut()
        .zip(state.first_moments.iter_mut())
        .zip(state.second_moments.iter_mut())
    {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad().map(<[f64]>::to_vec).expect("checked above");
        let values = p.data_mut();
        for i in 0..values.len() {
            values[i] *= decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(vec![value]));
        s
    }

    fn cfg(lr: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    fn value(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.data()[0]
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        let (_, t) = s.iter_mut().next().unwrap();
        t.zero_grad();
        t.accumulate_grad(&[g]).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut st = TrainState::new(&s, 0);
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            adamw_step(&mut s, &mut st, &cfg(0.1, 0.0)).unwrap();
        }
        assert_eq!(value(&s), 0.7);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        let mut st = TrainState::new(&s, 0);
        set_grad(&mut s, 1.0);
        adamw_step(&mut s, &mut st, &cfg(0.1, 0.0)).unwrap();
        // m̂ = v̂ = 1, so the update is lr / (1 + eps).
        assert!((value(&s) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((value(&s) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_alone() {
        let mut s = scalar_store(2.0);
        let mut st = TrainState::new(&s, 0);
        set_grad(&mut s, 0.0);
        adamw_step(&mut s, &mut st, &cfg(0.1, 0.1)).unwrap();
        assert!((value(&s) - (2.0 - 0.1 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        let mut st = TrainState::new(&s, 0);
        assert!(matches!(
            adamw_step(&mut s, &mut st, &cfg(0.1, 0.0)),
            Err(Error::MissingGradient(_))
        ));
    }

    /// Textbook Adam on f(p) = ½·Σ a_i·p_i², written independently.
    fn reference_adam(p0: &[f64], a: &[f64], c: &OptimConfig, steps: usize) -> Vec<Vec<f64>> {
        let mut p = p0.to_vec();
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        let mut out = Vec::new();
        for t in 1..=steps {
            for i in 0..p.len() {
                let g = a[i] * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / (1.0 - c.beta1.powi(t as i32));
                let vh = v[i] / (1.0 - c.beta2.powi(t as i32));
                p[i] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
            out.push(p.clone());
        }
        out
    }

    #[test]
    fn without_decay_matches_plain_adam_on_a_quadratic_bowl() {
        let a = [1.0, 4.0, 0.25];
        let p0 = [1.0, -2.0, 3.0];
        let c = cfg(0.05, 0.0);
        let expected = reference_adam(&p0, &a, &c, 50);
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(p0.to_vec()));
        let mut st = TrainState::new(&s, 0);
        for want in expected {
            let (_, t) = s.iter_mut().next().unwrap();
            let g: Vec<f64> = t.data().iter().zip(&a).map(|(p, a)| a * p).collect();
            t.zero_grad();
            t.accumulate_grad(&g).unwrap();
            adamw_step(&mut s, &mut st, &c).unwrap();
            assert_eq!(s.iter().next().unwrap().1.data(), &want[..]);
        }
    }

    #[test]
    fn one_step_decreases_a_linear_least_squares_loss() {
        use crate::tape::{Tape, Var};
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.5, -1.0, 2.0, 0.3, -0.7, 2.0, 1.0]).unwrap();
        let neg_y = Tensor::new(vec![4], vec![-1.0, 2.0, -0.5, -3.0]).unwrap();
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::new(vec![1, 2], vec![0.1, -0.3]).unwrap());
        let loss = |params: &ParamStore, record: bool| {
            let mut tape = if record { Tape::new() } else { Tape::no_grad() };
            let wv = tape.param(params, w);
            let pred = tape.linear(&Var::constant(x.clone()), &wv, None).unwrap();
            let pred = tape.reshape(&pred, &[4]).unwrap();
            let diff = tape.add(&pred, &Var::constant(neg_y.clone())).unwrap();
            let sq = tape.mul(&diff, &diff).unwrap();
            let l = tape.mean(&sq);
            (tape.backward(&l).ok(), l.value().item())
        };
        let (grads, before) = loss(&params, true);
        params.zero_grad();
        grads.unwrap().accumulate_into(&mut params).unwrap();
        let mut state = TrainState::new(&params, 0);
        adamw_step(&mut params, &mut state, &cfg(1e-3, 1e-5)).unwrap();
        let (_, after) = loss(&params, false);
        assert!(after < before, "{after} >= {before}");
    }
}
