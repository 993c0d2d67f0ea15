//! Pyramid aggregation and count regression.
//!
//! Each stage map is global-average-pooled, projected to `agg_width` by its
//! own linear layer, and the four projections are concatenated in stage
//! order. A single linear layer maps the concatenation to one raw count per
//! crop; no activation is applied anywhere in the head.

use rand::Rng;

use crate::backbone::{linear_params, FeaturePyramid};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct CountHead {
    projections: Vec<(ParamId, ParamId)>,
    regressor: (ParamId, ParamId),
    agg_width: usize,
}

impl CountHead {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let projections = (0..NUM_STAGES)
            .map(|s| {
                linear_params(
                    store,
                    &format!("head.proj{}", s + 1),
                    config.embed_dims[s],
                    config.agg_width,
                    rng,
                )
            })
            .collect();
        let regressor = linear_params(store, "head.regressor", NUM_STAGES * config.agg_width, 1, rng);
        Self {
            projections,
            regressor,
            agg_width: config.agg_width,
        }
    }

    pub fn feature_width(&self) -> usize {
        NUM_STAGES * self.agg_width
    }

    pub fn regressor(&self) -> (ParamId, ParamId) {
        self.regressor
    }

    pub fn projections(&self) -> &[(ParamId, ParamId)] {
        &self.projections
    }

    /// Pools, projects and concatenates the pyramid into `[N, 4·agg_width]`.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<Var> {
        if pyramid.maps.len() != NUM_STAGES {
            return Err(Error::shape(
                "aggregate",
                format!("{} pyramid levels, expected {NUM_STAGES}", pyramid.maps.len()),
            ));
        }
        let mut parts = Vec::with_capacity(NUM_STAGES);
        for (map, &(w, b)) in pyramid.maps.iter().zip(&self.projections) {
            let pooled = tape.global_avg_pool(map)?;
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            parts.push(tape.linear(&pooled, &w, Some(&b))?);
        }
        let refs: Vec<&Var> = parts.iter().collect();
        tape.concat_last(&refs)
    }

    /// Maps `[N, 4·agg_width]` to `[N]` raw counts.
    pub fn regress_count(&self, tape: &mut Tape, store: &ParamStore, feature: &Var) -> Result<Var> {
        let s = feature.shape();
        if s.len() != 2 || s[1] != self.feature_width() {
            return Err(Error::shape(
                "regress_count",
                format!("feature {s:?} does not match head width {}", self.feature_width()),
            ));
        }
        let n = s[0];
        let (w, b) = (tape.param(store, self.regressor.0), tape.param(store, self.regressor.1));
        let out = tape.linear(feature, &w, Some(&b))?;
        tape.reshape(&out, &[n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_pyramid(dims: [usize; 4], batch: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        FeaturePyramid {
            maps: dims
                .iter()
                .enumerate()
                .map(|(i, &c)| Var::constant(Tensor::uniform(&[batch, c, 4 >> i.min(2), 4 >> i.min(2)], -1.0, 1.0, rng)))
                .collect(),
        }
    }

    fn set(store: &mut ParamStore, id: ParamId, value: f64) {
        let shape = store.get(id).shape().to_vec();
        let name = store.name(id).to_string();
        store.assign(&name, Tensor::full(&shape, value)).unwrap();
    }

    #[test]
    fn full_width_and_unit_regressor() {
        let cfg = ModelConfig::pvt_v2_b5();
        let mut store = ParamStore::new();
        let head = CountHead::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(head.feature_width(), 27648);
        let (w, b) = head.regressor();
        assert_eq!(store.get(w).shape(), &[1, 27648]);
        set(&mut store, w, 1.0 / 27648.0);
        let mut tape = Tape::no_grad();
        let y = head
            .regress_count(&mut tape, &store, &Var::constant(Tensor::ones(&[1, 27648])))
            .unwrap();
        assert!((y.value().item() - 1.0).abs() < 1e-12);
        set(&mut store, b, 0.5);
        let y = head
            .regress_count(&mut tape, &store, &Var::constant(Tensor::ones(&[1, 27648])))
            .unwrap();
        assert!((y.value().item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_regressor_outputs_bias() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = CountHead::new(&cfg, &mut store, &mut rng);
        let (w, b) = head.regressor();
        set(&mut store, w, 0.0);
        set(&mut store, b, 3.25);
        let p = constant_pyramid(cfg.embed_dims, 3, &mut rng);
        let mut tape = Tape::no_grad();
        let f = head.aggregate(&mut tape, &store, &p).unwrap();
        assert_eq!(f.shape(), &[3, 64]);
        let y = head.regress_count(&mut tape, &store, &f).unwrap();
        assert_eq!(y.data(), &[3.25, 3.25, 3.25]);
    }

    #[test]
    fn matches_handwritten_affine_map() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = CountHead::new(&cfg, &mut store, &mut rng);
        for (_, t) in store.iter_mut() {
            let fresh = Tensor::uniform(t.shape(), -1.0, 1.0, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
        let p = constant_pyramid(cfg.embed_dims, 1, &mut rng);
        let mut feature = Vec::new();
        for (map, &(w, b)) in p.maps.iter().zip(head.projections()) {
            let c = map.shape()[1];
            let area = map.shape()[2] * map.shape()[3];
            let pooled: Vec<f64> = map.data().chunks(area).map(|p| p.iter().sum::<f64>() / area as f64).collect();
            let (w, b) = (store.get(w), store.get(b));
            for o in 0..cfg.agg_width {
                feature.push(b.data()[o] + (0..c).map(|i| w.data()[o * c + i] * pooled[i]).sum::<f64>());
            }
        }
        let (w, b) = head.regressor();
        let expect = store.get(b).data()[0]
            + feature.iter().zip(store.get(w).data()).map(|(f, w)| f * w).sum::<f64>();
        let mut tape = Tape::no_grad();
        let f = head.aggregate(&mut tape, &store, &p).unwrap();
        let y = head.regress_count(&mut tape, &store, &f).unwrap();
        assert!((y.value().item() - expect).abs() < 1e-10);
    }

    #[test]
    fn stage_order_matters() {
        let mut cfg = ModelConfig::tiny();
        cfg.embed_dims = [4, 4, 4, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = CountHead::new(&cfg, &mut store, &mut rng);
        let p = constant_pyramid(cfg.embed_dims, 1, &mut rng);
        let mut swapped = p.clone();
        swapped.maps.swap(0, 3);
        let mut tape = Tape::no_grad();
        let run = |tape: &mut Tape, p: &FeaturePyramid| {
            let f = head.aggregate(tape, &store, p).unwrap();
            head.regress_count(tape, &store, &f).unwrap().value().item()
        };
        assert!((run(&mut tape, &p) - run(&mut tape, &swapped)).abs() > 1e-9);
    }

    #[test]
    fn shape_errors() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = CountHead::new(&cfg, &mut store, &mut rng);
        let mut tape = Tape::no_grad();
        assert!(head.regress_count(&mut tape, &store, &Var::constant(Tensor::ones(&[1, 63]))).is_err());
        let mut p = constant_pyramid(cfg.embed_dims, 1, &mut rng);
        p.maps.pop();
        assert!(head.aggregate(&mut tape, &store, &p).is_err());
    }
}
