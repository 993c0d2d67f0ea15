use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::CountHead;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backbone plus aggregation head, with its parameters.
#[derive(Clone, Debug)]
pub struct CrowdFormer {
    pub backbone: Backbone,
    pub head: CountHead,
    pub params: ParamStore,
}

impl CrowdFormer {
    /// Initializes every parameter from a ChaCha stream seeded with `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(config, &mut params, &mut rng)?;
        let head = CountHead::new(config, &mut params, &mut rng);
        Ok(Self {
            backbone,
            head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn features(&self, tape: &mut Tape, store: &ParamStore, crops: &Var) -> Result<FeaturePyramid> {
        self.backbone.forward(tape, store, crops)
    }

    /// Raw per-crop counts `[N]` for crops `[N, C, S, S]`, using `store`.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, crops: &Var) -> Result<Var> {
        let pyramid = self.backbone.forward(tape, store, crops)?;
        let feature = self.head.aggregate(tape, store, &pyramid)?;
        self.head.regress_count(tape, store, &feature)
    }

    pub fn forward(&self, tape: &mut Tape, crops: &Var) -> Result<Var> {
        self.forward_with(tape, &self.params, crops)
    }

    /// Inference without recording; returns raw per-crop counts.
    pub fn predict_crops(&self, crops: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, &Var::constant(crops.clone()))?;
        Ok(out.into_value().into_data())
    }
}
