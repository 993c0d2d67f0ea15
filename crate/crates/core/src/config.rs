//! Run configuration and its flat `section.key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! model.embed_dims = 64,128,320,512
//! optim.learning_rate = 0.00001
//! ```
//!
//! Parsing starts from the full-size defaults and overrides every key
//! present; unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key in a fixed order, so a saved config reloads to an identical value.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::preset_beta;
use crate::tape::GeluApprox;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub embed_dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub strides: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub sr_ratios: [usize; NUM_STAGES],
    pub mlp_ratios: [f64; NUM_STAGES],
    pub agg_width: usize,
    pub gelu: GeluApprox,
}

impl ModelConfig {
    /// The pvt_v2_b5 profile at 384×384. Depths, heads, reduction and MLP
    /// ratios are the published b5 constants.
    pub fn pvt_v2_b5() -> Self {
        Self {
            input_size: 384,
            in_channels: 3,
            embed_dims: [64, 128, 320, 512],
            depths: [3, 6, 40, 3],
            strides: [4, 2, 2, 2],
            num_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratios: [4.0; NUM_STAGES],
            agg_width: 6912,
            gelu: GeluApprox::Erf,
        }
    }

    /// Desk-scale profile used by tests and the overfit runs.
    pub fn tiny() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            embed_dims: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            strides: [4, 2, 2, 2],
            num_heads: [1, 2, 2, 4],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratios: [4.0; NUM_STAGES],
            agg_width: 16,
            gelu: GeluApprox::Erf,
        }
    }

    /// Spatial side of the feature map emitted by `stage` (0-based).
    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_size / self.strides[..=stage].iter().product::<usize>()
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        (self.embed_dims[stage] as f64 * self.mlp_ratios[stage]).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.in_channels == 0 || self.agg_width == 0 {
            return bad("input_size, in_channels and agg_width must be positive".into());
        }
        let total: usize = self.strides.iter().product();
        if self.strides.contains(&0) || !self.input_size.is_multiple_of(total) {
            return bad(format!(
                "input_size {} must be divisible by the stride product {total}",
                self.input_size
            ));
        }
        for s in 0..NUM_STAGES {
            let (c, h) = (self.embed_dims[s], self.num_heads[s]);
            if c == 0 || self.depths[s] == 0 || h == 0 || c % h != 0 {
                return bad(format!(
                    "stage {}: embed dim {c} must be a positive multiple of {h} heads and depth positive",
                    s + 1
                ));
            }
            if self.sr_ratios[s] == 0 || self.sr_ratios[s] > self.stage_side(s) {
                return bad(format!(
                    "stage {}: sr_ratio {} must be in 1..={}",
                    s + 1,
                    self.sr_ratios[s],
                    self.stage_side(s)
                ));
            }
            if !(self.mlp_ratios[s] > 0.0) || self.mlp_hidden(s) == 0 {
                return bad(format!("stage {}: mlp_ratio must be positive", s + 1));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossGranularity {
    /// Mean of the per-crop losses.
    Crop,
    /// Loss of the summed crop predictions against the image total.
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub granularity: LossGranularity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            granularity: LossGranularity::Crop,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Images per optimizer step; each contributes all of its crops.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            epochs: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub resize_width: usize,
    pub resize_height: usize,
    pub flip_prob: f64,
    pub gray_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            resize_width: 1152,
            resize_height: 768,
            flip_prob: 0.5,
            gray_prob: 0.1,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub preset: Option<String>,
}

impl RunConfig {
    pub fn full() -> Self {
        Self {
            model: ModelConfig::pvt_v2_b5(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            preset: None,
        }
    }

    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            optim: OptimConfig {
                learning_rate: 1e-3,
                epochs: 200,
                ..OptimConfig::default()
            },
            data: DataConfig {
                resize_width: 192,
                resize_height: 128,
                ..DataConfig::default()
            },
            preset: None,
        }
    }

    /// Crop grid `(columns, rows)` of a resized image.
    pub fn crop_grid(&self) -> (usize, usize) {
        (
            self.data.resize_width / self.model.input_size,
            self.data.resize_height / self.model.input_size,
        )
    }

    pub fn crops_per_image(&self) -> usize {
        let (c, r) = self.crop_grid();
        c * r
    }

    /// Selects a dataset preset, which fixes the loss β.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let beta = preset_beta(name).ok_or_else(|| {
            Error::Config(format!("unknown preset `{name}` (expected sha, shb, qnrf or ucf50)"))
        })?;
        self.loss.beta = beta;
        self.preset = Some(name.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.loss.beta > 0.0) {
            return bad(format!("loss.beta must be positive, got {}", self.loss.beta));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return bad("optim.learning_rate and optim.eps must be positive, weight_decay nonnegative".into());
        }
        if !(0.0 < o.beta1 && o.beta1 < 1.0 && 0.0 < o.beta2 && o.beta2 < 1.0) {
            return bad("optim.beta1 and optim.beta2 must lie in (0, 1)".into());
        }
        if o.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        let d = &self.data;
        let side = self.model.input_size;
        if d.resize_width == 0 || d.resize_height == 0 || !d.resize_width.is_multiple_of(side) || !d.resize_height.is_multiple_of(side) {
            return bad(format!(
                "resize {}x{} must tile exactly into {side}x{side} crops",
                d.resize_width, d.resize_height
            ));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(d.flip_prob) || !prob_ok(d.gray_prob) {
            return bad("augmentation probabilities must lie in [0, 1]".into());
        }
        if d.std.iter().any(|s| !(*s > 0.0)) {
            return bad("data.std entries must be positive".into());
        }
        if let Some(p) = &self.preset {
            if preset_beta(p).is_none() {
                return bad(format!("unknown preset `{p}`"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::full();
        let mut preset_key = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {key}: {e}", lineno + 1)))?;
            if key == "run.preset" && value != "none" {
                preset_key = Some(value.to_string());
            }
        }
        if let Some(p) = preset_key {
            cfg.apply_preset(&p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.input_size" => m.input_size = scalar(value)?,
            "model.in_channels" => m.in_channels = scalar(value)?,
            "model.embed_dims" => m.embed_dims = list(value)?,
            "model.depths" => m.depths = list(value)?,
            "model.strides" => m.strides = list(value)?,
            "model.num_heads" => m.num_heads = list(value)?,
            "model.sr_ratios" => m.sr_ratios = list(value)?,
            "model.mlp_ratios" => m.mlp_ratios = list(value)?,
            "model.agg_width" => m.agg_width = scalar(value)?,
            "model.gelu" => {
                m.gelu = match value {
                    "erf" => GeluApprox::Erf,
                    "tanh" => GeluApprox::Tanh,
                    other => return Err(format!("expected erf or tanh, got `{other}`")),
                }
            }
            "loss.beta" => self.loss.beta = scalar(value)?,
            "loss.granularity" => {
                self.loss.granularity = match value {
                    "crop" => LossGranularity::Crop,
                    "image" => LossGranularity::Image,
                    other => return Err(format!("expected crop or image, got `{other}`")),
                }
            }
            "optim.learning_rate" => self.optim.learning_rate = scalar(value)?,
            "optim.weight_decay" => self.optim.weight_decay = scalar(value)?,
            "optim.beta1" => self.optim.beta1 = scalar(value)?,
            "optim.beta2" => self.optim.beta2 = scalar(value)?,
            "optim.eps" => self.optim.eps = scalar(value)?,
            "optim.batch_size" => self.optim.batch_size = scalar(value)?,
            "optim.epochs" => self.optim.epochs = scalar(value)?,
            "optim.seed" => self.optim.seed = scalar(value)?,
            "data.resize_width" => self.data.resize_width = scalar(value)?,
            "data.resize_height" => self.data.resize_height = scalar(value)?,
            "data.flip_prob" => self.data.flip_prob = scalar(value)?,
            "data.gray_prob" => self.data.gray_prob = scalar(value)?,
            "data.mean" => self.data.mean = list(value)?,
            "data.std" => self.data.std = list(value)?,
            "data.interpolation" => {
                if value != "bilinear" {
                    return Err(format!("only bilinear interpolation is supported, got `{value}`"));
                }
            }
            "run.preset" => {
                if value.is_empty() || value == "none" {
                    self.preset = None;
                } else {
                    self.preset = Some(value.to_string());
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Canonical text form; every key, fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("model.input_size", m.input_size.to_string());
        put("model.in_channels", m.in_channels.to_string());
        put("model.embed_dims", join(&m.embed_dims));
        put("model.depths", join(&m.depths));
        put("model.strides", join(&m.strides));
        put("model.num_heads", join(&m.num_heads));
        put("model.sr_ratios", join(&m.sr_ratios));
        put("model.mlp_ratios", join(&m.mlp_ratios));
        put("model.agg_width", m.agg_width.to_string());
        put(
            "model.gelu",
            match m.gelu {
                GeluApprox::Erf => "erf",
                GeluApprox::Tanh => "tanh",
            }
            .into(),
        );
        put("loss.beta", self.loss.beta.to_string());
        put(
            "loss.granularity",
            match self.loss.granularity {
                LossGranularity::Crop => "crop",
                LossGranularity::Image => "image",
            }
            .into(),
        );
        let o = &self.optim;
        put("optim.learning_rate", o.learning_rate.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        put("optim.beta1", o.beta1.to_string());
        put("optim.beta2", o.beta2.to_string());
        put("optim.eps", o.eps.to_string());
        put("optim.batch_size", o.batch_size.to_string());
        put("optim.epochs", o.epochs.to_string());
        put("optim.seed", o.seed.to_string());
        let d = &self.data;
        put("data.resize_width", d.resize_width.to_string());
        put("data.resize_height", d.resize_height.to_string());
        put("data.interpolation", "bilinear".into());
        put("data.flip_prob", d.flip_prob.to_string());
        put("data.gray_prob", d.gray_prob.to_string());
        put("data.mean", join(&d.mean));
        put("data.std", join(&d.std));
        put("run.preset", self.preset.clone().unwrap_or_else(|| "none".into()));
        out
    }

    /// SHA-256 over everything that affects the model or its training,
    /// excluding the epoch budget and run-level labels.
    pub fn fingerprint(&self) -> String {
        let canonical: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("optim.epochs") && !l.starts_with("run."))
            .flat_map(|l| [l, "\n"])
            .collect();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn scalar<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn list<T: FromStr + Copy + Default, const N: usize>(value: &str) -> std::result::Result<[T; N], String>
where
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(|s| scalar(s.trim()))
        .collect::<std::result::Result<_, _>>()?;
    items
        .try_into()
        .map_err(|v: Vec<T>| format!("expected {N} comma-separated values, got {}", v.len()))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_identical() {
        for cfg in [RunConfig::full(), RunConfig::tiny()] {
            let text = cfg.to_text();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn full_profile_values() {
        let cfg = RunConfig::full();
        assert_eq!(cfg.model.strides, [4, 2, 2, 2]);
        assert_eq!(cfg.model.embed_dims, [64, 128, 320, 512]);
        assert_eq!(cfg.model.agg_width, 6912);
        assert_eq!(cfg.optim.learning_rate, 1e-5);
        assert_eq!(cfg.optim.weight_decay, 1e-5);
        assert_eq!(cfg.optim.batch_size, 1);
        assert_eq!((cfg.data.resize_width, cfg.data.resize_height), (1152, 768));
        assert_eq!(cfg.crop_grid(), (3, 2));
        let sides: Vec<_> = (0..4).map(|s| cfg.model.stage_side(s)).collect();
        assert_eq!(sides, [96, 48, 24, 12]);
        assert_eq!(RunConfig::tiny().crop_grid(), (3, 2));
    }

    #[test]
    fn preset_overrides_beta() {
        let cfg = RunConfig::parse("loss.beta = 3\nrun.preset = shb\n").unwrap();
        assert_eq!(cfg.loss.beta, 7.0);
        let mut cfg = RunConfig::tiny();
        cfg.apply_preset("ucf50").unwrap();
        assert_eq!(cfg.loss.beta, 15.0);
        assert!(cfg.apply_preset("nope").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("model.bogus = 1").is_err());
        assert!(RunConfig::parse("model.depths = 1,2,3").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("model.input_size = 100").is_err());
        assert!(RunConfig::parse("model.num_heads = 3,2,5,8").is_err());
        assert!(RunConfig::parse("loss.beta = 0").is_err());
    }

    #[test]
    fn fingerprint_ignores_epochs_only() {
        let base = RunConfig::tiny();
        let mut more = base.clone();
        more.optim.epochs = 7;
        assert_eq!(base.fingerprint(), more.fingerprint());
        let mut other = base.clone();
        other.loss.beta = 2.0;
        assert_ne!(base.fingerprint(), other.fingerprint());
    }
}
