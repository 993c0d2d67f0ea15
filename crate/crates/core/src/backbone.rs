//! Four-stage pyramid transformer backbone.
//!
//! Each stage tokenizes its input with an overlapping patch embedding
//! (convolution with kernel `2S−1`, padding `S−1`, stride `S`), runs a stack
//! of pre-norm encoder layers and emits a `[N, C_i, side_i, side_i]` map.

use rand::Rng;

use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{GeluApprox, Tape, Var};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const EMBED_LN_EPS: f64 = 1e-5;
const PROJ_INIT_STD: f64 = 0.02;

/// Registers a `[out, in]` projection with truncated-normal weights and zero bias.
pub(crate) fn linear_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), Tensor::trunc_normal(&[d_out, d_in], PROJ_INIT_STD, rng));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    (w, b)
}

fn norm_params(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.weight"), Tensor::ones(&[dim]));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
    (g, b)
}

/// Convolution weights ~ N(0, 2/fan_out) with `fan_out = k·k·out/groups`.
fn conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_per_group: usize,
    out: usize,
    kernel: usize,
    groups: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let fan_out = (kernel * kernel * out / groups) as f64;
    let w = store.add(
        format!("{name}.weight"),
        Tensor::normal(&[out, in_per_group, kernel, kernel], (2.0 / fan_out).sqrt(), rng),
    );
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
    (w, b)
}

/// `[N, C, H, W] -> [N, H·W, C]`.
pub fn to_tokens(tape: &mut Tape, x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(&flat, &[0, 2, 1])
}

/// `[N, H·W, C] -> [N, C, H, W]`.
pub fn to_grid(tape: &mut Tape, tokens: &Var, h: usize, w: usize) -> Result<Var> {
    let s = tokens.shape().to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(
            "to_grid",
            format!("{s:?} cannot be laid out on a {h}x{w} grid"),
        ));
    }
    let chw = tape.permute(tokens, &[0, 2, 1])?;
    tape.reshape(&chw, &[s[0], s[2], h, w])
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    conv: (ParamId, ParamId),
    norm: (ParamId, ParamId),
    stride: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = 2 * stride - 1;
        Self {
            conv: conv_params(store, &format!("{name}.proj"), in_ch, out_ch, kernel, 1, rng),
            norm: norm_params(store, &format!("{name}.norm"), out_ch),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        2 * self.stride - 1
    }

    /// Returns tokens `[N, (H/S)·(W/S), C']` and the grid `(H/S, W/S)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<(Var, usize, usize)> {
        let weight = tape.param(store, self.conv.0);
        let bias = tape.param(store, self.conv.1);
        let gamma = tape.param(store, self.norm.0);
        let shift = tape.param(store, self.norm.1);
        overlapping_patch_embed(tape, x, &weight, &bias, &gamma, &shift, self.stride)
    }
}

/// Tokenizes `[N, C, H, W]` with a `2S−1` kernel, padding `S−1`, stride `S`,
/// then layer-normalizes each token.
pub fn overlapping_patch_embed(
    tape: &mut Tape,
    x: &Var,
    weight: &Var,
    bias: &Var,
    gamma: &Var,
    beta_shift: &Var,
    stride: usize,
) -> Result<(Var, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || stride == 0 || !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
        return Err(Error::shape(
            "overlapping_patch_embed",
            format!("spatial dims of {s:?} must be divisible by stride {stride}"),
        ));
    }
    let kernel = 2 * stride - 1;
    if weight.shape().get(2) != Some(&kernel) {
        return Err(Error::shape(
            "overlapping_patch_embed",
            format!("stride {stride} needs a {kernel}x{kernel} kernel, got {:?}", weight.shape()),
        ));
    }
    let y = tape.conv2d(x, weight, Some(bias), stride, stride - 1, 1)?;
    let (h, w) = (y.shape()[2], y.shape()[3]);
    let tokens = to_tokens(tape, &y)?;
    let tokens = tape.layer_norm(&tokens, gamma, beta_shift, EMBED_LN_EPS)?;
    Ok((tokens, h, w))
}

/// Multi-head self-attention whose keys and values come from a spatially
/// reduced token grid when `sr_ratio > 1`.
#[derive(Clone, Debug)]
pub struct Attention {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    reduce: Option<((ParamId, ParamId), (ParamId, ParamId))>,
    heads: usize,
    sr_ratio: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let q = linear_params(store, &format!("{name}.q"), dim, dim, rng);
        let k = linear_params(store, &format!("{name}.k"), dim, dim, rng);
        let v = linear_params(store, &format!("{name}.v"), dim, dim, rng);
        let proj = linear_params(store, &format!("{name}.proj"), dim, dim, rng);
        let reduce = (sr_ratio > 1).then(|| {
            (
                conv_params(store, &format!("{name}.sr"), dim, dim, sr_ratio, 1, rng),
                norm_params(store, &format!("{name}.norm"), dim),
            )
        });
        Self {
            q,
            k,
            v,
            proj,
            reduce,
            heads,
            sr_ratio,
        }
    }

    pub fn output_projection(&self) -> (ParamId, ParamId) {
        self.proj
    }

    pub fn value_projection(&self) -> (ParamId, ParamId) {
        self.v
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var, h: usize, w: usize) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape(
                "attention",
                format!("tokens {s:?} do not match a {h}x{w} grid"),
            ));
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        if c % self.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("channels {c} not divisible by {} heads", self.heads),
            ));
        }
        let d = c / self.heads;
        let split = |tape: &mut Tape, y: &Var, len: usize| -> Result<Var> {
            let y = tape.reshape(y, &[n, len, self.heads, d])?;
            tape.permute(&y, &[0, 2, 1, 3])
        };
        let bind = |tape: &mut Tape, (wid, bid): (ParamId, ParamId)| (tape.param(store, wid), tape.param(store, bid));

        let (qw, qb) = bind(tape, self.q);
        let q = tape.linear(x, &qw, Some(&qb))?;
        let q = split(tape, &q, t)?;

        let source = match &self.reduce {
            Some((conv, norm)) => {
                let grid = to_grid(tape, x, h, w)?;
                let (cw, cb) = bind(tape, *conv);
                let reduced = tape.conv2d(&grid, &cw, Some(&cb), self.sr_ratio, 0, 1)?;
                let tokens = to_tokens(tape, &reduced)?;
                let (g, b) = bind(tape, *norm);
                tape.layer_norm(&tokens, &g, &b, LN_EPS)?
            }
            None => x.clone(),
        };
        let kv_len = source.shape()[1];
        let (kw, kb) = bind(tape, self.k);
        let k = tape.linear(&source, &kw, Some(&kb))?;
        let k = split(tape, &k, kv_len)?;
        let (vw, vb) = bind(tape, self.v);
        let v = tape.linear(&source, &vw, Some(&vb))?;
        let v = split(tape, &v, kv_len)?;

        let scores = tape.matmul(&q, &k, true)?;
        let scores = tape.scale(&scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax(&scores);
        let mixed = tape.matmul(&weights, &v, false)?;
        let mixed = tape.permute(&mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(&mixed, &[n, t, c])?;
        let (pw, pb) = bind(tape, self.proj);
        tape.linear(&mixed, &pw, Some(&pb))
    }
}

/// Feed-forward block with a 3×3 depthwise convolution between the two
/// projections; the convolution is what injects position information.
#[derive(Clone, Debug)]
pub struct ConvFeedForward {
    fc1: (ParamId, ParamId),
    dwconv: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    gelu: GeluApprox,
}

impl ConvFeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        gelu: GeluApprox,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: linear_params(store, &format!("{name}.fc1"), dim, hidden, rng),
            dwconv: conv_params(store, &format!("{name}.dwconv"), 1, hidden, 3, hidden, rng),
            fc2: linear_params(store, &format!("{name}.fc2"), hidden, dim, rng),
            gelu,
        }
    }

    pub fn output_projection(&self) -> (ParamId, ParamId) {
        self.fc2
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var, h: usize, w: usize) -> Result<Var> {
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (w1, b1) = (p(tape, self.fc1.0), p(tape, self.fc1.1));
        let hidden = tape.linear(x, &w1, Some(&b1))?;
        let channels = hidden.shape()[2];
        let grid = to_grid(tape, &hidden, h, w)?;
        let (dw, db) = (p(tape, self.dwconv.0), p(tape, self.dwconv.1));
        let grid = tape.conv2d(&grid, &dw, Some(&db), 1, 1, channels)?;
        let hidden = to_tokens(tape, &grid)?;
        let hidden = tape.gelu(&hidden, self.gelu);
        let (w2, b2) = (p(tape, self.fc2.0), p(tape, self.fc2.1));
        tape.linear(&hidden, &w2, Some(&b2))
    }
}

/// Pre-norm encoder layer: `x + attn(norm(x))` then `x + ffn(norm(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: (ParamId, ParamId),
    pub attn: Attention,
    norm2: (ParamId, ParamId),
    pub ffn: ConvFeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, stage: usize, rng: &mut R) -> Self {
        let dim = cfg.embed_dims[stage];
        Self {
            norm1: norm_params(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(
                store,
                &format!("{name}.attn"),
                dim,
                cfg.num_heads[stage],
                cfg.sr_ratios[stage],
                rng,
            ),
            norm2: norm_params(store, &format!("{name}.norm2"), dim),
            ffn: ConvFeedForward::new(store, &format!("{name}.mlp"), dim, cfg.mlp_hidden(stage), cfg.gelu, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var, h: usize, w: usize) -> Result<Var> {
        if x.shape().len() != 3 || x.shape()[1] != h * w {
            return Err(Error::shape(
                "encoder_layer",
                format!("{} tokens for a {h}x{w} grid", x.shape().get(1).copied().unwrap_or(0)),
            ));
        }
        let (g1, b1) = (tape.param(store, self.norm1.0), tape.param(store, self.norm1.1));
        let normed = tape.layer_norm(x, &g1, &b1, LN_EPS)?;
        let attended = self.attn.forward(tape, store, &normed, h, w)?;
        let x = tape.add(x, &attended)?;
        let (g2, b2) = (tape.param(store, self.norm2.0), tape.param(store, self.norm2.1));
        let normed = tape.layer_norm(&x, &g2, &b2, LN_EPS)?;
        let fed = self.ffn.forward(tape, store, &normed, h, w)?;
        tape.add(&x, &fed)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub layers: Vec<EncoderLayer>,
    norm: (ParamId, ParamId),
}

/// The four per-stage feature maps, `[N, C_i, side_i, side_i]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }

    /// Checks side and channel counts against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.maps.len() != NUM_STAGES {
            return Err(Error::shape("pyramid", format!("{} maps, expected {NUM_STAGES}", self.maps.len())));
        }
        let batch = self.maps[0].shape()[0];
        for (i, m) in self.maps.iter().enumerate() {
            let side = cfg.stage_side(i);
            let want = [batch, cfg.embed_dims[i], side, side];
            if m.shape() != want {
                return Err(Error::shape(
                    "pyramid",
                    format!("stage {} map is {:?}, expected {want:?}", i + 1, m.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = config.in_channels;
        for s in 0..NUM_STAGES {
            let name = format!("backbone.stage{}", s + 1);
            let dim = config.embed_dims[s];
            let embed = PatchEmbed::new(store, &format!("{name}.patch_embed"), in_ch, dim, config.strides[s], rng);
            let layers = (0..config.depths[s])
                .map(|l| EncoderLayer::new(store, &format!("{name}.block{l}"), config, s, rng))
                .collect();
            let norm = norm_params(store, &format!("{name}.norm"), dim);
            stages.push(Stage { embed, layers, norm });
            in_ch = dim;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, crop: &Var) -> Result<FeaturePyramid> {
        let s = crop.shape();
        let side = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != side || s[3] != side {
            return Err(Error::shape(
                "backbone",
                format!(
                    "input {s:?} does not match [N, {}, {side}, {side}]",
                    self.config.in_channels
                ),
            ));
        }
        let mut maps = Vec::with_capacity(NUM_STAGES);
        let mut x = crop.clone();
        for stage in &self.stages {
            let (mut tokens, h, w) = stage.embed.forward(tape, store, &x)?;
            for layer in &stage.layers {
                tokens = layer.forward(tape, store, &tokens, h, w)?;
            }
            let (g, b) = (tape.param(store, stage.norm.0), tape.param(store, stage.norm.1));
            let tokens = tape.layer_norm(&tokens, &g, &b, LN_EPS)?;
            x = to_grid(tape, &tokens, h, w)?;
            maps.push(x.clone());
        }
        let pyramid = FeaturePyramid { maps };
        pyramid.validate(&self.config)?;
        Ok(pyramid)
    }
}
