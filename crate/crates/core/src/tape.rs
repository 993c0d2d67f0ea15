//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] computes its value eagerly and, while the
//! tape is recording and at least one input is tracked, appends a node with
//! whatever it needs for the backward pass. [`Tape::backward`] replays the
//! nodes in reverse order.
//!
//! ```
//! use crowdformer::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]));
//! let sq = tape.mul(&p, &p).unwrap();
//! let loss = tape.sum(&sq);
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&p).unwrap(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

type NodeId = usize;

/// A value produced on a tape. Untracked vars are constants.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<NodeId>,
    value: Tensor,
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self { id: None, value }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluApprox {
    /// `x·Φ(x)` with the error function.
    #[default]
    Erf,
    Tanh,
}

enum Op {
    Leaf,
    Add(Option<NodeId>, Option<NodeId>),
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Tensor,
        bv: Tensor,
    },
    Scale(Option<NodeId>, f64),
    /// Sum of all elements times `factor` (mean uses `1/n`).
    Reduce {
        x: Option<NodeId>,
        n: usize,
        factor: f64,
    },
    Reshape(Option<NodeId>),
    Permute {
        x: Option<NodeId>,
        out_shape: Vec<usize>,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        rows: usize,
    },
    Linear {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        xv: Tensor,
        wv: Tensor,
        rows: usize,
    },
    Matmul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Tensor,
        bv: Tensor,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Conv2d {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        xv: Tensor,
        wv: Tensor,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Option<NodeId>,
        g: Option<NodeId>,
        b: Option<NodeId>,
        gv: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        d: usize,
    },
    Softmax {
        x: Option<NodeId>,
        y: Tensor,
        d: usize,
    },
    Gelu {
        x: Option<NodeId>,
        xv: Tensor,
        approx: GeluApprox,
    },
    AvgPool {
        x: Option<NodeId>,
        planes: usize,
        area: usize,
    },
    SmoothL1 {
        x: Option<NodeId>,
        diff: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    op: Op,
    numel: usize,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn tracked(ids: &[Option<NodeId>]) -> bool {
    ids.iter().any(Option::is_some)
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records nothing; values are computed and intermediates are
    /// freed as soon as their vars drop.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked input whose gradient [`Gradients::wrt`] will report.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None)
    }

    /// Binds a stored parameter. Frozen parameters come back as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data().clone());
        if t.requires_grad() {
            self.push_leaf(value, Some(id))
        } else {
            Var::constant(value)
        }
    }

    fn push_leaf(&mut self, value: Tensor, param: Option<ParamId>) -> Var {
        if !self.recording {
            return Var::constant(value);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            numel: value.numel(),
            param,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    fn record(&mut self, inputs: &[Option<NodeId>], value: Tensor, op: impl FnOnce() -> Op) -> Var {
        if !self.recording || !tracked(inputs) {
            return Var::constant(value);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: op(),
            numel: value.numel(),
            param: None,
        });
        Var {
            id: Some(id),
            value,
        }
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.record(&[a.id, b.id], value, || Op::Add(a.id, b.id)))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.record(&[a.id, b.id], value, || Op::Mul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let data = a.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        self.record(&[a.id], value, || Op::Scale(a.id, factor))
    }

    pub fn sum(&mut self, a: &Var) -> Var {
        self.reduce(a, 1.0)
    }

    pub fn mean(&mut self, a: &Var) -> Var {
        self.reduce(a, 1.0 / a.value.numel() as f64)
    }

    fn reduce(&mut self, a: &Var, factor: f64) -> Var {
        let value = Tensor::scalar(a.value.sum() * factor);
        let n = a.value.numel();
        self.record(&[a.id], value, || Op::Reduce { x: a.id, n, factor })
    }

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = a.value.reshape(shape)?;
        Ok(self.record(&[a.id], value, || Op::Reshape(a.id)))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: &Var, axes: &[usize]) -> Result<Var> {
        let rank = a.value.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let data = kernels::permute(a.data(), a.shape(), axes);
        let value = Tensor::from_parts(out_shape.clone(), data);
        Ok(self.record(&[a.id], value, || Op::Permute {
            x: a.id,
            out_shape,
            axes: axes.to_vec(),
        }))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let lead = &first.shape()[..first.value.rank() - 1];
        for p in parts {
            if &p.shape()[..p.value.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {:?} vs {:?}", lead, &p.shape()[..p.value.rank() - 1]),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        let ids: Vec<Option<NodeId>> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(&ids, value, || Op::Concat {
            parts: ids.iter().copied().zip(widths).collect(),
            rows,
        }))
    }

    /// Affine map along the last axis: `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        if w.value.rank() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {:?}", w.shape())));
        }
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        let last = *x.shape().last().unwrap();
        if last != din {
            return Err(Error::shape(
                "linear",
                format!("input last dim {last} does not match weight input dim {din}"),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match output dim {dout}", b.shape()),
                ));
            }
        }
        let rows = x.value.numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        kernels::gemm(rows, din, dout, x.data(), false, w.data(), true, 1.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_parts(shape, out);
        let bid = b.and_then(|b| b.id);
        Ok(self.record(&[x.id, w.id, bid], value, || Op::Linear {
            x: x.id,
            w: w.id,
            b: bid,
            xv: x.value.clone(),
            wv: w.value.clone(),
            rows,
        }))
    }

    /// Batched matrix product over the last two axes: `a · b` or `a · bᵀ`.
    pub fn matmul(&mut self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let (ra, rb) = (a.value.rank(), b.value.rank());
        if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible batch dims {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (bk, n) = if trans_b {
            (b.shape()[rb - 1], b.shape()[rb - 2])
        } else {
            (b.shape()[rb - 2], b.shape()[rb - 1])
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {k} vs {bk}"),
            ));
        }
        let batch: usize = a.shape()[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = a.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(&[a.id, b.id], value, || Op::Matmul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
            batch,
            m,
            k,
            n,
            trans_b,
        }))
    }

    /// 2-D convolution of `[N, C, H, W]` with a `[C', C/groups, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = conv_geometry(x.shape(), w.shape(), b.map(Var::shape), stride, padding, groups)?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.map(Var::data));
        let value = Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out);
        let bid = b.and_then(|b| b.id);
        Ok(self.record(&[x.id, w.id, bid], value, || Op::Conv2d {
            x: x.id,
            w: w.id,
            b: bid,
            xv: x.value.clone(),
            wv: w.value.clone(),
            geom,
        }))
    }

    /// Normalizes over the last axis, then applies `gamma · x̂ + beta_shift`.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta_shift: &Var, eps: f64) -> Result<Var> {
        let d = *x.shape().last().unwrap();
        if gamma.shape() != [d] || beta_shift.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match last dim {d}",
                    gamma.shape(),
                    beta_shift.shape()
                ),
            ));
        }
        let (y, xhat, inv_std) =
            kernels::layer_norm_forward(x.data(), d, gamma.data(), beta_shift.data(), eps);
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.record(&[x.id, gamma.id, beta_shift.id], value, || Op::LayerNorm {
            x: x.id,
            g: gamma.id,
            b: beta_shift.id,
            gv: gamma.value.clone(),
            xhat,
            inv_std,
            d,
        }))
    }

    pub fn softmax(&mut self, x: &Var) -> Var {
        let d = *x.shape().last().unwrap();
        let value = Tensor::from_parts(x.shape().to_vec(), kernels::softmax_forward(x.data(), d));
        let y = value.clone();
        self.record(&[x.id], value, || Op::Softmax { x: x.id, y, d })
    }

    pub fn gelu(&mut self, x: &Var, approx: GeluApprox) -> Var {
        let tanh = approx == GeluApprox::Tanh;
        let data = x.data().iter().map(|&v| kernels::gelu(v, tanh)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(&[x.id], value, || Op::Gelu {
            x: x.id,
            xv: x.value.clone(),
            approx,
        })
    }

    /// `[N, C, H, W] -> [N, C]`, averaging each spatial plane.
    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        if x.value.rank() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [N, C, H, W], got {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let area = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        Ok(self.record(&[x.id], value, || Op::AvgPool {
            x: x.id,
            planes: n * c,
            area,
        }))
    }

    /// Batch-mean smooth-L1 between `pred` and a constant `target` of the same size.
    ///
    /// Per element: `0.5·d²/β` when `|d| ≤ β`, else `|d| − 0.5·β`, with `d = pred − target`.
    pub fn smooth_l1(&mut self, pred: &Var, target: &Tensor, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smooth_l1 beta must be positive, got {beta}"
            )));
        }
        if pred.value.numel() != target.numel() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} predictions for {} targets", pred.value.numel(), target.numel()),
            ));
        }
        let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(x, y)| x - y).collect();
        let total: f64 = diff.iter().map(|&d| crate::loss::smooth_l1(d, beta)).sum();
        let value = Tensor::scalar(total / diff.len() as f64);
        Ok(self.record(&[pred.id], value, || Op::SmoothL1 {
            x: pred.id,
            diff,
            beta,
        }))
    }

    /// Back-propagates from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients {
                grads,
                params: Vec::new(),
            });
        };
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            debug_assert_eq!(g.len(), node.numel);
            backprop(&node.op, g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn conv_geometry(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let err = |detail: String| Err(Error::shape("conv2d", detail));
    if x.len() != 4 {
        return err(format!("input must be [N, C, H, W], got {x:?}"));
    }
    if w.len() != 4 || w[2] != w[3] {
        return err(format!("kernel must be [C', C/groups, k, k], got {w:?}"));
    }
    if stride == 0 || groups == 0 {
        return err("stride and groups must be positive".into());
    }
    let (batch, in_ch, h, wd) = (x[0], x[1], x[2], x[3]);
    let (out_ch, k) = (w[0], w[2]);
    if in_ch % groups != 0 {
        return err(format!("input channels {in_ch} not divisible by groups {groups}"));
    }
    if out_ch % groups != 0 {
        return err(format!("output channels {out_ch} not divisible by groups {groups}"));
    }
    if w[1] != in_ch / groups {
        return err(format!(
            "kernel input channels {} != input channels {in_ch} / groups {groups}",
            w[1]
        ));
    }
    if h + 2 * padding < k {
        return err(format!("padded height {} smaller than kernel {k}", h + 2 * padding));
    }
    if wd + 2 * padding < k {
        return err(format!("padded width {} smaller than kernel {k}", wd + 2 * padding));
    }
    if let Some(b) = b {
        if b != [out_ch] {
            return err(format!("bias shape {b:?} does not match output channels {out_ch}"));
        }
    }
    Ok(ConvGeom {
        batch,
        in_ch,
        out_ch,
        h,
        w: wd,
        kernel: k,
        stride,
        pad: padding,
        groups,
        out_h: (h + 2 * padding - k) / stride + 1,
        out_w: (wd + 2 * padding - k) / stride + 1,
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: Option<NodeId>, delta: Vec<f64>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot => *slot = Some(delta),
    }
}

fn backprop(op: &Op, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, g.clone());
            }
            accumulate(grads, *a, g);
        }
        Op::Mul { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, *a, g.iter().zip(bv.data()).map(|(g, y)| g * y).collect());
            }
            if b.is_some() {
                accumulate(grads, *b, g.iter().zip(av.data()).map(|(g, x)| g * x).collect());
            }
        }
        Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
        Op::Reduce { x, n, factor } => accumulate(grads, *x, vec![g[0] * factor; *n]),
        Op::Reshape(x) => accumulate(grads, *x, g),
        Op::Permute { x, out_shape, axes } => {
            let back = kernels::permute(&g, out_shape, &kernels::inverse_axes(axes));
            accumulate(grads, *x, back);
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|(_, w)| w).sum();
            let mut offset = 0;
            for &(id, wd) in parts {
                if id.is_some() {
                    let mut part = Vec::with_capacity(rows * wd);
                    for r in 0..*rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                    }
                    accumulate(grads, id, part);
                }
                offset += wd;
            }
        }
        Op::Linear { x, w, b, xv, wv, rows } => {
            let (dout, din) = (wv.shape()[0], wv.shape()[1]);
            if x.is_some() {
                let mut dx = vec![0.0; rows * din];
                kernels::gemm(*rows, dout, din, &g, false, wv.data(), false, 0.0, &mut dx);
                accumulate(grads, *x, dx);
            }
            if w.is_some() {
                let mut dw = vec![0.0; dout * din];
                kernels::gemm(dout, *rows, din, &g, true, xv.data(), false, 0.0, &mut dw);
                accumulate(grads, *w, dw);
            }
            if b.is_some() {
                let mut db = vec![0.0; dout];
                for row in g.chunks_exact(dout) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Matmul { a, b, av, bv, batch, m, k, n, trans_b } => {
            let (m, k, n) = (*m, *k, *n);
            if a.is_some() {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..*batch {
                    // da = g · bᵀ, or g · b when b was used transposed.
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &bv.data()[i * k * n..],
                        !trans_b,
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                accumulate(grads, *a, da);
            }
            if b.is_some() {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..*batch {
                    let out = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm(n, m, k, &g[i * m * n..], true, &av.data()[i * m * k..], false, 0.0, out);
                    } else {
                        kernels::gemm(k, m, n, &av.data()[i * m * k..], true, &g[i * m * n..], false, 0.0, out);
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Conv2d { x, w, b, xv, wv, geom } => {
            let out = kernels::conv2d_backward(
                geom,
                xv.data(),
                wv.data(),
                &g,
                (x.is_some(), w.is_some(), b.is_some()),
            );
            if let Some(dx) = out.input {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = out.weight {
                accumulate(grads, *w, dw);
            }
            if let Some(db) = out.bias {
                accumulate(grads, *b, db);
            }
        }
        Op::LayerNorm { x, g: gid, b, gv, xhat, inv_std, d } => {
            let (dx, dgamma, dbeta) = kernels::layer_norm_backward(&g, *d, xhat, inv_std, gv.data());
            accumulate(grads, *x, dx);
            accumulate(grads, *gid, dgamma);
            accumulate(grads, *b, dbeta);
        }
        Op::Softmax { x, y, d } => accumulate(grads, *x, kernels::softmax_backward(y.data(), &g, *d)),
        Op::Gelu { x, xv, approx } => {
            let tanh = *approx == GeluApprox::Tanh;
            let dx = g
                .iter()
                .zip(xv.data())
                .map(|(g, &v)| g * kernels::gelu_grad(v, tanh))
                .collect();
            accumulate(grads, *x, dx);
        }
        Op::AvgPool { x, planes, area } => {
            let mut dx = Vec::with_capacity(planes * area);
            for &gv in &g {
                dx.extend(std::iter::repeat_n(gv / *area as f64, *area));
            }
            accumulate(grads, *x, dx);
        }
        Op::SmoothL1 { x, diff, beta } => {
            let scale = g[0] / diff.len() as f64;
            let dx = diff
                .iter()
                .map(|&d| scale * crate::loss::smooth_l1_grad(d, *beta))
                .collect();
            accumulate(grads, *x, dx);
        }
    }
}

/// Gradients of one backward pass, keyed by the leaves that produced them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created on the same tape.
    pub fn wrt(&self, var: &Var) -> Option<&[f64]> {
        var.id.and_then(|id| self.grads[id].as_deref())
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    /// Parameters the loss does not reach receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, pid) in &self.params {
            let t = store.get_mut(pid);
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }
}
