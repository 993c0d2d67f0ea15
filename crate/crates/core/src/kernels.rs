//! Forward and backward kernels on flat row-major buffers.
//!
//! Nothing in here knows about the tape; `tape.rs` validates shapes and calls
//! these with the geometry already resolved.

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k` when
/// `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    fn col_rows(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }
}

/// Unfolds the channels `[c0, c0 + cg)` of one image into `col[cg·k·k, out_h·out_w]`.
fn im2col(g: &ConvGeom, image: &[f64], c0: usize, col: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.in_per_group() {
        let chan = &image[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into the image gradient.
fn col2im(g: &ConvGeom, col: &[f64], c0: usize, image: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.in_per_group() {
        let chan = &mut image[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let rows = g.col_rows();
        let mut col = vec![0.0; rows * plane];
        let (cig, cog) = (g.in_per_group(), g.out_per_group());
        for n in 0..g.batch {
            let image = &x[n * g.in_ch * g.h * g.w..(n + 1) * g.in_ch * g.h * g.w];
            for grp in 0..g.groups {
                im2col(g, image, grp * cig, &mut col);
                let wg = &w[grp * cog * rows..(grp + 1) * cog * rows];
                let start = (n * g.out_ch + grp * cog) * plane;
                gemm(cog, rows, plane, wg, false, &col, false, 0.0, &mut out[start..start + cog * plane]);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for co in 0..g.out_ch {
                let start = (n * g.out_ch + co) * plane;
                out[start..start + plane].iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let chan = &x[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
            let kern = &w[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(n * g.out_ch + c) * g.out_plane()..][..g.out_plane()];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += kern[ki * k + kj] * chan[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.out_w + ox] = acc;
                }
            }
        }
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_plane();
    let (need_x, need_w, need_b) = need;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let db = need_b.then(|| {
        let mut db = vec![0.0; g.out_ch];
        for n in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[(n * g.out_ch + co) * plane..][..plane].iter().sum::<f64>();
            }
        }
        db
    });
    if !(need_x || need_w) {
        return ConvGrads { input: None, weight: None, bias: db };
    }
    if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let rows = g.col_rows();
        let (cig, cog) = (g.in_per_group(), g.out_per_group());
        let mut col = vec![0.0; rows * plane];
        let image_len = g.in_ch * g.h * g.w;
        for n in 0..g.batch {
            let image = &x[n * image_len..(n + 1) * image_len];
            for grp in 0..g.groups {
                let dy_g = &dy[(n * g.out_ch + grp * cog) * plane..][..cog * plane];
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(g, image, grp * cig, &mut col);
                    let dw_g = &mut dw[grp * cog * rows..(grp + 1) * cog * rows];
                    gemm(cog, plane, rows, dy_g, false, &col, true, 1.0, dw_g);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wg = &w[grp * cog * rows..(grp + 1) * cog * rows];
                    gemm(rows, cog, plane, wg, true, dy_g, false, 0.0, &mut col);
                    col2im(g, &col, grp * cig, &mut dx[n * image_len..(n + 1) * image_len]);
                }
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let hw = g.h * g.w;
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let base = (n * g.in_ch + c) * hw;
            let chan = &x[base..base + hw];
            let kern = &w[c * k * k..(c + 1) * k * k];
            let grad = &dy[(n * g.out_ch + c) * g.out_plane()..][..g.out_plane()];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let go = grad[oy * g.out_w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let at = iy as usize * g.w + ix as usize;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[c * k * k + ki * k + kj] += go * chan[at];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[base + at] += go * kern[ki * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-row layer normalization. Returns `(y, xhat, inv_std)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sd = (var + eps).sqrt();
        // A zero-variance row with eps = 0 normalizes to zeros.
        let inv = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let g = &dy[r * d..(r + 1) * d];
        let h = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            let dh = g[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = g[j] * gamma[j];
            dx[r * d + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_forward(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|o| *o /= total);
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), out) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// GELU activation: `x·Φ(x)` exactly, or the tanh approximation.
pub fn gelu(x: f64, tanh_approx: bool) -> f64 {
    if tanh_approx {
        let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + inner.tanh())
    } else {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }
}

pub(crate) fn gelu_grad(x: f64, tanh_approx: bool) -> f64 {
    if tanh_approx {
        let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
        let t = inner.tanh();
        let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    } else {
        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
        cdf + x * pdf
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Innermost axis is walked by a tight loop; the rest by an odometer.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
