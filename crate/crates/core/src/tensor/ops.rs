use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{split_dims, Tensor};
use crate::error::{Error, Result};

/// Pointwise nonlinearities used by the model zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Relu,
    /// Exact erf-based GELU.
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2)),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2));
                let pdf = libm::expf(-0.5 * x * x) * 0.398_942_3;
                cdf + x * pdf
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp(-x))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Relu.apply(v))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Gelu.apply(v))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Silu.apply(v))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    a.zip_map(b, |x, y| x + y)
}

pub fn scale(x: &Tensor, s: f32) -> Tensor {
    x.map(|v| v * s)
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            reason: format!("expected rank {rank}, got shape {:?}", t.shape),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Batched matmul: `[B, m, k] x [B, k, n] -> [B, m, n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("bmm", a, 3)?;
    expect_rank("bmm", b, 3)?;
    let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    if b.shape[0] != batch || b.shape[1] != k {
        return Err(Error::ShapeMismatch {
            op: "bmm",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let n = b.shape[2];
    let mut out = vec![0.0f32; batch * m * n];
    for bi in 0..batch {
        matmul_into(
            &a.data[bi * m * k..(bi + 1) * m * k],
            &b.data[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidShape {
            op: "transpose",
            reason: format!("rank {r} has no last two axes"),
        });
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute(x, &perm)
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r
        || perm
            .iter()
            .any(|&p| p >= r || core::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidShape {
            op: "permute",
            reason: format!("{perm:?} is not a permutation of rank {r}"),
        });
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if r == 0 || x.is_empty() {
        return Ok(Tensor::from_parts(out_shape, x.data.clone()));
    }
    let (last, last_stride) = (out_shape[r - 1], strides[r - 1]);
    let mut idx = vec![0usize; r - 1];
    for _ in 0..x.len() / last {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..last).map(|j| x.data[off + j * last_stride]));
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, dim, inner) = split_dims(&x.shape, axis)?;
    if len == 0 || start + len > dim {
        return Err(Error::InvalidShape {
            op: "narrow",
            reason: format!(
                "range {start}..{} exceeds axis {axis} of {:?}",
                start + len,
                x.shape
            ),
        });
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// `y = x W^T + b` over the last axis. `w` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank("linear weight", w, 2)?;
    let (out_f, in_f) = (w.shape[0], w.shape[1]);
    if x.rank() == 0 || *x.shape.last().unwrap() != in_f {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    if let Some(b) = bias {
        if b.len() != out_f {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: w.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
    }
    let rows = x.len() / in_f;
    let mut wt = vec![0.0f32; in_f * out_f];
    for o in 0..out_f {
        for i in 0..in_f {
            wt[i * out_f + o] = w.data[o * in_f + i];
        }
    }
    let mut out = vec![0.0f32; rows * out_f];
    if let Some(b) = bias {
        for row in out.chunks_mut(out_f) {
            row.copy_from_slice(&b.data);
        }
    }
    matmul_into(&x.data, &wt, &mut out, rows, in_f, out_f);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_parts(shape, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cg: usize,
    pub og: usize,
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, cfg: Conv2dConfig) -> Result<ConvGeometry> {
    expect_rank("conv2d input", x, 4)?;
    expect_rank("conv2d weight", w, 4)?;
    if cfg.groups == 0 || cfg.stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("groups and stride must be positive, got {cfg:?}"),
        });
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, cpg, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c % cfg.groups != 0 {
        return Err(Error::Divisibility {
            op: "conv2d",
            what: "input channels",
            value: c,
            divisor: cfg.groups,
        });
    }
    if o % cfg.groups != 0 {
        return Err(Error::Divisibility {
            op: "conv2d",
            what: "output channels",
            value: o,
            divisor: cfg.groups,
        });
    }
    if cpg != c / cfg.groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    if h + 2 * cfg.padding < kh || wd + 2 * cfg.padding < kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
        });
    }
    let oh = (h + 2 * cfg.padding - kh) / cfg.stride + 1;
    let ow = (wd + 2 * cfg.padding - kw) / cfg.stride + 1;
    Ok(ConvGeometry {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        oh,
        ow,
        cg: cpg,
        og: o / cfg.groups,
    })
}

/// 2-D cross-correlation over NCHW input with OIHW weights.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: Conv2dConfig) -> Result<Tensor> {
    let g = conv_geometry(x, w, cfg)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
    }
    // im2col over the whole batch, then one product per group.
    let (s, p) = (cfg.stride as isize, cfg.padding as isize);
    let plane = g.oh * g.ow;
    let cols_n = g.n * plane;
    let k = g.cg * g.kh * g.kw;
    let mut cols = vec![0.0f32; k * cols_n];
    let mut prod = vec![0.0f32; g.og * cols_n];
    let mut out = vec![0.0f32; g.n * g.o * plane];
    for group in 0..g.o / g.og {
        for cl in 0..g.cg {
            let ic = group * g.cg + cl;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = &mut cols[((cl * g.kh + ky) * g.kw + kx) * cols_n..][..cols_n];
                    for ni in 0..g.n {
                        let xbase = (ni * g.c + ic) * g.h * g.w;
                        for oy in 0..g.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            let dst = &mut row[ni * plane + oy * g.ow..][..g.ow];
                            if iy < 0 || iy >= g.h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let xrow = &x.data[xbase + iy as usize * g.w..][..g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                *d = if ix < 0 || ix >= g.w as isize {
                                    0.0
                                } else {
                                    xrow[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
        prod.fill(0.0);
        let wg = &w.data[group * g.og * k..(group + 1) * g.og * k];
        matmul_into(wg, &cols, &mut prod, g.og, k, cols_n);
        for ol in 0..g.og {
            let oc = group * g.og + ol;
            let b0 = bias.map_or(0.0, |b| b.data[oc]);
            for ni in 0..g.n {
                let src = &prod[ol * cols_n + ni * plane..][..plane];
                let dst = &mut out[(ni * g.o + oc) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b0;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, dim, inner) = split_dims(&x.shape, axis)?;
    let mut out = vec![0.0f32; x.len()];
    if inner == 1 {
        for (src, dst) in x.data.chunks(dim).zip(out.chunks_mut(dim)) {
            let m = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = exp(v - m);
            }
            let sum: f32 = dst.iter().sum();
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        return Ok(Tensor::from_parts(x.shape.clone(), out));
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let mut m = f32::NEG_INFINITY;
            for k in 0..dim {
                m = m.max(x.data[at(k)]);
            }
            let mut sum = 0.0f32;
            for k in 0..dim {
                let e = exp(x.data[at(k)] - m);
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..dim {
                out[at(k)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// `exp(x)` within 2 ulp of `expf`, branch-free so elementwise loops
/// vectorize. Flushes to 0 below -86.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let xc = x.max(-86.0).min(88.8);
    const SHIFT: f32 = 12_582_912.0;
    let t = xc * core::f32::consts::LOG2_E + SHIFT;
    let k = t.to_bits() as i32 - SHIFT.to_bits() as i32;
    let n = t - SHIFT;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let pow = f32::from_bits(((k + 126) as u32) << 23);
    let y = p * pow * 2.0;
    if x <= -86.0 {
        0.0
    } else if x.is_nan() {
        x
    } else {
        y
    }
}

/// Channel axis convention: dim 1 for NCHW feature maps, the last dim for
/// token (`[N, T, D]`) and feature (`[N, D]`) layouts.
pub fn channel_axis(rank: usize) -> usize {
    if rank == 4 {
        1
    } else {
        rank.saturating_sub(1)
    }
}

/// Result of a normalization: the normalized values before the affine
/// transform and the per-group reciprocal standard deviation.
pub(crate) struct Normalized {
    pub xhat: Vec<f32>,
    pub group_of: Vec<usize>,
    pub rstd: Vec<f32>,
    pub counts: Vec<usize>,
}

pub(crate) fn normalize(x: &Tensor, groups: usize, group_of: Vec<usize>, eps: f32) -> Normalized {
    let mut sums = vec![0.0f64; groups];
    let mut counts = vec![0usize; groups];
    for (&v, &g) in x.data.iter().zip(&group_of) {
        sums[g] += v as f64;
        counts[g] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect();
    let mut sq = vec![0.0f64; groups];
    for (&v, &g) in x.data.iter().zip(&group_of) {
        let d = v as f64 - means[g];
        sq[g] += d * d;
    }
    let rstd: Vec<f32> = sq
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (1.0 / libm::sqrt(s / c.max(1) as f64 + eps as f64)) as f32)
        .collect();
    let xhat = x
        .data
        .iter()
        .zip(&group_of)
        .map(|(&v, &g)| ((v as f64 - means[g]) * rstd[g] as f64) as f32)
        .collect();
    Normalized {
        xhat,
        group_of,
        rstd,
        counts,
    }
}

fn check_affine(op: &'static str, p: Option<&Tensor>, expected: usize) -> Result<()> {
    if let Some(p) = p {
        if p.len() != expected {
            return Err(Error::InvalidShape {
                op,
                reason: format!(
                    "affine parameter has {} values, expected {expected}",
                    p.len()
                ),
            });
        }
    }
    Ok(())
}

pub(crate) fn layer_norm_groups(x: &Tensor, normalized_rank: usize) -> Result<(usize, Vec<usize>)> {
    if normalized_rank == 0 || normalized_rank > x.rank() {
        return Err(Error::InvalidShape {
            op: "layer_norm",
            reason: format!(
                "cannot normalize {normalized_rank} trailing dims of {:?}",
                x.shape
            ),
        });
    }
    let block: usize = x.shape[x.rank() - normalized_rank..].iter().product();
    let groups = x.len() / block;
    Ok((groups, (0..x.len()).map(|i| i / block).collect()))
}

pub(crate) fn group_norm_groups(x: &Tensor, groups: usize) -> Result<(usize, Vec<usize>)> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "group_norm",
            reason: format!("needs a batch and a channel axis, got {:?}", x.shape),
        });
    }
    let axis = channel_axis(x.rank());
    let (outer, channels, inner) = split_dims(&x.shape, axis)?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Divisibility {
            op: "group_norm",
            what: "channels",
            value: channels,
            divisor: groups,
        });
    }
    let per_group = channels / groups;
    let batch = x.shape[0];
    let outer_per_sample = outer / batch;
    let mut ids = Vec::with_capacity(x.len());
    for o in 0..outer {
        let n = o / outer_per_sample;
        for c in 0..channels {
            let g = n * groups + c / per_group;
            for _ in 0..inner {
                ids.push(g);
            }
        }
    }
    Ok((batch * groups, ids))
}

fn affine(
    x: &Tensor,
    xhat: Vec<f32>,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    axis: usize,
) -> Tensor {
    let (_, channels, inner) = split_dims(&x.shape, axis).expect("validated axis");
    let mut out = xhat;
    if gamma.is_some() || beta.is_some() {
        for (i, v) in out.iter_mut().enumerate() {
            let c = (i / inner) % channels;
            let g = gamma.map_or(1.0, |g| g.data[c]);
            let b = beta.map_or(0.0, |b| b.data[c]);
            *v = *v * g + b;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Layer normalization over the trailing `normalized_rank` dims; the affine
/// parameters are indexed by the last dim.
pub fn layer_norm(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f32,
    normalized_rank: usize,
) -> Result<Tensor> {
    let (groups, ids) = layer_norm_groups(x, normalized_rank)?;
    let last = *x.shape.last().unwrap();
    check_affine("layer_norm", gamma, last)?;
    check_affine("layer_norm", beta, last)?;
    let n = normalize(x, groups, ids, eps);
    Ok(affine(x, n.xhat, gamma, beta, x.rank() - 1))
}

/// Group normalization: statistics per sample over each channel group and all
/// non-channel positions; affine per channel.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f32,
) -> Result<Tensor> {
    let (count, ids) = group_norm_groups(x, groups)?;
    let axis = channel_axis(x.rank());
    check_affine("group_norm", gamma, x.shape[axis])?;
    check_affine("group_norm", beta, x.shape[axis])?;
    let n = normalize(x, count, ids, eps);
    Ok(affine(x, n.xhat, gamma, beta, axis))
}

/// Folds inference-mode batch-norm statistics into per-channel
/// `(scale, shift)`.
pub(crate) fn fold_batch_norm(
    mean: &Tensor,
    var: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f32,
) -> (Vec<f32>, Vec<f32>) {
    let mut scales = Vec::with_capacity(mean.len());
    let mut shifts = Vec::with_capacity(mean.len());
    for c in 0..mean.len() {
        let s = gamma.map_or(1.0, |g| g.data[c]) / libm::sqrtf(var.data[c] + eps);
        scales.push(s);
        shifts.push(beta.map_or(0.0, |b| b.data[c]) - mean.data[c] * s);
    }
    (scales, shifts)
}

pub(crate) fn channel_affine(x: &Tensor, scales: &[f32], shifts: &[f32]) -> Result<Tensor> {
    let axis = channel_axis(x.rank());
    let (_, channels, inner) = split_dims(&x.shape, axis)?;
    if channels != scales.len() {
        return Err(Error::ChannelMismatch {
            expected: scales.len(),
            found: channels,
        });
    }
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / inner) % channels;
            v * scales[c] + shifts[c]
        })
        .collect();
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Inference-mode batch normalization with stored running statistics.
pub fn batch_norm(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f32,
) -> Result<Tensor> {
    let c = mean.len();
    check_affine("batch_norm", Some(var), c)?;
    check_affine("batch_norm", gamma, c)?;
    check_affine("batch_norm", beta, c)?;
    let (scales, shifts) = fold_batch_norm(mean, var, gamma, beta, eps);
    channel_affine(x, &scales, &shifts)
}

/// Mean over the contiguous axes `[start, end)`, which are removed.
pub fn mean_axes(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if start >= end || end > x.rank() {
        return Err(Error::InvalidShape {
            op: "mean_axes",
            reason: format!("axes {start}..{end} invalid for {:?}", x.shape),
        });
    }
    let outer: usize = x.shape[..start].iter().product();
    let mid: usize = x.shape[start..end].iter().product();
    let inner: usize = x.shape[end..].iter().product();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data[base + i];
            }
        }
    }
    let inv = 1.0 / mid as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape: Vec<usize> = x.shape[..start].to_vec();
    shape.extend_from_slice(&x.shape[end..]);
    Ok(Tensor::from_parts(shape, out))
}

/// Summed cross-entropy of `[N, C]` logits against class labels, with its
/// gradient `softmax(logits) - onehot(labels)`.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f32,
    pub grad: Tensor,
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    expect_rank("cross_entropy", logits, 2)?;
    let (n, c) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            reason: format!("label {bad} out of range for {c} classes"),
        });
    }
    let probs = softmax(logits, 1)?;
    let mut loss = 0.0f64;
    let mut grad = probs.data.clone();
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m as f64 + libm::log(row.iter().map(|&v| libm::exp((v - m) as f64)).sum::<f64>());
        loss += lse - row[l] as f64;
        grad[i * c + l] -= 1.0;
    }
    Ok(CrossEntropy {
        loss: loss as f32,
        grad: Tensor::from_parts(logits.shape.clone(), grad),
    })
}
