//! Append-only Wengert tape. Every forward op pushes one node holding its
//! output and whatever it needs for the vector-Jacobian product; `backward`
//! walks the nodes in strict reverse insertion order.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, Activation, Conv2dConfig};
use super::{split_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Bmm(Var, Var),
    /// Weights are constants: only the input receives a gradient.
    Linear {
        x: Var,
        w: Tensor,
    },
    Conv2d {
        x: Var,
        w: Tensor,
        cfg: Conv2dConfig,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Norm {
        x: Var,
        xhat: Vec<f32>,
        group_of: Vec<usize>,
        rstd: Vec<f32>,
        counts: Vec<usize>,
        gamma: Option<Vec<f32>>,
        affine_axis: usize,
    },
    ChannelAffine {
        x: Var,
        scales: Vec<f32>,
    },
    Act {
        x: Var,
        act: Activation,
    },
    Add(Var, Var),
    Scale {
        x: Var,
        s: f32,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        x: Var,
        start: usize,
        end: usize,
    },
    /// Quantize-dequantize; straight-through in the backward pass.
    FakeQuant {
        x: Var,
    },
}

#[derive(Clone, Debug)]
struct TapeNode {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    /// Nodes below `nodes.len()` not yet revisited after [`Tape::rewind`].
    cursor: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[1]))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(TapeNode { op, value });
        self.cursor = self.nodes.len();
        Var(self.nodes.len() - 1)
    }

    /// Keeps the first `keep` nodes and replays them: the next `keep` op
    /// calls return the kept nodes without recomputing. Valid only when the
    /// caller repeats the exact op sequence that built those nodes.
    pub fn rewind(&mut self, keep: usize) {
        self.nodes.truncate(keep);
        self.cursor = 0;
    }

    /// Index the next op call will occupy.
    pub fn position(&self) -> usize {
        self.cursor
    }

    /// True while kept nodes are being revisited after a rewind.
    pub fn replaying(&self) -> bool {
        self.cursor < self.nodes.len()
    }

    /// Advances past one kept node.
    pub fn replay(&mut self) -> Option<Var> {
        if self.replaying() {
            self.cursor += 1;
            Some(Var(self.cursor - 1))
        } else {
            None
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        if let Some(v) = self.replay() {
            return v;
        }
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), y))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::bmm(self.value(a), self.value(b))?;
        Ok(self.push(Op::Bmm(a, b), y))
    }

    pub fn linear(&mut self, x: Var, w: Tensor, bias: Option<&Tensor>) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::linear(self.value(x), &w, bias)?;
        Ok(self.push(Op::Linear { x, w }, y))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Tensor,
        bias: Option<&Tensor>,
        cfg: Conv2dConfig,
    ) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::conv2d(self.value(x), &w, bias, cfg)?;
        Ok(self.push(Op::Conv2d { x, w, cfg }, y))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { x, axis }, y))
    }

    fn norm(
        &mut self,
        x: Var,
        groups: usize,
        group_of: Vec<usize>,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
        affine_axis: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let channels = xv.shape()[affine_axis];
        for p in [gamma, beta].into_iter().flatten() {
            if p.len() != channels {
                return Err(Error::ChannelMismatch {
                    expected: p.len(),
                    found: channels,
                });
            }
        }
        let n = ops::normalize(xv, groups, group_of, eps);
        let (_, _, inner) = split_dims(xv.shape(), affine_axis)?;
        let mut out = n.xhat.clone();
        if gamma.is_some() || beta.is_some() {
            for (i, v) in out.iter_mut().enumerate() {
                let c = (i / inner) % channels;
                *v = *v * gamma.map_or(1.0, |g| g.data()[c]) + beta.map_or(0.0, |b| b.data()[c]);
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            Op::Norm {
                x,
                xhat: n.xhat,
                group_of: n.group_of,
                rstd: n.rstd,
                counts: n.counts,
                gamma: gamma.map(|g| g.data().to_vec()),
                affine_axis,
            },
            y,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
        normalized_rank: usize,
    ) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let (groups, ids) = ops::layer_norm_groups(self.value(x), normalized_rank)?;
        let axis = self.value(x).rank() - 1;
        self.norm(x, groups, ids, gamma, beta, eps, axis)
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let (count, ids) = ops::group_norm_groups(self.value(x), groups)?;
        let axis = ops::channel_axis(self.value(x).rank());
        self.norm(x, count, ids, gamma, beta, eps, axis)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        mean: &Tensor,
        var: &Tensor,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let (scales, shifts) = ops::fold_batch_norm(mean, var, gamma, beta, eps);
        let y = ops::channel_affine(self.value(x), &scales, &shifts)?;
        Ok(self.push(Op::ChannelAffine { x, scales }, y))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if let Some(v) = self.replay() {
            return v;
        }
        let y = self.value(x).map(|v| act.apply(v));
        self.push(Op::Act { x, act }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        if let Some(v) = self.replay() {
            return v;
        }
        let y = ops::scale(self.value(x), s);
        self.push(Op::Scale { x, s }, y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, y))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::permute(self.value(x), perm)?;
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            y,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                reason: alloc::format!("rank {r} has no last two axes"),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(Op::Narrow { x, axis, start }, y))
    }

    pub fn mean_axes(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        let y = ops::mean_axes(self.value(x), start, end)?;
        Ok(self.push(Op::Mean { x, start, end }, y))
    }

    /// Records an already quantize-dequantized value of `x`.
    pub fn fake_quant(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if let Some(v) = self.replay() {
            return Ok(v);
        }
        if quantized.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "fake_quant",
                lhs: self.value(x).shape().to_vec(),
                rhs: quantized.shape().to_vec(),
            });
        }
        Ok(self.push(Op::FakeQuant { x }, quantized))
    }

    /// Reverse pass seeded with `seed = dL/d(output)`. Returns the gradient
    /// of every node in `watch`; nodes recorded before the earliest watched
    /// node are never visited.
    pub fn backward(
        &self,
        output: Var,
        seed: &Tensor,
        watch: &[Var],
    ) -> Result<BTreeMap<Var, Tensor>> {
        if self.nodes.is_empty() {
            return Err(Error::TapeEmpty);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(output.0));
        }
        if let Some(bad) = watch.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::UnknownNode(bad.0));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.value(output).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let Some(stop) = watch.iter().map(|v| v.0).min() else {
            return Ok(BTreeMap::new());
        };
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (stop..=output.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        Ok(watch
            .iter()
            .map(|&v| {
                let shape = self.value(v).shape().to_vec();
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                (v, Tensor::from_parts(shape, g))
            })
            .collect())
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Tensor,
        dy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let dy_t = || Tensor::from_parts(y.shape().to_vec(), dy.to_vec());
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = ops::matmul(&dy_t(), &ops::transpose_last2(bv)?)?;
                let db = ops::matmul(&ops::transpose_last2(av)?, &dy_t())?;
                accumulate(grads, *a, da.into_data());
                accumulate(grads, *b, db.into_data());
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = ops::bmm(&dy_t(), &ops::transpose_last2(bv)?)?;
                let db = ops::bmm(&ops::transpose_last2(av)?, &dy_t())?;
                accumulate(grads, *a, da.into_data());
                accumulate(grads, *b, db.into_data());
            }
            Op::Linear { x, w } => {
                let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
                let rows = dy.len() / out_f;
                let mut dx = vec![0.0f32; rows * in_f];
                for r in 0..rows {
                    let dxr = &mut dx[r * in_f..(r + 1) * in_f];
                    for o in 0..out_f {
                        let g = dy[r * out_f + o];
                        if g == 0.0 {
                            continue;
                        }
                        for (d, &wv) in dxr.iter_mut().zip(&w.data()[o * in_f..(o + 1) * in_f]) {
                            *d += g * wv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, cfg } => {
                let xv = self.value(*x);
                let g = ops::conv_geometry(xv, w, *cfg)?;
                let mut dx = vec![0.0f32; xv.len()];
                let (s, p) = (cfg.stride as isize, cfg.padding as isize);
                for ni in 0..g.n {
                    for oc in 0..g.o {
                        let group = oc / g.og;
                        let obase = (ni * g.o + oc) * g.oh * g.ow;
                        for cl in 0..g.cg {
                            let ic = group * g.cg + cl;
                            let xbase = (ni * g.c + ic) * g.h * g.w;
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let wv = w.data()[((oc * g.cg + cl) * g.kh + ky) * g.kw + kx];
                                    for oy in 0..g.oh {
                                        let iy = oy as isize * s + ky as isize - p;
                                        if iy < 0 || iy >= g.h as isize {
                                            continue;
                                        }
                                        for ox in 0..g.ow {
                                            let ix = ox as isize * s + kx as isize - p;
                                            if ix < 0 || ix >= g.w as isize {
                                                continue;
                                            }
                                            dx[xbase + iy as usize * g.w + ix as usize] +=
                                                wv * dy[obase + oy * g.ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = split_dims(y.shape(), *axis)?;
                let yd = y.data();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let dot: f32 = (0..dim).map(|k| dy[at(k)] * yd[at(k)]).sum();
                        for k in 0..dim {
                            dx[at(k)] = yd[at(k)] * (dy[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Norm {
                x,
                xhat,
                group_of,
                rstd,
                counts,
                gamma,
                affine_axis,
            } => {
                let (_, channels, inner) = split_dims(y.shape(), *affine_axis)?;
                let dxhat: Vec<f32> = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| match gamma {
                        Some(gm) => g * gm[(i / inner) % channels],
                        None => g,
                    })
                    .collect();
                let groups = rstd.len();
                let mut m1 = vec![0.0f64; groups];
                let mut m2 = vec![0.0f64; groups];
                for ((&d, &xh), &gid) in dxhat.iter().zip(xhat).zip(group_of) {
                    m1[gid] += d as f64;
                    m2[gid] += (d * xh) as f64;
                }
                for gid in 0..groups {
                    let c = counts[gid].max(1) as f64;
                    m1[gid] /= c;
                    m2[gid] /= c;
                }
                let dx = dxhat
                    .iter()
                    .zip(xhat)
                    .zip(group_of)
                    .map(|((&d, &xh), &gid)| {
                        (rstd[gid] as f64 * (d as f64 - m1[gid] - xh as f64 * m2[gid])) as f32
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::ChannelAffine { x, scales } => {
                let axis = ops::channel_axis(y.rank());
                let (_, channels, inner) = split_dims(y.shape(), axis)?;
                let dx = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * scales[(i / inner) % channels])
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Act { x, act } => {
                let xv = self.value(*x);
                let dx = dy
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| g * act.derivative(v))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.to_vec());
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, dy.iter().map(|g| g * s).collect());
            }
            Op::Reshape { x } | Op::FakeQuant { x } => {
                accumulate(grads, *x, dy.to_vec());
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, ops::permute(&dy_t(), &inv)?.into_data());
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, dim, inner) = split_dims(xs, *axis)?;
                let len = y.shape()[*axis];
                let mut dx = vec![0.0f32; xs.iter().product()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean { x, start, end } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*start].iter().product();
                let mid: usize = xs[*start..*end].iter().product();
                let inner: usize = xs[*end..].iter().product();
                let inv = 1.0 / mid as f32;
                let mut dx = vec![0.0f32; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx[(o * mid + m) * inner + i] = dy[o * inner + i] * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_input_gradient_is_wt_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let g = tape.backward(y, &Tensor::full(&[2, 1], 1.0), &[x]).unwrap();
        assert_eq!(g[&x].data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient_at_uniform_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4], 0.3));
        let y = tape.softmax(x, 1).unwrap();
        let g = tape.backward(y, &Tensor::full(&[1, 4], 1.0), &[x]).unwrap();
        assert!(g[&x].data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn empty_tape_and_empty_watch() {
        let tape = Tape::new();
        assert_eq!(
            tape.backward(Var(0), &Tensor::zeros(&[1]), &[]),
            Err(Error::TapeEmpty)
        );
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape
            .backward(x, &Tensor::zeros(&[2]), &[])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y, &Tensor::full(&[2], 1.0), &[x]).unwrap();
        assert_eq!(g[&x].data(), &[2.0, 2.0]);
    }
}
