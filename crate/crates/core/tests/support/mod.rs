//! Independent reference implementations shared by the integration tests
//! and the acceptance run.

#![allow(dead_code)]

use hyquant_core::bridge::ReconstructionUnit;
use hyquant_core::calib::{
    generate_candidates_for, CalibCache, Metric, SearchOptions, SearchSpace, UnitEvaluator,
};
use hyquant_core::graph::{Graph, QConfig};
use hyquant_core::quant::{fit_minmax, fit_with_scales, QuantParams};
use hyquant_core::rng::Rng;
use hyquant_core::tensor::{Activation, Conv2dConfig, Tape, Tensor, Var};
use hyquant_core::Result;

pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n, std)).unwrap()
}

/// Normal samples pushed at least `gap` away from zero, for ops with a kink
/// there.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f32) -> Tensor {
    normal(rng, shape, 1.0).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Triple loop in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

/// Direct nested-loop grouped cross-correlation, NCHW x OIHW.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, cg, kh, kw] = w.shape().try_into().unwrap();
    let og = o / groups;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc] as f64);
                    for cl in 0..cg {
                        let ic = g * cg + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((ni * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + cl) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

/// `d^T H d` with `H = diag(g^2)` materialized as a dense matrix.
pub fn dense_quadratic_form(d: &[f32], g: &[f32]) -> f64 {
    let n = d.len();
    let mut h = vec![0.0f64; n * n];
    for i in 0..n {
        h[i * n + i] = g[i] as f64 * g[i] as f64;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += h[i * n + j] * d[j] as f64;
        }
        total += d[i] as f64 * row;
    }
    total
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Builds the function under test on a tape from one input leaf.
pub type Build<'a> = &'a dyn Fn(&mut Tape, Var) -> Result<Var>;

fn projected(build: Build<'_>, x: &Tensor, r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let y = build(&mut tape, leaf).unwrap();
    tape.value(y)
        .data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Compares the tape gradient of `sum(r * f(x))` for a random projection `r`
/// against central differences on up to `coords` coordinates of `x`.
/// Returns `|analytic - numeric| / max(|analytic|, |numeric|)` over the
/// checked coordinates as vectors.
pub fn fd_relative_error(
    build: Build<'_>,
    x: &Tensor,
    h: f32,
    coords: usize,
    rng: &mut Rng,
) -> f64 {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let y = build(&mut tape, leaf).unwrap();
    let r = normal(rng, tape.value(y).shape(), 1.0);
    let grads = tape.backward(y, &r, &[leaf]).unwrap();
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let picks: Vec<usize> = if x.len() <= coords {
        (0..x.len()).collect()
    } else {
        (0..coords).map(|_| rng.below(x.len())).collect()
    };
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for i in picks {
        let bump = |delta: f32| {
            let mut d = x.data().to_vec();
            d[i] += delta;
            Tensor::new(x.shape().to_vec(), d).unwrap()
        };
        let numeric =
            (projected(build, &bump(h), &r) - projected(build, &bump(-h), &r)) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-9 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Exhaustive search over every granularity/scheme pair and, per site, the
/// min-max parameters plus every grid candidate. Each configuration is
/// scored by a fresh forward run.
pub fn brute_force_unit(
    graph: &Graph,
    unit: &ReconstructionUnit,
    cache: &CalibCache,
    space: &SearchSpace,
    bits: u8,
) -> f64 {
    let eval = UnitEvaluator::new(graph, unit, cache, Metric::Hessian).unwrap();
    let sites = unit.sites(graph);
    let mut best = f64::INFINITY;
    for (g, s) in SearchOptions::full(bits).combos() {
        let options: Vec<Vec<QuantParams>> = sites
            .iter()
            .map(|site| {
                let t = cache.site_tensor(site).unwrap();
                let gran = g.resolve(site.kind.channel_axis(t.rank()));
                let mut v = vec![fit_minmax(t, bits, s, gran).unwrap()];
                for scales in generate_candidates_for(t, bits, space, gran, s).unwrap() {
                    v.push(fit_with_scales(t, bits, s, gran, &scales).unwrap());
                }
                v
            })
            .collect();
        let total: usize = options.iter().map(|o| o.len()).product();
        for mut idx in 0..total {
            let mut q = QConfig::new();
            for (site, o) in sites.iter().zip(&options) {
                q.insert(*site, o[idx % o.len()].clone());
                idx /= o.len();
            }
            best = best.min(eval.evaluate(&q).unwrap());
        }
    }
    best
}

/// `10^4` values over four channels (axis 1) with skewed, zero-spanning
/// ranges.
pub fn roundtrip_sample(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let skew: Vec<(f32, f32)> = (0..4)
        .map(|_| {
            (
                (0.2 + 3.0 * rng.uniform()) as f32,
                (0.2 + 3.0 * rng.uniform()) as f32,
            )
        })
        .collect();
    let mut data = rng.normals(10_000, 1.0);
    for (i, v) in data.iter_mut().enumerate() {
        let (up, down) = skew[(i / 25) % 4];
        *v *= if *v > 0.0 { up } else { down };
    }
    Tensor::new(vec![100, 4, 25], data).unwrap()
}

/// Largest `|x - dq(q(x))| - scale / 2` over the tensor, and whether every
/// symmetric zero point is 0.
pub fn roundtrip_excess(t: &Tensor, p: &QuantParams) -> (f64, bool) {
    let dq = hyquant_core::quant::quantize_dequantize(t, p).unwrap();
    let axis = match p.granularity() {
        hyquant_core::quant::Granularity::PerLayer => None,
        hyquant_core::quant::Granularity::PerChannel { axis } => Some(axis),
    };
    let inner: usize = axis.map_or(1, |a| t.shape()[a + 1..].iter().product());
    let mut worst = f64::NEG_INFINITY;
    for (i, (&x, &y)) in t.data().iter().zip(dq.data()).enumerate() {
        let c = axis.map_or(0, |a| (i / inner) % t.shape()[a]);
        let half = p.scale()[c] as f64 / 2.0;
        worst = worst.max((x as f64 - y as f64).abs() - half);
    }
    let zp_ok = p.scheme() == hyquant_core::quant::Scheme::Asymmetric
        || (p.zero_point().iter().all(|&z| z == 0) && p.raw_zero_point().iter().all(|&z| z == 0));
    (worst, zp_ok)
}

/// Channels (along `axis`) whose range excludes zero, found by scanning.
pub fn zero_excluding_channels(t: &Tensor, axis: usize) -> Vec<usize> {
    let (outer, channels, inner) = t.split_at_axis(axis).unwrap();
    (0..channels)
        .filter(|&c| {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for o in 0..outer {
                for i in 0..inner {
                    let v = t.data()[(o * channels + c) * inner + i];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            lo > 0.0 || hi < 0.0
        })
        .collect()
}

/// Clipping collapse on one channel: the distinct inputs reconstructed to
/// the channel's two largest output values, and their span in steps.
pub fn channel_collapse(t: &Tensor, p: &QuantParams, axis: usize, channel: usize) -> (usize, f64) {
    let dq = hyquant_core::quant::quantize_dequantize(t, p).unwrap();
    let (outer, channels, inner) = t.split_at_axis(axis).unwrap();
    let mut pairs = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let at = (o * channels + channel) * inner + i;
            pairs.push((t.data()[at], dq.data()[at]));
        }
    }
    let mut outs: Vec<f32> = pairs.iter().map(|&(_, y)| y).collect();
    outs.sort_by(f32::total_cmp);
    outs.dedup();
    let top = &outs[outs.len().saturating_sub(2)..];
    let mut ins: Vec<f32> = pairs
        .iter()
        .filter(|(_, y)| top.contains(y))
        .map(|&(x, _)| x)
        .collect();
    ins.sort_by(f32::total_cmp);
    ins.dedup();
    let span = (ins[ins.len() - 1] - ins[0]) as f64 / p.scale()[channel] as f64;
    (ins.len(), span)
}

/// Conv (weight site) -> pool -> layer norm (input site) -> linear (weight
/// site) -> softmax (input site). Every reconstruction unit holds exactly one
/// site, so its objective depends on that site alone.
pub fn separable_toy(seed: u64) -> (Graph, Tensor) {
    use hyquant_core::graph::{Conv, LayerId, LayerOp, LayerSpec, QuantMode, SiteId, SiteKind};
    let mut rng = Rng::new(seed);
    let layers = vec![
        LayerSpec::new(
            0,
            "conv",
            LayerOp::Conv2d(Conv {
                weight: normal(&mut rng, &[4, 3, 3, 3], 0.4),
                bias: Some(normal(&mut rng, &[4], 0.2)),
                stride: 1,
                padding: 1,
                groups: 1,
                act: Some(hyquant_core::tensor::Activation::Gelu),
            }),
            &[],
        ),
        LayerSpec::new(1, "pool", LayerOp::Pool, &[0]),
        LayerSpec::new(
            2,
            "norm",
            LayerOp::LayerNorm {
                gamma: Some(normal(&mut rng, &[4], 1.0)),
                beta: None,
                eps: 1e-5,
                normalized_rank: 1,
            },
            &[1],
        ),
        LayerSpec::new(
            3,
            "head",
            LayerOp::Linear {
                weight: normal(&mut rng, &[5, 4], 1.0),
                bias: None,
                act: None,
            },
            &[2],
        ),
        LayerSpec::new(4, "probs", LayerOp::Softmax { axis: 1 }, &[3]),
    ];
    let sites = [
        (0, SiteKind::Weight),
        (2, SiteKind::Input),
        (3, SiteKind::Weight),
        (4, SiteKind::Input),
    ]
    .into_iter()
    .map(|(l, k)| SiteId::new(LayerId(l), k))
    .collect();
    let graph =
        Graph::with_sites(layers, vec![3, 4, 4], LayerId(4), QuantMode::Full, sites).unwrap();
    let batch = normal(&mut rng, &[16, 3, 4, 4], 1.0);
    (graph, batch)
}

pub const CASES: u64 = 100;
pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-2;

/// One differentiable op, set up from a seed: an input and a builder.
pub struct Case {
    pub name: &'static str,
    pub input: Tensor,
    pub build: Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
}

fn case(
    name: &'static str,
    input: Tensor,
    build: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        input,
        build: Box::new(build),
    }
}

/// Every differentiable op, alone and in small compositions.
pub fn gradient_cases(rng: &mut Rng) -> Vec<Case> {
    let a = normal(rng, &[3, 4], 1.0);
    let b = normal(rng, &[4, 5], 1.0);
    let ba = normal(rng, &[2, 3, 4], 1.0);
    let bb = normal(rng, &[2, 4, 3], 1.0);
    let w = normal(rng, &[5, 4], 0.5);
    let bias = normal(rng, &[5], 0.5);
    let cw = normal(rng, &[4, 2, 3, 3], 0.5);
    let dw = normal(rng, &[4, 1, 3, 3], 0.5);
    let gamma = normal(rng, &[6], 1.0);
    let beta = normal(rng, &[6], 1.0);
    let gamma4 = normal(rng, &[4], 1.0);
    let mean4 = normal(rng, &[4], 1.0);
    let var4 = normal(rng, &[4], 1.0).map(|v| v * v + 0.5);
    let other = normal(rng, &[3, 4], 1.0);
    let (b2, bb2, w2, bias2, cw2, dw2) = (
        b.clone(),
        bb.clone(),
        w.clone(),
        bias.clone(),
        cw.clone(),
        dw.clone(),
    );
    let (g2, be2, g4, m4, v4) = (
        gamma.clone(),
        beta.clone(),
        gamma4.clone(),
        mean4.clone(),
        var4.clone(),
    );
    let a2 = a.clone();
    let ba2 = ba.clone();
    vec![
        case("matmul lhs", a.clone(), move |t, x| {
            let r = t.leaf(b2.clone());
            t.matmul(x, r)
        }),
        case("matmul rhs", b.clone(), move |t, x| {
            let l = t.leaf(a2.clone());
            t.matmul(l, x)
        }),
        case("bmm lhs", ba.clone(), move |t, x| {
            let r = t.leaf(bb2.clone());
            t.bmm(x, r)
        }),
        case("bmm rhs", bb.clone(), move |t, x| {
            let l = t.leaf(ba2.clone());
            t.bmm(l, x)
        }),
        case("linear", normal(rng, &[2, 3, 4], 1.0), move |t, x| {
            t.linear(x, w2.clone(), Some(&bias2))
        }),
        case("conv2d", normal(rng, &[2, 4, 5, 5], 1.0), move |t, x| {
            t.conv2d(
                x,
                cw2.clone(),
                None,
                Conv2dConfig {
                    stride: 2,
                    padding: 1,
                    groups: 2,
                },
            )
        }),
        case(
            "depthwise conv2d",
            normal(rng, &[1, 4, 4, 4], 1.0),
            move |t, x| {
                t.conv2d(
                    x,
                    dw2.clone(),
                    None,
                    Conv2dConfig {
                        stride: 1,
                        padding: 1,
                        groups: 4,
                    },
                )
            },
        ),
        case("softmax last", normal(rng, &[3, 5], 2.0), |t, x| {
            t.softmax(x, 1)
        }),
        case("softmax middle", normal(rng, &[2, 4, 3], 2.0), |t, x| {
            t.softmax(x, 1)
        }),
        case("layer norm", normal(rng, &[2, 3, 6], 1.5), move |t, x| {
            t.layer_norm(x, Some(&g2), Some(&be2), 1e-5, 1)
        }),
        case("layer norm rank 2", normal(rng, &[2, 3, 6], 1.5), |t, x| {
            t.layer_norm(x, None, None, 1e-5, 2)
        }),
        case(
            "group norm",
            normal(rng, &[2, 4, 3, 3], 1.5),
            move |t, x| t.group_norm(x, 2, Some(&g4), None, 1e-5),
        ),
        case(
            "group norm tokens",
            normal(rng, &[2, 3, 6], 1.5),
            move |t, x| t.group_norm(x, 3, None, Some(&beta), 1e-5),
        ),
        case(
            "batch norm",
            normal(rng, &[2, 4, 2, 2], 1.0),
            move |t, x| t.batch_norm(x, &m4, &v4, Some(&gamma4), None, 1e-5),
        ),
        case("relu", away_from_zero(rng, &[3, 4], 0.05), |t, x| {
            Ok(t.activation(x, Activation::Relu))
        }),
        case("gelu", normal(rng, &[3, 4], 2.0), |t, x| {
            Ok(t.activation(x, Activation::Gelu))
        }),
        case("silu", normal(rng, &[3, 4], 2.0), |t, x| {
            Ok(t.activation(x, Activation::Silu))
        }),
        case("add", normal(rng, &[3, 4], 1.0), move |t, x| {
            let o = t.leaf(other.clone());
            t.add(x, o)
        }),
        case("add shared", normal(rng, &[3, 4], 1.0), |t, x| {
            let s = t.activation(x, Activation::Gelu);
            t.add(x, s)
        }),
        case("scale", normal(rng, &[3, 4], 1.0), |t, x| {
            Ok(t.scale(x, -0.7))
        }),
        case("reshape", normal(rng, &[2, 6], 1.0), |t, x| {
            let r = t.reshape(x, &[3, 4])?;
            t.softmax(r, 1)
        }),
        case("permute", normal(rng, &[2, 3, 4], 1.0), |t, x| {
            let p = t.permute(x, &[2, 0, 1])?;
            t.softmax(p, 2)
        }),
        case("transpose", normal(rng, &[2, 3, 4], 1.0), |t, x| {
            let p = t.transpose_last2(x)?;
            t.softmax(p, 2)
        }),
        case("narrow", normal(rng, &[2, 6, 3], 1.0), |t, x| {
            let n = t.narrow(x, 1, 2, 3)?;
            t.softmax(n, 1)
        }),
        case("mean", normal(rng, &[2, 3, 2, 2], 1.0), |t, x| {
            t.mean_axes(x, 2, 4)
        }),
        case("attention", normal(rng, &[2, 3, 4], 1.0), move |t, x| {
            let kt = t.transpose_last2(x)?;
            let s = t.bmm(x, kt)?;
            let s = t.scale(s, 0.5);
            let p = t.softmax(s, 2)?;
            t.bmm(p, x)
        }),
        case("mlp", normal(rng, &[4, 4], 1.0), move |t, x| {
            let h = t.linear(x, w.clone(), Some(&bias))?;
            let h = t.activation(h, Activation::Gelu);
            let h = t.layer_norm(h, None, None, 1e-5, 1)?;
            t.mean_axes(h, 0, 1)
        }),
        case(
            "conv block",
            normal(rng, &[1, 4, 4, 4], 1.0),
            move |t, x| {
                let y = t.conv2d(
                    x,
                    cw.clone(),
                    None,
                    Conv2dConfig {
                        stride: 1,
                        padding: 1,
                        groups: 2,
                    },
                )?;
                let y = t.activation(y, Activation::Silu);
                let y = t.conv2d(
                    y,
                    dw.clone(),
                    None,
                    Conv2dConfig {
                        stride: 1,
                        padding: 1,
                        groups: 4,
                    },
                )?;
                t.add(x, y)
            },
        ),
    ]
}
