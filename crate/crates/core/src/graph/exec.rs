use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, LayerId, LayerOp, LayerSpec, QConfig, ReshapeKind, SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::quant::{quantize_dequantize, QuantParams};
use crate::tensor::{Conv2dConfig, Tape, Tensor, Var};

/// Final logits plus the outputs of the requested layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub outputs: BTreeMap<LayerId, Tensor>,
}

/// A forward pass kept on its tape so gradients can be pulled back to any
/// layer output.
#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub layer_vars: BTreeMap<LayerId, Var>,
    pub output: Var,
}

struct Ctx<'a> {
    graph: &'a Graph,
    qconfig: &'a QConfig,
    observer: Option<&'a mut BTreeMap<SiteId, Tensor>>,
    /// Tape position at which each quantized site first takes effect.
    marks: Option<&'a mut BTreeMap<SiteId, usize>>,
}

impl Ctx<'_> {
    fn act(&mut self, tape: &mut Tape, v: Var, layer: LayerId, kind: SiteKind) -> Result<Var> {
        let site = SiteId::new(layer, kind);
        if !self.graph.has_site(&site) {
            return Ok(v);
        }
        if let Some(obs) = self.observer.as_deref_mut() {
            obs.insert(site, tape.value(v).clone());
        }
        match self.qconfig.get(&site) {
            Some(p) => {
                if let Some(m) = self.marks.as_deref_mut() {
                    m.insert(site, tape.position());
                }
                if tape.replaying() {
                    return tape.fake_quant(v, Tensor::from_parts(vec![0], vec![]));
                }
                let q = quantize_dequantize(tape.value(v), p)?;
                tape.fake_quant(v, q)
            }
            None => Ok(v),
        }
    }

    /// The (fake-quantized) weight for the op about to be pushed on `tape`.
    fn weight(&mut self, tape: &Tape, layer: &LayerSpec, kind: SiteKind) -> Result<Tensor> {
        let w = layer.weight(kind).ok_or_else(|| {
            Error::InvalidGraph(format!("layer {} has no {kind} tensor", layer.id))
        })?;
        if tape.replaying() {
            // The consuming op is a kept node and ignores its weight.
            return Ok(Tensor::from_parts(vec![0], vec![]));
        }
        let site = SiteId::new(layer.id, kind);
        match self.qconfig.get(&site) {
            Some(p) if self.graph.has_site(&site) => {
                if let Some(m) = self.marks.as_deref_mut() {
                    m.insert(site, tape.position());
                }
                quantize_dequantize(w, p)
            }
            _ => Ok(w.clone()),
        }
    }

    fn layer(&mut self, tape: &mut Tape, layer: &LayerSpec, inputs: &[Var]) -> Result<Var> {
        let id = layer.id;
        let x = inputs[0];
        match &layer.op {
            LayerOp::Conv2d(c) | LayerOp::DepthwiseConv2d(c) => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                let w = self.weight(tape, layer, SiteKind::Weight)?;
                let cfg = Conv2dConfig {
                    stride: c.stride,
                    padding: c.padding,
                    groups: c.groups,
                };
                let y = tape.conv2d(xq, w, c.bias.as_ref(), cfg)?;
                Ok(match c.act {
                    Some(a) => tape.activation(y, a),
                    None => y,
                })
            }
            LayerOp::Linear { bias, act, .. } => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                let w = self.weight(tape, layer, SiteKind::Weight)?;
                let y = tape.linear(xq, w, bias.as_ref())?;
                Ok(match act {
                    Some(a) => tape.activation(y, *a),
                    None => y,
                })
            }
            LayerOp::Mhsa(m) => {
                let shape = tape.value(x).shape().to_vec();
                let d = m.dim();
                if shape.len() != 3 || shape[2] != d {
                    return Err(Error::InvalidShape {
                        op: "mhsa",
                        reason: format!("expected [N, T, {d}] tokens, got {shape:?}"),
                    });
                }
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                let w = self.weight(tape, layer, SiteKind::Weight)?;
                let qkv = tape.linear(xq, w, m.qkv_bias.as_ref())?;
                let q = tape.narrow(qkv, 2, 0, d)?;
                let k = tape.narrow(qkv, 2, d, d)?;
                let v = tape.narrow(qkv, 2, 2 * d, d)?;
                let heads = attention(tape, q, k, v, m.heads, &mut |tape, v, kind| {
                    self.act(tape, v, id, kind)
                })?;
                let hq = self.act(tape, heads, id, SiteKind::OutInput)?;
                let wo = self.weight(tape, layer, SiteKind::OutWeight)?;
                tape.linear(hq, wo, m.out_bias.as_ref())
            }
            LayerOp::Softmax { axis } => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                tape.softmax(xq, *axis)
            }
            LayerOp::LayerNorm {
                gamma,
                beta,
                eps,
                normalized_rank,
            } => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                tape.layer_norm(xq, gamma.as_ref(), beta.as_ref(), *eps, *normalized_rank)
            }
            LayerOp::GroupNorm {
                groups,
                gamma,
                beta,
                eps,
            } => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                tape.group_norm(xq, *groups, gamma.as_ref(), beta.as_ref(), *eps)
            }
            LayerOp::BatchNorm {
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let xq = self.act(tape, x, id, SiteKind::Input)?;
                tape.batch_norm(xq, mean, var, gamma.as_ref(), beta.as_ref(), *eps)
            }
            LayerOp::Activation(a) => Ok(tape.activation(x, *a)),
            LayerOp::Add => tape.add(x, inputs[1]),
            LayerOp::Reshape(kind) => {
                let s = tape.value(x).shape().to_vec();
                match *kind {
                    ReshapeKind::ToTokens => {
                        if s.len() != 4 {
                            return Err(Error::InvalidShape {
                                op: "reshape",
                                reason: format!("to_tokens expects NCHW, got {s:?}"),
                            });
                        }
                        let p = tape.permute(x, &[0, 2, 3, 1])?;
                        tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
                    }
                    ReshapeKind::ToSpatial { height, width } => {
                        if s.len() != 3 || s[1] != height * width {
                            return Err(Error::InvalidShape {
                                op: "reshape",
                                reason: format!("to_spatial {height}x{width} cannot take {s:?}"),
                            });
                        }
                        let r = tape.reshape(x, &[s[0], height, width, s[2]])?;
                        tape.permute(r, &[0, 3, 1, 2])
                    }
                    ReshapeKind::Flatten => {
                        let rest: usize = s[1..].iter().product();
                        tape.reshape(x, &[s[0], rest])
                    }
                }
            }
            LayerOp::Pool => {
                let r = tape.value(x).rank();
                match r {
                    4 => tape.mean_axes(x, 2, 4),
                    3 => tape.mean_axes(x, 1, 2),
                    _ => Err(Error::InvalidShape {
                        op: "pool",
                        reason: format!("expected rank 3 or 4, got {r}"),
                    }),
                }
            }
            LayerOp::Matmul => {
                let a = self.act(tape, x, id, SiteKind::Input)?;
                let b = self.act(tape, inputs[1], id, SiteKind::InputB)?;
                match tape.value(a).rank() {
                    3 => tape.bmm(a, b),
                    _ => tape.matmul(a, b),
                }
            }
        }
    }
}

type SiteHook<'h> = dyn FnMut(&mut Tape, Var, SiteKind) -> Result<Var> + 'h;

/// Per-head `softmax(Q K^T / sqrt(d_k)) V` over `[N, T, D]` operands, with a
/// hook at each attention operand site.
fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    hook: &mut SiteHook<'_>,
) -> Result<Var> {
    let shape = tape.value(q).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "attention",
            reason: format!("expected [N, T, D], got {shape:?}"),
        });
    }
    for other in [k, v] {
        if tape.value(other).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape.clone(),
                rhs: tape.value(other).shape().to_vec(),
            });
        }
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Divisibility {
            op: "attention",
            what: "embedding dim",
            value: d,
            divisor: heads,
        });
    }
    let dk = d / heads;
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let r = tape.reshape(x, &[n, t, heads, dk])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[n * heads, t, dk])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    let qh = hook(tape, qh, SiteKind::AttnQuery)?;
    let kh = hook(tape, kh, SiteKind::AttnKey)?;
    let kt = tape.transpose_last2(kh)?;
    let scores = tape.bmm(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrtf(dk as f32));
    let scores = hook(tape, scores, SiteKind::SoftmaxInput)?;
    let probs = tape.softmax(scores, 2)?;
    let probs = hook(tape, probs, SiteKind::AttnProbs)?;
    let vh = hook(tape, vh, SiteKind::AttnValue)?;
    let out = tape.bmm(probs, vh)?;

    let r = tape.reshape(out, &[n, heads, t, dk])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[n, t, d])
}

/// Quantization of the attention operands; `None` leaves a site in floating
/// point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionQuant {
    pub query: Option<QuantParams>,
    pub key: Option<QuantParams>,
    pub softmax_input: Option<QuantParams>,
    pub probs: Option<QuantParams>,
    pub value: Option<QuantParams>,
}

impl AttentionQuant {
    fn get(&self, kind: SiteKind) -> Option<&QuantParams> {
        match kind {
            SiteKind::AttnQuery => self.query.as_ref(),
            SiteKind::AttnKey => self.key.as_ref(),
            SiteKind::SoftmaxInput => self.softmax_input.as_ref(),
            SiteKind::AttnProbs => self.probs.as_ref(),
            SiteKind::AttnValue => self.value.as_ref(),
            _ => None,
        }
    }
}

/// Multi-head scaled dot-product attention over `[N, T, D]` operands,
/// returning the concatenated heads `[N, T, D]` (before the output
/// projection).
pub fn quant_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    quant: &AttentionQuant,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.leaf(q.clone()),
        tape.leaf(k.clone()),
        tape.leaf(v.clone()),
    );
    let out = attention(
        &mut tape,
        qv,
        kv,
        vv,
        heads,
        &mut |tape, x, kind| match quant.get(kind) {
            Some(p) => {
                let qd = quantize_dequantize(tape.value(x), p)?;
                tape.fake_quant(x, qd)
            }
            None => Ok(x),
        },
    )?;
    Ok(tape.take_value(out))
}

/// Executes `layers` (in the given order) on `tape`. Producer outputs are
/// looked up in `env`, layers with no inputs read `graph_input`, and each
/// executed layer's output is added to `env`.
pub fn run_layers(
    graph: &Graph,
    tape: &mut Tape,
    env: &mut BTreeMap<LayerId, Var>,
    graph_input: Option<Var>,
    layers: &[LayerId],
    qconfig: &QConfig,
    observer: Option<&mut BTreeMap<SiteId, Tensor>>,
) -> Result<()> {
    run_layers_marked(
        graph,
        tape,
        env,
        graph_input,
        layers,
        qconfig,
        observer,
        None,
    )
}

/// [`run_layers`] that also records, for every quantized site, the tape
/// position where its parameters first matter. Rewinding the tape to that
/// position and re-running replays everything upstream of the site.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layers_marked(
    graph: &Graph,
    tape: &mut Tape,
    env: &mut BTreeMap<LayerId, Var>,
    graph_input: Option<Var>,
    layers: &[LayerId],
    qconfig: &QConfig,
    observer: Option<&mut BTreeMap<SiteId, Tensor>>,
    marks: Option<&mut BTreeMap<SiteId, usize>>,
) -> Result<()> {
    let mut ctx = Ctx {
        graph,
        qconfig,
        observer,
        marks,
    };
    for &id in layers {
        let layer = graph.layer(id)?;
        let inputs: Vec<Var> = if layer.inputs.is_empty() {
            vec![graph_input.ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "layer {id} reads the graph input, which is not available"
                ))
            })?]
        } else {
            layer
                .inputs
                .iter()
                .map(|p| {
                    env.get(p).copied().ok_or_else(|| {
                        Error::InvalidGraph(format!(
                            "layer {id}: producer {p} has not been computed"
                        ))
                    })
                })
                .collect::<Result<_>>()?
        };
        let y = ctx
            .layer(tape, layer, &inputs)
            .map_err(|e| e.in_layer(id))?;
        env.insert(id, y);
    }
    Ok(())
}

fn check_input(graph: &Graph, x: &Tensor) -> Result<()> {
    if x.rank() != graph.input_shape().len() + 1 || &x.shape()[1..] != graph.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "graph input",
            lhs: graph.input_shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn run_full(
    graph: &Graph,
    x: &Tensor,
    qconfig: &QConfig,
    observer: Option<&mut BTreeMap<SiteId, Tensor>>,
) -> Result<Recording> {
    check_input(graph, x)?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let mut env = BTreeMap::new();
    let ids: Vec<LayerId> = graph.layer_ids().collect();
    run_layers(
        graph,
        &mut tape,
        &mut env,
        Some(input),
        &ids,
        qconfig,
        observer,
    )?;
    let output = env[&graph.output()];
    Ok(Recording {
        tape,
        layer_vars: env,
        output,
    })
}

fn collect(rec: Recording, watch: &BTreeSet<LayerId>) -> Result<ForwardOutput> {
    let mut tape = rec.tape;
    let mut outputs = BTreeMap::new();
    for id in watch {
        let v = *rec.layer_vars.get(id).ok_or(Error::UnknownLayer(*id))?;
        outputs.insert(*id, tape.value(v).clone());
    }
    Ok(ForwardOutput {
        logits: tape.take_value(rec.output),
        outputs,
    })
}

/// Full-precision forward pass.
pub fn forward_fp(graph: &Graph, x: &Tensor, watch: &BTreeSet<LayerId>) -> Result<ForwardOutput> {
    collect(run_full(graph, x, &QConfig::new(), None)?, watch)
}

/// Fake-quantized forward pass. An empty `qconfig` runs in full precision;
/// otherwise it must cover every declared site.
pub fn forward_quant(
    graph: &Graph,
    x: &Tensor,
    qconfig: &QConfig,
    watch: &BTreeSet<LayerId>,
) -> Result<ForwardOutput> {
    if !qconfig.is_empty() {
        qconfig.check_coverage(graph)?;
    }
    collect(run_full(graph, x, qconfig, None)?, watch)
}

/// Forward pass kept on a tape for gradient computation. Sites missing from
/// `qconfig` run in full precision.
pub fn record(graph: &Graph, x: &Tensor, qconfig: &QConfig) -> Result<Recording> {
    qconfig.check_known(graph)?;
    run_full(graph, x, qconfig, None)
}

/// The tensor entering every declared site during a forward pass under
/// `qconfig` (pre-quantization values for activation sites, raw weights for
/// weight sites).
pub fn observe_sites(
    graph: &Graph,
    x: &Tensor,
    qconfig: &QConfig,
) -> Result<BTreeMap<SiteId, Tensor>> {
    qconfig.check_known(graph)?;
    let mut obs = BTreeMap::new();
    run_full(graph, x, qconfig, Some(&mut obs))?;
    for site in graph.quant_sites() {
        if site.kind.is_weight() {
            let w = graph.layer(site.layer)?.weight(site.kind).cloned();
            if let Some(w) = w {
                obs.insert(*site, w);
            }
        }
    }
    Ok(obs)
}
