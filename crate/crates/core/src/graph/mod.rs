//! Layer IR for hybrid conv + transformer models and its (fake-quantized)
//! executor.

mod exec;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{channel_axis, Activation, Tensor};

pub(crate) use exec::run_layers_marked;
pub use exec::{
    forward_fp, forward_quant, observe_sites, quant_attention, record, run_layers, AttentionQuant,
    ForwardOutput, Recording,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(pub u32);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which tensor of a layer a quantizer is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    /// The layer's (first) input activation.
    Input,
    /// Second operand of a two-input matmul layer.
    InputB,
    Weight,
    AttnQuery,
    AttnKey,
    /// Scaled attention scores entering softmax (full mode only).
    SoftmaxInput,
    AttnProbs,
    AttnValue,
    /// Concatenated heads entering the output projection.
    OutInput,
    OutWeight,
}

impl SiteKind {
    pub const ALL: [SiteKind; 10] = [
        SiteKind::Input,
        SiteKind::InputB,
        SiteKind::Weight,
        SiteKind::AttnQuery,
        SiteKind::AttnKey,
        SiteKind::SoftmaxInput,
        SiteKind::AttnProbs,
        SiteKind::AttnValue,
        SiteKind::OutInput,
        SiteKind::OutWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Input => "input",
            SiteKind::InputB => "input_b",
            SiteKind::Weight => "weight",
            SiteKind::AttnQuery => "attn_query",
            SiteKind::AttnKey => "attn_key",
            SiteKind::SoftmaxInput => "softmax_input",
            SiteKind::AttnProbs => "attn_probs",
            SiteKind::AttnValue => "attn_value",
            SiteKind::OutInput => "out_input",
            SiteKind::OutWeight => "out_weight",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_weight(self) -> bool {
        matches!(self, SiteKind::Weight | SiteKind::OutWeight)
    }

    /// Channel axis used for per-channel quantization of this site, given
    /// the tensor rank. Weights are per output channel.
    pub fn channel_axis(self, rank: usize) -> usize {
        if self.is_weight() {
            0
        } else {
            channel_axis(rank)
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: LayerId,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: LayerId, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "site {}/{}", self.layer, self.kind)
    }
}

/// Partial quantization leaves softmax and normalization inputs in floating
/// point; full quantization adds sites for them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum QuantMode {
    #[default]
    Partial,
    Full,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Partial => "partial",
            QuantMode::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "partial" => Some(QuantMode::Partial),
            "full" => Some(QuantMode::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Fused activation applied to the convolution output.
    pub act: Option<Activation>,
}

/// Multi-head self-attention over `[N, T, D]` tokens with fused QKV
/// projection weights `[3D, D]` and output projection `[D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mhsa {
    pub heads: usize,
    pub qkv_weight: Tensor,
    pub qkv_bias: Option<Tensor>,
    pub out_weight: Tensor,
    pub out_bias: Option<Tensor>,
}

impl Mhsa {
    pub fn dim(&self) -> usize {
        self.out_weight.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReshapeKind {
    /// `[N, C, H, W] -> [N, H*W, C]`
    ToTokens,
    /// `[N, H*W, C] -> [N, C, H, W]`
    ToSpatial { height: usize, width: usize },
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv2d(Conv),
    DepthwiseConv2d(Conv),
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
        act: Option<Activation>,
    },
    Mhsa(Mhsa),
    Softmax {
        axis: usize,
    },
    LayerNorm {
        gamma: Option<Tensor>,
        beta: Option<Tensor>,
        eps: f32,
        normalized_rank: usize,
    },
    GroupNorm {
        groups: usize,
        gamma: Option<Tensor>,
        beta: Option<Tensor>,
        eps: f32,
    },
    BatchNorm {
        mean: Tensor,
        var: Tensor,
        gamma: Option<Tensor>,
        beta: Option<Tensor>,
        eps: f32,
    },
    Activation(Activation),
    Add,
    Reshape(ReshapeKind),
    /// Global average over spatial (NCHW) or token (`[N, T, D]`) positions.
    Pool,
    Matmul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Linear,
    Mhsa,
    Softmax,
    LayerNorm,
    GroupNorm,
    BatchNorm,
    Activation,
    Add,
    Reshape,
    Pool,
    Matmul,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::Linear,
        LayerKind::Mhsa,
        LayerKind::Softmax,
        LayerKind::LayerNorm,
        LayerKind::GroupNorm,
        LayerKind::BatchNorm,
        LayerKind::Activation,
        LayerKind::Add,
        LayerKind::Reshape,
        LayerKind::Pool,
        LayerKind::Matmul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::Linear => "linear",
            LayerKind::Mhsa => "mhsa",
            LayerKind::Softmax => "softmax",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::GroupNorm => "group_norm",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Activation => "activation",
            LayerKind::Add => "add",
            LayerKind::Reshape => "reshape",
            LayerKind::Pool => "pool",
            LayerKind::Matmul => "matmul",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn arity(self) -> usize {
        match self {
            LayerKind::Add | LayerKind::Matmul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub name: String,
    pub op: LayerOp,
    /// Producer layers. Empty means the layer reads the graph input.
    pub inputs: Vec<LayerId>,
}

impl LayerSpec {
    pub fn new(id: u32, name: impl Into<String>, op: LayerOp, inputs: &[u32]) -> Self {
        Self {
            id: LayerId(id),
            name: name.into(),
            op,
            inputs: inputs.iter().map(|&i| LayerId(i)).collect(),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match &self.op {
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::DepthwiseConv2d(_) => LayerKind::DepthwiseConv2d,
            LayerOp::Linear { .. } => LayerKind::Linear,
            LayerOp::Mhsa(_) => LayerKind::Mhsa,
            LayerOp::Softmax { .. } => LayerKind::Softmax,
            LayerOp::LayerNorm { .. } => LayerKind::LayerNorm,
            LayerOp::GroupNorm { .. } => LayerKind::GroupNorm,
            LayerOp::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerOp::Activation(_) => LayerKind::Activation,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Reshape(_) => LayerKind::Reshape,
            LayerOp::Pool => LayerKind::Pool,
            LayerOp::Matmul => LayerKind::Matmul,
        }
    }

    /// Sites this layer exposes under `mode`.
    pub fn site_kinds(&self, mode: QuantMode) -> Vec<SiteKind> {
        use SiteKind::*;
        let full = mode == QuantMode::Full;
        match self.kind() {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Linear => {
                vec![Input, Weight]
            }
            LayerKind::Mhsa => {
                let mut v = vec![Input, Weight, AttnQuery, AttnKey];
                if full {
                    v.push(SoftmaxInput);
                }
                v.extend([AttnProbs, AttnValue, OutInput, OutWeight]);
                v
            }
            LayerKind::Matmul => vec![Input, InputB],
            LayerKind::Softmax
            | LayerKind::LayerNorm
            | LayerKind::GroupNorm
            | LayerKind::BatchNorm => {
                if full {
                    vec![Input]
                } else {
                    vec![]
                }
            }
            LayerKind::Activation | LayerKind::Add | LayerKind::Reshape | LayerKind::Pool => {
                vec![]
            }
        }
    }

    /// The constant tensor behind a weight site.
    pub fn weight(&self, kind: SiteKind) -> Option<&Tensor> {
        match (&self.op, kind) {
            (LayerOp::Conv2d(c) | LayerOp::DepthwiseConv2d(c), SiteKind::Weight) => Some(&c.weight),
            (LayerOp::Linear { weight, .. }, SiteKind::Weight) => Some(weight),
            (LayerOp::Mhsa(m), SiteKind::Weight) => Some(&m.qkv_weight),
            (LayerOp::Mhsa(m), SiteKind::OutWeight) => Some(&m.out_weight),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(format!("layer {}: {msg}", self.id)));
        let kind = self.kind();
        if self.inputs.len() > kind.arity() || (kind.arity() == 2 && self.inputs.len() != 2) {
            return bad(format!(
                "{} takes {} input(s), got {}",
                kind.name(),
                kind.arity(),
                self.inputs.len()
            ));
        }
        match &self.op {
            LayerOp::Conv2d(c) | LayerOp::DepthwiseConv2d(c) => {
                if c.weight.rank() != 4 || c.groups == 0 || c.stride == 0 {
                    return bad(format!(
                        "bad conv weight {:?} / groups {}",
                        c.weight.shape(),
                        c.groups
                    ));
                }
                if c.weight.shape()[0] % c.groups != 0 {
                    return Err(Error::Divisibility {
                        op: "conv2d",
                        what: "output channels",
                        value: c.weight.shape()[0],
                        divisor: c.groups,
                    });
                }
                if kind == LayerKind::DepthwiseConv2d
                    && (c.weight.shape()[1] != 1 || c.groups != c.weight.shape()[0])
                {
                    return bad(
                        "depthwise conv needs groups == channels and one input channel per group"
                            .into(),
                    );
                }
            }
            LayerOp::Linear { weight, bias, .. } => {
                if weight.rank() != 2 {
                    return bad(format!(
                        "linear weight must be 2-D, got {:?}",
                        weight.shape()
                    ));
                }
                if bias.as_ref().is_some_and(|b| b.len() != weight.shape()[0]) {
                    return bad("linear bias length differs from output features".into());
                }
            }
            LayerOp::Mhsa(m) => {
                let d = m.out_weight.shape().first().copied().unwrap_or(0);
                if m.heads == 0 || d % m.heads != 0 {
                    return Err(Error::Divisibility {
                        op: "mhsa",
                        what: "embedding dim",
                        value: d,
                        divisor: m.heads,
                    });
                }
                if m.qkv_weight.shape() != [3 * d, d] || m.out_weight.shape() != [d, d] {
                    return bad(format!(
                        "mhsa weights {:?} / {:?} do not match dim {d}",
                        m.qkv_weight.shape(),
                        m.out_weight.shape()
                    ));
                }
            }
            LayerOp::GroupNorm { groups, .. } if *groups == 0 => {
                return bad("group_norm needs at least one group".into());
            }
            LayerOp::LayerNorm {
                normalized_rank, ..
            } if *normalized_rank == 0 => {
                return bad("layer_norm must normalize at least one dim".into());
            }
            LayerOp::BatchNorm { mean, var, .. } if mean.len() != var.len() => {
                return bad("batch_norm mean/var lengths differ".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Quantization parameters keyed by site. Sites absent from the map run in
/// full precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QConfig {
    params: BTreeMap<SiteId, QuantParams>,
}

impl QConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: SiteId, params: QuantParams) -> Option<QuantParams> {
        self.params.insert(site, params)
    }

    pub fn get(&self, site: &SiteId) -> Option<&QuantParams> {
        self.params.get(site)
    }

    pub fn remove(&mut self, site: &SiteId) -> Option<QuantParams> {
        self.params.remove(site)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteId, &QuantParams)> {
        self.params.iter()
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteId> {
        self.params.keys()
    }

    /// Checks that every declared site of `graph` has parameters and no
    /// undeclared site does.
    pub fn check_coverage(&self, graph: &Graph) -> Result<()> {
        self.check_known(graph)?;
        if let Some(missing) = graph.quant_sites().find(|s| !self.params.contains_key(s)) {
            return Err(Error::MissingParams(*missing));
        }
        Ok(())
    }

    pub(crate) fn check_known(&self, graph: &Graph) -> Result<()> {
        if let Some(unknown) = self.params.keys().find(|s| !graph.has_site(s)) {
            return Err(Error::UnknownSite(*unknown));
        }
        Ok(())
    }
}

impl FromIterator<(SiteId, QuantParams)> for QConfig {
    fn from_iter<I: IntoIterator<Item = (SiteId, QuantParams)>>(iter: I) -> Self {
        Self {
            params: iter.into_iter().collect(),
        }
    }
}

/// A topologically ordered DAG of layers with a single output.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    layers: Vec<LayerSpec>,
    index: BTreeMap<LayerId, usize>,
    input_shape: Vec<usize>,
    output: LayerId,
    mode: QuantMode,
    quant_sites: BTreeSet<SiteId>,
}

impl Graph {
    /// Builds a graph whose quantization sites are derived from `mode`.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        output: LayerId,
        mode: QuantMode,
    ) -> Result<Self> {
        let sites = layers
            .iter()
            .flat_map(|l| l.site_kinds(mode).into_iter().map(|k| SiteId::new(l.id, k)))
            .collect();
        Self::with_sites(layers, input_shape, output, mode, sites)
    }

    /// Builds a graph with an explicit site list (as loaded from a manifest).
    pub fn with_sites(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        output: LayerId,
        mode: QuantMode,
        quant_sites: BTreeSet<SiteId>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidGraph("graph has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidGraph(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut index = BTreeMap::new();
        for (pos, layer) in layers.iter().enumerate() {
            layer.validate()?;
            for inp in &layer.inputs {
                if !index.contains_key(inp) {
                    return Err(Error::InvalidGraph(format!(
                        "layer {} consumes {inp}, which is not an earlier layer",
                        layer.id
                    )));
                }
            }
            if index.insert(layer.id, pos).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "duplicate layer id {}",
                    layer.id
                )));
            }
        }
        if !index.contains_key(&output) {
            return Err(Error::UnknownLayer(output));
        }
        for site in &quant_sites {
            let layer = index
                .get(&site.layer)
                .map(|&p| &layers[p])
                .ok_or(Error::UnknownSite(*site))?;
            if !layer.site_kinds(QuantMode::Full).contains(&site.kind) {
                return Err(Error::UnknownSite(*site));
            }
        }
        let graph = Self {
            layers,
            index,
            input_shape,
            output,
            mode,
            quant_sites,
        };
        // Dry run at batch 1 to surface shape errors with the layer id.
        let mut shape = vec![1];
        shape.extend_from_slice(&graph.input_shape);
        forward_fp(&graph, &Tensor::zeros(&shape), &BTreeSet::new())?;
        Ok(graph)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> Result<&LayerSpec> {
        self.index
            .get(&id)
            .map(|&p| &self.layers[p])
            .ok_or(Error::UnknownLayer(id))
    }

    pub fn position(&self, id: LayerId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownLayer(id))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output(&self) -> LayerId {
        self.output
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn quant_sites(&self) -> impl Iterator<Item = &SiteId> {
        self.quant_sites.iter()
    }

    pub fn has_site(&self, site: &SiteId) -> bool {
        self.quant_sites.contains(site)
    }

    /// Declared sites of one layer, in the layer's site order.
    pub fn sites_of(&self, id: LayerId) -> Vec<SiteId> {
        match self.layer(id) {
            Ok(l) => l
                .site_kinds(QuantMode::Full)
                .into_iter()
                .map(|k| SiteId::new(id, k))
                .filter(|s| self.quant_sites.contains(s))
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Layers that read `id`'s output.
    pub fn consumers(&self, id: LayerId) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| l.inputs.contains(&id))
            .map(|l| l.id)
            .collect()
    }

    /// Every layer id in topological order.
    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layers.iter().map(|l| l.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_linear(d: usize) -> Graph {
        let w = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        Graph::new(
            vec![LayerSpec::new(
                0,
                "fc",
                LayerOp::Linear {
                    weight: w,
                    bias: None,
                    act: None,
                },
                &[],
            )],
            vec![d],
            LayerId(0),
            QuantMode::Partial,
        )
        .unwrap()
    }

    #[test]
    fn sites_follow_mode() {
        let g = identity_linear(3);
        let sites: Vec<_> = g.quant_sites().copied().collect();
        assert_eq!(
            sites,
            vec![
                SiteId::new(LayerId(0), SiteKind::Input),
                SiteId::new(LayerId(0), SiteKind::Weight)
            ]
        );
    }

    #[test]
    fn rejects_forward_reference_and_duplicates() {
        let l = |id, inputs: &[u32]| {
            LayerSpec::new(id, "a", LayerOp::Activation(Activation::Relu), inputs)
        };
        assert!(Graph::new(
            vec![l(0, &[1]), l(1, &[])],
            vec![2],
            LayerId(1),
            QuantMode::Partial
        )
        .is_err());
        assert!(Graph::new(
            vec![l(0, &[]), l(0, &[0])],
            vec![2],
            LayerId(0),
            QuantMode::Partial
        )
        .is_err());
    }

    #[test]
    fn shape_failure_names_layer() {
        let w = Tensor::zeros(&[2, 5]);
        let err = Graph::new(
            vec![
                LayerSpec::new(0, "a", LayerOp::Activation(Activation::Relu), &[]),
                LayerSpec::new(
                    7,
                    "fc",
                    LayerOp::Linear {
                        weight: w,
                        bias: None,
                        act: None,
                    },
                    &[0],
                ),
            ],
            vec![3],
            LayerId(7),
            QuantMode::Partial,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Layer { id: LayerId(7), .. }),
            "{err:?}"
        );
    }

    #[test]
    fn mhsa_head_divisibility() {
        let d = 6;
        let m = Mhsa {
            heads: 4,
            qkv_weight: Tensor::zeros(&[3 * d, d]),
            qkv_bias: None,
            out_weight: Tensor::zeros(&[d, d]),
            out_bias: None,
        };
        let err = Graph::new(
            vec![LayerSpec::new(0, "attn", LayerOp::Mhsa(m), &[])],
            vec![4, d],
            LayerId(0),
            QuantMode::Partial,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divisibility { op: "mhsa", .. }));
    }

    #[test]
    fn unknown_site_rejected() {
        let g = identity_linear(2);
        let mut sites = BTreeSet::new();
        sites.insert(SiteId::new(LayerId(0), SiteKind::AttnKey));
        assert!(Graph::with_sites(
            g.layers().to_vec(),
            vec![2],
            LayerId(0),
            QuantMode::Partial,
            sites
        )
        .is_err());
    }
}
