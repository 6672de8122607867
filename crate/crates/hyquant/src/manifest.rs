//! Model manifests: a JSON document describing layers, sites and bridge
//! annotations, with parameters stored as tensor blobs next to it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hyquant_core::bridge::BridgeAnnotation;
use hyquant_core::graph::{
    Conv, Graph, LayerId, LayerKind, LayerOp, LayerSpec, Mhsa, QuantMode, ReshapeKind, SiteId,
    SiteKind,
};
use hyquant_core::tensor::{Activation, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::blob;

pub const FORMAT: &str = "hyquant-manifest/1";
pub const FILE_NAME: &str = "manifest.json";
const WEIGHT_DIR: &str = "weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub input_shape: Vec<usize>,
    pub output: u32,
    #[serde(default)]
    pub mode: Option<String>,
    pub layers: Vec<LayerEntry>,
    /// Explicit sites. When absent they are derived from `mode`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_sites: Option<Vec<SiteEntry>>,
    #[serde(default)]
    pub bridge_blocks: Vec<BridgeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub id: u32,
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<u32>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attrs: Map<String, Value>,
    /// Parameter name to blob path, relative to the manifest.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub layer: u32,
    pub kind: SiteKindName,
}

/// Site kind carried by its textual name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteKindName(pub SiteKind);

impl Serialize for SiteKindName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.0.name())
    }
}

impl<'de> Deserialize<'de> for SiteKindName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SiteKind::from_name(&s)
            .map(SiteKindName)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown site kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeEntry {
    pub label: String,
    /// Layer ids, or inclusive ranges written `"a-b"`.
    pub layer_ids: Vec<Value>,
}

/// A loaded model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: Graph,
    pub bridges: Vec<BridgeAnnotation>,
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
        Activation::Silu => "silu",
    }
}

pub fn activation_from_name(s: &str) -> Option<Activation> {
    match s {
        "relu" => Some(Activation::Relu),
        "gelu" => Some(Activation::Gelu),
        "silu" => Some(Activation::Silu),
        _ => None,
    }
}

/// Writes `manifest.json` and one blob per parameter tensor into `dir`.
pub fn save(dir: &Path, model: &Model) -> Result<PathBuf> {
    let wdir = dir.join(WEIGHT_DIR);
    fs::create_dir_all(&wdir).with_context(|| format!("creating {}", wdir.display()))?;
    let g = &model.graph;
    let mut layers = Vec::new();
    for layer in g.layers() {
        let (attrs, tensors) = describe(&layer.op);
        let mut refs = BTreeMap::new();
        for (param, t) in tensors {
            let rel = format!("{WEIGHT_DIR}/{}.{param}.hqt", layer.id);
            blob::write(&dir.join(&rel), t)?;
            refs.insert(param.to_string(), rel);
        }
        layers.push(LayerEntry {
            id: layer.id.0,
            name: layer.name.clone(),
            kind: layer.kind().name().to_string(),
            inputs: layer.inputs.iter().map(|i| i.0).collect(),
            attrs,
            tensors: refs,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        input_shape: g.input_shape().to_vec(),
        output: g.output().0,
        mode: Some(g.mode().name().to_string()),
        layers,
        quant_sites: Some(
            g.quant_sites()
                .map(|s| SiteEntry {
                    layer: s.layer.0,
                    kind: SiteKindName(s.kind),
                })
                .collect(),
        ),
        bridge_blocks: model
            .bridges
            .iter()
            .map(|b| BridgeEntry {
                label: b.label.clone(),
                layer_ids: b.layer_ids.iter().map(|i| json!(i.0)).collect(),
            })
            .collect(),
    };
    let path = dir.join(FILE_NAME);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Loads a manifest and its blobs. `mode` overrides the stored sites with
/// the ones derived from that mode.
pub fn load(path: &Path, mode: Option<QuantMode>) -> Result<Model> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing manifest {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    build(&manifest, dir, mode).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn build(m: &Manifest, dir: &Path, mode_override: Option<QuantMode>) -> Result<Model> {
    if m.format != FORMAT {
        bail!(
            "unsupported manifest format '{}' (expected '{FORMAT}')",
            m.format
        );
    }
    let stored_mode = match &m.mode {
        Some(s) => QuantMode::from_name(s).ok_or_else(|| anyhow!("unknown mode '{s}'"))?,
        None => QuantMode::default(),
    };
    let mut layers = Vec::with_capacity(m.layers.len());
    for entry in &m.layers {
        let op = parse_layer(entry, dir)
            .with_context(|| format!("layer {} ('{}')", entry.id, entry.name))?;
        layers.push(LayerSpec::new(
            entry.id,
            entry.name.clone(),
            op,
            &entry.inputs,
        ));
    }
    let shape = m.input_shape.clone();
    let output = LayerId(m.output);
    let graph = match (mode_override, &m.quant_sites) {
        (None, Some(sites)) => {
            let sites: BTreeSet<SiteId> = sites
                .iter()
                .map(|s| SiteId::new(LayerId(s.layer), s.kind.0))
                .collect();
            Graph::with_sites(layers, shape, output, stored_mode, sites)?
        }
        (mode, _) => Graph::new(layers, shape, output, mode.unwrap_or(stored_mode))?,
    };
    let bridges = m
        .bridge_blocks
        .iter()
        .map(|b| {
            Ok(BridgeAnnotation {
                label: b.label.clone(),
                layer_ids: expand_ids(&b.layer_ids)
                    .with_context(|| format!("bridge block '{}'", b.label))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model { graph, bridges })
}

fn expand_ids(ids: &[Value]) -> Result<Vec<LayerId>> {
    let mut out = Vec::new();
    for v in ids {
        match v {
            Value::Number(n) => {
                let id = n.as_u64().and_then(|i| u32::try_from(i).ok());
                out.push(LayerId(id.ok_or_else(|| anyhow!("bad layer id {n}"))?));
            }
            Value::String(s) => {
                let (a, b) = s
                    .split_once('-')
                    .ok_or_else(|| anyhow!("bad layer range '{s}'"))?;
                let (a, b): (u32, u32) = (
                    a.trim()
                        .parse()
                        .with_context(|| format!("bad layer range '{s}'"))?,
                    b.trim()
                        .parse()
                        .with_context(|| format!("bad layer range '{s}'"))?,
                );
                if a > b {
                    bail!("empty layer range '{s}'");
                }
                out.extend((a..=b).map(LayerId));
            }
            other => bail!("bad layer id entry {other}"),
        }
    }
    Ok(out)
}

fn describe(op: &LayerOp) -> (Map<String, Value>, Vec<(&'static str, &Tensor)>) {
    let mut a = Map::new();
    let mut t: Vec<(&'static str, &Tensor)> = Vec::new();
    let act = |a: &Option<Activation>| a.map_or(Value::Null, |x| json!(activation_name(x)));
    match op {
        LayerOp::Conv2d(c) | LayerOp::DepthwiseConv2d(c) => {
            a.insert("stride".into(), json!(c.stride));
            a.insert("padding".into(), json!(c.padding));
            a.insert("groups".into(), json!(c.groups));
            a.insert("act".into(), act(&c.act));
            t.push(("weight", &c.weight));
            t.extend(c.bias.as_ref().map(|b| ("bias", b)));
        }
        LayerOp::Linear {
            weight,
            bias,
            act: f,
        } => {
            a.insert("act".into(), act(f));
            t.push(("weight", weight));
            t.extend(bias.as_ref().map(|b| ("bias", b)));
        }
        LayerOp::Mhsa(m) => {
            a.insert("heads".into(), json!(m.heads));
            t.push(("qkv_weight", &m.qkv_weight));
            t.extend(m.qkv_bias.as_ref().map(|b| ("qkv_bias", b)));
            t.push(("out_weight", &m.out_weight));
            t.extend(m.out_bias.as_ref().map(|b| ("out_bias", b)));
        }
        LayerOp::Softmax { axis } => {
            a.insert("axis".into(), json!(axis));
        }
        LayerOp::LayerNorm {
            gamma,
            beta,
            eps,
            normalized_rank,
        } => {
            a.insert("eps".into(), json!(eps));
            a.insert("normalized_rank".into(), json!(normalized_rank));
            t.extend(gamma.as_ref().map(|g| ("gamma", g)));
            t.extend(beta.as_ref().map(|b| ("beta", b)));
        }
        LayerOp::GroupNorm {
            groups,
            gamma,
            beta,
            eps,
        } => {
            a.insert("groups".into(), json!(groups));
            a.insert("eps".into(), json!(eps));
            t.extend(gamma.as_ref().map(|g| ("gamma", g)));
            t.extend(beta.as_ref().map(|b| ("beta", b)));
        }
        LayerOp::BatchNorm {
            mean,
            var,
            gamma,
            beta,
            eps,
        } => {
            a.insert("eps".into(), json!(eps));
            t.push(("mean", mean));
            t.push(("var", var));
            t.extend(gamma.as_ref().map(|g| ("gamma", g)));
            t.extend(beta.as_ref().map(|b| ("beta", b)));
        }
        LayerOp::Activation(f) => {
            a.insert("act".into(), json!(activation_name(*f)));
        }
        LayerOp::Reshape(r) => match r {
            ReshapeKind::ToTokens => {
                a.insert("reshape".into(), json!("to_tokens"));
            }
            ReshapeKind::ToSpatial { height, width } => {
                a.insert("reshape".into(), json!("to_spatial"));
                a.insert("height".into(), json!(height));
                a.insert("width".into(), json!(width));
            }
            ReshapeKind::Flatten => {
                a.insert("reshape".into(), json!("flatten"));
            }
        },
        LayerOp::Add | LayerOp::Pool | LayerOp::Matmul => {}
    }
    (a, t)
}

/// Attribute and tensor lookups that fail on anything left unread.
struct Fields<'a> {
    entry: &'a LayerEntry,
    dir: &'a Path,
    attrs: BTreeSet<&'a str>,
    tensors: BTreeSet<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(entry: &'a LayerEntry, dir: &'a Path) -> Self {
        Self {
            entry,
            dir,
            attrs: entry.attrs.keys().map(String::as_str).collect(),
            tensors: entry.tensors.keys().map(String::as_str).collect(),
        }
    }

    fn attr(&mut self, key: &str) -> Option<&'a Value> {
        self.attrs.remove(key);
        self.entry.attrs.get(key).filter(|v| !v.is_null())
    }

    fn usize(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.attr(key) {
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| anyhow!("attribute '{key}' must be a non-negative integer")),
            None => default.ok_or_else(|| anyhow!("missing attribute '{key}'")),
        }
    }

    fn f32(&mut self, key: &str, default: f32) -> Result<f32> {
        match self.attr(key) {
            Some(v) => v
                .as_f64()
                .map(|x| x as f32)
                .ok_or_else(|| anyhow!("attribute '{key}' must be a number")),
            None => Ok(default),
        }
    }

    fn str(&mut self, key: &str) -> Result<Option<&'a str>> {
        match self.attr(key) {
            Some(v) => {
                Ok(Some(v.as_str().ok_or_else(|| {
                    anyhow!("attribute '{key}' must be a string")
                })?))
            }
            None => Ok(None),
        }
    }

    fn act(&mut self, key: &str) -> Result<Option<Activation>> {
        self.str(key)?
            .map(|s| activation_from_name(s).ok_or_else(|| anyhow!("unknown activation '{s}'")))
            .transpose()
    }

    fn tensor(&mut self, key: &str) -> Result<Option<Tensor>> {
        self.tensors.remove(key);
        self.entry
            .tensors
            .get(key)
            .map(|rel| blob::read(&self.dir.join(rel)))
            .transpose()
    }

    fn required(&mut self, key: &str) -> Result<Tensor> {
        self.tensor(key)?
            .ok_or_else(|| anyhow!("missing tensor '{key}'"))
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.attrs.first() {
            bail!("unknown attribute '{k}' for {}", self.entry.kind);
        }
        if let Some(k) = self.tensors.first() {
            bail!("unknown tensor '{k}' for {}", self.entry.kind);
        }
        Ok(())
    }
}

fn parse_layer(entry: &LayerEntry, dir: &Path) -> Result<LayerOp> {
    let kind = LayerKind::from_name(&entry.kind).ok_or_else(|| {
        let known: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
        anyhow!(
            "unknown layer kind '{}' (known: {})",
            entry.kind,
            known.join(", ")
        )
    })?;
    let mut f = Fields::new(entry, dir);
    let op = match kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
            let c = Conv {
                stride: f.usize("stride", Some(1))?,
                padding: f.usize("padding", Some(0))?,
                groups: f.usize("groups", Some(1))?,
                act: f.act("act")?,
                weight: f.required("weight")?,
                bias: f.tensor("bias")?,
            };
            if kind == LayerKind::Conv2d {
                LayerOp::Conv2d(c)
            } else {
                LayerOp::DepthwiseConv2d(c)
            }
        }
        LayerKind::Linear => LayerOp::Linear {
            act: f.act("act")?,
            weight: f.required("weight")?,
            bias: f.tensor("bias")?,
        },
        LayerKind::Mhsa => LayerOp::Mhsa(Mhsa {
            heads: f.usize("heads", None)?,
            qkv_weight: f.required("qkv_weight")?,
            qkv_bias: f.tensor("qkv_bias")?,
            out_weight: f.required("out_weight")?,
            out_bias: f.tensor("out_bias")?,
        }),
        LayerKind::Softmax => LayerOp::Softmax {
            axis: f.usize("axis", None)?,
        },
        LayerKind::LayerNorm => LayerOp::LayerNorm {
            eps: f.f32("eps", 1e-5)?,
            normalized_rank: f.usize("normalized_rank", Some(1))?,
            gamma: f.tensor("gamma")?,
            beta: f.tensor("beta")?,
        },
        LayerKind::GroupNorm => LayerOp::GroupNorm {
            groups: f.usize("groups", None)?,
            eps: f.f32("eps", 1e-5)?,
            gamma: f.tensor("gamma")?,
            beta: f.tensor("beta")?,
        },
        LayerKind::BatchNorm => LayerOp::BatchNorm {
            eps: f.f32("eps", 1e-5)?,
            mean: f.required("mean")?,
            var: f.required("var")?,
            gamma: f.tensor("gamma")?,
            beta: f.tensor("beta")?,
        },
        LayerKind::Activation => LayerOp::Activation(
            f.act("act")?
                .ok_or_else(|| anyhow!("missing attribute 'act'"))?,
        ),
        LayerKind::Reshape => LayerOp::Reshape(match f.str("reshape")? {
            Some("to_tokens") => ReshapeKind::ToTokens,
            Some("to_spatial") => ReshapeKind::ToSpatial {
                height: f.usize("height", None)?,
                width: f.usize("width", None)?,
            },
            Some("flatten") => ReshapeKind::Flatten,
            Some(other) => bail!("unknown reshape '{other}'"),
            None => bail!("missing attribute 'reshape'"),
        }),
        LayerKind::Add => LayerOp::Add,
        LayerKind::Pool => LayerOp::Pool,
        LayerKind::Matmul => LayerOp::Matmul,
    };
    f.finish()?;
    Ok(op)
}
