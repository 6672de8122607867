//! Bridge blocks: chains of layers between the convolutional and transformer
//! stages that are reconstructed as one unit, measured at the chain's tail.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerId, LayerKind, LayerOp, ReshapeKind, SiteId};

/// A bridge block as declared in a model manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeAnnotation {
    pub label: String,
    pub layer_ids: Vec<LayerId>,
}

impl BridgeAnnotation {
    pub fn new(label: impl Into<String>, ids: &[u32]) -> Self {
        Self {
            label: label.into(),
            layer_ids: ids.iter().map(|&i| LayerId(i)).collect(),
        }
    }
}

/// A validated bridge block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeBlockGroup {
    pub label: String,
    /// Members in topological order.
    pub members: Vec<LayerId>,
    pub output: LayerId,
}

/// Validates annotations: every group must be a contiguous chain (each member
/// feeds the next, and only the next within the group), and groups must be
/// disjoint.
pub fn resolve_bridge_blocks(
    graph: &Graph,
    annotations: &[BridgeAnnotation],
) -> Result<Vec<BridgeBlockGroup>> {
    let mut owner: BTreeMap<LayerId, &str> = BTreeMap::new();
    let mut groups = Vec::with_capacity(annotations.len());
    for ann in annotations {
        if ann.layer_ids.is_empty() {
            return Err(Error::Bridge(format!(
                "block '{}' has no layers",
                ann.label
            )));
        }
        let mut members: Vec<(usize, LayerId)> = ann
            .layer_ids
            .iter()
            .map(|&id| {
                graph.position(id).map(|p| (p, id)).map_err(|_| {
                    Error::Bridge(format!("block '{}' names unknown layer {id}", ann.label))
                })
            })
            .collect::<Result<_>>()?;
        members.sort_unstable();
        for pair in members.windows(2) {
            let ((pa, a), (pb, b)) = (pair[0], pair[1]);
            if pa == pb {
                return Err(Error::Bridge(format!(
                    "block '{}' lists layer {a} twice",
                    ann.label
                )));
            }
            if pb != pa + 1 {
                return Err(Error::Bridge(format!(
                    "block '{}' is not contiguous: layers {a} and {b} are separated by other layers",
                    ann.label
                )));
            }
        }
        let ids: Vec<LayerId> = members.iter().map(|&(_, id)| id).collect();
        let in_group: BTreeSet<LayerId> = ids.iter().copied().collect();
        for pair in ids.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if !graph.layer(b)?.inputs.contains(&a) {
                return Err(Error::Bridge(format!(
                    "block '{}' is not a chain: layer {b} does not consume layer {a}",
                    ann.label
                )));
            }
            let inner: Vec<LayerId> = graph
                .consumers(a)
                .into_iter()
                .filter(|c| in_group.contains(c))
                .collect();
            if inner != [b] {
                return Err(Error::Bridge(format!(
                    "block '{}' branches: layer {a} feeds {inner:?} inside the block",
                    ann.label
                )));
            }
        }
        for &id in &ids {
            if let Some(other) = owner.insert(id, &ann.label) {
                return Err(Error::Bridge(format!(
                    "layer {id} belongs to both '{other}' and '{}'",
                    ann.label
                )));
            }
        }
        groups.push(BridgeBlockGroup {
            label: ann.label.clone(),
            output: *ids.last().unwrap(),
            members: ids,
        });
    }
    groups.sort_by_key(|g| graph.position(g.members[0]).unwrap_or(usize::MAX));
    Ok(groups)
}

/// The set of layers whose joint output is reconstructed: a bridge block or a
/// single layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconstructionUnit {
    pub label: String,
    pub members: Vec<LayerId>,
    pub output: LayerId,
    pub bridge: bool,
}

impl ReconstructionUnit {
    fn singleton(graph: &Graph, id: LayerId) -> Self {
        let name = graph.layer(id).map(|l| l.name.as_str()).unwrap_or("");
        Self {
            label: if name.is_empty() {
                format!("layer{id}")
            } else {
                String::from(name)
            },
            members: vec![id],
            output: id,
            bridge: false,
        }
    }

    fn from_group(g: &BridgeBlockGroup) -> Self {
        Self {
            label: g.label.clone(),
            members: g.members.clone(),
            output: g.output,
            bridge: true,
        }
    }

    /// Declared sites of all members: weight sites first, then activation
    /// sites, each in member order.
    pub fn sites(&self, graph: &Graph) -> Vec<SiteId> {
        let all: Vec<SiteId> = self
            .members
            .iter()
            .flat_map(|&m| graph.sites_of(m))
            .collect();
        let (mut weights, acts): (Vec<_>, Vec<_>) =
            all.into_iter().partition(|s| s.kind.is_weight());
        weights.extend(acts);
        weights
    }

    /// Producers read by members that are not themselves members. `None`
    /// stands for the graph input.
    pub fn external_inputs(&self, graph: &Graph) -> Vec<Option<LayerId>> {
        let mut out = Vec::new();
        for &m in &self.members {
            let layer = match graph.layer(m) {
                Ok(l) => l,
                Err(_) => continue,
            };
            if layer.inputs.is_empty() && !out.contains(&None) {
                out.push(None);
            }
            for p in &layer.inputs {
                if !self.members.contains(p) && !out.contains(&Some(*p)) {
                    out.push(Some(*p));
                }
            }
        }
        out
    }
}

/// Every quantizable layer mapped to exactly one unit, in topological order.
/// Bridge blocks are always units, even if some members carry no sites.
pub fn reconstruction_units(graph: &Graph, groups: &[BridgeBlockGroup]) -> Vec<ReconstructionUnit> {
    let mut member_of: BTreeMap<LayerId, usize> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        for &m in &g.members {
            member_of.insert(m, gi);
        }
    }
    let mut units = Vec::new();
    for id in graph.layer_ids() {
        match member_of.get(&id) {
            Some(&gi) if groups[gi].members[0] == id => {
                units.push(ReconstructionUnit::from_group(&groups[gi]))
            }
            Some(_) => {}
            None if !graph.sites_of(id).is_empty() => {
                units.push(ReconstructionUnit::singleton(graph, id))
            }
            None => {}
        }
    }
    units
}

/// The unit a layer is reconstructed in.
pub fn reconstruction_unit_of(
    graph: &Graph,
    id: LayerId,
    groups: &[BridgeBlockGroup],
) -> Result<ReconstructionUnit> {
    graph.layer(id)?;
    Ok(groups
        .iter()
        .find(|g| g.members.contains(&id))
        .map(ReconstructionUnit::from_group)
        .unwrap_or_else(|| ReconstructionUnit::singleton(graph, id)))
}

/// Layers whose output gradients the calibration backward pass must keep.
pub fn watch_set(units: &[ReconstructionUnit]) -> BTreeSet<LayerId> {
    units.iter().map(|u| u.output).collect()
}

/// Advisory only: proposes bridge blocks for the convolution chains right
/// before a feature-map-to-token reshape and right after a token-to-feature-map
/// reshape (at most two convolutions each). Architectures differ, so results
/// should be reviewed before they go into a manifest.
pub fn suggest_bridge_annotations(graph: &Graph) -> Vec<BridgeAnnotation> {
    let is_conv = |id: LayerId| {
        graph
            .layer(id)
            .map(|l| matches!(l.kind(), LayerKind::Conv2d | LayerKind::DepthwiseConv2d))
            .unwrap_or(false)
    };
    let sole = |v: Vec<LayerId>| if v.len() == 1 { Some(v[0]) } else { None };
    let mut out = Vec::new();
    for layer in graph.layers() {
        match layer.op {
            LayerOp::Reshape(ReshapeKind::ToTokens) => {
                let mut chain = Vec::new();
                let mut cur = layer.inputs.first().copied();
                while let Some(id) = cur {
                    if chain.len() == 2 || !is_conv(id) || graph.consumers(id).len() != 1 {
                        break;
                    }
                    chain.push(id);
                    cur = graph.layer(id).ok().and_then(|l| {
                        if l.inputs.len() == 1 {
                            Some(l.inputs[0])
                        } else {
                            None
                        }
                    });
                }
                chain.reverse();
                if !chain.is_empty() {
                    out.push(BridgeAnnotation {
                        label: format!("local_to_global@{}", layer.id),
                        layer_ids: chain,
                    });
                }
            }
            LayerOp::Reshape(ReshapeKind::ToSpatial { .. }) => {
                let mut chain = Vec::new();
                let mut cur = sole(graph.consumers(layer.id));
                while let Some(id) = cur {
                    if chain.len() == 2 || !is_conv(id) {
                        break;
                    }
                    chain.push(id);
                    cur = sole(graph.consumers(id));
                }
                if !chain.is_empty() {
                    out.push(BridgeAnnotation {
                        label: format!("global_to_local@{}", layer.id),
                        layer_ids: chain,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv, LayerSpec, QuantMode};
    use crate::tensor::{Activation, Tensor};

    fn conv(c: usize) -> LayerOp {
        LayerOp::Conv2d(Conv {
            weight: Tensor::full(&[c, c, 1, 1], 0.1),
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
            act: None,
        })
    }

    /// conv0 -> conv1 -> conv2 -> relu3 -> tokens4, plus conv5 branching off conv0.
    fn chain_graph() -> Graph {
        Graph::new(
            vec![
                LayerSpec::new(0, "c0", conv(2), &[]),
                LayerSpec::new(1, "c1", conv(2), &[0]),
                LayerSpec::new(2, "c2", conv(2), &[1]),
                LayerSpec::new(3, "act", LayerOp::Activation(Activation::Relu), &[2]),
                LayerSpec::new(4, "tok", LayerOp::Reshape(ReshapeKind::ToTokens), &[3]),
            ],
            vec![2, 2, 2],
            LayerId(4),
            QuantMode::Partial,
        )
        .unwrap()
    }

    #[test]
    fn empty_annotations_give_singletons() {
        let g = chain_graph();
        let groups = resolve_bridge_blocks(&g, &[]).unwrap();
        let units = reconstruction_units(&g, &groups);
        assert_eq!(units.len(), 3);
        assert!(units.iter().all(|u| u.members.len() == 1 && !u.bridge));
    }

    #[test]
    fn chain_group_resolves_and_maps_members() {
        let g = chain_graph();
        let groups = resolve_bridge_blocks(&g, &[BridgeAnnotation::new("bb", &[2, 1, 0])]).unwrap();
        assert_eq!(groups[0].members, vec![LayerId(0), LayerId(1), LayerId(2)]);
        assert_eq!(groups[0].output, LayerId(2));
        let u = reconstruction_unit_of(&g, LayerId(1), &groups).unwrap();
        assert_eq!(u.output, LayerId(2));
        assert!(u.bridge);
        let solo = reconstruction_unit_of(&g, LayerId(3), &groups).unwrap();
        assert_eq!(solo.members, vec![LayerId(3)]);
        assert!(reconstruction_unit_of(&g, LayerId(42), &groups).is_err());
    }

    #[test]
    fn rejects_gaps_overlap_and_unknown() {
        let g = chain_graph();
        assert!(resolve_bridge_blocks(&g, &[BridgeAnnotation::new("gap", &[0, 2])]).is_err());
        assert!(resolve_bridge_blocks(
            &g,
            &[
                BridgeAnnotation::new("a", &[0, 1]),
                BridgeAnnotation::new("b", &[1, 2])
            ]
        )
        .is_err());
        assert!(resolve_bridge_blocks(&g, &[BridgeAnnotation::new("x", &[9])]).is_err());
    }

    #[test]
    fn suggestion_finds_conv_chain_before_tokens() {
        let g = Graph::new(
            vec![
                LayerSpec::new(0, "c0", conv(2), &[]),
                LayerSpec::new(1, "c1", conv(2), &[0]),
                LayerSpec::new(2, "tok", LayerOp::Reshape(ReshapeKind::ToTokens), &[1]),
            ],
            vec![2, 2, 2],
            LayerId(2),
            QuantMode::Partial,
        )
        .unwrap();
        let s = suggest_bridge_annotations(&g);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].layer_ids, vec![LayerId(0), LayerId(1)]);
        assert!(resolve_bridge_blocks(&g, &s).is_ok());
    }
}
