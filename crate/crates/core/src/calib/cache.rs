use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use super::GranularityChoice;
use crate::bridge::{watch_set, ReconstructionUnit};
use crate::error::{Error, Result};
use crate::graph::{forward_fp, observe_sites, record, Graph, LayerId, QConfig, SiteId};
use crate::quant::{fit_minmax, Scheme};
use crate::tensor::{cross_entropy, Tensor};

/// Read-only calibration state. Pass one fills the full-precision outputs,
/// pass two adds the output gradients; neither can be overwritten later.
#[derive(Clone, Debug)]
pub struct CalibCache {
    input: Tensor,
    fp_logits: Tensor,
    labels: Vec<usize>,
    outputs: BTreeMap<LayerId, Tensor>,
    sites: BTreeMap<SiteId, Tensor>,
    grads: BTreeMap<LayerId, Tensor>,
    loss: Option<f32>,
}

impl CalibCache {
    pub fn batch(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn fp_logits(&self) -> &Tensor {
        &self.fp_logits
    }

    /// Pseudo-labels: the argmax of the full-precision logits.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Full-precision output of `id`.
    pub fn output(&self, id: LayerId) -> Result<&Tensor> {
        self.outputs
            .get(&id)
            .ok_or_else(|| Error::MissingCache(format!("no full-precision output for layer {id}")))
    }

    /// Full-precision tensor entering `site`.
    pub fn site_tensor(&self, site: &SiteId) -> Result<&Tensor> {
        self.sites
            .get(site)
            .ok_or_else(|| Error::MissingCache(format!("no observation for {site}")))
    }

    pub fn site_tensors(&self) -> &BTreeMap<SiteId, Tensor> {
        &self.sites
    }

    /// `dL/dO` at the output of `id` under the default quantization.
    pub fn grad(&self, id: LayerId) -> Result<&Tensor> {
        self.grads.get(&id).ok_or_else(|| {
            Error::MissingCache(format!("no gradient for layer {id}; run pass two first"))
        })
    }

    pub fn has_gradients(&self) -> bool {
        self.loss.is_some()
    }

    /// Summed cross-entropy of the default-quantized model against the
    /// pseudo-labels.
    pub fn loss(&self) -> Option<f32> {
        self.loss
    }
}

/// Pass one: full-precision outputs of every layer and the tensors entering
/// every declared site.
pub fn pass1_cache_fp(
    graph: &Graph,
    batch: &Tensor,
    units: &[ReconstructionUnit],
) -> Result<CalibCache> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyTensor);
    }
    let mut watch: BTreeSet<LayerId> = graph.layer_ids().collect();
    watch.extend(watch_set(units));
    let fp = forward_fp(graph, batch, &watch)?;
    let sites = observe_sites(graph, batch, &QConfig::new())?;
    let labels = fp.logits.argmax_rows()?;
    Ok(CalibCache {
        input: batch.clone(),
        fp_logits: fp.logits,
        labels,
        outputs: fp.outputs,
        sites,
        grads: BTreeMap::new(),
        loss: None,
    })
}

/// Pass two: gradients of the cross-entropy against the full-precision
/// pseudo-labels, taken at each unit output while `default` is applied.
/// Rounding is treated as identity in the backward pass.
pub fn pass2_cache_gradients(
    graph: &Graph,
    batch: &Tensor,
    units: &[ReconstructionUnit],
    cache: CalibCache,
    default: &QConfig,
) -> Result<CalibCache> {
    if cache.has_gradients() {
        return Err(Error::MissingCache("gradients are already cached".into()));
    }
    if batch != &cache.input {
        return Err(Error::MissingCache(
            "pass two must run on the batch cached by pass one".into(),
        ));
    }
    let rec = record(graph, batch, default)?;
    let ce = cross_entropy(rec.tape.value(rec.output), &cache.labels)?;
    let watch: Vec<_> = watch_set(units)
        .into_iter()
        .map(|id| {
            rec.layer_vars
                .get(&id)
                .copied()
                .ok_or(Error::UnknownLayer(id))
        })
        .collect::<Result<_>>()?;
    let mut grads = rec.tape.backward(rec.output, &ce.grad, &watch)?;
    let mut by_layer = BTreeMap::new();
    for id in watch_set(units) {
        let v = rec.layer_vars[&id];
        let g = grads
            .remove(&v)
            .unwrap_or_else(|| Tensor::zeros(rec.tape.value(v).shape()));
        by_layer.insert(id, g);
    }
    Ok(CalibCache {
        grads: by_layer,
        loss: Some(ce.loss),
        ..cache
    })
}

/// Min-max parameters at every declared site with one granularity/scheme.
/// Weights use their output-channel axis; activations their channel axis.
pub fn minmax_qconfig(
    graph: &Graph,
    cache: &CalibCache,
    bits: u8,
    granularity: GranularityChoice,
    scheme: Scheme,
) -> Result<QConfig> {
    graph
        .quant_sites()
        .map(|site| {
            let t = cache.site_tensor(site)?;
            let g = granularity.resolve(site.kind.channel_axis(t.rank()));
            Ok((*site, fit_minmax(t, bits, scheme, g)?))
        })
        .collect()
}

/// The configuration gradients are computed under: per-layer asymmetric
/// min-max at every site.
pub fn default_qconfig(graph: &Graph, cache: &CalibCache, bits: u8) -> Result<QConfig> {
    let (g, s) = super::DEFAULT_CHOICE;
    minmax_qconfig(graph, cache, bits, g, s)
}
