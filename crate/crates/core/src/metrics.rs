//! Full-precision versus quantized comparison on an evaluation set.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{forward_fp, forward_quant, Graph, QConfig};
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub fp_top1: f64,
    pub quant_top1: f64,
    /// Fraction of samples where the quantized argmax equals the FP argmax.
    pub agreement: f64,
    /// Mean squared logit difference per element.
    pub logit_mse: f64,
}

/// FP and quantized logits for `x`, computed in chunks.
pub fn logits(graph: &Graph, qconfig: &QConfig, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyTensor);
    }
    let none = BTreeSet::new();
    let (mut fp, mut q) = (Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let part = x.slice_batch(start, len)?;
        fp.push(forward_fp(graph, &part, &none)?.logits);
        q.push(forward_quant(graph, &part, qconfig, &none)?.logits);
        start += len;
    }
    Ok((Tensor::concat_batch(&fp)?, Tensor::concat_batch(&q)?))
}

pub fn evaluate(
    graph: &Graph,
    qconfig: &QConfig,
    x: &Tensor,
    labels: &[usize],
) -> Result<EvalMetrics> {
    let (fp, q) = logits(graph, qconfig, x)?;
    let (pf, pq) = (fp.argmax_rows()?, q.argmax_rows()?);
    if labels.len() != pf.len() {
        return Err(Error::ChannelMismatch {
            expected: pf.len(),
            found: labels.len(),
        });
    }
    let n = pf.len() as f64;
    let hits = |p: &[usize]| p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n;
    let agree = pf.iter().zip(&pq).filter(|(a, b)| a == b).count() as f64 / n;
    let mse = fp
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / fp.len() as f64;
    Ok(EvalMetrics {
        samples: pf.len(),
        fp_top1: hits(&pf),
        quant_top1: hits(&pq),
        agreement: agree,
        logit_mse: mse,
    })
}
