//! Calibration: two caching passes (full-precision outputs, then output
//! gradients under a default min-max quantization) followed by a per-unit
//! search over scale, granularity and scheme that minimizes the
//! squared-gradient weighted reconstruction error
//! `sum_i G_i^2 (O_hat_i - O_i)^2`.

mod cache;
mod search;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::quant::{Granularity, Scheme};
use crate::tensor::Tensor;

pub use cache::{
    default_qconfig, minmax_qconfig, pass1_cache_fp, pass2_cache_gradients, CalibCache,
};
pub use search::{
    assemble, calibrate, calibrate_ablation, prepare, search_unit, Ablation, Calibration, Prepared,
    TraceRow, UnitDecision, UnitEvaluator,
};

/// Candidate-grid parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpace {
    pub alpha: f32,
    pub beta: f32,
    pub candidates: usize,
    /// Alternating weight/activation rounds.
    pub iterations: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.2,
            candidates: 100,
            iterations: 3,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha < self.beta) && self.candidates > 1 {
            return Err(Error::InvalidParams(format!(
                "alpha ({}) must be below beta ({})",
                self.alpha, self.beta
            )));
        }
        if self.alpha < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidParams(
                "alpha must be >= 0 and beta finite".into(),
            ));
        }
        if self.candidates < 1 || self.iterations < 1 {
            return Err(Error::InvalidParams(
                "need at least one candidate and one iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Granularity without the channel axis, which depends on the site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GranularityChoice {
    PerLayer,
    PerChannel,
}

impl GranularityChoice {
    pub fn resolve(self, axis: usize) -> Granularity {
        match self {
            GranularityChoice::PerLayer => Granularity::PerLayer,
            GranularityChoice::PerChannel => Granularity::PerChannel { axis },
        }
    }

    pub fn of(g: Granularity) -> Self {
        match g {
            Granularity::PerLayer => GranularityChoice::PerLayer,
            Granularity::PerChannel { .. } => GranularityChoice::PerChannel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GranularityChoice::PerLayer => "per_layer",
            GranularityChoice::PerChannel => "per_channel",
        }
    }
}

/// Reconstruction metric driving the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    /// Squared-gradient (diagonal Hessian proxy) weighted squared error.
    #[default]
    Hessian,
    /// Plain squared error.
    Mse,
    /// One minus per-sample cosine similarity.
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Hessian => "hessian",
            Metric::Mse => "mse",
            Metric::Cosine => "cosine",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "hessian" => Some(Metric::Hessian),
            "mse" => Some(Metric::Mse),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }
}

/// Which of scale, granularity and scheme are searched. The flags form a
/// chain: granularity search needs scale search, scheme search needs
/// granularity search. With everything off the result is the min-max
/// per-layer asymmetric baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub bits: u8,
    pub scale_search: bool,
    pub granularity_search: bool,
    pub scheme_search: bool,
    pub metric: Metric,
    pub trace: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            bits: 8,
            scale_search: true,
            granularity_search: true,
            scheme_search: true,
            metric: Metric::Hessian,
            trace: false,
        }
    }
}

/// The granularity/scheme pair every site falls back to when it is not
/// searched.
pub const DEFAULT_CHOICE: (GranularityChoice, Scheme) =
    (GranularityChoice::PerLayer, Scheme::Asymmetric);

impl SearchOptions {
    pub fn baseline(bits: u8) -> Self {
        Self {
            bits,
            scale_search: false,
            granularity_search: false,
            scheme_search: false,
            ..Self::default()
        }
    }

    pub fn scale_only(bits: u8) -> Self {
        Self {
            bits,
            granularity_search: false,
            scheme_search: false,
            ..Self::default()
        }
    }

    pub fn with_granularity(bits: u8) -> Self {
        Self {
            bits,
            scheme_search: false,
            ..Self::default()
        }
    }

    pub fn full(bits: u8) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.granularity_search && !self.scale_search {
            return Err(Error::InvalidParams(
                "granularity search requires scale search".into(),
            ));
        }
        if self.scheme_search && !self.granularity_search {
            return Err(Error::InvalidParams(
                "scheme search requires granularity search".into(),
            ));
        }
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidParams(format!(
                "calibration bit-width {} outside [2, 8]",
                self.bits
            )));
        }
        Ok(())
    }

    /// Granularity/scheme combinations explored, in tie-break order
    /// (per-layer before per-channel, symmetric before asymmetric).
    pub fn combos(&self) -> Vec<(GranularityChoice, Scheme)> {
        use GranularityChoice::*;
        use Scheme::*;
        match (
            self.scale_search,
            self.granularity_search,
            self.scheme_search,
        ) {
            (false, _, _) => Vec::new(),
            (true, false, _) => alloc::vec![DEFAULT_CHOICE],
            (true, true, false) => alloc::vec![(PerLayer, Asymmetric), (PerChannel, Asymmetric)],
            (true, true, true) => alloc::vec![
                (PerLayer, Symmetric),
                (PerLayer, Asymmetric),
                (PerChannel, Symmetric),
                (PerChannel, Asymmetric),
            ],
        }
    }
}

/// `sum_i G_i^2 * dO_i^2`, the diagonal-Hessian quadratic form.
pub fn objective(delta: &Tensor, grad: &Tensor) -> Result<f64> {
    if delta.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "objective",
            lhs: delta.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    Ok(delta
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&d, &g)| {
            let (d, g) = (d as f64, g as f64);
            g * g * d * d
        })
        .sum())
}

/// Evaluates `metric` between a quantized and a reference output, averaged
/// over the leading (batch) dimension.
pub fn reconstruction_error(
    metric: Metric,
    quantized: &Tensor,
    reference: &Tensor,
    grad: &Tensor,
) -> Result<f64> {
    if quantized.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_error",
            lhs: quantized.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    let batch = quantized.shape().first().copied().unwrap_or(1).max(1);
    let per = quantized.len() / batch;
    let (q, r) = (quantized.data(), reference.data());
    let total: f64 = match metric {
        Metric::Hessian => {
            if grad.shape() != reference.shape() {
                return Err(Error::ShapeMismatch {
                    op: "reconstruction_error",
                    lhs: reference.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            q.iter()
                .zip(r)
                .zip(grad.data())
                .map(|((&a, &b), &g)| {
                    let d = a as f64 - b as f64;
                    let g = g as f64;
                    g * g * d * d
                })
                .sum()
        }
        Metric::Mse => q
            .iter()
            .zip(r)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum(),
        Metric::Cosine => (0..batch)
            .map(|i| {
                let (qa, ra) = (&q[i * per..(i + 1) * per], &r[i * per..(i + 1) * per]);
                let dot: f64 = qa.iter().zip(ra).map(|(&a, &b)| a as f64 * b as f64).sum();
                let nq: f64 = qa.iter().map(|&a| (a as f64) * (a as f64)).sum();
                let nr: f64 = ra.iter().map(|&b| (b as f64) * (b as f64)).sum();
                let denom = libm::sqrt(nq * nr);
                if denom == 0.0 {
                    if nq == nr {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    1.0 - dot / denom
                }
            })
            .sum(),
    };
    Ok(total / batch as f64)
}

fn channel_bases(
    t: &Tensor,
    granularity: Granularity,
    scheme: Scheme,
    bits: u8,
) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let ranges = match granularity {
        Granularity::PerLayer => alloc::vec![t.min_max()],
        Granularity::PerChannel { axis } => t.channel_min_max(axis)?,
    };
    Ok(ranges
        .into_iter()
        .map(|(lo, hi)| match scheme {
            Scheme::Symmetric => (lo.abs().max(hi.abs())) as f64 / (1u64 << (bits - 1)) as f64,
            Scheme::Asymmetric => (hi as f64 - lo as f64) / (1u64 << bits) as f64,
        })
        .collect())
}

fn spread(bases: &[f64], space: &SearchSpace) -> Vec<Vec<f32>> {
    let n = space.candidates;
    (0..n)
        .map(|j| {
            let frac = if n == 1 {
                space.alpha as f64
            } else {
                space.alpha as f64
                    + (space.beta as f64 - space.alpha as f64) * j as f64 / (n - 1) as f64
            };
            bases.iter().map(|b| (frac * b) as f32).collect()
        })
        .collect()
}

/// Scale candidates: `n` points spaced linearly over
/// `[alpha, beta] * max|t| / 2^(k-1)`. Entry `j` holds candidate `j` for
/// every channel (one value for per-layer granularity). Zero candidates are
/// floored to the minimum scale when turned into parameters.
pub fn generate_candidates(
    t: &Tensor,
    bits: u8,
    space: &SearchSpace,
    granularity: Granularity,
) -> Result<Vec<Vec<f32>>> {
    Ok(spread(
        &channel_bases(t, granularity, Scheme::Symmetric, bits)?,
        space,
    ))
}

/// Scheme-aware candidates. Symmetric candidates are those of
/// [`generate_candidates`]; asymmetric ones span
/// `[alpha, beta] * (max - min) / 2^k`, the analogous range for a grid that
/// covers `[min, max]`.
pub fn generate_candidates_for(
    t: &Tensor,
    bits: u8,
    space: &SearchSpace,
    granularity: Granularity,
    scheme: Scheme,
) -> Result<Vec<Vec<f32>>> {
    Ok(spread(&channel_bases(t, granularity, scheme, bits)?, space))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_hand_case() {
        let d = Tensor::vector(alloc::vec![1.0, 2.0]).unwrap();
        let g = Tensor::vector(alloc::vec![3.0, 4.0]).unwrap();
        assert_eq!(objective(&d, &g).unwrap(), 73.0);
        assert_eq!(objective(&Tensor::zeros(&[2]), &g).unwrap(), 0.0);
        assert!(objective(&Tensor::zeros(&[3]), &g).is_err());
    }

    #[test]
    fn candidates_follow_formula() {
        let t = Tensor::vector(alloc::vec![-2.4, 1.0]).unwrap();
        let space = SearchSpace {
            alpha: 0.0,
            beta: 1.2,
            candidates: 3,
            iterations: 1,
        };
        let c = generate_candidates(&t, 8, &space, Granularity::PerLayer).unwrap();
        let flat: Vec<f32> = c.iter().map(|v| v[0]).collect();
        assert_eq!(flat, alloc::vec![0.0, 0.01125, 0.0225]);
    }

    #[test]
    fn equal_bounds_give_equal_candidates() {
        let t = Tensor::vector(alloc::vec![0.3, -0.9]).unwrap();
        let space = SearchSpace {
            alpha: 0.8,
            beta: 0.8,
            candidates: 4,
            iterations: 1,
        };
        let c = generate_candidates(&t, 6, &space, Granularity::PerLayer).unwrap();
        assert!(c.iter().all(|v| v == &c[0]));
    }

    #[test]
    fn option_chain_validation() {
        let mut o = SearchOptions::full(8);
        assert!(o.validate().is_ok());
        o.granularity_search = false;
        assert!(o.validate().is_err());
        assert_eq!(SearchOptions::baseline(8).combos().len(), 0);
        assert_eq!(
            SearchOptions::scale_only(8).combos(),
            alloc::vec![DEFAULT_CHOICE]
        );
        assert_eq!(SearchOptions::with_granularity(6).combos().len(), 2);
        assert_eq!(SearchOptions::full(6).combos().len(), 4);
    }
}
