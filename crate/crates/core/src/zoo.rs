//! Deterministic synthetic fixtures: small hybrid conv + transformer models
//! with a real bridge block, plus Gaussian-prototype classification data.
//!
//! Every model is `stem conv -> batch norm -> SiLU -> bridge (kxk conv with
//! fused activation, 1x1 conv) -> tokens -> transformer blocks -> norm ->
//! pool -> linear head`. Batch-norm statistics come from a training split and
//! the head is a ridge least-squares fit on pooled training features.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::bridge::BridgeAnnotation;
use crate::error::{Error, Result};
use crate::graph::{
    forward_fp, Conv, Graph, LayerId, LayerOp, LayerSpec, Mhsa, QuantMode, ReshapeKind,
};
use crate::linalg::ridge;
use crate::rng::Rng;
use crate::tensor::{channel_axis, Activation, Tensor};

/// Normalization used inside the transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Group { groups: usize },
    Batch,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Layer => "layer",
            NormKind::Group { .. } => "group",
            NormKind::Batch => "batch",
        }
    }
}

/// Everything that determines a fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub name: String,
    pub seed: u64,
    pub in_channels: usize,
    pub image: usize,
    /// Channels of the convolutional stem.
    pub channels: usize,
    /// Token width after the bridge.
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub norm: NormKind,
    pub classes: usize,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    /// Standard deviation of the per-pixel noise around class prototypes.
    pub noise: f32,
    /// Push half of the bridge's kxk channels strictly positive (ReLU after
    /// a large positive bias) so their per-channel minima exceed zero.
    pub overflow_bridge: bool,
    pub mode: QuantMode,
}

/// Names accepted by [`FixtureSpec::named`].
pub const FIXTURE_NAMES: [&str; 5] = [
    "tiny-mvit-ln",
    "tiny-mvit-gn",
    "tiny-mvit-bn",
    "overflow-bridge",
    "wide-mvit-ln",
];

impl FixtureSpec {
    fn base(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            in_channels: 3,
            image: 8,
            channels: 16,
            dim: 16,
            heads: 2,
            depth: 1,
            norm: NormKind::Layer,
            classes: 4,
            train_samples: 512,
            calib_samples: 32,
            eval_samples: 1024,
            noise: 0.25,
            overflow_bridge: false,
            mode: QuantMode::Partial,
        }
    }

    pub fn named(name: &str, seed: u64) -> Result<Self> {
        let mut s = Self::base(name, seed);
        match name {
            "tiny-mvit-ln" => {}
            "tiny-mvit-gn" => s.norm = NormKind::Group { groups: 1 },
            "tiny-mvit-bn" => s.norm = NormKind::Batch,
            "overflow-bridge" => s.overflow_bridge = true,
            "wide-mvit-ln" => {
                s.channels *= 2;
                s.dim *= 2;
            }
            _ => return Err(Error::InvalidSpec(format!("unknown fixture '{name}'"))),
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("fixture '{}': {m}", self.name)));
        if self.in_channels == 0 || self.channels == 0 || self.dim == 0 || self.classes < 2 {
            return bad("channel, width and class counts must be positive (at least two classes)");
        }
        if self.image < 2 || self.image % 2 != 0 {
            return bad("image side must be even and at least 2");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if let NormKind::Group { groups } = self.norm {
            if groups == 0 || self.dim % groups != 0 {
                return bad("dim must be a multiple of the group count");
            }
        }
        if self.train_samples < 2 || self.calib_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// A built fixture.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub graph: Graph,
    pub calib: Tensor,
    pub eval: Tensor,
    /// Ground-truth classes of `eval`.
    pub labels: Vec<usize>,
    pub bridges: Vec<BridgeAnnotation>,
}

const QK_GAIN: f32 = 3.0;
/// Log-normal spread of norm gains; channel ranges differ by up to ~10x.
const GAMMA_SPREAD: f64 = 0.75;
/// Every eighth channel of a norm output is an outlier.
const OUTLIER_GAIN: f32 = 16.0;
const OVERFLOW_BIAS: f32 = 4.0;
const OVERFLOW_GAIN: f32 = 0.2;

struct Data {
    x: Tensor,
    y: Vec<usize>,
}

fn sample(
    protos: &[Vec<f32>],
    shape: &[usize],
    n: usize,
    noise: f32,
    rng: &mut Rng,
) -> Result<Data> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(protos.len());
        y.push(k);
        data.extend(
            protos[k]
                .iter()
                .map(|&p| p + (rng.normal() * noise as f64) as f32),
        );
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Ok(Data {
        x: Tensor::new(full, data)?,
        y,
    })
}

/// Per-channel mean and (biased) variance.
fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (outer, c, inner) = x.split_at_axis(channel_axis(x.rank()))?;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        for &v in chunk {
            sum[i % c] += v as f64;
            sq[i % c] += v as f64 * v as f64;
        }
    }
    let count = (outer * inner) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let var = mean
        .iter()
        .zip(&sq)
        .map(|(m, q)| (q / count - m * m).max(0.0))
        .collect();
    Ok((mean, var))
}

fn channel_means(x: &Tensor) -> Result<Vec<f32>> {
    Ok(channel_stats(x)?.0.into_iter().map(|m| m as f32).collect())
}

struct Builder<'a> {
    spec: &'a FixtureSpec,
    rng: Rng,
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    train: &'a Tensor,
}

impl Builder<'_> {
    fn push(&mut self, name: &str, op: LayerOp, inputs: &[LayerId]) -> LayerId {
        let id = LayerId(self.layers.len() as u32 + 1);
        let inputs: Vec<u32> = inputs.iter().map(|i| i.0).collect();
        self.layers.push(LayerSpec::new(id.0, name, op, &inputs));
        id
    }

    fn weight(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            self.rng.normals(n, gain / libm::sqrt(fan_in as f64)),
        )
    }

    /// Query and key rows get a larger gain so attention is peaked rather
    /// than near uniform, as in trained models.
    fn qkv_weight(&mut self, d: usize) -> Result<Tensor> {
        let mut w = self.weight(&[3 * d, d], d, 1.0)?.into_data();
        w[..2 * d * d].iter_mut().for_each(|v| *v *= QK_GAIN);
        Tensor::new(vec![3 * d, d], w)
    }

    fn bias(&mut self, n: usize, std: f64) -> Result<Tensor> {
        Tensor::vector(self.rng.normals(n, std))
    }

    fn affine(&mut self, n: usize) -> Result<(Tensor, Tensor)> {
        let g = self
            .rng
            .normals(n, GAMMA_SPREAD)
            .into_iter()
            .enumerate()
            .map(|(i, v)| libm::expf(v) * if i % 8 == 3 { OUTLIER_GAIN } else { 1.0 })
            .collect();
        Ok((Tensor::vector(g)?, self.bias(n, 0.1)?))
    }

    /// Full-precision training-split output of `id`.
    fn probe(&self, id: LayerId) -> Result<Tensor> {
        let g = Graph::new(
            self.layers.clone(),
            self.input_shape.clone(),
            id,
            self.spec.mode,
        )?;
        let watch: BTreeSet<LayerId> = [id].into_iter().collect();
        let mut out = forward_fp(&g, self.train, &watch)?;
        out.outputs.remove(&id).ok_or(Error::UnknownLayer(id))
    }

    fn batch_norm(&mut self, name: &str, input: LayerId) -> Result<LayerId> {
        let (gamma, beta) = self.affine(self.channels_of(input)?)?;
        let x = self.probe(input)?;
        let (mean, var) = channel_stats(&x)?;
        Ok(self.push(
            name,
            LayerOp::BatchNorm {
                mean: Tensor::vector(mean.iter().map(|&m| m as f32).collect())?,
                var: Tensor::vector(var.iter().map(|&v| v as f32).collect())?,
                gamma: Some(gamma),
                beta: Some(beta),
                eps: 1e-5,
            },
            &[input],
        ))
    }

    fn channels_of(&self, id: LayerId) -> Result<usize> {
        let g = Graph::new(
            self.layers.clone(),
            self.input_shape.clone(),
            id,
            self.spec.mode,
        )?;
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let watch: BTreeSet<LayerId> = [id].into_iter().collect();
        let out = forward_fp(&g, &Tensor::zeros(&shape), &watch)?;
        let t = &out.outputs[&id];
        Ok(t.shape()[channel_axis(t.rank())])
    }

    fn norm(&mut self, name: &str, input: LayerId) -> Result<LayerId> {
        let d = self.spec.dim;
        match self.spec.norm {
            NormKind::Batch => self.batch_norm(name, input),
            NormKind::Layer => {
                let (gamma, beta) = self.affine(d)?;
                let op = LayerOp::LayerNorm {
                    gamma: Some(gamma),
                    beta: Some(beta),
                    eps: 1e-5,
                    normalized_rank: 1,
                };
                Ok(self.push(name, op, &[input]))
            }
            NormKind::Group { groups } => {
                let (gamma, beta) = self.affine(d)?;
                let op = LayerOp::GroupNorm {
                    groups,
                    gamma: Some(gamma),
                    beta: Some(beta),
                    eps: 1e-5,
                };
                Ok(self.push(name, op, &[input]))
            }
        }
    }

    fn linear(
        &mut self,
        name: &str,
        input: LayerId,
        out: usize,
        inp: usize,
        act: Option<Activation>,
    ) -> Result<LayerId> {
        let weight = self.weight(&[out, inp], inp, 1.0)?;
        let bias = Some(self.bias(out, 0.05)?);
        Ok(self.push(name, LayerOp::Linear { weight, bias, act }, &[input]))
    }

    fn block(&mut self, b: usize, input: LayerId) -> Result<LayerId> {
        let d = self.spec.dim;
        let n1 = self.norm(&format!("blocks.{b}.norm1"), input)?;
        let mhsa = Mhsa {
            heads: self.spec.heads,
            qkv_weight: self.qkv_weight(d)?,
            qkv_bias: Some(self.bias(3 * d, 0.05)?),
            out_weight: self.weight(&[d, d], d, 1.0)?,
            out_bias: Some(self.bias(d, 0.05)?),
        };
        let attn = self.push(&format!("blocks.{b}.attn"), LayerOp::Mhsa(mhsa), &[n1]);
        let r1 = self.push(&format!("blocks.{b}.add1"), LayerOp::Add, &[input, attn]);
        let n2 = self.norm(&format!("blocks.{b}.norm2"), r1)?;
        let fc1 = self.linear(
            &format!("blocks.{b}.fc1"),
            n2,
            2 * d,
            d,
            Some(Activation::Gelu),
        )?;
        let fc2 = self.linear(&format!("blocks.{b}.fc2"), fc1, d, 2 * d, None)?;
        Ok(self.push(&format!("blocks.{b}.add2"), LayerOp::Add, &[r1, fc2]))
    }
}

/// Builds the fixture described by `spec`. Same spec, same bits.
pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut data_rng = Rng::new(spec.seed ^ 0x5eed_da7a);
    let shape = [spec.in_channels, spec.image, spec.image];
    let per: usize = shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| data_rng.normals(per, 1.0))
        .collect();
    let train = sample(
        &protos,
        &shape,
        spec.train_samples,
        spec.noise,
        &mut data_rng,
    )?;
    let calib = sample(
        &protos,
        &shape,
        spec.calib_samples,
        spec.noise,
        &mut data_rng,
    )?;
    let eval = sample(
        &protos,
        &shape,
        spec.eval_samples,
        spec.noise,
        &mut data_rng,
    )?;

    let mut b = Builder {
        spec,
        rng: Rng::new(spec.seed),
        layers: Vec::new(),
        input_shape: shape.to_vec(),
        train: &train.x,
    };
    let (c, d) = (spec.channels, spec.dim);
    let stem = Conv {
        weight: b.weight(&[c, spec.in_channels, 3, 3], 9 * spec.in_channels, 1.0)?,
        bias: None,
        stride: 1,
        padding: 1,
        groups: 1,
        act: None,
    };
    let stem = b.push("stem.conv", LayerOp::Conv2d(stem), &[]);
    let bn = b.batch_norm("stem.bn", stem)?;
    let act = b.push("stem.act", LayerOp::Activation(Activation::Silu), &[bn]);

    let mut kxk_bias = b.bias(c, 0.05)?;
    let mut kxk_weight = b.weight(&[c, c, 3, 3], 9 * c, 1.0)?;
    if spec.overflow_bridge {
        // Even channels get a narrow range well above zero.
        let lifted: Vec<f32> = kxk_bias
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 2 == 0 { v + OVERFLOW_BIAS } else { v })
            .collect();
        kxk_bias = Tensor::vector(lifted)?;
        let per = 9 * c;
        let mut w = kxk_weight.into_data();
        for (i, v) in w.iter_mut().enumerate() {
            if (i / per) % 2 == 0 {
                *v *= OVERFLOW_GAIN;
            }
        }
        kxk_weight = Tensor::new(vec![c, c, 3, 3], w)?;
    }
    let kxk = Conv {
        weight: kxk_weight,
        bias: Some(kxk_bias),
        stride: 2,
        padding: 1,
        groups: 1,
        act: Some(if spec.overflow_bridge {
            Activation::Relu
        } else {
            Activation::Silu
        }),
    };
    let kxk = b.push("bridge.convkxk", LayerOp::Conv2d(kxk), &[act]);
    // Folded batch norm: the 1x1 output is centered on the training split.
    let pw_weight = b.weight(&[d, c, 1, 1], c, 1.0)?;
    let mean = channel_means(&b.probe(kxk)?)?;
    let shift = b.bias(d, 0.05)?;
    let pw_bias = Tensor::from_fn(&[d], |o| {
        let w = &pw_weight.data()[o * c..(o + 1) * c];
        shift.data()[o] - w.iter().zip(&mean).map(|(w, m)| w * m).sum::<f32>()
    });
    let pw = Conv {
        weight: pw_weight,
        bias: Some(pw_bias),
        stride: 1,
        padding: 0,
        groups: 1,
        act: None,
    };
    let pw = b.push("bridge.conv1x1", LayerOp::Conv2d(pw), &[kxk]);
    let mut x = b.push(
        "bridge.to_tokens",
        LayerOp::Reshape(ReshapeKind::ToTokens),
        &[pw],
    );
    for i in 0..spec.depth {
        x = b.block(i, x)?;
    }
    let fin = b.norm("norm", x)?;
    let pool = b.push("pool", LayerOp::Pool, &[fin]);

    let feats = b.probe(pool)?;
    let n = spec.train_samples;
    let cols = d + 1;
    let mut a = Vec::with_capacity(n * cols);
    for row in feats.data().chunks(d) {
        a.extend(row.iter().map(|&v| v as f64));
        a.push(1.0);
    }
    let k = spec.classes;
    let mut targets = vec![0.0; n * k];
    for (i, &y) in train.y.iter().enumerate() {
        targets[i * k + y] = 1.0;
    }
    let sol = ridge(&a, &targets, n, cols, k, 1e-4 * n as f64)?;
    let weight = Tensor::from_fn(&[k, d], |i| sol[(i % d) * k + i / d] as f32);
    let bias = Tensor::from_fn(&[k], |o| sol[d * k + o] as f32);
    let head = b.push(
        "head",
        LayerOp::Linear {
            weight,
            bias: Some(bias),
            act: None,
        },
        &[pool],
    );
    let graph = Graph::new(b.layers, shape.to_vec(), head, spec.mode)?;
    Ok(Fixture {
        spec: spec.clone(),
        graph,
        calib: calib.x,
        eval: eval.x,
        labels: eval.y,
        bridges: vec![BridgeAnnotation::new("bridge", &[kxk.0, pw.0])],
    })
}

/// Layer-norm, group-norm and batch-norm-only siblings built from the same
/// seed; they share every weight and differ only in the block norms.
pub fn build_norm_variants(seed: u64) -> Result<Vec<Fixture>> {
    ["tiny-mvit-ln", "tiny-mvit-gn", "tiny-mvit-bn"]
        .iter()
        .map(|n| build_fixture(&FixtureSpec::named(n, seed)?))
        .collect()
}

/// Fraction of rows whose argmax matches `labels`.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::ChannelMismatch {
            expected: labels.len(),
            found: pred.len(),
        });
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
}
