//! Uniform affine quantization: `q = clip(round(x / scale + zp), q_min, q_max)`
//! on a signed grid `[-2^(k-1), 2^(k-1) - 1]`.
//!
//! Zero points are computed as `q_min - round(r_min / scale)`. When a
//! channel's minimum is strictly positive the unrounded zero point falls below
//! `q_min` and has to be clamped; the pre-clamp value is kept on
//! [`QuantParams`] so diagnostics can tell the two apart.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible scale; degenerate (constant) ranges are floored here.
pub const MIN_SCALE: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Symmetric => "symmetric",
            Scheme::Asymmetric => "asymmetric",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "symmetric" => Some(Scheme::Symmetric),
            "asymmetric" => Some(Scheme::Asymmetric),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    PerLayer,
    PerChannel { axis: usize },
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::PerLayer => "per_layer",
            Granularity::PerChannel { .. } => "per_channel",
        }
    }

    pub fn is_per_channel(self) -> bool {
        matches!(self, Granularity::PerChannel { .. })
    }
}

/// Integer grid bounds for `bits`.
pub fn grid(bits: u8) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidParams(format!(
            "bit-width {bits} outside [2, 32]"
        )));
    }
    Ok(())
}

/// Round half away from zero.
fn round(x: f64) -> f64 {
    libm::round(x)
}

/// `clamp(round(x), lo, hi)` for integral `lo <= hi`, branch-free.
/// Adding and removing 1.5 * 2^52 rounds `|x|` to nearest-even exactly; ties
/// are then pushed away from zero. NaN maps to `lo`.
#[inline(always)]
fn round_clamp(x: f64, lo: f64, hi: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let x = x.max(lo - 1.0).min(hi + 1.0);
    let a = x.abs();
    let r = (a + MAGIC) - MAGIC;
    let r = if a - r == 0.5 { r + 1.0 } else { r };
    r.copysign(x).max(lo).min(hi)
}

/// Quantization parameters for one tensor site.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
    scale: Vec<f32>,
    zero_point: Vec<i64>,
    raw_zero_point: Vec<i64>,
}

impl QuantParams {
    /// Assembles parameters from stored values, checking every invariant.
    pub fn from_parts(
        bits: u8,
        scheme: Scheme,
        granularity: Granularity,
        scale: Vec<f32>,
        zero_point: Vec<i64>,
        raw_zero_point: Vec<i64>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let n = scale.len();
        if n == 0 || zero_point.len() != n || raw_zero_point.len() != n {
            return Err(Error::InvalidParams(format!(
                "scale/zero-point lengths disagree ({n}, {}, {})",
                zero_point.len(),
                raw_zero_point.len()
            )));
        }
        if granularity == Granularity::PerLayer && n != 1 {
            return Err(Error::InvalidParams(format!(
                "per-layer parameters must hold one scale, got {n}"
            )));
        }
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParams(
                "scales must be positive and finite".into(),
            ));
        }
        let (qmin, qmax) = grid(bits);
        if zero_point.iter().any(|&z| z < qmin || z > qmax) {
            return Err(Error::InvalidParams(
                "zero-point outside the integer grid".into(),
            ));
        }
        if scheme == Scheme::Symmetric
            && (zero_point.iter().any(|&z| z != 0) || raw_zero_point.iter().any(|&z| z != 0))
        {
            return Err(Error::InvalidParams(
                "symmetric zero-point must be 0".into(),
            ));
        }
        for (&z, &r) in zero_point.iter().zip(&raw_zero_point) {
            if z != r.clamp(qmin, qmax) {
                return Err(Error::InvalidParams(format!(
                    "stored zero-point {z} is not the clamp of raw {r}"
                )));
            }
        }
        Ok(Self {
            bits,
            scheme,
            granularity,
            scale,
            zero_point,
            raw_zero_point,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn zero_point(&self) -> &[i64] {
        &self.zero_point
    }

    pub fn raw_zero_point(&self) -> &[i64] {
        &self.raw_zero_point
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Channels whose raw zero point left the grid and was clamped.
    pub fn clamped_channels(&self) -> Vec<usize> {
        self.zero_point
            .iter()
            .zip(&self.raw_zero_point)
            .enumerate()
            .filter(|(_, (z, r))| z != r)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn has_clamped_zero_point(&self) -> bool {
        self.zero_point != self.raw_zero_point
    }
}

fn ranges(t: &Tensor, granularity: Granularity) -> Result<Vec<(f32, f32)>> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    match granularity {
        Granularity::PerLayer => Ok(vec![t.min_max()]),
        Granularity::PerChannel { axis } => t.channel_min_max(axis),
    }
}

fn minmax_scale(lo: f32, hi: f32, bits: u8, scheme: Scheme) -> f32 {
    let (lo, hi) = (lo as f64, hi as f64);
    let s = match scheme {
        Scheme::Symmetric => lo.abs().max(hi.abs()) / ((1u64 << (bits - 1)) - 1) as f64,
        Scheme::Asymmetric => (hi - lo) / ((1u64 << bits) - 1) as f64,
    };
    floor_scale(s as f32)
}

pub(crate) fn floor_scale(s: f32) -> f32 {
    if s.is_finite() && s >= MIN_SCALE {
        s
    } else {
        MIN_SCALE
    }
}

fn zero_points(lo: f32, hi: f32, scale: f32, bits: u8, scheme: Scheme) -> (i64, i64) {
    match scheme {
        Scheme::Symmetric => (0, 0),
        Scheme::Asymmetric => {
            if lo == hi {
                // Degenerate channel: keep the grid centred.
                return (0, 0);
            }
            let (qmin, qmax) = grid(bits);
            let raw = qmin as f64 - round(lo as f64 / scale as f64);
            let raw = raw.clamp(i64::MIN as f64 / 2.0, i64::MAX as f64 / 2.0) as i64;
            (raw.clamp(qmin, qmax), raw)
        }
    }
}

/// Min-max calibration of one tensor.
pub fn fit_minmax(
    t: &Tensor,
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let r = ranges(t, granularity)?;
    let scales: Vec<f32> = r
        .iter()
        .map(|&(lo, hi)| minmax_scale(lo, hi, bits, scheme))
        .collect();
    build(&r, scales, bits, scheme, granularity)
}

/// Parameters for explicit per-channel (or single per-layer) scales; zero
/// points follow the min-max rule for the given scales.
pub fn fit_with_scales(
    t: &Tensor,
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
    scales: &[f32],
) -> Result<QuantParams> {
    check_bits(bits)?;
    let r = ranges(t, granularity)?;
    if scales.len() != r.len() {
        return Err(Error::ChannelMismatch {
            expected: scales.len(),
            found: r.len(),
        });
    }
    build(
        &r,
        scales.iter().map(|&s| floor_scale(s)).collect(),
        bits,
        scheme,
        granularity,
    )
}

fn build(
    r: &[(f32, f32)],
    scale: Vec<f32>,
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
) -> Result<QuantParams> {
    let (zero_point, raw_zero_point) = r
        .iter()
        .zip(&scale)
        .map(|(&(lo, hi), &s)| zero_points(lo, hi, s, bits, scheme))
        .unzip();
    QuantParams::from_parts(bits, scheme, granularity, scale, zero_point, raw_zero_point)
}

fn channel_layout(t: &Tensor, p: &QuantParams) -> Result<(usize, usize, usize)> {
    match p.granularity {
        Granularity::PerLayer => Ok((1, 1, t.len())),
        Granularity::PerChannel { axis } => {
            let (outer, channels, inner) = t.split_at_axis(axis)?;
            if channels != p.channels() {
                return Err(Error::ChannelMismatch {
                    expected: p.channels(),
                    found: channels,
                });
            }
            Ok((outer, channels, inner))
        }
    }
}

/// Integer codes `clip(round(x / scale + zp), q_min, q_max)`.
pub fn quantize(t: &Tensor, p: &QuantParams) -> Result<Vec<i64>> {
    let (outer, channels, inner) = channel_layout(t, p)?;
    let (qmin, qmax) = grid(p.bits);
    let mut out = Vec::with_capacity(t.len());
    for o in 0..outer {
        for c in 0..channels {
            let s = p.scale[c] as f64;
            let zp = p.zero_point[c] as f64;
            let base = (o * channels + c) * inner;
            for &x in &t.data()[base..base + inner] {
                let q = round_clamp(x as f64 / s + zp, qmin as f64, qmax as f64);
                out.push(q as i64);
            }
        }
    }
    Ok(out)
}

/// Fake quantization: quantize, then map back to reals as `(q - zp) * scale`.
pub fn quantize_dequantize(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let (_, channels, inner) = channel_layout(t, p)?;
    let (qmin, qmax) = (grid(p.bits).0 as f64, grid(p.bits).1 as f64);
    let scale: Vec<f64> = p.scale.iter().map(|&s| s as f64).collect();
    let zp: Vec<f64> = p.zero_point.iter().map(|&z| z as f64).collect();
    let fq =
        |x: f32, s: f64, zp: f64| ((round_clamp(x as f64 / s + zp, qmin, qmax) - zp) * s) as f32;
    let mut out = vec![0.0f32; t.len()];
    if inner == 1 {
        for (src, dst) in t.data().chunks(channels).zip(out.chunks_mut(channels)) {
            for (((d, &x), &s), &z) in dst.iter_mut().zip(src).zip(&scale).zip(&zp) {
                *d = fq(x, s, z);
            }
        }
    } else {
        for (o, (src, dst)) in t
            .data()
            .chunks(inner)
            .zip(out.chunks_mut(inner))
            .enumerate()
        {
            let (s, z) = (scale[o % channels], zp[o % channels]);
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = fq(x, s, z);
            }
        }
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

/// One channel of an overflow diagnosis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOverflow {
    pub channel: usize,
    pub r_min: f32,
    pub r_max: f32,
    /// Pre-clamp asymmetric zero point for the channel's min-max scale.
    pub raw_zero_point: i64,
    /// The rounded zero point left the grid and had to be clamped.
    pub clamped: bool,
    /// The real-valued zero point lies outside the grid, i.e. the channel
    /// range excludes 0 (`r_min > 0` or `r_max < 0`).
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverflowReport {
    pub bits: u8,
    pub axis: usize,
    pub channels: Vec<ChannelOverflow>,
}

impl OverflowReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.channels
            .iter()
            .filter(|c| c.flagged)
            .map(|c| c.channel)
            .collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.channels.iter().filter(|c| c.flagged).count()
    }

    pub fn clamped_count(&self) -> usize {
        self.channels.iter().filter(|c| c.clamped).count()
    }
}

/// Diagnoses per-channel asymmetric zero-point overflow along `axis`.
///
/// A channel is flagged when its real-valued zero point
/// `q_min - r_min / scale` leaves `[q_min, q_max]`. Since the scale is
/// positive this happens exactly when `r_min > 0`, and mirrored when
/// `r_max < 0`.
pub fn detect_zero_point_overflow(t: &Tensor, bits: u8, axis: usize) -> Result<OverflowReport> {
    check_bits(bits)?;
    let ranges = t.channel_min_max(axis)?;
    let (qmin, qmax) = grid(bits);
    let channels = ranges
        .iter()
        .enumerate()
        .map(|(c, &(lo, hi))| {
            let s = minmax_scale(lo, hi, bits, Scheme::Asymmetric);
            let (_, raw) = zero_points(lo, hi, s, bits, Scheme::Asymmetric);
            let exact = qmin as f64 - lo as f64 / s as f64;
            let flagged = if lo == hi {
                lo != 0.0
            } else {
                exact < qmin as f64 || exact > qmax as f64
            };
            ChannelOverflow {
                channel: c,
                r_min: lo,
                r_max: hi,
                raw_zero_point: raw,
                clamped: raw < qmin || raw > qmax,
                flagged,
            }
        })
        .collect();
    Ok(OverflowReport {
        bits,
        axis,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f32]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_unit_range() {
        let p = fit_minmax(
            &v(&[-1.0, 1.0]),
            8,
            Scheme::Symmetric,
            Granularity::PerLayer,
        )
        .unwrap();
        assert_eq!(p.scale(), &[1.0 / 127.0]);
        assert_eq!(p.zero_point(), &[0]);
    }

    #[test]
    fn asymmetric_zero_based_range() {
        let p = fit_minmax(
            &v(&[0.0, 2.55]),
            8,
            Scheme::Asymmetric,
            Granularity::PerLayer,
        )
        .unwrap();
        assert!((p.scale()[0] - 0.01).abs() < 1e-9);
        assert_eq!(p.raw_zero_point(), &[-128]);
        assert!(!p.has_clamped_zero_point());
    }

    #[test]
    fn positive_range_overflows_zero_point() {
        let p = fit_minmax(
            &v(&[0.6, 1.6]),
            8,
            Scheme::Asymmetric,
            Granularity::PerLayer,
        )
        .unwrap();
        // scale = 1/255, raw = -128 - round(153) = -281
        assert_eq!(p.raw_zero_point(), &[-281]);
        assert_eq!(p.zero_point(), &[-128]);
        assert!(p.has_clamped_zero_point());
    }

    #[test]
    fn fast_rounding_matches_libm() {
        let cases = [
            0.5,
            -0.5,
            1.5,
            -2.5,
            0.49999999999999994,
            -0.49999999999999994,
            127.5,
            -128.5,
            300.2,
            -1e9,
            4.4999,
        ];
        for x in cases {
            assert_eq!(
                round_clamp(x, -128.0, 127.0),
                round(x).clamp(-128.0, 127.0),
                "{x}"
            );
        }
    }

    #[test]
    fn symmetric_zero_is_exact() {
        let t = v(&[-3.0, 0.0, 2.0]);
        let p = fit_minmax(&t, 6, Scheme::Symmetric, Granularity::PerLayer).unwrap();
        assert_eq!(quantize_dequantize(&t, &p).unwrap().data()[1], 0.0);
    }

    #[test]
    fn degenerate_range_floors_scale() {
        let t = Tensor::full(&[1, 2, 3], 0.7);
        let p = fit_minmax(
            &t,
            8,
            Scheme::Asymmetric,
            Granularity::PerChannel { axis: 1 },
        )
        .unwrap();
        assert_eq!(p.scale(), &[MIN_SCALE, MIN_SCALE]);
        assert_eq!(p.zero_point(), &[0, 0]);
    }

    #[test]
    fn channel_count_mismatch() {
        let p = fit_minmax(
            &Tensor::zeros(&[2, 3]),
            8,
            Scheme::Symmetric,
            Granularity::PerChannel { axis: 1 },
        )
        .unwrap();
        assert_eq!(
            quantize_dequantize(&Tensor::zeros(&[2, 4]), &p),
            Err(Error::ChannelMismatch {
                expected: 3,
                found: 4
            })
        );
    }

    #[test]
    fn empty_tensor_rejected() {
        let t = Tensor::from_parts(vec![0], vec![]);
        assert_eq!(
            fit_minmax(&t, 8, Scheme::Symmetric, Granularity::PerLayer),
            Err(Error::EmptyTensor)
        );
    }

    #[test]
    fn invariants_enforced_on_assembly() {
        assert!(QuantParams::from_parts(
            8,
            Scheme::Symmetric,
            Granularity::PerLayer,
            vec![0.1],
            vec![3],
            vec![3]
        )
        .is_err());
        assert!(QuantParams::from_parts(
            8,
            Scheme::Asymmetric,
            Granularity::PerLayer,
            vec![0.0],
            vec![0],
            vec![0]
        )
        .is_err());
        assert!(QuantParams::from_parts(
            8,
            Scheme::Asymmetric,
            Granularity::PerLayer,
            vec![0.1],
            vec![-128],
            vec![-200]
        )
        .is_ok());
        assert!(QuantParams::from_parts(
            8,
            Scheme::Asymmetric,
            Granularity::PerLayer,
            vec![0.1],
            vec![-120],
            vec![-200]
        )
        .is_err());
    }

    #[test]
    fn overflow_report_flags_positive_and_negative_channels() {
        // channels along axis 1: [spans 0], [0.5..1.5], [-2..-1]
        let t = Tensor::new(vec![2, 3], vec![-1.0, 0.5, -2.0, 1.0, 1.5, -1.0]).unwrap();
        let r = detect_zero_point_overflow(&t, 8, 1).unwrap();
        assert_eq!(r.flagged(), vec![1, 2]);
        assert_eq!(r.clamped_count(), 2);
    }
}
