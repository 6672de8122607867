//! Per-channel activation range report: calibration and validation ranges,
//! zero-point overflow flags, and the range gap between the two batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use anyhow::Result;
use hyquant_core::graph::{observe_sites, Graph, QConfig, SiteId};
use hyquant_core::metrics::EVAL_CHUNK;
use hyquant_core::quant::detect_zero_point_overflow;
use hyquant_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One channel of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: u32,
    pub layer_name: String,
    pub site: String,
    pub channel: usize,
    pub calib_min: f32,
    pub calib_max: f32,
    pub eval_min: f32,
    pub eval_max: f32,
    /// Length of the validation range lying outside the calibration range.
    pub range_gap: f32,
    pub raw_zero_point: i64,
    pub clamped: bool,
    /// The channel range excludes zero, so no grid point reconstructs zero.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub bits: u8,
    pub rows: Vec<ReportRow>,
}

type Ranges = BTreeMap<SiteId, Vec<(f32, f32)>>;

/// Per-channel ranges of every declared site, accumulated chunk by chunk.
fn site_ranges(graph: &Graph, x: &Tensor) -> Result<Ranges> {
    let n = x.shape()[0];
    let mut out: Ranges = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let obs = observe_sites(graph, &x.slice_batch(start, len)?, &QConfig::new())?;
        for (site, t) in obs {
            let r = t.channel_min_max(site.kind.channel_axis(t.rank()))?;
            match out.get_mut(&site) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(r) {
                        *a = (a.0.min(b.0), a.1.max(b.1));
                    }
                }
                None => {
                    out.insert(site, r);
                }
            }
        }
        start += len;
    }
    Ok(out)
}

/// Flags come from the calibration batch, which is what a min-max fit sees.
pub fn build(graph: &Graph, calib: &Tensor, eval: &Tensor, bits: u8) -> Result<Report> {
    let cal = site_ranges(graph, calib)?;
    let val = site_ranges(graph, eval)?;
    let mut rows = Vec::new();
    for (site, ranges) in &cal {
        // Overflow depends only on each channel's range, so a two-row tensor
        // holding the minima and maxima reproduces the flags of the full one.
        let c = ranges.len();
        let mut data: Vec<f32> = ranges.iter().map(|r| r.0).collect();
        data.extend(ranges.iter().map(|r| r.1));
        let report = detect_zero_point_overflow(&Tensor::new(vec![2, c], data)?, bits, 1)?;
        let name = &graph.layer(site.layer)?.name;
        for (ch, o) in report.channels.iter().enumerate() {
            let (lo, hi) = ranges[ch];
            let (elo, ehi) = val[site][ch];
            rows.push(ReportRow {
                layer: site.layer.0,
                layer_name: name.clone(),
                site: site.kind.name().to_string(),
                channel: ch,
                calib_min: lo,
                calib_max: hi,
                eval_min: elo,
                eval_max: ehi,
                range_gap: (lo - elo).max(0.0) + (ehi - hi).max(0.0),
                raw_zero_point: o.raw_zero_point,
                clamped: o.clamped,
                flagged: o.flagged,
            });
        }
    }
    Ok(Report { bits, rows })
}

impl Report {
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R, bits: u8) -> Result<Self> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()?;
        Ok(Self { bits, rows })
    }

    /// Flagged channel indices per site.
    pub fn flagged(&self) -> BTreeMap<(u32, String), Vec<usize>> {
        let mut out: BTreeMap<(u32, String), Vec<usize>> = BTreeMap::new();
        for r in &self.rows {
            let e = out.entry((r.layer, r.site.clone())).or_default();
            if r.flagged {
                e.push(r.channel);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mut sites: Vec<(u32, &str, &str, Vec<&ReportRow>)> = Vec::new();
        for r in &self.rows {
            match sites.last_mut() {
                Some(last) if last.0 == r.layer && last.2 == r.site => last.3.push(r),
                _ => sites.push((r.layer, &r.layer_name, &r.site, vec![r])),
            }
        }
        let flagged: usize = self.rows.iter().filter(|r| r.flagged).count();
        let clamped: usize = self.rows.iter().filter(|r| r.clamped).count();
        let _ = writeln!(
            s,
            "{} sites, {} channels, {flagged} flagged, {clamped} clamped at {} bits",
            sites.len(),
            self.rows.len(),
            self.bits
        );
        for (layer, name, site, rows) in &sites {
            let f = rows.iter().filter(|r| r.flagged).count();
            let c = rows.iter().filter(|r| r.clamped).count();
            let gap = rows.iter().map(|r| r.range_gap).fold(0.0f32, f32::max);
            let lo = rows
                .iter()
                .map(|r| r.calib_min)
                .fold(f32::INFINITY, f32::min);
            let hi = rows
                .iter()
                .map(|r| r.calib_max)
                .fold(f32::NEG_INFINITY, f32::max);
            let _ = write!(
                s,
                "layer {layer:>3} {name:<16} {site:<14} {:>3} ch  range [{lo:>9.4}, {hi:>9.4}]  max gap {gap:.4}",
                rows.len()
            );
            if f > 0 {
                let _ = write!(s, "  flagged {f} (clamped {c})");
            }
            s.push('\n');
        }
        s
    }
}

/// The search trace as CSV: unit, site, round, granularity, scheme,
/// candidate index and objective.
pub fn write_trace<'a, W: io::Write>(
    w: W,
    rows: impl Iterator<Item = &'a hyquant_core::calib::TraceRow>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "unit",
        "layer",
        "site",
        "round",
        "granularity",
        "scheme",
        "candidate",
        "objective",
    ])?;
    for r in rows {
        w.write_record([
            r.unit.clone(),
            r.site.layer.to_string(),
            r.site.kind.name().to_string(),
            r.round.to_string(),
            r.granularity.name().to_string(),
            r.scheme.name().to_string(),
            r.candidate.to_string(),
            format!("{:e}", r.objective),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyquant_core::graph::{LayerOp, LayerSpec, QuantMode};
    use hyquant_core::tensor::Activation;

    fn relu_graph() -> Graph {
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let layers = vec![
            LayerSpec::new(0, "act", LayerOp::Activation(Activation::Relu), &[]),
            LayerSpec::new(
                1,
                "fc",
                LayerOp::Linear {
                    weight: w,
                    bias: None,
                    act: None,
                },
                &[0],
            ),
        ];
        Graph::new(
            layers,
            vec![3],
            hyquant_core::graph::LayerId(1),
            QuantMode::Partial,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_ranges_have_no_flags() {
        let g = relu_graph();
        let x = Tensor::from_fn(
            &[8, 3],
            |i| if i % 2 == 0 { 1.0 } else { -1.0 } * (i as f32 + 1.0),
        );
        let r = build(&g, &x, &x, 8).unwrap();
        // The linear input follows a ReLU: a [0, max] range still holds zero.
        assert!(r
            .rows
            .iter()
            .all(|r| !r.flagged && !r.clamped && r.range_gap == 0.0));
    }

    #[test]
    fn gap_measures_validation_overhang() {
        let g = relu_graph();
        let calib = Tensor::from_fn(&[2, 3], |i| i as f32);
        let eval = Tensor::from_fn(&[2, 3], |i| 2.0 * i as f32);
        let r = build(&g, &calib, &eval, 8).unwrap();
        let row = r
            .rows
            .iter()
            .find(|r| r.site == "input" && r.channel == 2)
            .unwrap();
        assert_eq!(
            (row.calib_max, row.eval_max, row.range_gap),
            (5.0, 10.0, 5.0)
        );
    }
}
