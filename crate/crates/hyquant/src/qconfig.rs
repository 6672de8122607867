//! The quantization-config document (`hyquant-qconfig/1`).

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hyquant_core::bridge::ReconstructionUnit;
use hyquant_core::calib::{Calibration, SearchOptions, SearchSpace};
use hyquant_core::graph::{LayerId, QConfig, SiteId};
use hyquant_core::quant::{Granularity, QuantParams, Scheme};
use serde::{Deserialize, Serialize};

use crate::manifest::SiteKindName;

pub const FORMAT: &str = "hyquant-qconfig/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfigDoc {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchDoc>,
    pub sites: Vec<SiteDoc>,
    #[serde(default)]
    pub units: Vec<UnitDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchDoc {
    pub bits: u8,
    pub scale_search: bool,
    pub granularity_search: bool,
    pub scheme_search: bool,
    pub metric: String,
    pub alpha: f32,
    pub beta: f32,
    pub candidates: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteDoc {
    pub layer: u32,
    pub kind: SiteKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub bits: u8,
    pub scheme: String,
    pub granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    pub scale: Vec<f32>,
    pub zero_point_raw: Vec<i64>,
    pub zero_point_clamped: Vec<i64>,
    /// Objective of the unit the site belongs to.
    #[serde(default)]
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitDoc {
    pub label: String,
    pub members: Vec<u32>,
    pub output: u32,
    pub bridge: bool,
    pub granularity: String,
    pub scheme: String,
    pub objective: f64,
    pub default_objective: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn site_doc(site: &SiteId, p: &QuantParams, unit: Option<(&str, f64)>) -> SiteDoc {
    let axis = match p.granularity() {
        Granularity::PerLayer => None,
        Granularity::PerChannel { axis } => Some(axis),
    };
    SiteDoc {
        layer: site.layer.0,
        kind: SiteKindName(site.kind),
        unit: unit.map(|u| u.0.to_string()),
        bits: p.bits(),
        scheme: p.scheme().name().to_string(),
        granularity: p.granularity().name().to_string(),
        axis,
        scale: p.scale().to_vec(),
        zero_point_raw: p.raw_zero_point().to_vec(),
        zero_point_clamped: p.zero_point().to_vec(),
        objective: unit.map(|u| u.1),
    }
}

impl QConfigDoc {
    /// A bare document without search provenance.
    pub fn from_qconfig(q: &QConfig) -> Self {
        Self {
            format: FORMAT.to_string(),
            search: None,
            sites: q.iter().map(|(s, p)| site_doc(s, p, None)).collect(),
            units: Vec::new(),
        }
    }

    pub fn from_calibration(
        c: &Calibration,
        units: &[ReconstructionUnit],
        space: &SearchSpace,
        options: &SearchOptions,
    ) -> Result<Self> {
        let mut sites = Vec::new();
        for (site, p) in c.qconfig.iter() {
            let d = c
                .decisions
                .iter()
                .find(|d| d.params.get(site).is_some())
                .ok_or_else(|| anyhow!("{site} belongs to no unit"))?;
            sites.push(site_doc(site, p, Some((&d.label, d.objective))));
        }
        let units = c
            .decisions
            .iter()
            .map(|d| {
                let members = units
                    .iter()
                    .find(|u| u.output == d.output)
                    .map(|u| u.members.iter().map(|m| m.0).collect())
                    .ok_or_else(|| anyhow!("no unit ends at {}", d.output))?;
                Ok(UnitDoc {
                    label: d.label.clone(),
                    members,
                    output: d.output.0,
                    bridge: d.bridge,
                    granularity: d.granularity.name().to_string(),
                    scheme: d.scheme.name().to_string(),
                    objective: d.objective,
                    default_objective: d.default_objective,
                    warnings: d.warnings.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            format: FORMAT.to_string(),
            search: Some(SearchDoc {
                bits: options.bits,
                scale_search: options.scale_search,
                granularity_search: options.granularity_search,
                scheme_search: options.scheme_search,
                metric: options.metric.name().to_string(),
                alpha: space.alpha,
                beta: space.beta,
                candidates: space.candidates,
                iterations: space.iterations,
            }),
            sites,
            units,
        })
    }

    pub fn to_qconfig(&self) -> Result<QConfig> {
        if self.format != FORMAT {
            bail!(
                "unsupported qconfig format '{}' (expected '{FORMAT}')",
                self.format
            );
        }
        let mut q = QConfig::new();
        for s in &self.sites {
            let site = SiteId::new(LayerId(s.layer), s.kind.0);
            let p = s.params().with_context(|| format!("site {site}"))?;
            if q.insert(site, p).is_some() {
                bail!("site {site} listed twice");
            }
        }
        Ok(q)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl SiteDoc {
    fn params(&self) -> Result<QuantParams> {
        let scheme = Scheme::from_name(&self.scheme)
            .ok_or_else(|| anyhow!("unknown scheme '{}'", self.scheme))?;
        let granularity = match (self.granularity.as_str(), self.axis) {
            ("per_layer", None) => Granularity::PerLayer,
            ("per_channel", Some(axis)) => Granularity::PerChannel { axis },
            ("per_channel", None) => bail!("per_channel granularity needs an axis"),
            ("per_layer", Some(_)) => bail!("per_layer granularity takes no axis"),
            (g, _) => bail!("unknown granularity '{g}'"),
        };
        Ok(QuantParams::from_parts(
            self.bits,
            scheme,
            granularity,
            self.scale.clone(),
            self.zero_point_clamped.clone(),
            self.zero_point_raw.clone(),
        )?)
    }
}

pub fn write(path: &Path, doc: &QConfigDoc) -> Result<()> {
    fs::write(path, doc.to_json()?).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<QConfigDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    QConfigDoc::from_json(&text).with_context(|| format!("parsing qconfig {}", path.display()))
}
