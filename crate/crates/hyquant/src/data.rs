//! Labels files and fixture export.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use hyquant_core::zoo::Fixture;

use crate::{blob, manifest};

pub const CALIB_FILE: &str = "calib.hqt";
pub const EVAL_FILE: &str = "eval.hqt";
pub const LABELS_FILE: &str = "labels.json";

/// Labels are a JSON array of class indices.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    fs::write(path, serde_json::to_string(labels)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Writes the model manifest, its weights, both batches and the labels.
pub fn export_fixture(dir: &Path, f: &Fixture) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = manifest::Model {
        graph: f.graph.clone(),
        bridges: f.bridges.clone(),
    };
    manifest::save(dir, &model)?;
    blob::write(&dir.join(CALIB_FILE), &f.calib)?;
    blob::write(&dir.join(EVAL_FILE), &f.eval)?;
    write_labels(&dir.join(LABELS_FILE), &f.labels)
}
