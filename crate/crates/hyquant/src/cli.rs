//! The `hyquant` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hyquant_core::bridge::resolve_bridge_blocks;
use hyquant_core::calib::{Metric, SearchOptions, SearchSpace};
use hyquant_core::graph::{forward_fp, QConfig, QuantMode};
use hyquant_core::metrics::evaluate;
use hyquant_core::tensor::Tensor;
use hyquant_core::zoo::{build_fixture, FixtureSpec, FIXTURE_NAMES};
use serde::Serialize;

use crate::manifest::Model;
use crate::qconfig::QConfigDoc;
use crate::{blob, data, manifest, parallel, qconfig, report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// An error in how the command was invoked rather than in what it did.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(
    name = "hyquant",
    version,
    about = "Hessian-guided post-training quantization for hybrid vision transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate a model and write its quantization config.
    Quantize(QuantizeArgs),
    /// Compare full-precision and quantized predictions.
    Evaluate(EvaluateArgs),
    /// Per-channel range and zero-point overflow report.
    Report(ReportArgs),
    /// Built-in synthetic models.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
    pub model: Option<PathBuf>,
    /// Built-in fixture name instead of a manifest.
    #[arg(long)]
    pub fixture: Option<String>,
    /// Fixture seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Quantize only linear ops (partial) or also softmax and norm inputs
    /// (full). Defaults to the manifest's sites.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<QuantMode>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Calibration batch (tensor blob). Fixtures default to their own.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    pub bits: u8,
    /// Searched dimensions, a prefix of `scale,granularity,scheme`, or `none`
    /// for the min-max per-layer baseline.
    #[arg(long, default_value = "scale,granularity,scheme")]
    pub search: String,
    #[arg(long, default_value = "hessian", value_parser = parse_metric)]
    pub metric: Metric,
    /// Scale candidates per site.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Lower end of the candidate range, as a multiple of the base step.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    /// Weight/activation alternation rounds.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output quantization config.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional search trace (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Quantization config. Without one the model runs in full precision.
    #[arg(long)]
    pub qconfig: Option<PathBuf>,
    /// Evaluation batch (tensor blob). Fixtures default to their own.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labels (JSON array). Defaults to the fixture labels for fixture data,
    /// otherwise to the full-precision predictions.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Metrics document (JSON). Printed when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Validation batch compared against the calibration ranges.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    pub bits: u8,
    /// Per-channel table (CSV).
    #[arg(long)]
    pub csv: PathBuf,
    /// Human-readable summary. Printed when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// List fixture names.
    List,
    /// Write a fixture as manifest, weight blobs, data batches and labels.
    Export {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<QuantMode>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<QuantMode, String> {
    QuantMode::from_name(s).ok_or_else(|| format!("unknown mode '{s}' (partial, full)"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::from_name(s).ok_or_else(|| format!("unknown metric '{s}' (hessian, mse, cosine)"))
}

/// Parses `--search`. The dimensions must form a chain: granularity needs
/// scale, scheme needs granularity.
pub fn parse_search(s: &str, bits: u8, metric: Metric) -> Result<SearchOptions> {
    let mut o = SearchOptions {
        metric,
        ..SearchOptions::baseline(bits)
    };
    if s.trim() != "none" {
        for part in s.split(',').map(str::trim) {
            match part {
                "scale" => o.scale_search = true,
                "granularity" => o.granularity_search = true,
                "scheme" => o.scheme_search = true,
                other => return usage(format!("unknown search dimension '{other}'")),
            }
        }
    }
    if let Err(e) = o.validate() {
        return usage(format!("invalid --search '{s}': {e}"));
    }
    Ok(o)
}

/// Model, default calibration/evaluation batches and labels.
struct Loaded {
    model: Model,
    calib: Option<Tensor>,
    eval: Option<Tensor>,
    labels: Option<Vec<usize>>,
}

fn load(args: &ModelArgs) -> Result<Loaded> {
    if let Some(path) = &args.model {
        return Ok(Loaded {
            model: manifest::load(path, args.mode)?,
            calib: None,
            eval: None,
            labels: None,
        });
    }
    let name = args
        .fixture
        .as_deref()
        .ok_or_else(|| UsageError("need --model or --fixture".into()))?;
    let mut spec = match FixtureSpec::named(name, args.seed) {
        Ok(s) => s,
        Err(e) => return usage(e.to_string()),
    };
    if let Some(m) = args.mode {
        spec.mode = m;
    }
    let f = build_fixture(&spec)?;
    Ok(Loaded {
        model: Model {
            graph: f.graph,
            bridges: f.bridges,
        },
        calib: Some(f.calib),
        eval: Some(f.eval),
        labels: Some(f.labels),
    })
}

fn batch(path: Option<&Path>, default: Option<Tensor>, flag: &str) -> Result<Tensor> {
    match (path, default) {
        (Some(p), _) => blob::read(p),
        (None, Some(t)) => Ok(t),
        (None, None) => usage(format!("--{flag} is required with --model")),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let options = parse_search(&a.search, a.bits, a.metric)?;
    let options = SearchOptions {
        trace: a.trace.is_some(),
        ..options
    };
    let d = SearchSpace::default();
    let space = SearchSpace {
        alpha: a.alpha.unwrap_or(d.alpha),
        beta: a.beta.unwrap_or(d.beta),
        candidates: a.candidates.unwrap_or(d.candidates),
        iterations: a.iterations.unwrap_or(d.iterations),
    };
    if let Err(e) = space.validate() {
        return usage(e.to_string());
    }
    let l = load(&a.model)?;
    let x = batch(a.calib.as_deref(), l.calib, "calib")?;
    let g = &l.model.graph;
    let groups = resolve_bridge_blocks(g, &l.model.bridges)?;
    let (c, units) = parallel::calibrate(g, &x, &groups, &space, &options, parallel::threads()?)?;
    let doc = QConfigDoc::from_calibration(&c, &units, &space, &options)?;
    qconfig::write(&a.out, &doc)?;
    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        report::write_trace(&mut buf, c.trace())?;
        write_file(path, &buf)?;
    }
    for w in c.warnings() {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(
        out,
        "{} sites in {} units, objective {:.6e} (min-max {:.6e})",
        c.qconfig.len(),
        c.decisions.len(),
        c.total_objective(),
        c.total_default_objective()
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsDoc {
    format: &'static str,
    samples: usize,
    sites: usize,
    fp_top1: f64,
    quant_top1: f64,
    agreement: f64,
    logit_mse: f64,
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let l = load(&a.model)?;
    let g = &l.model.graph;
    let q = match &a.qconfig {
        Some(p) => qconfig::read(p)?.to_qconfig()?,
        None => QConfig::new(),
    };
    if !q.is_empty() {
        q.check_coverage(g)
            .context("quantization config does not match the model")?;
    }
    let x = batch(a.data.as_deref(), l.eval, "data")?;
    let labels = match (&a.labels, l.labels) {
        (Some(p), _) => data::read_labels(p)?,
        (None, Some(v)) if a.data.is_none() => v,
        _ => forward_fp(g, &x, &Default::default())?
            .logits
            .argmax_rows()?,
    };
    let m = evaluate(g, &q, &x, &labels)?;
    let doc = MetricsDoc {
        format: "hyquant-metrics/1",
        samples: m.samples,
        sites: q.len(),
        fp_top1: m.fp_top1,
        quant_top1: m.quant_top1,
        agreement: m.agreement,
        logit_mse: m.logit_mse,
    };
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match &a.out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let l = load(&a.model)?;
    let calib = batch(a.calib.as_deref(), l.calib, "calib")?;
    let eval = batch(a.eval.as_deref(), l.eval, "eval")?;
    let r = report::build(&l.model.graph, &calib, &eval, a.bits)?;
    let mut buf = Vec::new();
    r.write_csv(&mut buf)?;
    write_file(&a.csv, &buf)?;
    match &a.summary {
        Some(p) => write_file(p, r.summary().as_bytes())?,
        None => out.write_all(r.summary().as_bytes())?,
    }
    Ok(())
}

fn fixtures(c: &FixturesCommand, out: &mut dyn Write) -> Result<()> {
    match c {
        FixturesCommand::List => {
            for name in FIXTURE_NAMES {
                writeln!(out, "{name}")?;
            }
        }
        FixturesCommand::Export {
            name,
            seed,
            mode,
            out: dir,
        } => {
            let mut spec = match FixtureSpec::named(name, *seed) {
                Ok(s) => s,
                Err(e) => return usage(e.to_string()),
            };
            if let Some(m) = mode {
                spec.mode = *m;
            }
            data::export_fixture(dir, &build_fixture(&spec)?)?;
            writeln!(out, "{}", dir.join(manifest::FILE_NAME).display())?;
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Quantize(a) => quantize(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Report(a) => report_cmd(a, out),
        Command::Fixtures(c) => fixtures(c, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors go to `err` as one `error: ...` line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_flags_follow_the_chain() {
        let ok = |s| parse_search(s, 8, Metric::Hessian).unwrap();
        assert_eq!(ok("none"), SearchOptions::baseline(8));
        assert_eq!(ok("scale"), SearchOptions::scale_only(8));
        assert_eq!(ok("scale,granularity"), SearchOptions::with_granularity(8));
        assert_eq!(ok("scale,granularity,scheme"), SearchOptions::full(8));
        for bad in ["granularity", "scale,scheme", "scheme", "scale,bias"] {
            let e = parse_search(bad, 8, Metric::Hessian).unwrap_err();
            assert!(e.downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["hyquant", "quantize"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["hyquant", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["hyquant", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
