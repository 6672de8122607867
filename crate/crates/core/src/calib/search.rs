use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{
    default_qconfig, generate_candidates_for, pass1_cache_fp, pass2_cache_gradients,
    reconstruction_error, CalibCache, GranularityChoice, Metric, SearchOptions, SearchSpace,
    DEFAULT_CHOICE,
};
use crate::bridge::{reconstruction_units, BridgeBlockGroup, ReconstructionUnit};
use crate::error::{Error, Result};
use crate::graph::{run_layers_marked, Graph, LayerId, QConfig, SiteId};
use crate::quant::{fit_minmax, fit_with_scales, QuantParams, Scheme};
use crate::tensor::{Tape, Tensor};

/// One evaluated candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub unit: String,
    pub site: SiteId,
    pub round: usize,
    pub granularity: GranularityChoice,
    pub scheme: Scheme,
    pub candidate: usize,
    pub objective: f64,
}

/// Re-runs one unit on its cached full-precision inputs and scores the
/// result against the cached full-precision unit output.
pub struct UnitEvaluator<'a> {
    graph: &'a Graph,
    unit: &'a ReconstructionUnit,
    metric: Metric,
    inputs: Vec<(Option<LayerId>, &'a Tensor)>,
    reference: &'a Tensor,
    grad: &'a Tensor,
}

impl<'a> UnitEvaluator<'a> {
    pub fn new(
        graph: &'a Graph,
        unit: &'a ReconstructionUnit,
        cache: &'a CalibCache,
        metric: Metric,
    ) -> Result<Self> {
        let inputs = unit
            .external_inputs(graph)
            .into_iter()
            .map(|p| match p {
                Some(id) => cache.output(id).map(|t| (p, t)),
                None => Ok((None, cache.input())),
            })
            .collect::<Result<_>>()?;
        let reference = cache.output(unit.output)?;
        let grad = match metric {
            Metric::Hessian => cache.grad(unit.output)?,
            _ => reference,
        };
        Ok(Self {
            graph,
            unit,
            metric,
            inputs,
            reference,
            grad,
        })
    }

    pub fn reference(&self) -> &Tensor {
        self.reference
    }

    pub fn grad(&self) -> &Tensor {
        self.grad
    }

    fn execute(
        &self,
        tape: &mut Tape,
        qconfig: &QConfig,
        marks: Option<&mut BTreeMap<SiteId, usize>>,
    ) -> Result<crate::tensor::Var> {
        let mut env = BTreeMap::new();
        let mut graph_input = None;
        for &(p, t) in &self.inputs {
            let v = match tape.replay() {
                Some(v) => v,
                None => tape.leaf(t.clone()),
            };
            match p {
                Some(id) => {
                    env.insert(id, v);
                }
                None => graph_input = Some(v),
            }
        }
        run_layers_marked(
            self.graph,
            tape,
            &mut env,
            graph_input,
            &self.unit.members,
            qconfig,
            None,
            marks,
        )?;
        Ok(env[&self.unit.output])
    }

    fn score(&self, out: &Tensor) -> Result<f64> {
        reconstruction_error(self.metric, out, self.reference, self.grad)
    }

    /// Unit output with `qconfig` applied; sites it does not list stay in
    /// full precision.
    pub fn run(&self, qconfig: &QConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.execute(&mut tape, qconfig, None)?;
        Ok(tape.take_value(out))
    }

    /// Batch-averaged reconstruction error of the unit under `qconfig`.
    pub fn evaluate(&self, qconfig: &QConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.execute(&mut tape, qconfig, None)?;
        self.score(tape.value(out))
    }

    /// Evaluates `base` and keeps its tape so that configurations differing
    /// from it at one site can be scored without recomputing upstream work.
    fn probe(&self, base: &QConfig) -> Result<(f64, Probe)> {
        let mut tape = Tape::new();
        let mut marks = BTreeMap::new();
        let out = self.execute(&mut tape, base, Some(&mut marks))?;
        let obj = self.score(tape.value(out))?;
        Ok((obj, Probe { tape, marks }))
    }

    /// Same result as [`Self::evaluate`] for a `qconfig` that differs from
    /// the probe's base at `site` only.
    fn evaluate_at(&self, probe: &mut Probe, site: &SiteId, qconfig: &QConfig) -> Result<f64> {
        probe
            .tape
            .rewind(probe.marks.get(site).copied().unwrap_or(0));
        let out = self.execute(&mut probe.tape, qconfig, None)?;
        self.score(probe.tape.value(out))
    }
}

struct Probe {
    tape: Tape,
    marks: BTreeMap<SiteId, usize>,
}

/// Result of searching one unit.
#[derive(Clone, Debug)]
pub struct UnitDecision {
    pub label: String,
    pub output: LayerId,
    pub bridge: bool,
    pub granularity: GranularityChoice,
    pub scheme: Scheme,
    /// Chosen parameters for every site of the unit.
    pub params: QConfig,
    pub objective: f64,
    /// Objective of per-layer asymmetric min-max at every site of the unit.
    pub default_objective: f64,
    /// Best objective reached by each explored combination.
    pub combos: Vec<(GranularityChoice, Scheme, f64)>,
    pub warnings: Vec<String>,
    pub trace: Vec<TraceRow>,
}

fn site_minmax(
    cache: &CalibCache,
    site: &SiteId,
    bits: u8,
    g: GranularityChoice,
    s: Scheme,
) -> Result<QuantParams> {
    let t = cache.site_tensor(site)?;
    fit_minmax(t, bits, s, g.resolve(site.kind.channel_axis(t.rank())))
}

struct ComboResult {
    objective: f64,
    params: QConfig,
}

#[allow(clippy::too_many_arguments)]
fn search_combo(
    eval: &UnitEvaluator<'_>,
    cache: &CalibCache,
    sites: &[SiteId],
    space: &SearchSpace,
    options: &SearchOptions,
    g: GranularityChoice,
    s: Scheme,
    trace: &mut Vec<TraceRow>,
) -> Result<ComboResult> {
    let bits = options.bits;
    let mut cfg = QConfig::new();
    let mut grids = Vec::with_capacity(sites.len());
    for site in sites {
        let t = cache.site_tensor(site)?;
        let gran = g.resolve(site.kind.channel_axis(t.rank()));
        cfg.insert(*site, fit_minmax(t, bits, s, gran)?);
        grids.push(generate_candidates_for(t, bits, space, gran, s)?);
    }
    let mut objective = eval.evaluate(&cfg)?;
    for round in 0..space.iterations {
        let mut changed = false;
        for (site, grid) in sites.iter().zip(&grids) {
            let t = cache.site_tensor(site)?;
            let gran = g.resolve(site.kind.channel_axis(t.rank()));
            let current = cfg.get(site).cloned().ok_or(Error::MissingParams(*site))?;
            let (_, mut probe) = eval.probe(&cfg)?;
            let mut best: Option<QuantParams> = None;
            let mut best_obj = objective;
            for (j, scales) in grid.iter().enumerate() {
                let p = fit_with_scales(t, bits, s, gran, scales)?;
                if p == current {
                    continue;
                }
                cfg.insert(*site, p.clone());
                let o = eval.evaluate_at(&mut probe, site, &cfg)?;
                if options.trace {
                    trace.push(TraceRow {
                        unit: eval.unit.label.clone(),
                        site: *site,
                        round,
                        granularity: g,
                        scheme: s,
                        candidate: j,
                        objective: o,
                    });
                }
                if o < best_obj {
                    best_obj = o;
                    best = Some(p);
                }
            }
            match best {
                Some(p) => {
                    cfg.insert(*site, p);
                    objective = best_obj;
                    changed = true;
                }
                None => {
                    cfg.insert(*site, current);
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ComboResult {
        objective,
        params: cfg,
    })
}

/// Per-unit state shared by every granularity/scheme pair.
struct UnitSearch<'a> {
    eval: UnitEvaluator<'a>,
    sites: Vec<SiteId>,
    decision: UnitDecision,
    /// The search is skipped and min-max kept.
    settled: bool,
}

fn start_unit<'a>(
    graph: &'a Graph,
    unit: &'a ReconstructionUnit,
    cache: &'a CalibCache,
    space: &SearchSpace,
    options: &SearchOptions,
) -> Result<UnitSearch<'a>> {
    options.validate()?;
    space.validate()?;
    let eval = UnitEvaluator::new(graph, unit, cache, options.metric)?;
    let sites = unit.sites(graph);
    let (dg, ds) = DEFAULT_CHOICE;
    let default: QConfig = sites
        .iter()
        .map(|site| Ok((*site, site_minmax(cache, site, options.bits, dg, ds)?)))
        .collect::<Result<_>>()?;
    let default_objective = eval.evaluate(&default)?;
    let mut decision = UnitDecision {
        label: unit.label.clone(),
        output: unit.output,
        bridge: unit.bridge,
        granularity: dg,
        scheme: ds,
        params: default,
        objective: default_objective,
        default_objective,
        combos: Vec::new(),
        warnings: Vec::new(),
        trace: Vec::new(),
    };
    let mut settled = sites.is_empty() || !options.scale_search;
    if !settled && options.metric == Metric::Hessian && eval.grad().data().iter().all(|&g| g == 0.0)
    {
        decision.warnings.push(format!(
            "unit '{}': output gradient is zero, keeping min-max",
            unit.label
        ));
        settled = true;
    }
    Ok(UnitSearch {
        eval,
        sites,
        decision,
        settled,
    })
}

struct Searched {
    granularity: GranularityChoice,
    scheme: Scheme,
    result: ComboResult,
    trace: Vec<TraceRow>,
}

fn run_combos(
    search: &UnitSearch<'_>,
    cache: &CalibCache,
    space: &SearchSpace,
    options: &SearchOptions,
    combos: &[(GranularityChoice, Scheme)],
) -> Result<Vec<Searched>> {
    combos
        .iter()
        .map(|&(g, s)| {
            let mut trace = Vec::new();
            let result = search_combo(
                &search.eval,
                cache,
                &search.sites,
                space,
                options,
                g,
                s,
                &mut trace,
            )?;
            Ok(Searched {
                granularity: g,
                scheme: s,
                result,
                trace,
            })
        })
        .collect()
}

/// Picks the best of `combos` (in that order, strict improvement only)
/// among the searched pairs.
fn decide(
    search: &UnitSearch<'_>,
    searched: &[Searched],
    combos: &[(GranularityChoice, Scheme)],
) -> UnitDecision {
    let mut decision = search.decision.clone();
    if search.settled {
        return decision;
    }
    let mut best: Option<&Searched> = None;
    for &(g, s) in combos {
        let Some(r) = searched
            .iter()
            .find(|r| (r.granularity, r.scheme) == (g, s))
        else {
            continue;
        };
        decision.combos.push((g, s, r.result.objective));
        decision.trace.extend(r.trace.iter().cloned());
        if best.is_none_or(|b| r.result.objective < b.result.objective) {
            best = Some(r);
        }
    }
    match best {
        Some(b) if b.result.objective.is_finite() => {
            decision.objective = b.result.objective;
            decision.granularity = b.granularity;
            decision.scheme = b.scheme;
            decision.params = b.result.params.clone();
        }
        _ => decision.warnings.push(format!(
            "unit '{}': search produced no finite objective, keeping min-max",
            decision.label
        )),
    }
    decision
}

/// Searches scale (and, if enabled, granularity and scheme) for one unit.
///
/// Each granularity/scheme pair is applied to every site of the unit and
/// starts from min-max parameters. Sites are then revisited in order
/// (weights before activations) for `space.iterations` rounds; a site moves
/// to the best grid candidate only if it strictly lowers the unit objective.
/// The best pair wins, ties resolved per-layer before per-channel and
/// symmetric before asymmetric.
pub fn search_unit(
    graph: &Graph,
    unit: &ReconstructionUnit,
    cache: &CalibCache,
    space: &SearchSpace,
    options: &SearchOptions,
) -> Result<UnitDecision> {
    let search = start_unit(graph, unit, cache, space, options)?;
    if search.settled {
        return Ok(search.decision);
    }
    let combos = options.combos();
    let searched = run_combos(&search, cache, space, options, &combos)?;
    Ok(decide(&search, &searched, &combos))
}

/// Everything the per-unit searches share.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub units: Vec<ReconstructionUnit>,
    pub cache: CalibCache,
    /// The configuration gradients were taken under.
    pub default: QConfig,
}

/// Runs both caching passes.
pub fn prepare(
    graph: &Graph,
    batch: &Tensor,
    groups: &[BridgeBlockGroup],
    options: &SearchOptions,
) -> Result<Prepared> {
    options.validate()?;
    let units = reconstruction_units(graph, groups);
    let cache = pass1_cache_fp(graph, batch, &units)?;
    let default = default_qconfig(graph, &cache, options.bits)?;
    let cache = pass2_cache_gradients(graph, batch, &units, cache, &default)?;
    Ok(Prepared {
        units,
        cache,
        default,
    })
}

/// Calibrated configuration plus per-unit diagnostics.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub qconfig: QConfig,
    pub decisions: Vec<UnitDecision>,
}

impl Calibration {
    /// Sum of the per-unit objectives.
    pub fn total_objective(&self) -> f64 {
        self.decisions.iter().map(|d| d.objective).sum()
    }

    pub fn total_default_objective(&self) -> f64 {
        self.decisions.iter().map(|d| d.default_objective).sum()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.decisions.iter().flat_map(|d| d.warnings.iter())
    }

    pub fn trace(&self) -> impl Iterator<Item = &TraceRow> {
        self.decisions.iter().flat_map(|d| d.trace.iter())
    }
}

/// Merges unit decisions into one configuration covering every site.
pub fn assemble(graph: &Graph, decisions: Vec<UnitDecision>) -> Result<Calibration> {
    let mut qconfig = QConfig::new();
    for d in &decisions {
        for (site, p) in d.params.iter() {
            if qconfig.insert(*site, p.clone()).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "{site} is covered by two units"
                )));
            }
        }
    }
    qconfig.check_coverage(graph)?;
    Ok(Calibration { qconfig, decisions })
}

/// Full calibration, one unit after another.
pub fn calibrate(
    graph: &Graph,
    batch: &Tensor,
    groups: &[BridgeBlockGroup],
    space: &SearchSpace,
    options: &SearchOptions,
) -> Result<Calibration> {
    space.validate()?;
    let prep = prepare(graph, batch, groups, options)?;
    let decisions = prep
        .units
        .iter()
        .map(|u| search_unit(graph, u, &prep.cache, space, options))
        .collect::<Result<_>>()?;
    assemble(graph, decisions)
}

/// Calibrations for the three search option sets, in order scale-only,
/// +granularity, +scheme.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub scale_only: Calibration,
    pub with_granularity: Calibration,
    pub full: Calibration,
}

/// Same result as three [`calibrate`] calls with
/// [`SearchOptions::scale_only`], [`SearchOptions::with_granularity`] and
/// [`SearchOptions::full`], but every granularity/scheme pair is searched
/// once and shared between them.
pub fn calibrate_ablation(
    graph: &Graph,
    batch: &Tensor,
    groups: &[BridgeBlockGroup],
    space: &SearchSpace,
    bits: u8,
    metric: Metric,
) -> Result<Ablation> {
    space.validate()?;
    let sets = [
        SearchOptions::scale_only(bits),
        SearchOptions::with_granularity(bits),
        SearchOptions::full(bits),
    ]
    .map(|o| SearchOptions { metric, ..o });
    let full = &sets[2];
    let prep = prepare(graph, batch, groups, full)?;
    let mut decisions: [Vec<UnitDecision>; 3] = Default::default();
    for unit in &prep.units {
        let search = start_unit(graph, unit, &prep.cache, space, full)?;
        let searched = if search.settled {
            Vec::new()
        } else {
            run_combos(&search, &prep.cache, space, full, &full.combos())?
        };
        for (out, o) in decisions.iter_mut().zip(&sets) {
            out.push(decide(&search, &searched, &o.combos()));
        }
    }
    let [a, b, c] = decisions;
    Ok(Ablation {
        scale_only: assemble(graph, a)?,
        with_granularity: assemble(graph, b)?,
        full: assemble(graph, c)?,
    })
}
