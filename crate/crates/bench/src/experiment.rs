//! Experiment runner: evaluates method/config cells over a prompt corpus,
//! aggregates acceptance and cost counters, and derives ideal speedups.
//!
//! Speed is measured in the cost model `target_calls + c * draft_calls +
//! d * decision_calls` rather than wall clock, so vanilla decoding is
//! exactly 1.0 and the numbers are deterministic and machine-independent.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use mcsd_core::decision::DecisionModel;
use mcsd_core::engine::{run_generation, EngineConfig, Method, SessionStats};
use mcsd_core::model::Model;
use mcsd_core::tree::TreeConfig;

/// One experiment: a cross product of methods, temperatures, and seeds over
/// a fixed prompt corpus and model pair.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub methods: Vec<Method>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_new_tokens: usize,
    /// Draft-call cost relative to a target call.
    pub cost_c: f64,
    /// Decision-call cost relative to a target call.
    pub cost_d: f64,
    pub prompts: Vec<Vec<u32>>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.methods.is_empty(), "at least one method required");
        ensure!(!self.seeds.is_empty(), "at least one seed required");
        ensure!(!self.temperatures.is_empty(), "at least one temperature required");
        ensure!(self.cost_c > 0.0, "cost c must be positive");
        ensure!(self.cost_d >= 0.0, "cost d must be non-negative");
        ensure!(!self.prompts.is_empty(), "prompt corpus is empty");
        ensure!(self.max_new_tokens > 0, "max_new_tokens must be positive");
        Ok(())
    }
}

/// One aggregated table row: a (method, config, temperature) cell summed
/// over all seeds and prompts.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub config: String,
    pub temperature: f64,
    /// `None` for vanilla decoding, which drafts nothing.
    pub alpha: Option<f64>,
    /// Ideal speedup over vanilla decoding at the same temperature.
    pub speedup: f64,
    /// Ideal speedup over the draft-initialized MCSD row, when present.
    pub vs_mcsd: Option<f64>,
    pub emitted: u64,
    pub draft_calls: u64,
    pub target_calls: u64,
    pub decision_calls: u64,
    pub decision_stops: u64,
    pub depth_hist: BTreeMap<usize, u64>,
}

impl ResultRow {
    /// Canonical ordering key; table rows sort by it before emission.
    pub fn sort_key(&self) -> (String, String, String, String) {
        (
            self.dataset.clone(),
            self.method.clone(),
            self.config.clone(),
            format!("{:.6}", self.temperature),
        )
    }

    pub fn label(&self) -> String {
        if self.config == "-" {
            self.method.clone()
        } else {
            format!("{}({})", self.method, self.config)
        }
    }
}

/// Ideal tokens-per-cost under the cost model.
fn ideal_speed(stats: &AggStats, c: f64, d: f64) -> f64 {
    stats.emitted as f64
        / (stats.target_calls as f64
            + c * stats.draft_calls as f64
            + d * stats.decision_calls as f64)
}

#[derive(Debug, Default, Clone)]
struct AggStats {
    emitted: u64,
    sum_longest: u64,
    sum_max_draft: u64,
    draft_calls: u64,
    target_calls: u64,
    decision_calls: u64,
    decision_stops: u64,
    depth_hist: BTreeMap<usize, u64>,
}

impl AggStats {
    fn absorb(&mut self, s: &SessionStats) {
        self.emitted += s.total_emitted;
        self.sum_longest += s.sum_longest_accepted;
        self.sum_max_draft += s.sum_max_draft;
        self.draft_calls += s.draft_calls;
        self.target_calls += s.target_calls;
        self.decision_calls += s.decision_calls;
        self.decision_stops += s.decision_stops;
        for (&depth, &count) in &s.depth_histogram {
            *self.depth_hist.entry(depth).or_insert(0) += count;
        }
    }

    fn alpha(&self) -> Option<f64> {
        if self.sum_max_draft == 0 {
            None
        } else {
            Some(self.sum_longest as f64 / self.sum_max_draft as f64)
        }
    }
}

/// Runs one (method, temperature) cell over all seeds and prompts.
fn run_cell(
    spec: &ExperimentSpec,
    method: &Method,
    temperature: f64,
    draft: &Model,
    target: &Model,
    decision: Option<&DecisionModel>,
) -> Result<AggStats> {
    let mut agg = AggStats::default();
    for &seed in &spec.seeds {
        for (pi, prompt) in spec.prompts.iter().enumerate() {
            let mut config =
                EngineConfig::new(method.clone(), temperature, spec.max_new_tokens, seed)
                    .map_err(anyhow::Error::from)?;
            // Prompt-distinct streams under a common base seed.
            config.seed = seed.wrapping_add((pi as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let result = run_generation(&config, draft, target, prompt, decision).with_context(
                || {
                    format!(
                        "cell method={} config={} temperature={} seed={} prompt={}",
                        method.name(),
                        method.config_string(),
                        temperature,
                        seed,
                        pi
                    )
                },
            )?;
            // Accounting consistency: the trace must reproduce the stats.
            let trace_emitted: u64 = result.trace.iter().map(|r| r.emitted as u64).sum();
            ensure!(
                trace_emitted == result.stats.total_emitted,
                "per-step emitted tokens do not sum to the session total"
            );
            let trace_accepted: u64 =
                result.trace.iter().map(|r| r.longest_accepted as u64).sum();
            let trace_max: u64 = result.trace.iter().map(|r| r.max_draft_len as u64).sum();
            if trace_max > 0 {
                let recomputed = trace_accepted as f64 / trace_max as f64;
                let alpha = result.stats.alpha().unwrap();
                ensure!(
                    (recomputed - alpha).abs() < 1e-12,
                    "alpha recomputed from trace ({recomputed}) diverges from stats ({alpha})"
                );
            }
            agg.absorb(&result.stats);
        }
    }
    Ok(agg)
}

/// Evaluates every (method, temperature) cell. A vanilla baseline is always
/// included so speedups have a denominator. Rows come back in canonical
/// order.
pub fn run_experiment(
    spec: &ExperimentSpec,
    draft: &Model,
    target: &Model,
    decision: Option<&DecisionModel>,
) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let mut methods = spec.methods.clone();
    if !methods.iter().any(|m| matches!(m, Method::Vanilla)) {
        methods.push(Method::Vanilla);
    }

    let mut rows = Vec::new();
    for &temperature in &spec.temperatures {
        let mut cells: Vec<(Method, AggStats)> = Vec::new();
        for method in &methods {
            let agg = run_cell(spec, method, temperature, draft, target, decision)?;
            cells.push((method.clone(), agg));
        }
        let vanilla_speed = cells
            .iter()
            .find(|(m, _)| matches!(m, Method::Vanilla))
            .map(|(_, agg)| ideal_speed(agg, spec.cost_c, spec.cost_d))
            .unwrap();
        let mcsd_speed = cells
            .iter()
            .find(|(m, _)| matches!(m, Method::Mcsd { .. }))
            .map(|(_, agg)| ideal_speed(agg, spec.cost_c, spec.cost_d) / vanilla_speed);
        for (method, agg) in &cells {
            let speed = ideal_speed(agg, spec.cost_c, spec.cost_d);
            let speedup = speed / vanilla_speed;
            rows.push(ResultRow {
                dataset: spec.dataset.clone(),
                method: method.name().to_string(),
                config: method.config_string(),
                temperature,
                alpha: agg.alpha(),
                speedup,
                vs_mcsd: mcsd_speed.map(|m| speedup / m),
                emitted: agg.emitted,
                draft_calls: agg.draft_calls,
                target_calls: agg.target_calls,
                decision_calls: agg.decision_calls,
                decision_stops: agg.decision_stops,
                depth_hist: agg.depth_hist.clone(),
            });
        }
    }
    rows.sort_by_key(|r| r.sort_key());
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12}"),
        None => "-".into(),
    }
}

fn fmt_hist(hist: &BTreeMap<usize, u64>) -> String {
    if hist.is_empty() {
        return "-".into();
    }
    hist.iter().map(|(d, c)| format!("{d}:{c}")).collect::<Vec<_>>().join(";")
}

/// Renders rows as a tab-separated table; byte-identical for identical
/// specs.
pub fn render_table(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "dataset\tmethod\tconfig\ttemperature\talpha\tspeedup\tvs_mcsd\temitted\t\
         draft_calls\ttarget_calls\tdecision_calls\tdecision_stops\tdepth_hist\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{:.12}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.dataset,
            r.method,
            r.config,
            r.temperature,
            fmt_opt(r.alpha),
            r.speedup,
            fmt_opt(r.vs_mcsd),
            r.emitted,
            r.draft_calls,
            r.target_calls,
            r.decision_calls,
            r.decision_stops,
            fmt_hist(&r.depth_hist),
        ));
    }
    out
}

/// Picks the best row by ideal speedup, ties broken by higher alpha, then
/// by canonical key so the argmax is invariant under row reordering.
pub fn grid_search(rows: &[ResultRow]) -> Result<&ResultRow> {
    let candidates: Vec<&ResultRow> =
        rows.iter().filter(|r| r.method != "vanilla").collect();
    ensure!(candidates.len() >= 2, "grid search needs at least two configurations");
    let best = candidates
        .into_iter()
        .max_by(|a, b| {
            a.speedup
                .partial_cmp(&b.speedup)
                .unwrap()
                .then(a.alpha.unwrap_or(-1.0).partial_cmp(&b.alpha.unwrap_or(-1.0)).unwrap())
                // Reverse on the key: ties resolve to the smallest key.
                .then_with(|| b.sort_key().cmp(&a.sort_key()))
        })
        .unwrap();
    Ok(best)
}

/// One point of the width sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub width: usize,
    pub alpha: f64,
    pub speedup: f64,
}

/// Sweeps fork width at fixed depth with common random numbers (same seeds
/// per width). Returns one point per width.
pub fn width_sweep(
    spec: &ExperimentSpec,
    depth: usize,
    widths: &[usize],
    draft: &Model,
    target: &Model,
) -> Result<Vec<SweepPoint>> {
    ensure!(!widths.is_empty(), "width range is empty");
    let mut points = Vec::new();
    for &w in widths {
        let tree = TreeConfig::fork(w, depth).map_err(anyhow::Error::from)?;
        let mut sub = spec.clone();
        sub.methods = vec![Method::Mcsd { tree }];
        let rows = run_experiment(&sub, draft, target, None)?;
        let row = rows
            .iter()
            .find(|r| r.method == "mcsd")
            .context("mcsd row missing from sweep cell")?;
        points.push(SweepPoint {
            width: w,
            alpha: row.alpha.context("mcsd row has no alpha")?,
            speedup: row.speedup,
        });
    }
    Ok(points)
}

/// One paired ablation row: the same (seed-set, prompts) run with the given
/// decision model and with a never-stopping stub.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: String,
    pub on_alpha: f64,
    pub off_alpha: f64,
    pub on_draft_calls: u64,
    pub off_draft_calls: u64,
    pub on_speedup: f64,
    pub off_speedup: f64,
    pub on_depth_hist: BTreeMap<usize, u64>,
    pub off_depth_hist: BTreeMap<usize, u64>,
}

impl AblationRow {
    pub fn delta_alpha(&self) -> f64 {
        self.on_alpha - self.off_alpha
    }

    pub fn delta_draft_calls(&self) -> i64 {
        self.on_draft_calls as i64 - self.off_draft_calls as i64
    }

    pub fn delta_speedup(&self) -> f64 {
        self.on_speedup - self.off_speedup
    }
}

/// Paired with/without-decision-model comparison on a dynamic MCSD config.
/// The "off" arm replaces the decision model with `Constant(1.0)`, which
/// never halts draft generation; both arms share seeds, so a `Constant(1.0)`
/// "on" arm yields exactly zero deltas.
pub fn ablation_decision_model(
    spec: &ExperimentSpec,
    tree: &TreeConfig,
    beta: f64,
    draft: &Model,
    target: &Model,
    decision: &DecisionModel,
) -> Result<AblationRow> {
    let method = Method::DynamicMcsd { tree: tree.clone(), beta };
    let mut sub = spec.clone();
    sub.methods = vec![method.clone()];

    let run = |d: &DecisionModel| -> Result<ResultRow> {
        let rows = run_experiment(&sub, draft, target, Some(d))?;
        rows.into_iter()
            .find(|r| r.method == "dynamic-mcsd")
            .context("dynamic row missing")
    };
    let on = run(decision)?;
    let off = run(&DecisionModel::Constant(1.0))?;
    Ok(AblationRow {
        config: method.config_string(),
        on_alpha: on.alpha.context("dynamic row has no alpha")?,
        off_alpha: off.alpha.context("dynamic row has no alpha")?,
        on_draft_calls: on.draft_calls,
        off_draft_calls: off.draft_calls,
        on_speedup: on.speedup,
        off_speedup: off.speedup,
        on_depth_hist: on.depth_hist,
        off_depth_hist: off.depth_hist,
    })
}

/// Renders the paired ablation comparison, one arm per line plus deltas.
pub fn render_ablation(row: &AblationRow) -> String {
    let mut out = String::from(
        "config\tarm\talpha\tdraft_calls\tspeedup\tdepth_hist\n",
    );
    out.push_str(&format!(
        "{}\ton\t{:.12}\t{}\t{:.12}\t{}\n",
        row.config,
        row.on_alpha,
        row.on_draft_calls,
        row.on_speedup,
        fmt_hist(&row.on_depth_hist),
    ));
    out.push_str(&format!(
        "{}\toff\t{:.12}\t{}\t{:.12}\t{}\n",
        row.config,
        row.off_alpha,
        row.off_draft_calls,
        row.off_speedup,
        fmt_hist(&row.off_depth_hist),
    ));
    out.push_str(&format!(
        "{}\tdelta\t{:.12}\t{}\t{:.12}\t-\n",
        row.config,
        row.delta_alpha(),
        row.delta_draft_calls(),
        row.delta_speedup(),
    ));
    out
}

/// Guard used by callers that need a nonempty table.
pub fn ensure_nonempty(rows: &[ResultRow]) -> Result<()> {
    if rows.is_empty() {
        bail!("result table is empty");
    }
    Ok(())
}
