//! Command-line interface: argument parsing and subcommand handlers.
//!
//! Every subcommand writes deterministic, byte-stable files into the output
//! directory (`--out`, or the `MCSD_BENCH_OUT` environment variable, or
//! `./bench-out`). Wall-clock timing is deliberately kept out of the output
//! files so re-runs with identical flags produce identical bytes.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcsd_core::decision::{
    overlap_coefficient, DecisionModel, DecisionT1, DecisionT2, FeatureKind, LabelMode,
};
use mcsd_core::engine::{EngineConfig, Method};
use mcsd_core::model::Model;
use mcsd_core::oracle::{exact_output_distribution, simulate_first_token_distribution};
use mcsd_core::synthetic::{resolve_model, synthetic_prompts};
use mcsd_core::tree::TreeConfig;

use crate::experiment::{
    ablation_decision_model, grid_search, render_ablation, render_table, run_experiment,
    width_sweep, ExperimentSpec,
};
use crate::plots::{emit_plot, PlotKind};
use crate::prompts::{ingest_prompts, subsample};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MCSD_BENCH_OUT";

const DEFAULT_TARGET: &str = "synthetic:vocab=8,order=1,seed=7,concentration=0.5";
const DEFAULT_DRAFT: &str = "synthetic:vocab=8,order=1,seed=7,concentration=0.5,smooth=2.0";
// The oracle is tractable only on tiny instances; its defaults are smaller.
const ORACLE_TARGET: &str = "synthetic:vocab=4,order=1,seed=7,concentration=0.5";
const ORACLE_DRAFT: &str = "synthetic:vocab=4,order=1,seed=7,concentration=0.5,smooth=2.0";

#[derive(Parser, Debug)]
#[command(name = "mcsd-bench", about = "Speculative-decoding benchmark harness")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Run methods over a prompt corpus and emit a result table.
    Run(RunArgs),
    /// Grid-search fork (width, depth) configurations.
    Grid(GridArgs),
    /// Sweep fork width at fixed depth.
    SweepWidth(SweepArgs),
    /// Paired with/without-decision-model comparison.
    AblateDecision(AblateArgs),
    /// Collect training data and train a decision model.
    TrainDecision(TrainArgs),
    /// Compare the exact output-distribution oracle with sampling.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Draft model descriptor: synthetic:..., neural:..., or a file path.
    #[arg(long)]
    pub draft: Option<String>,
    /// Target model descriptor.
    #[arg(long)]
    pub target: Option<String>,
    /// Sampling temperatures, comma-separated.
    #[arg(long = "temperature", value_delimiter = ',', default_values_t = [1.0])]
    pub temperature: Vec<f64>,
    /// Random seeds, comma-separated.
    #[arg(long = "seed", value_delimiter = ',', default_values_t = [0u64])]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    /// Draft-call cost relative to one target call.
    #[arg(long, default_value_t = 0.1)]
    pub cost_c: f64,
    /// Decision-call cost relative to one target call.
    #[arg(long, default_value_t = 0.01)]
    pub cost_d: f64,
    /// Prompt corpus file (token-id lines or JSON lines with a "prompt"
    /// array). Without it a synthetic corpus is sampled from the target.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Subsample (or synthesize) this many prompts.
    #[arg(long)]
    pub n_prompts: Option<usize>,
    /// Dataset tag for the result table.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Output directory; defaults to $MCSD_BENCH_OUT, then ./bench-out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("bench-out"));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(dir)
    }

    fn models(&self, oracle_scale: bool) -> Result<(Model, Model)> {
        let (dd, dt) =
            if oracle_scale { (ORACLE_DRAFT, ORACLE_TARGET) } else { (DEFAULT_DRAFT, DEFAULT_TARGET) };
        let draft = resolve_model(self.draft.as_deref().unwrap_or(dd))
            .map_err(anyhow::Error::from)
            .context("resolving --draft")?;
        let target = resolve_model(self.target.as_deref().unwrap_or(dt))
            .map_err(anyhow::Error::from)
            .context("resolving --target")?;
        ensure!(
            draft.vocab_size() == target.vocab_size(),
            "draft and target vocabulary sizes differ ({} vs {})",
            draft.vocab_size(),
            target.vocab_size()
        );
        Ok((draft, target))
    }

    fn corpus(&self, target: &Model) -> Result<Vec<Vec<u32>>> {
        match &self.prompts {
            Some(path) => {
                let prompts = ingest_prompts(path)?;
                match self.n_prompts {
                    Some(n) => {
                        let (subset, clamped) = subsample(prompts, n, self.seed[0]);
                        if clamped {
                            eprintln!(
                                "warning: requested {n} prompts, corpus has only {}",
                                subset.len()
                            );
                        }
                        Ok(subset)
                    }
                    None => Ok(prompts),
                }
            }
            None => {
                let n = self.n_prompts.unwrap_or(8);
                synthetic_prompts(target, n, 8, 1.0, 4242).map_err(anyhow::Error::from)
            }
        }
    }

    fn spec(&self, methods: Vec<Method>, prompts: Vec<Vec<u32>>) -> ExperimentSpec {
        ExperimentSpec {
            dataset: self.dataset.clone(),
            methods,
            temperatures: self.temperature.clone(),
            seeds: self.seed.clone(),
            max_new_tokens: self.max_new_tokens,
            cost_c: self.cost_c,
            cost_d: self.cost_d,
            prompts,
        }
    }
}

fn resolve_decision(spec: &str) -> Result<DecisionModel> {
    if let Some(v) = spec.strip_prefix("constant:") {
        let c: f64 = v.parse().with_context(|| format!("bad constant value {v:?}"))?;
        return Ok(DecisionModel::Constant(c));
    }
    let text = std::fs::read_to_string(spec)
        .with_context(|| format!("cannot read decision model {spec}"))?;
    DecisionModel::from_text(&text).map_err(anyhow::Error::from)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Methods: vanilla, baseline, mcsd, target-init, dynamic. Repeatable.
    #[arg(long = "method", required = true)]
    pub methods: Vec<String>,
    /// Tree configs for tree methods: "2,4,3,1,1" or "fork:W=3,D=4".
    /// Repeatable; each tree method runs once per tree.
    #[arg(long = "tree")]
    pub trees: Vec<String>,
    /// Draft length for baseline SD.
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    /// Early-stop threshold for dynamic MCSD.
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    /// Decision model for dynamic MCSD: a file or "constant:V".
    #[arg(long)]
    pub decision: Option<String>,
}

fn resolve_methods(args: &RunArgs) -> Result<Vec<Method>> {
    let mut methods = Vec::new();
    for name in &args.methods {
        match name.as_str() {
            "vanilla" => methods.push(Method::Vanilla),
            "baseline" => methods.push(Method::BaselineSd { gamma: args.gamma }),
            "mcsd" | "target-init" | "dynamic" => {
                ensure!(!args.trees.is_empty(), "method {name} requires --tree");
                for t in &args.trees {
                    let method = match name.as_str() {
                        "mcsd" => Method::Mcsd {
                            tree: TreeConfig::parse(t, false).map_err(anyhow::Error::from)?,
                        },
                        "target-init" => Method::TargetInitMcsd {
                            tree: TreeConfig::parse(t, true).map_err(anyhow::Error::from)?,
                        },
                        _ => Method::DynamicMcsd {
                            tree: TreeConfig::parse(t, false).map_err(anyhow::Error::from)?,
                            beta: args.beta,
                        },
                    };
                    methods.push(method);
                }
            }
            other => bail!("unknown method {other:?}"),
        }
    }
    Ok(methods)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let (draft, target) = args.common.models(false)?;
    let prompts = args.common.corpus(&target)?;
    let methods = resolve_methods(args)?;
    let needs_decision = methods.iter().any(|m| matches!(m, Method::DynamicMcsd { .. }));
    let decision = match (&args.decision, needs_decision) {
        (Some(spec), _) => Some(resolve_decision(spec)?),
        (None, true) => bail!("dynamic MCSD requires --decision"),
        (None, false) => None,
    };
    let spec = args.common.spec(methods, prompts);
    let rows = run_experiment(&spec, &draft, &target, decision.as_ref())?;
    let table = render_table(&rows);
    std::fs::write(out.join("results.tsv"), &table)?;
    let bars: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.label(), format!("{:.12}", r.speedup)])
        .collect();
    emit_plot(PlotKind::Bars, &bars, &out.join("results_bars.tsv"))?;
    print!("{table}");
    println!("wrote {}", out.join("results.tsv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fork widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5, 6, 7, 8])]
    pub widths: Vec<usize>,
    /// Fork depths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    pub depths: Vec<usize>,
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    ensure!(
        args.widths.len() * args.depths.len() >= 2,
        "grid search needs at least two cells"
    );
    let (draft, target) = args.common.models(false)?;
    let prompts = args.common.corpus(&target)?;
    let mut methods = Vec::new();
    for &w in &args.widths {
        for &d in &args.depths {
            methods.push(Method::Mcsd {
                tree: TreeConfig::fork(w, d).map_err(anyhow::Error::from)?,
            });
        }
    }
    let spec = args.common.spec(methods, prompts);
    let rows = run_experiment(&spec, &draft, &target, None)?;
    std::fs::write(out.join("grid.tsv"), render_table(&rows))?;

    // Heatmap over the first temperature's cells.
    let t0 = spec.temperatures[0];
    let heat: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.method == "mcsd" && r.temperature == t0)
        .map(|r| {
            let tree = TreeConfig::parse(&r.config, false).unwrap();
            let (w, d) = match tree.shape {
                mcsd_core::tree::TreeShape::Fork { width, depth } => (width, depth),
                _ => unreachable!("grid cells are forks"),
            };
            vec![w.to_string(), d.to_string(), format!("{:.12}", r.speedup)]
        })
        .collect();
    emit_plot(PlotKind::Heatmap, &heat, &out.join("grid_heatmap.tsv"))?;

    let best = grid_search(&rows)?;
    let best_line = format!(
        "best\t{}\t{}\tspeedup={:.12}\talpha={}\n",
        best.method,
        best.config,
        best.speedup,
        best.alpha.map(|a| format!("{a:.12}")).unwrap_or_else(|| "-".into()),
    );
    std::fs::write(out.join("grid_best.txt"), &best_line)?;
    print!("{best_line}");
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-width
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fixed fork depth.
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    /// Widths to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 12, 16, 21])]
    pub widths: Vec<usize>,
}

fn cmd_sweep_width(args: &SweepArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let (draft, target) = args.common.models(false)?;
    let prompts = args.common.corpus(&target)?;
    let spec = args.common.spec(vec![Method::Vanilla], prompts);
    let points = width_sweep(&spec, args.depth, &args.widths, &draft, &target)?;
    let alpha_rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.width.to_string(), format!("{:.12}", p.alpha)])
        .collect();
    let speed_rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.width.to_string(), format!("{:.12}", p.speedup)])
        .collect();
    emit_plot(PlotKind::Series, &alpha_rows, &out.join("width_alpha.tsv"))?;
    emit_plot(PlotKind::Series, &speed_rows, &out.join("width_speed.tsv"))?;
    for p in &points {
        println!("W={}\talpha={:.6}\tspeedup={:.6}", p.width, p.alpha, p.speedup);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-decision
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fork tree for dynamic MCSD.
    #[arg(long, default_value = "fork:W=3,D=4")]
    pub tree: String,
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    /// Decision model: a file or "constant:V".
    #[arg(long, required = true)]
    pub decision: String,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let (draft, target) = args.common.models(false)?;
    let prompts = args.common.corpus(&target)?;
    let tree = TreeConfig::parse(&args.tree, false).map_err(anyhow::Error::from)?;
    let decision = resolve_decision(&args.decision)?;
    let spec = args.common.spec(vec![Method::Vanilla], prompts);
    let row = ablation_decision_model(&spec, &tree, args.beta, &draft, &target, &decision)?;
    let rendered = render_ablation(&row);
    std::fs::write(out.join("ablation.tsv"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

// ---------------------------------------------------------------------------
// train-decision
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Decision model type: t1 (draft hidden state) or t2 (top-k +
    /// entropy).
    #[arg(long, default_value = "t2")]
    pub feature: String,
    /// Label mode: binary, accept-prob, or ratio.
    #[arg(long, default_value = "binary")]
    pub label: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Tree used when collecting training data.
    #[arg(long, default_value = "2,2,1")]
    pub tree: String,
    /// Skip minority-class upsampling.
    #[arg(long)]
    pub no_balance: bool,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let (draft, target) = args.common.models(false)?;
    let prompts = args.common.corpus(&target)?;
    let tree = TreeConfig::parse(&args.tree, false).map_err(anyhow::Error::from)?;
    let seed = args.common.seed[0];

    let (features, mut model) = match args.feature.as_str() {
        "t1" => (
            FeatureKind::Hidden,
            DecisionModel::T1(DecisionT1::new(draft.hidden_size(), seed)),
        ),
        "t2" => (
            FeatureKind::TopKEntropy { k: args.top_k },
            DecisionModel::T2(DecisionT2::new(args.top_k, seed)),
        ),
        other => bail!("unknown feature kind {other:?} (expected t1 or t2)"),
    };
    let labels = match args.label.as_str() {
        "binary" => LabelMode::Binary,
        "accept-prob" => LabelMode::AcceptProb,
        "ratio" => LabelMode::LiteralRatio,
        other => bail!("unknown label mode {other:?}"),
    };

    let config = EngineConfig::new(
        Method::Mcsd { tree },
        args.common.temperature[0],
        args.common.max_new_tokens,
        seed,
    )
    .map_err(anyhow::Error::from)?;
    let samples = mcsd_core::decision::collect_training_data(
        &draft,
        &target,
        &prompts,
        &config,
        features,
        labels,
        !args.no_balance,
        seed,
    )
    .map_err(anyhow::Error::from)?;
    let curve = model.train(&samples, args.epochs, args.lr, seed).map_err(anyhow::Error::from)?;
    let accuracy = model.accuracy(&samples);

    // Score histograms of the two classes, plus their overlap.
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for s in &samples {
        let score = match &model {
            DecisionModel::T1(t1) => t1.score(&s.features),
            DecisionModel::T2(t2) => t2.score(&s.features),
            DecisionModel::Constant(c) => *c,
        };
        if s.label >= 0.5 {
            accepted.push(score);
        } else {
            rejected.push(score);
        }
    }
    let overlap = overlap_coefficient(&accepted, &rejected, 20);

    std::fs::write(out.join("decision.txt"), model.to_text())?;
    let curve_rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), format!("{l:.12}")])
        .collect();
    if !curve_rows.is_empty() {
        emit_plot(PlotKind::Series, &curve_rows, &out.join("train_curve.tsv"))?;
    }
    let hist = |scores: &[f64]| -> Vec<f64> {
        let bins = 20;
        let mut h = vec![0.0; bins];
        for &s in scores {
            let b = ((s.clamp(0.0, 1.0)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0 / scores.len().max(1) as f64;
        }
        h
    };
    let (ha, hr) = (hist(&accepted), hist(&rejected));
    let mut hist_text = String::from("bin\taccepted\trejected\n");
    for b in 0..20 {
        hist_text.push_str(&format!("{:.2}\t{:.12}\t{:.12}\n", b as f64 / 20.0, ha[b], hr[b]));
    }
    std::fs::write(out.join("score_hist.tsv"), hist_text)?;
    let summary = format!(
        "samples={}\naccuracy={accuracy:.12}\noverlap={overlap:.12}\nfinal_loss={}\n",
        samples.len(),
        curve.last().map(|l| format!("{l:.12}")).unwrap_or_else(|| "-".into()),
    );
    std::fs::write(out.join("train_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Method: baseline, mcsd, or target-init.
    #[arg(long, default_value = "mcsd")]
    pub method: String,
    /// Tree config for the tree methods.
    #[arg(long, default_value = "2,1")]
    pub tree: String,
    /// Draft length for baseline SD.
    #[arg(long, default_value_t = 2)]
    pub gamma: usize,
    /// Monte Carlo draws for the sampling cross-check (0 = skip).
    #[arg(long, default_value_t = 100_000)]
    pub mc_draws: usize,
    /// Prompt prefix, comma-separated token ids.
    #[arg(long, default_value = "0")]
    pub prefix: String,
}

fn cmd_oracle_check(args: &OracleArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let (draft, target) = args.common.models(true)?;
    let prefix: Vec<u32> = args
        .prefix
        .split(',')
        .map(|t| t.trim().parse::<u32>().context("bad --prefix token id"))
        .collect::<Result<_>>()?;
    let method = match args.method.as_str() {
        "baseline" => Method::BaselineSd { gamma: args.gamma },
        "mcsd" => Method::Mcsd {
            tree: TreeConfig::parse(&args.tree, false).map_err(anyhow::Error::from)?,
        },
        "target-init" => Method::TargetInitMcsd {
            tree: TreeConfig::parse(&args.tree, true).map_err(anyhow::Error::from)?,
        },
        other => bail!("oracle-check does not cover method {other:?}"),
    };
    let temperature = args.common.temperature[0];
    let exact = exact_output_distribution(
        &method, &draft, &target, &prefix, temperature, false, false,
    )
    .map_err(anyhow::Error::from)?;
    let target_dist = target
        .next_distribution(&prefix, temperature)
        .map_err(anyhow::Error::from)?;
    let mc = if args.mc_draws > 0 {
        Some(
            simulate_first_token_distribution(
                &method,
                &draft,
                &target,
                &prefix,
                temperature,
                false,
                false,
                args.mc_draws,
                args.common.seed[0],
            )
            .map_err(anyhow::Error::from)?,
        )
    } else {
        None
    };

    let mut table = String::from("token\texact\tmonte_carlo\ttarget\n");
    for t in 0..target.vocab_size() as u32 {
        let mc_cell = match &mc {
            Some(d) => format!("{:.12}", d.prob(t)),
            None => "-".into(),
        };
        table.push_str(&format!(
            "{t}\t{:.12}\t{mc_cell}\t{:.12}\n",
            exact.prob(t),
            target_dist.prob(t)
        ));
    }
    std::fs::write(out.join("oracle_check.tsv"), &table)?;

    let tv = exact.tv_distance(&target_dist);
    let mut summary = format!("method={}\ntv_exact_vs_target={tv:.12}\n", method.name());
    if let Some(d) = &mc {
        let max_z = (0..target.vocab_size() as u32)
            .map(|t| {
                let p = exact.prob(t);
                let se = (p * (1.0 - p) / args.mc_draws as f64).sqrt();
                if se > 0.0 { (d.prob(t) - p).abs() / se } else { 0.0 }
            })
            .fold(0.0, f64::max);
        summary.push_str(&format!("mc_draws={}\nmax_z_score={max_z:.6}\n", args.mc_draws));
    }
    std::fs::write(out.join("oracle_summary.txt"), &summary)?;
    print!("{table}{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------

/// Parses argv and dispatches; callers map errors to a nonzero exit.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(argv);
    match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::SweepWidth(a) => cmd_sweep_width(a),
        Cmd::AblateDecision(a) => cmd_ablate(a),
        Cmd::TrainDecision(a) => cmd_train(a),
        Cmd::OracleCheck(a) => cmd_oracle_check(a),
    }
}

/// Convenience for tests: the path of a file inside an output directory.
pub fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
