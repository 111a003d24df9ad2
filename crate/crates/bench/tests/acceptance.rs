//! Acceptance suite: one test per acceptance criterion, each printing a
//! single PASS line on success (run with `--nocapture` to see them).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mcsd_bench::experiment::{ablation_decision_model, ExperimentSpec};
use mcsd_core::decision::{should_stop, DecisionModel, DecisionT2, TrainSample};
use mcsd_core::dist::Distribution;
use mcsd_core::engine::{improvement_factor, run_generation, EngineConfig, Method};
use mcsd_core::model::Model;
use mcsd_core::model::TabularModel;
use mcsd_core::oracle::{exact_output_distribution, simulate_first_token_distribution};
use mcsd_core::synthetic::{smoothed_draft, synthetic_target, SyntheticSpec};
use mcsd_core::tree::{
    build_topology_mask, build_tree_shape, draft_nodes_per_init_token, leaf_sequence_count,
    mask_growth, slice_mask, TreeConfig, TreeShape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(vocab: usize, rng: &mut ChaCha8Rng) -> Distribution {
    Distribution::from_weights((0..vocab).map(|_| rng.gen::<f64>() + 1e-3).collect()).unwrap()
}

fn constant_model(row: Distribution) -> Model {
    Model::Tabular(TabularModel::new(row.len(), 0, BTreeMap::new(), row).unwrap())
}

// Criterion 1: baseline SD output distribution equals the target.
#[test]
fn acceptance_baseline_sd_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_tv: f64 = 0.0;
    for _ in 0..200 {
        let vocab = rng.gen_range(2..=4);
        let p = random_dist(vocab, &mut rng);
        let q = random_dist(vocab, &mut rng);
        let gamma = rng.gen_range(1..=2);
        let out = exact_output_distribution(
            &Method::BaselineSd { gamma },
            &constant_model(q),
            &constant_model(p.clone()),
            &[0],
            1.0,
            false,
            false,
        )
        .unwrap();
        max_tv = max_tv.max(out.tv_distance(&p));
    }
    let elapsed = start.elapsed();
    assert!(max_tv < 1e-9, "max TV {max_tv}");
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "PASS: baseline SD exact on 200 random pairs (max TV {max_tv:.2e}, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

/// Branching vectors with at most 6 total nodes.
fn small_branchings() -> Vec<Vec<usize>> {
    vec![
        vec![1],
        vec![2],
        vec![3],
        vec![4],
        vec![5],
        vec![6],
        vec![1, 1],
        vec![2, 1],
        vec![1, 2],
        vec![2, 2],
        vec![3, 1],
        vec![1, 3],
        vec![1, 1, 1],
        vec![2, 1, 1],
        vec![1, 2, 1],
        vec![1, 1, 2],
        vec![1, 1, 1, 1],
    ]
}

// Criterion 2: draft-initialized MCSD preserves the target distribution.
#[test]
fn acceptance_draft_init_mcsd_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let branchings = small_branchings();
    let mut max_tv: f64 = 0.0;
    for case in 0..100u64 {
        let vocab = rng.gen_range(2..=4);
        let target =
            synthetic_target(&SyntheticSpec::new(vocab, 1, 300 + case, 0.8).unwrap()).unwrap();
        let draft =
            synthetic_target(&SyntheticSpec::new(vocab, 1, 700 + case, 0.8).unwrap()).unwrap();
        let branching = &branchings[rng.gen_range(0..branchings.len())];
        let tree = TreeConfig::expansion(branching).unwrap();
        let prefix = [rng.gen_range(0..vocab as u32)];
        let out = exact_output_distribution(
            &Method::Mcsd { tree },
            &draft,
            &target,
            &prefix,
            1.0,
            false,
            false,
        )
        .unwrap();
        let expected = target.next_distribution(&prefix, 1.0).unwrap();
        max_tv = max_tv.max(out.tv_distance(&expected));
    }
    let elapsed = start.elapsed();
    assert!(max_tv < 1e-9, "max TV {max_tv}");
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "PASS: draft-init MCSD exact on 100 random trees (max TV {max_tv:.2e}, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// Criterion 3: one target-initialized token is equivalent to draft-init
// MCSD over the same subtree.
#[test]
fn acceptance_target_init_single_token_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_tv: f64 = 0.0;
    for case in 0..50u64 {
        let vocab = rng.gen_range(2..=4);
        let target =
            synthetic_target(&SyntheticSpec::new(vocab, 1, 30 + case, 0.7).unwrap()).unwrap();
        let draft =
            synthetic_target(&SyntheticSpec::new(vocab, 1, 90 + case, 0.7).unwrap()).unwrap();
        let sub: Vec<usize> = match case % 4 {
            0 => vec![2],
            1 => vec![3],
            2 => vec![2, 1],
            _ => vec![1, 1, 1],
        };
        let mut branching = vec![1];
        branching.extend(&sub);
        let init_tree =
            TreeConfig::new(TreeShape::Expansion { branching }, 1).unwrap();
        let prefix = [rng.gen_range(0..vocab as u32)];
        let a = exact_output_distribution(
            &Method::TargetInitMcsd { tree: init_tree },
            &draft,
            &target,
            &prefix,
            1.0,
            false,
            false,
        )
        .unwrap();
        let b = exact_output_distribution(
            &Method::Mcsd { tree: TreeConfig::expansion(&sub).unwrap() },
            &draft,
            &target,
            &prefix,
            1.0,
            false,
            false,
        )
        .unwrap();
        max_tv = max_tv.max(a.tv_distance(&b));
    }
    assert!(max_tv < 1e-9, "max TV {max_tv}");
    println!("PASS: target-init W0=1 equals draft-init MCSD on 50 cases (max TV {max_tv:.2e})");
}

/// Fixture where the draft agrees with the target after token 0 only, so
/// token 0's subtree wins the init-token race beyond its target share.
fn divergence_fixture() -> (Model, Model, TreeConfig) {
    let uniform = Distribution::uniform(3);
    let p0 = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
    let mut target_rows = BTreeMap::new();
    for t in 0..3u32 {
        target_rows.insert(vec![t], uniform.clone());
    }
    let target = Model::Tabular(TabularModel::new(3, 1, target_rows, p0.clone()).unwrap());
    let skew = Distribution::new(vec![0.98, 0.01, 0.01]).unwrap();
    let mut draft_rows = BTreeMap::new();
    draft_rows.insert(vec![0u32], uniform);
    draft_rows.insert(vec![1u32], skew.clone());
    draft_rows.insert(vec![2u32], skew);
    let draft = Model::Tabular(TabularModel::new(3, 1, draft_rows, p0).unwrap());
    let tree =
        TreeConfig::new(TreeShape::Expansion { branching: vec![2, 2] }, 2).unwrap();
    (draft, target, tree)
}

// Criterion 4: two init tokens visibly bias the output; the oracle value
// matches a 10^6-draw Monte Carlo estimate within 3 standard errors.
#[test]
fn acceptance_target_init_two_token_divergence() {
    let (draft, target, tree) = divergence_fixture();
    let method = Method::TargetInitMcsd { tree };
    let exact =
        exact_output_distribution(&method, &draft, &target, &[0], 1.0, false, false).unwrap();
    let p = target.next_distribution(&[0], 1.0).unwrap();
    let tv = exact.tv_distance(&p);
    assert!(tv > 0.01, "tv {tv}");

    let n = 1_000_000;
    let mc = simulate_first_token_distribution(
        &method, &draft, &target, &[0], 1.0, false, false, n, 4,
    )
    .unwrap();
    let mut max_z: f64 = 0.0;
    for t in 0..3u32 {
        let pe = exact.prob(t);
        let se = (pe * (1.0 - pe) / n as f64).sqrt();
        let diff = (mc.prob(t) - pe).abs();
        // Degenerate cells (pe of exactly 0 or 1) have zero standard error
        // and must match exactly.
        if se == 0.0 {
            assert_eq!(diff, 0.0, "token {t}: exact {pe} but mc {}", mc.prob(t));
            continue;
        }
        let z = diff / se;
        assert!(z < 3.0, "token {t}: z {z}");
        max_z = max_z.max(z);
    }
    println!(
        "PASS: target-init W0=2 diverges from target (TV {tv:.4}) and matches 10^6-draw \
         Monte Carlo (max z {max_z:.2})"
    );
}

// Criterion 5: target-init MCSD (2,4,3,1,1) beats draft-init MCSD (4,2,2,1)
// on acceptance rate over 1000+ common-seed steps.
#[test]
fn acceptance_alpha_improvement_direction() {
    let target = synthetic_target(&SyntheticSpec::new(8, 1, 7, 0.5).unwrap()).unwrap();
    let draft = smoothed_draft(&target, 2.0).unwrap();
    let ti_tree = TreeConfig::parse("2,4,3,1,1", true).unwrap();
    let mcsd_tree = TreeConfig::parse("4,2,2,1", false).unwrap();

    let alpha_of = |method: Method| -> (f64, u64) {
        let (mut longest, mut max_draft, mut steps) = (0u64, 0u64, 0u64);
        for seed in 0..24u64 {
            let cfg = EngineConfig::new(method.clone(), 1.0, 256, seed).unwrap();
            let r = run_generation(&cfg, &draft, &target, &[0], None).unwrap();
            longest += r.stats.sum_longest_accepted;
            max_draft += r.stats.sum_max_draft;
            steps += r.stats.total_steps;
        }
        (longest as f64 / max_draft as f64, steps)
    };
    let (alpha_ti, steps_ti) = alpha_of(Method::TargetInitMcsd { tree: ti_tree });
    let (alpha_mcsd, steps_mcsd) = alpha_of(Method::Mcsd { tree: mcsd_tree });
    assert!(steps_ti >= 1000, "only {steps_ti} target-init steps");
    assert!(steps_mcsd >= 1000, "only {steps_mcsd} mcsd steps");
    assert!(
        alpha_ti > alpha_mcsd,
        "target-init alpha {alpha_ti} not above mcsd alpha {alpha_mcsd}"
    );
    println!(
        "PASS: target-init alpha {alpha_ti:.4} > mcsd alpha {alpha_mcsd:.4} \
         (margin {:.4} over {steps_ti}/{steps_mcsd} steps)",
        alpha_ti - alpha_mcsd
    );
}

// Criterion 6: the improvement-factor formula.
#[test]
fn acceptance_improvement_factor_formula() {
    for gamma in 1..=6 {
        for &c in &[0.05, 0.1, 0.5] {
            let expected = 1.0 / (c * gamma as f64 + 1.0);
            assert_eq!(improvement_factor(0.0, gamma, c).unwrap(), expected);
        }
    }
    // Independent evaluation through the geometric-series form
    // sum_{i=0..gamma} alpha^i / (c*gamma + 1).
    let (alpha, gamma, c) = (0.8f64, 4usize, 0.1f64);
    let mut series = 0.0;
    let mut term = 1.0;
    for _ in 0..=gamma {
        series += term;
        term *= alpha;
    }
    let independent = series / (c * gamma as f64 + 1.0);
    let value = improvement_factor(alpha, gamma, c).unwrap();
    assert!((value - independent).abs() < 1e-9);
    assert!((value - 2.401142857142857).abs() < 1e-9, "value {value}");
    // Monotone in alpha on a 100-point grid.
    let mut prev = f64::NEG_INFINITY;
    for i in 0..100 {
        let a = i as f64 / 100.0 * 0.99;
        let v = improvement_factor(a, gamma, c).unwrap();
        assert!(v > prev, "not monotone at alpha {a}");
        prev = v;
    }
    println!(
        "PASS: improvement factor closed form (IF(0.8,4,0.1) = {value:.9}, monotone on 100 points)"
    );
}

// Criterion 7: mask slices equal freshly built masks, cell for cell.
#[test]
fn acceptance_mask_slice_equivalence() {
    let start = Instant::now();
    let mut checked = 0;
    for w in 1..=8 {
        for d in 1..=6 {
            let tree = build_tree_shape(&TreeConfig::fork(w, d).unwrap());
            let full = build_topology_mask(&tree);
            for cut in 1..=d {
                let slice = slice_mask(&full, cut, &tree).unwrap();
                let rebuilt = build_topology_mask(&tree.truncated(cut));
                assert_eq!(slice.dim(), rebuilt.dim());
                for r in 0..slice.dim() {
                    for c in 0..slice.dim() {
                        assert_eq!(
                            slice.get(r, c),
                            rebuilt.get(r, c),
                            "W={w} D={d} cut={cut} cell ({r},{c})"
                        );
                    }
                }
                checked += 1;
            }
        }
    }
    // The published width-3 figures: the full 3-chain depth-3 mask sliced
    // to depth 2 is the 6x6 mask, and sliced to depth 1 the upper-left 3x3.
    let tree = build_tree_shape(&TreeConfig::fork(3, 3).unwrap());
    let full = build_topology_mask(&tree);
    assert_eq!(full.dim(), 9);
    assert_eq!(slice_mask(&full, 2, &tree).unwrap().dim(), 6);
    let top = slice_mask(&full, 1, &tree).unwrap();
    assert_eq!(top.dim(), 3);
    for r in 0..3 {
        for c in 0..3 {
            assert_eq!(top.get(r, c), full.get(r, c), "upper-left 3x3 cell ({r},{c})");
            assert_eq!(top.get(r, c), r == c);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "PASS: mask slices equal rebuilt masks ({checked} slices incl. 6x6 and 3x3 cases, \
         {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// Criterion 8: the (2,4,3,1,1) configuration arithmetic.
#[test]
fn acceptance_config_arithmetic() {
    let config =
        TreeConfig::new(TreeShape::Expansion { branching: vec![2, 4, 3, 1, 1] }, 2).unwrap();
    let tree = build_tree_shape(&config);
    assert_eq!(tree.level_counts(), &[2, 8, 24, 24, 24]);
    assert_eq!(draft_nodes_per_init_token(&config), 40);
    assert_eq!(leaf_sequence_count(&config), 24);
    println!("PASS: (2,4,3,1,1) yields 40 draft tokens per init token and 24 leaf sequences");
}

// Criterion 9: fork node count grows linearly, uniform expansion
// super-linearly.
#[test]
fn acceptance_mask_growth() {
    for w in [1usize, 2, 3, 8, 16] {
        let counts: Vec<usize> = (1..=6)
            .map(|d| mask_growth(&TreeShape::Fork { width: w, depth: d }).nodes)
            .collect();
        let diffs: Vec<usize> = counts.windows(2).map(|p| p[1] - p[0]).collect();
        assert!(diffs.iter().all(|&x| x == w), "fork W={w}: {counts:?}");
    }
    for b in [2usize, 3, 4] {
        let counts: Vec<usize> = (1..=6)
            .map(|d| mask_growth(&TreeShape::Expansion { branching: vec![b; d] }).nodes)
            .collect();
        let diffs: Vec<usize> = counts.windows(2).map(|p| p[1] - p[0]).collect();
        assert!(
            diffs.windows(2).all(|p| p[1] > p[0]),
            "expansion b={b}: {counts:?}"
        );
    }
    println!("PASS: fork growth linear in depth, uniform expansion growth super-linear");
}

// Criterion 10: decision-model behavior.
#[test]
fn acceptance_decision_model_behavior() {
    // Threshold rule: stop only when every score is strictly below beta.
    assert!(should_stop(&[0.1, 0.2, 0.3], 0.4).unwrap());
    assert!(!should_stop(&[0.1, 0.5, 0.2], 0.4).unwrap());
    assert!(!should_stop(&[0.4], 0.4).unwrap(), "boundary must not stop");

    // Trained T2 separates a separable fixture.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = Vec::new();
    for i in 0..400 {
        let accepted = i % 2 == 0;
        let n: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 0.1).collect();
        let features = if accepted {
            vec![0.9 + n[0], 0.05 + n[1], n[2]]
        } else {
            vec![0.1 + n[0], 0.8 + n[1], 2.0 + n[2]]
        };
        samples.push(TrainSample { features, label: accepted as u64 as f64, step_id: i });
    }
    let mut model = DecisionModel::T2(DecisionT2::new(2, 5));
    model.train(&samples, 60, 0.5, 5).unwrap();
    let accuracy = model.accuracy(&samples);
    assert!(accuracy > 0.95, "accuracy {accuracy}");

    // Ablation with constant stubs.
    let target = synthetic_target(&SyntheticSpec::new(8, 1, 7, 0.5).unwrap()).unwrap();
    let draft = smoothed_draft(&target, 2.0).unwrap();
    let tree = TreeConfig::fork(3, 4).unwrap();
    let spec = ExperimentSpec {
        dataset: "synthetic".into(),
        methods: vec![Method::Vanilla],
        temperatures: vec![1.0],
        seeds: vec![0, 1],
        max_new_tokens: 64,
        cost_c: 0.1,
        cost_d: 0.01,
        prompts: vec![vec![0], vec![3]],
    };
    let same = ablation_decision_model(
        &spec,
        &tree,
        0.4,
        &draft,
        &target,
        &DecisionModel::Constant(1.0),
    )
    .unwrap();
    assert_eq!(same.delta_alpha(), 0.0);
    assert_eq!(same.delta_draft_calls(), 0);
    assert_eq!(same.delta_speedup(), 0.0);

    let stopper = ablation_decision_model(
        &spec,
        &tree,
        0.4,
        &draft,
        &target,
        &DecisionModel::Constant(0.0),
    )
    .unwrap();
    assert_eq!(
        stopper.on_depth_hist.keys().copied().collect::<Vec<_>>(),
        vec![1],
        "always-stop arm must collapse to depth 1"
    );

    // The measured (not asserted) speed effect of a firing decision model.
    let measured = ablation_decision_model(
        &spec,
        &tree,
        0.4,
        &draft,
        &target,
        &DecisionModel::Constant(0.35),
    )
    .unwrap();
    assert!(measured.delta_draft_calls() < 0);
    println!(
        "PASS: decision threshold/training/ablation behavior (fixture accuracy {accuracy:.3}; \
         firing stub: d_draft_calls {}, d_speedup {:+.4} [reported])",
        measured.delta_draft_calls(),
        measured.delta_speedup()
    );
}

// Criterion 11: every CLI subcommand is byte-deterministic.
#[test]
fn acceptance_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_mcsd-bench");
    let base = std::env::temp_dir().join(format!("mcsd-acceptance-{}", std::process::id()));
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "run",
            vec![
                "run".into(),
                "--method".into(),
                "vanilla".into(),
                "--method".into(),
                "baseline".into(),
                "--method".into(),
                "mcsd".into(),
                "--method".into(),
                "dynamic".into(),
                "--tree".into(),
                "fork:W=2,D=3".into(),
                "--decision".into(),
                "constant:0.5".into(),
                "--max-new-tokens".into(),
                "48".into(),
                "--n-prompts".into(),
                "2".into(),
                "--seed".into(),
                "1,2".into(),
            ],
        ),
        (
            "grid",
            vec![
                "grid".into(),
                "--widths".into(),
                "1,2".into(),
                "--depths".into(),
                "1,2".into(),
                "--max-new-tokens".into(),
                "32".into(),
                "--n-prompts".into(),
                "2".into(),
            ],
        ),
        (
            "sweep-width",
            vec![
                "sweep-width".into(),
                "--depth".into(),
                "3".into(),
                "--widths".into(),
                "1,2".into(),
                "--max-new-tokens".into(),
                "32".into(),
                "--n-prompts".into(),
                "2".into(),
            ],
        ),
        (
            "ablate-decision",
            vec![
                "ablate-decision".into(),
                "--decision".into(),
                "constant:0.3".into(),
                "--tree".into(),
                "fork:W=2,D=3".into(),
                "--max-new-tokens".into(),
                "32".into(),
                "--n-prompts".into(),
                "2".into(),
            ],
        ),
        (
            "train-decision",
            vec![
                "train-decision".into(),
                "--feature".into(),
                "t2".into(),
                "--epochs".into(),
                "5".into(),
                "--max-new-tokens".into(),
                "32".into(),
                "--n-prompts".into(),
                "2".into(),
            ],
        ),
        (
            "oracle-check",
            vec![
                "oracle-check".into(),
                "--method".into(),
                "target-init".into(),
                "--tree".into(),
                "2,2".into(),
                "--mc-draws".into(),
                "20000".into(),
            ],
        ),
    ];

    for (name, args) in &commands {
        let dirs = [base.join(format!("{name}-a")), base.join(format!("{name}-b"))];
        for dir in &dirs {
            let _ = std::fs::remove_dir_all(dir);
            let output = Command::new(bin)
                .args(args)
                .arg("--out")
                .arg(dir)
                .env_remove("MCSD_BENCH_OUT")
                .output()
                .expect("spawn mcsd-bench");
            assert!(
                output.status.success(),
                "{name} failed: {}",
                String::from_utf8_lossy(&output.stderr)
            );
        }
        let files = |dir: &Path| -> Vec<String> {
            let mut names: Vec<String> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            names
        };
        let (fa, fb) = (files(&dirs[0]), files(&dirs[1]));
        assert_eq!(fa, fb, "{name}: file sets differ");
        assert!(!fa.is_empty(), "{name}: wrote no files");
        for f in &fa {
            let a = std::fs::read(dirs[0].join(f)).unwrap();
            let b = std::fs::read(dirs[1].join(f)).unwrap();
            assert_eq!(a, b, "{name}: {f} differs between identical runs");
        }
    }
    println!("PASS: all 6 CLI subcommands re-run byte-identically");
}
