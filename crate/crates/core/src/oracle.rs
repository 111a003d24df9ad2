//! Exact output-distribution oracle.
//!
//! Computes the exact distribution of the first token a decoding step
//! emits, by dynamic programming over every draft sampling outcome and
//! every accept/reject coin — no Monte Carlo. It shares no code with the
//! sampling implementations in [`crate::engine`]; the two are independent
//! routes to the same distribution, which the test suites compare.
//!
//! Tractable only for tiny instances (vocabulary of at most 5 tokens, at
//! most 6 tree nodes); larger instances are refused.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{residual_or_target, Distribution};
use crate::engine::{
    baseline_sd_step, mcsd_step, target_init_step, EvalCache, Method,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tree::{mask_growth, TreeConfig};

/// Largest vocabulary the enumeration accepts.
pub const MAX_ORACLE_VOCAB: usize = 5;
/// Largest token-tree node count the enumeration accepts.
pub const MAX_ORACLE_NODES: usize = 6;

/// Exact distribution of the first token emitted by one step of `method`.
///
/// `with_replacement` selects the sibling sampling/verification variant and
/// `greedy_init` the target-init token selection, mirroring the engine
/// flags.
pub fn exact_output_distribution(
    method: &Method,
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    temperature: f64,
    with_replacement: bool,
    greedy_init: bool,
) -> Result<Distribution> {
    let vocab = target.vocab_size();
    if vocab > MAX_ORACLE_VOCAB {
        return Err(Error::OracleIntractable(format!(
            "vocabulary size {vocab} exceeds {MAX_ORACLE_VOCAB}"
        )));
    }
    match method {
        Method::BaselineSd { gamma } => {
            if *gamma > MAX_ORACLE_NODES {
                return Err(Error::OracleIntractable(format!(
                    "gamma {gamma} exceeds {MAX_ORACLE_NODES}"
                )));
            }
            baseline_first_token(draft, target, prefix, temperature)
        }
        Method::Mcsd { tree } => {
            check_tree_size(tree)?;
            let branching = branching_of(tree);
            mcsd_first_token(draft, target, prefix, &branching, temperature, with_replacement)
        }
        Method::TargetInitMcsd { tree } => {
            check_tree_size(tree)?;
            let branching = branching_of(tree);
            target_init_first_token(
                draft,
                target,
                prefix,
                &branching,
                tree.target_init_width,
                temperature,
                with_replacement,
                greedy_init,
            )
        }
        other => Err(Error::InvalidArgument(format!(
            "oracle does not cover method {}",
            other.name()
        ))),
    }
}

fn check_tree_size(tree: &TreeConfig) -> Result<()> {
    let nodes = mask_growth(&tree.shape).nodes;
    if nodes > MAX_ORACLE_NODES {
        return Err(Error::OracleIntractable(format!(
            "tree has {nodes} nodes, exceeds {MAX_ORACLE_NODES}"
        )));
    }
    Ok(())
}

/// Per-level sibling counts, uniform across parents.
fn branching_of(tree: &TreeConfig) -> Vec<usize> {
    match &tree.shape {
        crate::tree::TreeShape::Expansion { branching } => branching.clone(),
        crate::tree::TreeShape::Fork { width, depth } => {
            // A fork is one level of `width` siblings followed by
            // single-child levels.
            let mut b = vec![*width];
            b.extend(std::iter::repeat(1).take(depth - 1));
            b
        }
    }
}

// ---------------------------------------------------------------------------
// Baseline SD
// ---------------------------------------------------------------------------

/// The first emitted token of baseline SD depends only on the first draft
/// position: the token itself when accepted, the residual draw otherwise.
fn baseline_first_token(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    temperature: f64,
) -> Result<Distribution> {
    let q = draft.next_distribution(prefix, temperature)?;
    let p = target.next_distribution(prefix, temperature)?;
    let vocab = p.len();
    let mut out = vec![0.0; vocab];
    let mut reject_mass = 0.0;
    for x in 0..vocab as u32 {
        let qx = q.prob(x);
        if qx == 0.0 {
            continue;
        }
        let accept = (p.prob(x) / qx).min(1.0);
        out[x as usize] += qx * accept;
        reject_mass += qx * (1.0 - accept);
    }
    if reject_mass > 0.0 {
        let res = residual_or_target(&p, &q);
        for x in 0..vocab {
            out[x] += reject_mass * res.probs()[x];
        }
    }
    Distribution::from_weights(out)
}

// ---------------------------------------------------------------------------
// Sibling-level enumeration
// ---------------------------------------------------------------------------

/// Enumerates every ordered draw of up to `k` candidates from `q` without
/// replacement (stopping early when the support runs out), invoking `f`
/// with (tokens, weight).
fn enumerate_draws_without_replacement(
    q: &Distribution,
    k: usize,
    f: &mut dyn FnMut(&[u32], f64),
) {
    fn recurse(
        q: &Distribution,
        remaining: usize,
        drawn: &mut Vec<u32>,
        weight: f64,
        f: &mut dyn FnMut(&[u32], f64),
    ) {
        if remaining == 0 || q.support_size() == 0 {
            f(drawn, weight);
            return;
        }
        for x in 0..q.len() as u32 {
            let qx = q.prob(x);
            if qx == 0.0 {
                continue;
            }
            drawn.push(x);
            match q.excluding(x) {
                Some(next) => recurse(&next, remaining - 1, drawn, weight * qx, f),
                None => f(drawn, weight * qx),
            }
            drawn.pop();
        }
    }
    recurse(q, k, &mut Vec::new(), 1.0, f);
}

/// Enumerates every ordered i.i.d. draw of `k` candidates from `q`.
fn enumerate_draws_with_replacement(q: &Distribution, k: usize, f: &mut dyn FnMut(&[u32], f64)) {
    fn recurse(
        q: &Distribution,
        remaining: usize,
        drawn: &mut Vec<u32>,
        weight: f64,
        f: &mut dyn FnMut(&[u32], f64),
    ) {
        if remaining == 0 {
            f(drawn, weight);
            return;
        }
        for x in 0..q.len() as u32 {
            let qx = q.prob(x);
            if qx == 0.0 {
                continue;
            }
            drawn.push(x);
            recurse(q, remaining - 1, drawn, weight * qx, f);
            drawn.pop();
        }
    }
    recurse(q, k, &mut Vec::new(), 1.0, f);
}

fn enumerate_draws(
    q: &Distribution,
    k: usize,
    with_replacement: bool,
    f: &mut dyn FnMut(&[u32], f64),
) {
    if with_replacement {
        enumerate_draws_with_replacement(q, k, f);
    } else {
        enumerate_draws_without_replacement(q, k, f);
    }
}

/// Outcome probabilities of one sibling level's accept/reject coins:
/// `accepted[j]` is the probability candidate `tokens[j]` wins, and
/// `all_rejected` the residual distribution plus its reach probability.
struct LevelOutcomes {
    accepted: Vec<f64>,
    all_rejected: Option<(Distribution, f64)>,
}

/// Integrates the coins over one sibling level: candidates `tokens` drawn
/// from `q`, verified in order against an evolving copy of `p`.
fn level_verification_outcomes(
    tokens: &[u32],
    q: &Distribution,
    p: &Distribution,
    with_replacement: bool,
) -> LevelOutcomes {
    let mut p_cur = p.clone();
    let mut q_cur = q.clone();
    let mut weight = 1.0;
    let mut accepted = vec![0.0; tokens.len()];
    for (j, &x) in tokens.iter().enumerate() {
        let qx = q_cur.prob(x);
        let accept = if qx > 0.0 { (p_cur.prob(x) / qx).min(1.0) } else { 0.0 };
        accepted[j] = weight * accept;
        weight *= 1.0 - accept;
        if weight == 0.0 {
            return LevelOutcomes { accepted, all_rejected: None };
        }
        p_cur = residual_or_target(&p_cur, &q_cur);
        if !with_replacement {
            match q_cur.excluding(x) {
                Some(next) => q_cur = next,
                None => break,
            }
        }
    }
    LevelOutcomes { accepted, all_rejected: Some((p_cur, weight)) }
}

// ---------------------------------------------------------------------------
// Draft-initialized MCSD
// ---------------------------------------------------------------------------

/// The first emitted token of draft-initialized MCSD is decided entirely at
/// the root level: the first accepted root candidate, or the correction
/// draw after all roots are rejected.
fn mcsd_first_token(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    branching: &[usize],
    temperature: f64,
    with_replacement: bool,
) -> Result<Distribution> {
    let q = draft.next_distribution(prefix, temperature)?;
    let p = target.next_distribution(prefix, temperature)?;
    let vocab = p.len();
    let mut out = vec![0.0; vocab];
    enumerate_draws(&q, branching[0], with_replacement, &mut |tokens, w_draw| {
        let outcomes = level_verification_outcomes(tokens, &q, &p, with_replacement);
        for (j, &w) in outcomes.accepted.iter().enumerate() {
            out[tokens[j] as usize] += w_draw * w;
        }
        if let Some((residual, w)) = outcomes.all_rejected {
            for x in 0..vocab {
                out[x] += w_draw * w * residual.probs()[x];
            }
        }
    });
    Distribution::from_weights(out)
}

// ---------------------------------------------------------------------------
// Target-initialized MCSD
// ---------------------------------------------------------------------------

/// Distribution of the longest accepted draft-chain length below a node
/// whose context is `ctx`, with `levels` sibling counts remaining.
/// Index `d` of the returned vector is the probability of exactly `d`
/// accepted draft tokens.
fn accepted_length_distribution(
    draft: &Model,
    target: &Model,
    ctx: &[u32],
    levels: &[usize],
    temperature: f64,
    with_replacement: bool,
) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Ok(vec![1.0]);
    }
    let q = draft.next_distribution(ctx, temperature)?;
    let p = target.next_distribution(ctx, temperature)?;
    let mut out = vec![0.0; levels.len() + 1];
    let mut err: Result<()> = Ok(());
    enumerate_draws(&q, levels[0], with_replacement, &mut |tokens, w_draw| {
        if err.is_err() {
            return;
        }
        let outcomes = level_verification_outcomes(tokens, &q, &p, with_replacement);
        for (j, &w) in outcomes.accepted.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut child_ctx = ctx.to_vec();
            child_ctx.push(tokens[j]);
            match accepted_length_distribution(
                draft,
                target,
                &child_ctx,
                &levels[1..],
                temperature,
                with_replacement,
            ) {
                Ok(sub) => {
                    for (d, &pd) in sub.iter().enumerate() {
                        out[d + 1] += w_draw * w * pd;
                    }
                }
                Err(e) => err = Err(e),
            }
        }
        if let Some((_res, w)) = outcomes.all_rejected {
            out[0] += w_draw * w;
        }
    });
    err?;
    Ok(out)
}

/// First emitted token of target-initialized MCSD: the init token whose
/// subtree yields the longest accepted draft sequence, ties broken by
/// higher target probability then lower token id. Its marginal is
/// proportional to P_target(t) times the win probability of t's subtree,
/// which diverges from P_target whenever more than one init token competes.
#[allow(clippy::too_many_arguments)]
fn target_init_first_token(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    branching: &[usize],
    init_width: usize,
    temperature: f64,
    with_replacement: bool,
    greedy_init: bool,
) -> Result<Distribution> {
    if init_width < 1 {
        return Err(Error::InvalidArgument("target_init_width must be >= 1".into()));
    }
    let p0 = target.next_distribution(prefix, temperature)?;
    let vocab = p0.len();
    let sub_levels = &branching[1..];
    let mut out = vec![0.0; vocab];

    let mut process_init_set = |init_tokens: &[u32], w_draw: f64| -> Result<()> {
        // Length distribution per init token; subtrees are independent.
        let mut length_dists = Vec::with_capacity(init_tokens.len());
        for &t in init_tokens {
            let mut ctx = prefix.to_vec();
            ctx.push(t);
            length_dists.push(accepted_length_distribution(
                draft,
                target,
                &ctx,
                sub_levels,
                temperature,
                with_replacement,
            )?);
        }
        // Joint enumeration of lengths; pick the winner per the tie rules.
        let mut assignment = vec![0usize; init_tokens.len()];
        loop {
            let mut weight = w_draw;
            for (i, &d) in assignment.iter().enumerate() {
                weight *= length_dists[i][d];
            }
            if weight > 0.0 {
                let winner = (0..init_tokens.len())
                    .max_by(|&a, &b| {
                        assignment[a]
                            .cmp(&assignment[b])
                            .then(
                                p0.prob(init_tokens[a])
                                    .partial_cmp(&p0.prob(init_tokens[b]))
                                    .unwrap(),
                            )
                            .then(init_tokens[b].cmp(&init_tokens[a]))
                    })
                    .unwrap();
                out[init_tokens[winner] as usize] += weight;
            }
            // Advance the mixed-radix counter over length assignments.
            let mut i = 0;
            loop {
                if i == assignment.len() {
                    return Ok(());
                }
                assignment[i] += 1;
                if assignment[i] < length_dists[i].len() {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
        }
    };

    if greedy_init {
        let mut ids: Vec<u32> = (0..vocab as u32).filter(|&t| p0.prob(t) > 0.0).collect();
        ids.sort_by(|&a, &b| p0.prob(b).partial_cmp(&p0.prob(a)).unwrap().then(a.cmp(&b)));
        ids.truncate(init_width);
        process_init_set(&ids, 1.0)?;
    } else {
        let mut err: Result<()> = Ok(());
        enumerate_draws_without_replacement(&p0, init_width, &mut |tokens, w| {
            if err.is_ok() {
                err = process_init_set(tokens, w);
            }
        });
        err?;
    }
    Distribution::from_weights(out)
}

// ---------------------------------------------------------------------------
// Monte Carlo cross-check
// ---------------------------------------------------------------------------

/// Empirical first-token distribution over `n` independent runs of the
/// actual step implementation; the sampling-path counterpart to the exact
/// enumeration above.
pub fn simulate_first_token_distribution(
    method: &Method,
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    temperature: f64,
    with_replacement: bool,
    greedy_init: bool,
    n: usize,
    seed: u64,
) -> Result<Distribution> {
    let vocab = target.vocab_size();
    let mut counts = vec![0.0; vocab];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = EvalCache::new();
    for _ in 0..n {
        let step = match method {
            Method::BaselineSd { gamma } => baseline_sd_step(
                draft,
                target,
                prefix,
                *gamma,
                temperature,
                &mut cache,
                &mut rng,
            )?,
            Method::Mcsd { tree } => mcsd_step(
                draft,
                target,
                prefix,
                tree,
                temperature,
                with_replacement,
                &mut cache,
                &mut rng,
            )?,
            Method::TargetInitMcsd { tree } => target_init_step(
                draft,
                target,
                prefix,
                tree,
                temperature,
                with_replacement,
                greedy_init,
                &mut cache,
                &mut rng,
            )?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "simulation does not cover method {}",
                    other.name()
                )))
            }
        };
        counts[step.emitted[0] as usize] += 1.0;
    }
    Distribution::from_weights(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularModel;
    use std::collections::BTreeMap;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn constant_model(probs: &[f64]) -> Model {
        Model::Tabular(
            TabularModel::new(probs.len(), 0, BTreeMap::new(), dist(probs)).unwrap(),
        )
    }

    #[test]
    fn baseline_gamma1_recovers_the_target() {
        let draft = constant_model(&[0.5, 0.5]);
        let target = constant_model(&[0.7, 0.3]);
        let d = exact_output_distribution(
            &Method::BaselineSd { gamma: 1 },
            &draft,
            &target,
            &[0],
            1.0,
            false,
            false,
        )
        .unwrap();
        assert!(d.tv_distance(&dist(&[0.7, 0.3])) < 1e-12);
    }

    #[test]
    fn mcsd_two_siblings_recover_uniform_target() {
        let draft = constant_model(&[0.6, 0.3, 0.1]);
        let target = constant_model(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let tree = TreeConfig::expansion(&[2]).unwrap();
        let d = exact_output_distribution(
            &Method::Mcsd { tree },
            &draft,
            &target,
            &[0],
            1.0,
            false,
            false,
        )
        .unwrap();
        assert!(d.tv_distance(&Distribution::uniform(3)) < 1e-9, "tv {}", d.tv_distance(&Distribution::uniform(3)));
    }

    #[test]
    fn oracle_refuses_oversize_instances() {
        let m = constant_model(&[0.5, 0.5]);
        let tree = TreeConfig::expansion(&[3, 3]).unwrap();
        assert!(matches!(
            exact_output_distribution(&Method::Mcsd { tree }, &m, &m, &[0], 1.0, false, false),
            Err(Error::OracleIntractable(_))
        ));
        let big = constant_model(&[0.2, 0.2, 0.2, 0.2, 0.1, 0.1]);
        assert!(matches!(
            exact_output_distribution(
                &Method::BaselineSd { gamma: 1 },
                &big,
                &big,
                &[0],
                1.0,
                false,
                false
            ),
            Err(Error::OracleIntractable(_))
        ));
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration_for_baseline() {
        let draft = constant_model(&[0.5, 0.4, 0.1]);
        let target = constant_model(&[0.2, 0.3, 0.5]);
        let method = Method::BaselineSd { gamma: 2 };
        let exact =
            exact_output_distribution(&method, &draft, &target, &[0], 1.0, false, false).unwrap();
        let n = 200_000;
        let mc = simulate_first_token_distribution(
            &method, &draft, &target, &[0], 1.0, false, false, n, 13,
        )
        .unwrap();
        for x in 0..3u32 {
            let se = (exact.prob(x) * (1.0 - exact.prob(x)) / n as f64).sqrt();
            assert!(
                (mc.prob(x) - exact.prob(x)).abs() < 3.0 * se + 1e-9,
                "token {x}: mc {} vs exact {}",
                mc.prob(x),
                exact.prob(x)
            );
        }
    }
}
