//! The decoding algorithms: vanilla decoding, baseline speculative decoding,
//! draft-initialized multi-candidate SD, target-initialized multi-candidate
//! SD, and dynamic multi-candidate SD with early stopping.
//!
//! Verification of sibling candidates uses rejection sampling without
//! replacement: after a sibling is rejected, the target residual
//! `norm(max(0, p - q))` excludes it (a rejected token always has
//! `p(x) < q(x)`, so the positive part drops it) and the draft distribution
//! is renormalized without it before the next sibling is tested. This
//! preserves the target marginal at every level; the enumeration oracle in
//! [`crate::oracle`] certifies that. The naive with-replacement variant is
//! available behind `with_replacement` for comparison.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decision::DecisionModel;
use crate::dist::{apply_temperature, residual_or_target, Distribution};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tree::{
    build_topology_mask, build_tree_shape, position_indices, slice_mask, MaskView, TokenTree,
    TopologyMask, TreeConfig, TreeShape,
};

/// Decoding method selector.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// One target call per token; the reference for quality and speedups.
    Vanilla,
    /// Single-chain speculative decoding with fixed draft length.
    BaselineSd { gamma: usize },
    /// Draft-initialized multi-candidate SD over a token tree.
    Mcsd { tree: TreeConfig },
    /// First tree level sampled from the target model.
    TargetInitMcsd { tree: TreeConfig },
    /// Fork-shaped tree with a decision model gating draft depth.
    DynamicMcsd { tree: TreeConfig, beta: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::BaselineSd { .. } => "baseline-sd",
            Method::Mcsd { .. } => "mcsd",
            Method::TargetInitMcsd { .. } => "target-init-mcsd",
            Method::DynamicMcsd { .. } => "dynamic-mcsd",
        }
    }

    /// Configuration string for result tables.
    pub fn config_string(&self) -> String {
        match self {
            Method::Vanilla => "-".into(),
            Method::BaselineSd { gamma } => format!("gamma={gamma}"),
            Method::Mcsd { tree } | Method::TargetInitMcsd { tree } => tree.display(),
            Method::DynamicMcsd { tree, beta } => format!("{},beta={beta}", tree.display()),
        }
    }
}

/// Full configuration of one generation session.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub method: Method,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Optional end-of-sequence token that terminates generation.
    pub eos: Option<u32>,
    /// Sample and verify sibling candidates independently (with
    /// replacement) instead of the default without-replacement scheme.
    pub with_replacement: bool,
    /// Pick the top-W0 target tokens greedily instead of sampling them.
    pub greedy_init: bool,
}

impl EngineConfig {
    pub fn new(method: Method, temperature: f64, max_new_tokens: usize, seed: u64) -> Result<Self> {
        match &method {
            Method::BaselineSd { gamma } => {
                if *gamma < 1 {
                    return Err(Error::Config("gamma must be >= 1".into()));
                }
            }
            Method::TargetInitMcsd { tree } => {
                if tree.target_init_width < 1 {
                    return Err(Error::Config(
                        "target-init MCSD requires target_init_width >= 1".into(),
                    ));
                }
            }
            Method::Mcsd { tree } => {
                if tree.target_init_width != 0 {
                    return Err(Error::Config(
                        "draft-initialized MCSD requires target_init_width = 0".into(),
                    ));
                }
            }
            Method::DynamicMcsd { tree, beta } => {
                if !matches!(tree.shape, TreeShape::Fork { .. }) {
                    return Err(Error::Config("dynamic MCSD requires a fork-shaped tree".into()));
                }
                if !(*beta > 0.0 && *beta < 1.0) {
                    return Err(Error::Config(format!("beta must lie in (0,1), got {beta}")));
                }
            }
            Method::Vanilla => {}
        }
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::Config(format!("invalid temperature {temperature}")));
        }
        if max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(Self {
            method,
            temperature,
            max_new_tokens,
            seed,
            eos: None,
            with_replacement: false,
            greedy_init: false,
        })
    }
}

/// Per-draft-token record from one step; feeds decision-model training.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub node: usize,
    pub token: u32,
    pub depth: usize,
    /// Whether verification reached this node at all.
    pub tested: bool,
    pub accepted: bool,
    /// Draft hidden state at the context that produced the token.
    pub hidden: Vec<f64>,
    /// Draft distribution the token was sampled from (before sibling
    /// exclusions).
    pub draft_dist: Distribution,
    pub target_prob: f64,
    pub draft_prob: f64,
}

/// One verify cycle's record.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Tokens appended to the output this step; always at least one.
    pub emitted: Vec<u32>,
    /// Node indices of the accepted chain, root first.
    pub accepted_path: Vec<usize>,
    pub node_records: Vec<NodeRecord>,
    /// Accepted draft tokens along the chosen path (init tokens excluded).
    pub longest_accepted: usize,
    /// Draft tokens per candidate actually generated this step.
    pub max_draft_len: usize,
    /// Tree depth the draft reached (equals max depth unless stopped early).
    pub depth_reached: usize,
    pub draft_calls: u64,
    pub target_calls: u64,
    pub decision_calls: u64,
    /// Whether the decision model fired (halted draft generation early).
    pub stopped_early: bool,
}

impl StepOutcome {
    fn base() -> Self {
        Self {
            emitted: Vec::new(),
            accepted_path: Vec::new(),
            node_records: Vec::new(),
            longest_accepted: 0,
            max_draft_len: 0,
            depth_reached: 0,
            draft_calls: 0,
            target_calls: 0,
            decision_calls: 0,
            stopped_early: false,
        }
    }
}

/// Accumulated counters for one generation session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStats {
    pub total_emitted: u64,
    pub total_steps: u64,
    pub sum_longest_accepted: u64,
    pub sum_max_draft: u64,
    pub draft_calls: u64,
    pub target_calls: u64,
    pub decision_calls: u64,
    pub decision_stops: u64,
    /// Step count per reached depth.
    pub depth_histogram: HashMap<usize, u64>,
}

impl SessionStats {
    /// Acceptance rate: longest accepted draft length over maximum draft
    /// length, summed over steps. `None` when no draft tokens were produced
    /// (vanilla decoding).
    pub fn alpha(&self) -> Option<f64> {
        if self.sum_max_draft == 0 {
            None
        } else {
            Some(self.sum_longest_accepted as f64 / self.sum_max_draft as f64)
        }
    }

    pub fn absorb(&mut self, step: &StepOutcome, emitted_counted: usize) {
        self.total_emitted += emitted_counted as u64;
        self.total_steps += 1;
        self.sum_longest_accepted += step.longest_accepted as u64;
        self.sum_max_draft += step.max_draft_len as u64;
        self.draft_calls += step.draft_calls;
        self.target_calls += step.target_calls;
        self.decision_calls += step.decision_calls;
        if step.stopped_early {
            self.decision_stops += 1;
        }
        *self.depth_histogram.entry(step.depth_reached).or_insert(0) += 1;
    }
}

/// Expected speedup of speculative decoding over vanilla decoding:
/// `(1 - alpha^(gamma+1)) / ((1 - alpha) (c gamma + 1))`, with `c` the
/// draft/target per-call cost ratio.
pub fn improvement_factor(alpha: f64, gamma: usize, c: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0,1), got {alpha}")));
    }
    if gamma < 1 || c <= 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 1 and c > 0".into()));
    }
    let g = gamma as f64;
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / ((1.0 - alpha) * (c * g + 1.0)))
}

// ---------------------------------------------------------------------------
// Prefix evaluation cache (the KV-cache analog)
// ---------------------------------------------------------------------------

/// Memoizes next-token distributions keyed by the context suffix the model
/// can actually distinguish (its horizon), so the entry count stays bounded
/// regardless of session length. Pure bookkeeping: hits and misses are
/// semantically identical, which `tests` verify by recomputation.
#[derive(Debug, Default)]
pub struct EvalCache {
    entries: HashMap<Vec<u32>, Distribution>,
    pub hits: u64,
    pub misses: u64,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_distribution(
        &mut self,
        model: &Model,
        context: &[u32],
        temperature: f64,
    ) -> Result<Distribution> {
        let start = context.len().saturating_sub(model.context_horizon());
        let key = &context[start..];
        if let Some(d) = self.entries.get(key) {
            self.hits += 1;
            return Ok(d.clone());
        }
        self.misses += 1;
        let d = model.next_distribution(context, temperature)?;
        self.entries.insert(key.to_vec(), d.clone());
        Ok(d)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Sampling helpers
// ---------------------------------------------------------------------------

/// Sequential sampling without replacement: sample, zero out, renormalize.
/// Stops early when the support is exhausted.
fn sample_without_replacement<R: Rng + ?Sized>(
    dist: &Distribution,
    k: usize,
    rng: &mut R,
) -> Vec<u32> {
    let mut drawn = Vec::with_capacity(k);
    let mut cur = dist.clone();
    for _ in 0..k {
        if cur.support_size() == 0 {
            break;
        }
        let t = cur.sample(rng);
        drawn.push(t);
        match cur.excluding(t) {
            Some(next) => cur = next,
            None => break,
        }
    }
    drawn
}

/// Top-k tokens by probability, ties broken by lowest token id.
fn greedy_top_k(dist: &Distribution, k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..dist.len() as u32).filter(|&t| dist.prob(t) > 0.0).collect();
    ids.sort_by(|&a, &b| {
        dist.prob(b).partial_cmp(&dist.prob(a)).unwrap().then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

// ---------------------------------------------------------------------------
// Sampled token trees
// ---------------------------------------------------------------------------

/// A tree skeleton with draft-sampled tokens. Nodes whose sampling
/// distribution ran out of support are left unfilled and skipped everywhere.
#[derive(Debug, Clone)]
pub struct SampledTree {
    pub tree: TokenTree,
    pub tokens: Vec<Option<u32>>,
    /// Distribution the node's token was sampled from (shared by siblings,
    /// before without-replacement exclusions).
    pub base_dist: Vec<Option<Distribution>>,
    /// Hidden state of the sampling model at the node's parent context.
    pub hidden: Vec<Option<Vec<f64>>>,
}

impl SampledTree {
    fn empty(tree: TokenTree) -> Self {
        let n = tree.node_count();
        Self {
            tree,
            tokens: vec![None; n],
            base_dist: vec![None; n],
            hidden: vec![None; n],
        }
    }

    fn path_tokens(&self, node: usize) -> Vec<u32> {
        self.tree
            .path_to(node)
            .iter()
            .map(|&a| self.tokens[a].expect("path through unfilled node"))
            .collect()
    }

    /// Tokens in flat order, unfilled nodes as 0 (their outputs are never
    /// read).
    fn flat_tokens(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.unwrap_or(0)).collect()
    }

    fn active_children(&self, node: usize) -> Vec<usize> {
        self.tree
            .children(node)
            .iter()
            .cloned()
            .filter(|&c| self.tokens[c].is_some())
            .collect()
    }

    fn active_roots(&self) -> Vec<usize> {
        self.tree
            .roots()
            .iter()
            .cloned()
            .filter(|&r| self.tokens[r].is_some())
            .collect()
    }
}

/// Fills the children of `parent_ctx`'s node with draft samples and records
/// the shared base distribution and hidden state.
fn fill_children<R: Rng + ?Sized>(
    st: &mut SampledTree,
    slots: &[usize],
    draft: &Model,
    parent_ctx: &[u32],
    temperature: f64,
    with_replacement: bool,
    rng: &mut R,
) -> Result<()> {
    let (logits, hidden) = draft.next(parent_ctx);
    let q = apply_temperature(&logits, temperature)?;
    let tokens: Vec<u32> = if with_replacement {
        (0..slots.len()).map(|_| q.sample(rng)).collect()
    } else {
        sample_without_replacement(&q, slots.len(), rng)
    };
    for (i, &slot) in slots.iter().enumerate() {
        if let Some(&t) = tokens.get(i) {
            st.tokens[slot] = Some(t);
            st.base_dist[slot] = Some(q.clone());
            st.hidden[slot] = Some(hidden.clone());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Multi-candidate verification
// ---------------------------------------------------------------------------

struct LevelVerdict {
    accepted: Option<usize>,
    /// Target residual after all rejections at this level.
    final_residual: Distribution,
    /// (node, accepted) for each sibling actually tested.
    tested: Vec<(usize, bool)>,
}

/// Tests the sibling candidates of one level against the target
/// distribution `p`. Siblings are taken in order; after a rejection the
/// residual `norm(max(0, p - q))` replaces `p`, and (without replacement)
/// the rejected token is removed from `q`.
fn verify_level<R: Rng + ?Sized>(
    siblings: &[usize],
    st: &SampledTree,
    p: &Distribution,
    with_replacement: bool,
    rng: &mut R,
) -> LevelVerdict {
    let mut p_cur = p.clone();
    let mut q_cur: Option<Distribution> = None;
    let mut tested = Vec::new();
    let mut accepted = None;
    for &node in siblings {
        let token = st.tokens[node].expect("verify on unfilled node");
        let base = st.base_dist[node].as_ref().expect("missing sampling distribution");
        let q = q_cur.get_or_insert_with(|| base.clone());
        let qx = q.prob(token);
        let px = p_cur.prob(token);
        let accept_prob = if qx > 0.0 { (px / qx).min(1.0) } else { 0.0 };
        if rng.gen::<f64>() < accept_prob {
            tested.push((node, true));
            accepted = Some(node);
            break;
        }
        tested.push((node, false));
        // Rejection implies p(x) < q(x), so the positive part of p - q
        // already excludes the rejected token.
        p_cur = residual_or_target(&p_cur, q);
        if !with_replacement {
            match q.excluding(token) {
                Some(next) => *q = next,
                None => break,
            }
        }
    }
    LevelVerdict { accepted, final_residual: p_cur, tested }
}

struct WalkOutcome {
    path: Vec<usize>,
    emitted: Vec<u32>,
    /// Per-node verdicts for tested nodes.
    verdicts: Vec<(usize, bool)>,
    /// True when the walk accepted a full chain down to the leaves.
    fully_accepted: bool,
}

/// Walks the tree level by level from `start_nodes`, verifying the children
/// of each accepted node. On a level with no acceptance, a correction token
/// is sampled from the final residual; on full acceptance of a chain, a
/// bonus token is sampled from the leaf's target distribution when
/// `bonus_on_full_accept` is set.
fn verify_walk<R: Rng + ?Sized>(
    st: &SampledTree,
    start_nodes: &[usize],
    root_p: &Distribution,
    target_dists: &[Distribution],
    with_replacement: bool,
    bonus_on_full_accept: bool,
    rng: &mut R,
) -> WalkOutcome {
    let mut out = WalkOutcome {
        path: Vec::new(),
        emitted: Vec::new(),
        verdicts: Vec::new(),
        fully_accepted: false,
    };
    let mut level_nodes: Vec<usize> = start_nodes.to_vec();
    let mut p = root_p.clone();
    loop {
        if level_nodes.is_empty() {
            // No candidates at this level (support exhaustion): the target
            // supplies the next token directly.
            out.fully_accepted = true;
            if bonus_on_full_accept || out.path.is_empty() {
                out.emitted.push(p.sample(rng));
            }
            return out;
        }
        let verdict = verify_level(&level_nodes, st, &p, with_replacement, rng);
        out.verdicts.extend(verdict.tested.iter().cloned());
        match verdict.accepted {
            Some(node) => {
                out.path.push(node);
                out.emitted.push(st.tokens[node].unwrap());
                let next = st.active_children(node);
                if next.is_empty() {
                    out.fully_accepted = true;
                    if bonus_on_full_accept {
                        out.emitted.push(target_dists[node].sample(rng));
                    }
                    return out;
                }
                p = target_dists[node].clone();
                level_nodes = next;
            }
            None => {
                out.emitted.push(verdict.final_residual.sample(rng));
                return out;
            }
        }
    }
}

/// Public form of the tree verification used by MCSD steps: verifies a
/// sampled token tree against per-node target distributions and returns the
/// longest accepted path plus the correction or bonus token.
pub fn mcsd_verify<R: Rng + ?Sized>(
    st: &SampledTree,
    root_target: &Distribution,
    target_dists: &[Distribution],
    with_replacement: bool,
    rng: &mut R,
) -> (Vec<usize>, Vec<u32>) {
    let walk = verify_walk(
        st,
        &st.active_roots(),
        root_target,
        target_dists,
        with_replacement,
        true,
        rng,
    );
    (walk.path, walk.emitted)
}

/// Target distributions per node from one masked tree forward.
fn tree_target_dists(
    target: &Model,
    prefix: &[u32],
    st: &SampledTree,
    mask: &impl MaskView,
    positions: &[usize],
    temperature: f64,
) -> Result<Vec<Distribution>> {
    let fwd = target.forward(prefix, &st.flat_tokens(), mask, positions)?;
    fwd.logits
        .iter()
        .enumerate()
        .map(|(i, logits)| {
            if st.tokens[i].is_some() {
                apply_temperature(logits, temperature)
            } else {
                // Unfilled node; placeholder never read.
                Ok(Distribution::uniform(target.vocab_size()))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// Vanilla decoding: one target call, one token.
pub fn vanilla_step<R: Rng + ?Sized>(
    target: &Model,
    prefix: &[u32],
    temperature: f64,
    cache: &mut EvalCache,
    rng: &mut R,
) -> Result<StepOutcome> {
    let p = cache.next_distribution(target, prefix, temperature)?;
    let mut out = StepOutcome::base();
    out.emitted.push(p.sample(rng));
    out.target_calls = 1;
    Ok(out)
}

/// One baseline SD cycle: gamma sequential draft tokens, one batched target
/// pass, accept/reject with `min(1, p/q)`, residual resampling on the first
/// rejection, bonus token on full acceptance.
pub fn baseline_sd_step<R: Rng + ?Sized>(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    gamma: usize,
    temperature: f64,
    cache: &mut EvalCache,
    rng: &mut R,
) -> Result<StepOutcome> {
    if gamma < 1 {
        return Err(Error::Config("gamma must be >= 1".into()));
    }
    let mut out = StepOutcome::base();
    out.max_draft_len = gamma;
    out.depth_reached = gamma;

    // Draft phase: gamma sequential samples.
    let mut ctx = prefix.to_vec();
    let mut draft_tokens = Vec::with_capacity(gamma);
    let mut q_dists = Vec::with_capacity(gamma);
    let mut hiddens = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let (logits, hidden) = draft.next(&ctx);
        let q = apply_temperature(&logits, temperature)?;
        let x = q.sample(rng);
        ctx.push(x);
        draft_tokens.push(x);
        q_dists.push(q);
        hiddens.push(hidden);
    }
    out.draft_calls = gamma as u64;

    // Target phase: all gamma+1 positions in one pass, evaluated as a
    // single-chain token tree.
    let chain_cfg = TreeConfig::fork(1, gamma)?;
    let chain = build_tree_shape(&chain_cfg);
    let mask = build_topology_mask(&chain);
    let positions = position_indices(&chain, prefix.len());
    let fwd = target.forward(prefix, &draft_tokens, &mask, &positions)?;
    let p0 = cache.next_distribution(target, prefix, temperature)?;
    let mut p_dists = vec![p0];
    for logits in &fwd.logits {
        p_dists.push(apply_temperature(logits, temperature)?);
    }
    out.target_calls = 1;

    // Verification.
    let mut accepted = 0;
    for i in 0..gamma {
        let x = draft_tokens[i];
        let (p, q) = (&p_dists[i], &q_dists[i]);
        let accept_prob = if q.prob(x) > 0.0 { (p.prob(x) / q.prob(x)).min(1.0) } else { 0.0 };
        let ok = rng.gen::<f64>() < accept_prob;
        out.node_records.push(NodeRecord {
            node: i,
            token: x,
            depth: i + 1,
            tested: true,
            accepted: ok,
            hidden: hiddens[i].clone(),
            draft_dist: q.clone(),
            target_prob: p.prob(x),
            draft_prob: q.prob(x),
        });
        if ok {
            out.emitted.push(x);
            out.accepted_path.push(i);
            accepted += 1;
        } else {
            out.emitted.push(residual_or_target(p, q).sample(rng));
            break;
        }
    }
    if accepted == gamma {
        out.emitted.push(p_dists[gamma].sample(rng));
    }
    out.longest_accepted = accepted;
    // Untested draft tokens after the first rejection.
    for i in accepted + 1..gamma {
        out.node_records.push(NodeRecord {
            node: i,
            token: draft_tokens[i],
            depth: i + 1,
            tested: false,
            accepted: false,
            hidden: hiddens[i].clone(),
            draft_dist: q_dists[i].clone(),
            target_prob: p_dists[i].prob(draft_tokens[i]),
            draft_prob: q_dists[i].prob(draft_tokens[i]),
        });
    }
    Ok(out)
}

/// Builds and draft-fills the tree for one MCSD step. For target-init
/// configs the first level must already be filled by the caller.
fn draft_fill_tree<R: Rng + ?Sized>(
    st: &mut SampledTree,
    draft: &Model,
    prefix: &[u32],
    from_level: usize,
    temperature: f64,
    with_replacement: bool,
    rng: &mut R,
) -> Result<u64> {
    let mut draft_calls = 0;
    let max_depth = st.tree.max_depth();
    for depth in from_level..=max_depth {
        if depth == 1 {
            let roots: Vec<usize> = st.tree.roots().to_vec();
            fill_children(st, &roots, draft, prefix, temperature, with_replacement, rng)?;
        } else {
            let parents: Vec<usize> = (0..st.tree.node_count())
                .filter(|&n| st.tree.depth(n) == depth - 1 && st.tokens[n].is_some())
                .collect();
            for parent in parents {
                let slots: Vec<usize> = st.tree.children(parent).to_vec();
                if slots.is_empty() {
                    continue;
                }
                let mut ctx = prefix.to_vec();
                ctx.extend(st.path_tokens(parent));
                fill_children(st, &slots, draft, &ctx, temperature, with_replacement, rng)?;
            }
        }
        // One batched draft forward per level.
        draft_calls += 1;
    }
    Ok(draft_calls)
}

fn record_tree_nodes(
    out: &mut StepOutcome,
    st: &SampledTree,
    target_dists_at_parent: &HashMap<usize, Distribution>,
    verdicts: &[(usize, bool)],
) {
    let verdict_map: HashMap<usize, bool> = verdicts.iter().cloned().collect();
    for node in 0..st.tree.node_count() {
        let Some(token) = st.tokens[node] else { continue };
        let q = st.base_dist[node].as_ref().unwrap();
        let target_prob = target_dists_at_parent
            .get(&node)
            .map(|p| p.prob(token))
            .unwrap_or(f64::NAN);
        out.node_records.push(NodeRecord {
            node,
            token,
            depth: st.tree.depth(node),
            tested: verdict_map.contains_key(&node),
            accepted: verdict_map.get(&node).copied().unwrap_or(false),
            hidden: st.hidden[node].clone().unwrap_or_default(),
            draft_dist: q.clone(),
            target_prob,
            draft_prob: q.prob(token),
        });
    }
}

/// Maps each node to the target distribution that verifies it (the parent's
/// next-token distribution, or the root distribution for depth-1 nodes).
fn target_dists_at_parents(
    st: &SampledTree,
    root_p: &Distribution,
    target_dists: &[Distribution],
) -> HashMap<usize, Distribution> {
    let mut map = HashMap::new();
    for node in 0..st.tree.node_count() {
        if st.tokens[node].is_none() {
            continue;
        }
        let p = match st.tree.parent(node) {
            Some(parent) => target_dists[parent].clone(),
            None => root_p.clone(),
        };
        map.insert(node, p);
    }
    map
}

/// One draft-initialized MCSD cycle over an expansion or fork tree.
pub fn mcsd_step<R: Rng + ?Sized>(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    tree_config: &TreeConfig,
    temperature: f64,
    with_replacement: bool,
    cache: &mut EvalCache,
    rng: &mut R,
) -> Result<StepOutcome> {
    let skeleton = build_tree_shape(tree_config);
    let mask = build_topology_mask(&skeleton);
    let mut st = SampledTree::empty(skeleton);
    let mut out = StepOutcome::base();
    out.max_draft_len = tree_config.max_depth();
    out.depth_reached = tree_config.max_depth();
    out.draft_calls =
        draft_fill_tree(&mut st, draft, prefix, 1, temperature, with_replacement, rng)?;

    let positions = position_indices(&st.tree, prefix.len());
    let target_dists = tree_target_dists(target, prefix, &st, &mask, &positions, temperature)?;
    let root_p = cache.next_distribution(target, prefix, temperature)?;
    out.target_calls = 1;

    let walk = verify_walk(
        &st,
        &st.active_roots(),
        &root_p,
        &target_dists,
        with_replacement,
        true,
        rng,
    );
    let parent_dists = target_dists_at_parents(&st, &root_p, &target_dists);
    record_tree_nodes(&mut out, &st, &parent_dists, &walk.verdicts);
    out.longest_accepted = walk.path.len();
    out.accepted_path = walk.path;
    out.emitted = walk.emitted;
    Ok(out)
}

/// One target-initialized MCSD cycle: W0 distinct tokens sampled from the
/// target root the subtrees, the draft fills the rest, one masked target
/// pass verifies all subtrees, and the init token whose subtree yields the
/// longest accepted draft sequence wins. Ties break toward the higher
/// target probability, then the lower token id. No bonus token is sampled
/// on full acceptance: the next step's init tokens double as the bonus.
pub fn target_init_step<R: Rng + ?Sized>(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    tree_config: &TreeConfig,
    temperature: f64,
    with_replacement: bool,
    greedy_init: bool,
    cache: &mut EvalCache,
    rng: &mut R,
) -> Result<StepOutcome> {
    let w0 = tree_config.target_init_width;
    if w0 < 1 {
        return Err(Error::Config("target_init_width must be >= 1".into()));
    }
    if w0 > target.vocab_size() {
        return Err(Error::Config(format!(
            "target_init_width {w0} exceeds vocabulary size {}",
            target.vocab_size()
        )));
    }
    let mut out = StepOutcome::base();
    out.max_draft_len = tree_config.draft_depth();
    out.depth_reached = tree_config.max_depth();

    let p0 = cache.next_distribution(target, prefix, temperature)?;
    let init_tokens = if greedy_init {
        greedy_top_k(&p0, w0)
    } else {
        sample_without_replacement(&p0, w0, rng)
    };

    let skeleton = build_tree_shape(tree_config);
    let mask = build_topology_mask(&skeleton);
    let mut st = SampledTree::empty(skeleton);
    for (slot, &token) in st.tree.roots().to_vec().iter().zip(&init_tokens) {
        st.tokens[*slot] = Some(token);
        st.base_dist[*slot] = Some(p0.clone());
        // Init tokens come from the target; there is no draft hidden state.
        st.hidden[*slot] = Some(Vec::new());
    }
    out.draft_calls =
        draft_fill_tree(&mut st, draft, prefix, 2, temperature, with_replacement, rng)?;

    let positions = position_indices(&st.tree, prefix.len());
    let target_dists = tree_target_dists(target, prefix, &st, &mask, &positions, temperature)?;
    out.target_calls = 1;

    // Verify every init token's subtree; each walk consumes its own coins.
    let mut walks: Vec<(usize, WalkOutcome)> = Vec::new();
    for &root in &st.active_roots() {
        let walk = verify_walk(
            &st,
            &st.active_children(root),
            &target_dists[root],
            &target_dists,
            with_replacement,
            false,
            rng,
        );
        walks.push((root, walk));
    }

    // Longest accepted draft sequence wins; ties by higher target
    // probability of the init token, then lowest token id.
    let best = walks
        .iter()
        .enumerate()
        .max_by(|(_, (ra, wa)), (_, (rb, wb))| {
            let ta = st.tokens[*ra].unwrap();
            let tb = st.tokens[*rb].unwrap();
            wa.path
                .len()
                .cmp(&wb.path.len())
                .then(p0.prob(ta).partial_cmp(&p0.prob(tb)).unwrap())
                .then(tb.cmp(&ta))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("target distribution has empty support".into()))?;
    let (root, walk) = &walks[best];

    let mut verdicts: Vec<(usize, bool)> = vec![(*root, true)];
    for (r, w) in &walks {
        if r != root {
            verdicts.push((*r, false));
        }
        verdicts.extend(w.verdicts.iter().cloned());
    }
    let parent_dists = target_dists_at_parents(&st, &p0, &target_dists);
    record_tree_nodes(&mut out, &st, &parent_dists, &verdicts);

    out.longest_accepted = walk.path.len();
    out.accepted_path = std::iter::once(*root).chain(walk.path.iter().cloned()).collect();
    out.emitted = std::iter::once(st.tokens[*root].unwrap())
        .chain(walk.emitted.iter().cloned())
        .collect();
    Ok(out)
}

/// One dynamic MCSD cycle over a fork tree: chains grow one token per turn,
/// the decision model scores all chains after each turn, and when every
/// score falls below `beta` draft generation halts and verification runs on
/// the depth slice of the session mask.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_mcsd_step<R: Rng + ?Sized>(
    draft: &Model,
    target: &Model,
    prefix: &[u32],
    skeleton: &TokenTree,
    full_mask: &TopologyMask,
    decision: &DecisionModel,
    beta: f64,
    temperature: f64,
    with_replacement: bool,
    cache: &mut EvalCache,
    rng: &mut R,
) -> Result<StepOutcome> {
    let max_depth = skeleton.max_depth();
    let mut st = SampledTree::empty(skeleton.clone());
    let mut out = StepOutcome::base();

    let mut reached = 0;
    for depth in 1..=max_depth {
        // Grow every active chain by one token (one batched draft call).
        if depth == 1 {
            let roots: Vec<usize> = st.tree.roots().to_vec();
            fill_children(&mut st, &roots, draft, prefix, temperature, with_replacement, rng)?;
        } else {
            let parents: Vec<usize> = (0..st.tree.node_count())
                .filter(|&n| st.tree.depth(n) == depth - 1 && st.tokens[n].is_some())
                .collect();
            for parent in parents {
                let slots: Vec<usize> = st.tree.children(parent).to_vec();
                if slots.is_empty() {
                    continue;
                }
                let mut ctx = prefix.to_vec();
                ctx.extend(st.path_tokens(parent));
                fill_children(&mut st, &slots, draft, &ctx, temperature, with_replacement, rng)?;
            }
        }
        out.draft_calls += 1;
        reached = depth;

        if depth < max_depth {
            // Score the newest token of every active chain in one batch.
            let frontier: Vec<usize> = (0..st.tree.node_count())
                .filter(|&n| st.tree.depth(n) == depth && st.tokens[n].is_some())
                .collect();
            let scores: Vec<f64> = frontier
                .iter()
                .map(|&n| {
                    decision.score(
                        st.hidden[n].as_deref().unwrap_or(&[]),
                        st.base_dist[n].as_ref().unwrap(),
                    )
                })
                .collect();
            out.decision_calls += 1;
            if crate::decision::should_stop(&scores, beta)? {
                out.stopped_early = true;
                break;
            }
        }
    }
    out.max_draft_len = reached;
    out.depth_reached = reached;

    // Verification on the depth slice of the session mask.
    let slice = slice_mask(full_mask, reached, skeleton)?;
    let truncated = st.tree.truncated(reached);
    let keep = truncated.node_count();
    let sliced = SampledTree {
        tree: truncated,
        tokens: st.tokens[..keep].to_vec(),
        base_dist: st.base_dist[..keep].to_vec(),
        hidden: st.hidden[..keep].to_vec(),
    };
    let positions = position_indices(&sliced.tree, prefix.len());
    let target_dists =
        tree_target_dists(target, prefix, &sliced, &slice, &positions, temperature)?;
    let root_p = cache.next_distribution(target, prefix, temperature)?;
    out.target_calls = 1;

    let walk = verify_walk(
        &sliced,
        &sliced.active_roots(),
        &root_p,
        &target_dists,
        with_replacement,
        true,
        rng,
    );
    let parent_dists = target_dists_at_parents(&sliced, &root_p, &target_dists);
    record_tree_nodes(&mut out, &sliced, &parent_dists, &walk.verdicts);
    out.longest_accepted = walk.path.len();
    out.accepted_path = walk.path;
    out.emitted = walk.emitted;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generation loop
// ---------------------------------------------------------------------------

/// Line-oriented trace record for one step, consumed by the bench harness.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub method: String,
    pub depth: usize,
    pub longest_accepted: usize,
    pub max_draft_len: usize,
    pub emitted: usize,
    pub draft_calls: u64,
    pub target_calls: u64,
    pub decision_calls: u64,
    pub stopped_early: bool,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "step={} method={} depth={} accepted={} max_draft={} emitted={} \
             draft_calls={} target_calls={} decision_calls={} stopped_early={}",
            self.step,
            self.method,
            self.depth,
            self.longest_accepted,
            self.max_draft_len,
            self.emitted,
            self.draft_calls,
            self.target_calls,
            self.decision_calls,
            self.stopped_early
        )
        .unwrap();
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("bad trace field {kv:?}"),
            })?;
            map.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            map.get(k).copied().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing trace field {k}"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad number in trace field {k}"),
            })
        };
        Ok(Self {
            step: num("step")? as usize,
            method: get("method")?.to_string(),
            depth: num("depth")? as usize,
            longest_accepted: num("accepted")? as usize,
            max_draft_len: num("max_draft")? as usize,
            emitted: num("emitted")? as usize,
            draft_calls: num("draft_calls")?,
            target_calls: num("target_calls")?,
            decision_calls: num("decision_calls")?,
            stopped_early: get("stopped_early")? == "true",
        })
    }
}

/// Output of one full generation session.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub stats: SessionStats,
    pub trace: Vec<StepRecord>,
    /// Per-node records across all steps, for decision-model training.
    pub node_records: Vec<NodeRecord>,
}

/// Runs a full generation session: loops steps until `max_new_tokens` are
/// emitted (or eos), accumulating stats and a per-step trace.
pub fn run_generation(
    config: &EngineConfig,
    draft: &Model,
    target: &Model,
    prompt: &[u32],
    decision: Option<&DecisionModel>,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cache = EvalCache::new();
    let mut tokens = prompt.to_vec();
    let mut stats = SessionStats::default();
    let mut trace = Vec::new();
    let mut node_records = Vec::new();
    let mut emitted_total = 0usize;

    // Dynamic MCSD builds its maximal mask once per session; steps slice it.
    let session_tree = match &config.method {
        Method::DynamicMcsd { tree, .. } => {
            let skeleton = build_tree_shape(tree);
            let mask = build_topology_mask(&skeleton);
            Some((skeleton, mask))
        }
        _ => None,
    };
    if matches!(config.method, Method::TargetInitMcsd { .. }) {
        // The origin input passes through the target once before the first
        // init sampling; later steps reuse the verification pass.
        stats.target_calls += 1;
    }

    let mut step_idx = 0;
    'outer: while emitted_total < config.max_new_tokens {
        let step = match &config.method {
            Method::Vanilla => {
                vanilla_step(target, &tokens, config.temperature, &mut cache, &mut rng)?
            }
            Method::BaselineSd { gamma } => baseline_sd_step(
                draft,
                target,
                &tokens,
                *gamma,
                config.temperature,
                &mut cache,
                &mut rng,
            )?,
            Method::Mcsd { tree } => mcsd_step(
                draft,
                target,
                &tokens,
                tree,
                config.temperature,
                config.with_replacement,
                &mut cache,
                &mut rng,
            )?,
            // Per-step target cost stays at one call: the init sampling
            // reuses the previous verification pass, and the session charged
            // the initial pass up front.
            Method::TargetInitMcsd { tree } => target_init_step(
                draft,
                target,
                &tokens,
                tree,
                config.temperature,
                config.with_replacement,
                config.greedy_init,
                &mut cache,
                &mut rng,
            )?,
            Method::DynamicMcsd { beta, .. } => {
                let (skeleton, mask) = session_tree.as_ref().unwrap();
                let decision = decision.ok_or_else(|| {
                    Error::Config("dynamic MCSD requires a decision model".into())
                })?;
                dynamic_mcsd_step(
                    draft,
                    target,
                    &tokens,
                    skeleton,
                    mask,
                    decision,
                    *beta,
                    config.temperature,
                    config.with_replacement,
                    &mut cache,
                    &mut rng,
                )?
            }
        };

        let budget = config.max_new_tokens - emitted_total;
        let kept: Vec<u32> = step.emitted.iter().cloned().take(budget).collect();
        let mut counted = kept.len();
        let mut hit_eos = false;
        if let Some(eos) = config.eos {
            if let Some(pos) = kept.iter().position(|&t| t == eos) {
                counted = pos + 1;
                hit_eos = true;
            }
        }
        let kept = &kept[..counted];
        tokens.extend_from_slice(kept);
        emitted_total += counted;

        stats.absorb(&step, counted);
        trace.push(StepRecord {
            step: step_idx,
            method: config.method.name().to_string(),
            depth: step.depth_reached,
            longest_accepted: step.longest_accepted,
            max_draft_len: step.max_draft_len,
            emitted: counted,
            draft_calls: step.draft_calls,
            target_calls: step.target_calls,
            decision_calls: step.decision_calls,
            stopped_early: step.stopped_early,
        });
        node_records.extend(step.node_records);
        step_idx += 1;
        if hit_eos {
            break 'outer;
        }
    }
    stats.total_emitted = emitted_total as u64;
    Ok(GenerationResult { tokens, stats, trace, node_records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use crate::model::TabularModel;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    /// Order-0 model: the same distribution at every position.
    fn constant_model(probs: &[f64]) -> Model {
        Model::Tabular(
            TabularModel::new(probs.len(), 0, BTreeMap::new(), dist(probs)).unwrap(),
        )
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identical_models_accept_everything() {
        let m = constant_model(&[0.3, 0.3, 0.4]);
        let mut cache = EvalCache::new();
        for seed in 0..50 {
            let step =
                baseline_sd_step(&m, &m, &[0], 2, 1.0, &mut cache, &mut rng(seed)).unwrap();
            assert_eq!(step.longest_accepted, 2);
            assert_eq!(step.emitted.len(), 3);
        }
    }

    #[test]
    fn certain_rejection_emits_one_target_token() {
        // Draft puts all mass on token 0 where the target has none.
        let draft = constant_model(&[1.0, 0.0]);
        let target = constant_model(&[0.0, 1.0]);
        let mut cache = EvalCache::new();
        for seed in 0..50 {
            let step =
                baseline_sd_step(&draft, &target, &[0], 3, 1.0, &mut cache, &mut rng(seed))
                    .unwrap();
            assert_eq!(step.longest_accepted, 0);
            assert_eq!(step.emitted, vec![1]);
        }
    }

    #[test]
    fn baseline_emission_count_in_bounds() {
        let draft = constant_model(&[0.5, 0.3, 0.2]);
        let target = constant_model(&[0.2, 0.4, 0.4]);
        let mut cache = EvalCache::new();
        for seed in 0..200 {
            let gamma = 1 + (seed as usize % 4);
            let step = baseline_sd_step(
                &draft, &target, &[0], gamma, 1.0, &mut cache, &mut rng(seed),
            )
            .unwrap();
            assert!(!step.emitted.is_empty() && step.emitted.len() <= gamma + 1);
            assert!(step.longest_accepted <= step.max_draft_len);
        }
    }

    #[test]
    fn improvement_factor_closed_forms() {
        // alpha = 0: numerator and 1 - alpha are both 1.
        assert_eq!(improvement_factor(0.0, 4, 0.1).unwrap(), 1.0 / (0.1 * 4.0 + 1.0));
        let v = improvement_factor(0.8, 4, 0.1).unwrap();
        assert!((v - 2.401_142_857_142_857).abs() < 1e-9, "{v}");
        let v = improvement_factor(0.5, 1, 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(improvement_factor(1.0, 4, 0.1).is_err());
        assert!(improvement_factor(1.5, 4, 0.1).is_err());
    }

    #[test]
    fn improvement_factor_monotone_in_alpha() {
        let mut prev = 0.0;
        for i in 0..100 {
            let alpha = i as f64 / 100.0;
            let v = improvement_factor(alpha, 4, 0.2).unwrap();
            assert!(v > prev, "IF not increasing at alpha={alpha}");
            prev = v;
        }
    }

    #[test]
    fn vanilla_generation_has_no_alpha() {
        let m = constant_model(&[0.5, 0.5]);
        let cfg = EngineConfig::new(Method::Vanilla, 1.0, 10, 3).unwrap();
        let result = run_generation(&cfg, &m, &m, &[0], None).unwrap();
        assert_eq!(result.stats.total_emitted, 10);
        assert_eq!(result.stats.alpha(), None);
        assert_eq!(result.stats.target_calls, 10);
    }

    #[test]
    fn equal_models_give_alpha_one() {
        let m = constant_model(&[0.25, 0.25, 0.25, 0.25]);
        let cfg =
            EngineConfig::new(Method::BaselineSd { gamma: 4 }, 1.0, 40, 7).unwrap();
        let result = run_generation(&cfg, &m, &m, &[0], None).unwrap();
        assert_eq!(result.stats.alpha(), Some(1.0));
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let draft = constant_model(&[0.6, 0.2, 0.2]);
        let target = constant_model(&[0.3, 0.4, 0.3]);
        let tree = TreeConfig::parse("2,2", false).unwrap();
        let cfg = EngineConfig::new(Method::Mcsd { tree }, 0.7, 30, 99).unwrap();
        let a = run_generation(&cfg, &draft, &target, &[0, 1], None).unwrap();
        let b = run_generation(&cfg, &draft, &target, &[0, 1], None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn alpha_matches_closed_form_for_independent_pair() {
        // Uniform draft, concentrated target, gamma = 1: per-step acceptance
        // probability is sum_x q(x) min(1, p(x)/q(x)).
        let q = [0.25f64, 0.25, 0.25, 0.25];
        let p = [0.7f64, 0.1, 0.1, 0.1];
        let expected: f64 = q
            .iter()
            .zip(&p)
            .map(|(&qi, &pi)| qi * (pi / qi).min(1.0))
            .sum();
        let draft = constant_model(&q);
        let target = constant_model(&p);
        let cfg =
            EngineConfig::new(Method::BaselineSd { gamma: 1 }, 1.0, 20_000, 5).unwrap();
        let result = run_generation(&cfg, &draft, &target, &[0], None).unwrap();
        let alpha = result.stats.alpha().unwrap();
        assert!((alpha - expected).abs() < 0.01, "alpha {alpha}, expected {expected}");
    }

    #[test]
    fn trace_lines_round_trip() {
        let rec = StepRecord {
            step: 3,
            method: "mcsd".into(),
            depth: 4,
            longest_accepted: 2,
            max_draft_len: 4,
            emitted: 3,
            draft_calls: 4,
            target_calls: 1,
            decision_calls: 0,
            stopped_early: false,
        };
        assert_eq!(StepRecord::parse_line(&rec.to_line()).unwrap(), rec);
    }

    #[test]
    fn eval_cache_matches_recomputation_and_keys_by_horizon() {
        let m = constant_model(&[0.5, 0.5]);
        let mut cache = EvalCache::new();
        let d1 = cache.next_distribution(&m, &[0, 1], 1.0).unwrap();
        let d2 = cache.next_distribution(&m, &[0, 1], 1.0).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(cache.hits, 1);
        assert_eq!(d1, m.next_distribution(&[0, 1], 1.0).unwrap());
        // Order-0 model: every context shares one cache entry.
        cache.next_distribution(&m, &[1, 0, 1], 1.0).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.hits, 2);
        cache.clear();
        assert!(cache.is_empty());
    }

    #[test]
    fn step_emissions_sum_to_total() {
        let draft = constant_model(&[0.5, 0.3, 0.2]);
        let target = constant_model(&[0.2, 0.4, 0.4]);
        let cfg =
            EngineConfig::new(Method::BaselineSd { gamma: 3 }, 1.0, 57, 11).unwrap();
        let result = run_generation(&cfg, &draft, &target, &[0], None).unwrap();
        let sum: usize = result.trace.iter().map(|r| r.emitted).sum();
        assert_eq!(sum as u64, result.stats.total_emitted);
        assert_eq!(result.stats.total_emitted, 57);
    }

    #[test]
    fn eos_terminates_generation() {
        let target = constant_model(&[0.0, 1.0]);
        let mut cfg = EngineConfig::new(Method::Vanilla, 1.0, 10, 1).unwrap();
        cfg.eos = Some(1);
        let result = run_generation(&cfg, &target, &target, &[0], None).unwrap();
        assert_eq!(result.stats.total_emitted, 1);
        assert_eq!(result.tokens, vec![0, 1]);
    }
}
