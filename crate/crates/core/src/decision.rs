//! Early-stop decision models for dynamic draft generation.
//!
//! Two predictors score whether the target model will accept a chain's
//! newest draft token: T1 is a three-layer MLP over the draft model's
//! hidden state, T2 is a two-layer MLP over the top-k draft probabilities
//! concatenated with the draft distribution's entropy. During dynamic
//! decoding all chains are scored in one batch after each draft turn;
//! when every score falls below the threshold `beta` (default 0.4, strict
//! less-than), draft generation stops early.
//!
//! T1's ratio label defaults to the acceptance probability `min(1, p/q)`.
//! The literal `max(1, p/q)` form is available as `LabelMode::LiteralRatio`
//! but is bounded below by one and cannot separate classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

use crate::dist::Distribution;
use crate::engine::{run_generation, EngineConfig, GenerationResult, NodeRecord};
use crate::error::{Error, Result};
use crate::model::Model;

/// Default threshold for the early-stop rule.
pub const DEFAULT_BETA: f64 = 0.4;
/// Default number of top probabilities in the T2 feature vector.
pub const DEFAULT_TOP_K: usize = 5;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Small MLP
// ---------------------------------------------------------------------------

/// Dense feed-forward net with tanh hidden layers and a linear scalar
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Layer widths, input first, 1 last.
    dims: Vec<usize>,
    /// Per layer: weights (out x in, row-major) then biases.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new_random(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2 && *dims.last().unwrap() == 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Self { dims: dims.to_vec(), weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Raw (pre-squash) scalar output.
    pub fn raw(&self, input: &[f64]) -> f64 {
        self.activations(input).last().unwrap()[0]
    }

    /// Per-layer post-activation values, input excluded.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(input.len(), self.dims[0], "input dimension mismatch");
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len());
        let mut x = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let mut y = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += w[o * fan_in + i] * x[i];
                }
                y[o] = if l == last { acc } else { acc.tanh() };
            }
            acts.push(y.clone());
            x = y;
        }
        acts
    }

    /// One gradient step for a mini batch. `grad_raw` maps (raw output,
    /// label) to dL/draw, which covers both squared error and BCE through
    /// a squashed output.
    fn sgd_batch(
        &mut self,
        batch: &[(&[f64], f64)],
        lr: f64,
        grad_raw: &dyn Fn(f64, f64) -> f64,
    ) {
        let nl = self.weights.len();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        for &(input, label) in batch {
            let acts = self.activations(input);
            let raw = acts[nl - 1][0];
            // Backward pass.
            let mut delta = vec![grad_raw(raw, label)];
            for l in (0..nl).rev() {
                let fan_in = self.dims[l];
                let prev: &[f64] = if l == 0 { input } else { &acts[l - 1] };
                for (o, &d) in delta.iter().enumerate() {
                    for i in 0..fan_in {
                        gw[l][o * fan_in + i] += d * prev[i];
                    }
                    gb[l][o] += d;
                }
                if l > 0 {
                    let mut next = vec![0.0; fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        for i in 0..fan_in {
                            next[i] += self.weights[l][o * fan_in + i] * d;
                        }
                    }
                    // tanh derivative through the hidden activation.
                    for i in 0..fan_in {
                        next[i] *= 1.0 - acts[l - 1][i] * acts[l - 1][i];
                    }
                    delta = next;
                }
            }
        }
        let scale = lr / batch.len() as f64;
        for l in 0..nl {
            for (w, g) in self.weights[l].iter_mut().zip(&gw[l]) {
                *w -= scale * g;
            }
            for (b, g) in self.biases[l].iter_mut().zip(&gb[l]) {
                *b -= scale * g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Decision models
// ---------------------------------------------------------------------------

/// Three-layer MLP over the draft hidden state, regressing the acceptance
/// ratio label. The score passed to the threshold is `logistic(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionT1 {
    pub mlp: Mlp,
}

impl DecisionT1 {
    /// Hidden widths 64 and 32.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self { mlp: Mlp::new_random(&[input_dim, 64, 32, 1], seed) }
    }

    pub fn score(&self, hidden: &[f64]) -> f64 {
        logistic(self.mlp.raw(hidden))
    }
}

/// Two-layer MLP over top-k probabilities plus entropy, with a logistic
/// output in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionT2 {
    pub mlp: Mlp,
    pub top_k: usize,
}

impl DecisionT2 {
    /// Hidden width 16; input dimension is `top_k + 1`.
    pub fn new(top_k: usize, seed: u64) -> Self {
        Self { mlp: Mlp::new_random(&[top_k + 1, 16, 1], seed), top_k }
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        logistic(self.mlp.raw(features))
    }
}

/// The scorer plugged into dynamic decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionModel {
    T1(DecisionT1),
    T2(DecisionT2),
    /// Fixed score; `Constant(1.0)` never stops, `Constant(0.0)` always
    /// stops after the first turn.
    Constant(f64),
}

impl DecisionModel {
    /// Scores one chain from its newest token's draft hidden state and
    /// sampling distribution.
    pub fn score(&self, hidden: &[f64], draft_dist: &Distribution) -> f64 {
        match self {
            DecisionModel::T1(t1) => t1.score(hidden),
            DecisionModel::T2(t2) => {
                t2.score(&extract_features_t2(draft_dist, t2.top_k).unwrap())
            }
            DecisionModel::Constant(c) => *c,
        }
    }
}

/// Stop rule: true iff every chain's score is strictly below `beta`.
pub fn should_stop(scores: &[f64], beta: f64) -> Result<bool> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    Ok(scores.iter().all(|&s| s < beta))
}

/// T2 feature vector: top-k probabilities sorted descending, then the
/// Shannon entropy (nats) of the full distribution.
pub fn extract_features_t2(dist: &Distribution, k: usize) -> Result<Vec<f64>> {
    if k > dist.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k {k} exceeds vocabulary size {}",
            dist.len()
        )));
    }
    let mut features = dist.top_k(k);
    features.push(dist.entropy());
    Ok(features)
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Which label the collector attaches to each draft token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Accept/reject verdict in {0, 1}; the T2 label.
    Binary,
    /// Acceptance probability `min(1, p/q)`; the default T1 label.
    AcceptProb,
    /// The literal ratio label `max(1, p/q)`. Bounded below by one and
    /// uninformative; kept for comparison.
    LiteralRatio,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub label: f64,
    pub step_id: usize,
}

impl TrainSample {
    /// Line format: space-separated features, `|`, label, step id.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let feats = self
            .features
            .iter()
            .map(|f| format!("{f:.17e}"))
            .collect::<Vec<_>>()
            .join(" ");
        write!(s, "{feats} | {} {}", self.label, self.step_id).unwrap();
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let (feats, rest) = line
            .split_once('|')
            .ok_or_else(|| Error::Parse { line: 0, msg: "missing `|`".into() })?;
        let features: Vec<f64> = feats
            .split_whitespace()
            .map(|f| f.parse().map_err(|_| Error::Parse { line: 0, msg: "bad feature".into() }))
            .collect::<Result<_>>()?;
        let mut parts = rest.split_whitespace();
        let label: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse { line: 0, msg: "bad label".into() })?;
        let step_id: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse { line: 0, msg: "bad step id".into() })?;
        Ok(Self { features, label, step_id })
    }
}

/// Which feature extractor the collector applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Draft hidden state (T1 input).
    Hidden,
    /// Top-k probabilities plus entropy (T2 input).
    TopKEntropy { k: usize },
}

fn label_for(record: &NodeRecord, mode: LabelMode, rng: &mut ChaCha8Rng) -> f64 {
    let ratio = if record.draft_prob > 0.0 {
        record.target_prob / record.draft_prob
    } else {
        0.0
    };
    match mode {
        LabelMode::AcceptProb => ratio.min(1.0),
        LabelMode::LiteralRatio => ratio.max(1.0),
        LabelMode::Binary => {
            if record.tested {
                record.accepted as u64 as f64
            } else {
                // Verification never reached this node; the verdict it would
                // have received is a Bernoulli(min(1, p/q)) coin.
                (rng.gen::<f64>() < ratio.min(1.0)) as u64 as f64
            }
        }
    }
}

/// Runs instrumented generation over the corpus and converts every
/// draft-generated token into a training sample. Optionally balances the
/// two classes by upsampling the minority (high-acceptance model pairs
/// yield very few rejected samples otherwise).
#[allow(clippy::too_many_arguments)]
pub fn collect_training_data(
    draft: &Model,
    target: &Model,
    prompts: &[Vec<u32>],
    config: &EngineConfig,
    features: FeatureKind,
    labels: LabelMode,
    balance: bool,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("prompt corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(pi as u64);
        let result: GenerationResult = run_generation(&cfg, draft, target, prompt, None)?;
        for record in &result.node_records {
            // Target-initialized tokens carry no draft features.
            if record.hidden.is_empty() && matches!(features, FeatureKind::Hidden) {
                continue;
            }
            if record.target_prob.is_nan() {
                continue;
            }
            let feats = match features {
                FeatureKind::Hidden => record.hidden.clone(),
                FeatureKind::TopKEntropy { k } => extract_features_t2(&record.draft_dist, k)?,
            };
            samples.push(TrainSample {
                features: feats,
                label: label_for(record, labels, &mut rng),
                step_id: pi,
            });
        }
    }
    if balance && labels == LabelMode::Binary {
        balance_classes(&mut samples, &mut rng);
    }
    Ok(samples)
}

/// Upsamples the minority class (labels split at 0.5) to match the
/// majority count.
fn balance_classes(samples: &mut Vec<TrainSample>, rng: &mut ChaCha8Rng) {
    let pos: Vec<usize> =
        (0..samples.len()).filter(|&i| samples[i].label >= 0.5).collect();
    let neg: Vec<usize> =
        (0..samples.len()).filter(|&i| samples[i].label < 0.5).collect();
    let (minority, majority) = if pos.len() < neg.len() { (pos, neg) } else { (neg, pos) };
    if minority.is_empty() || minority.len() == majority.len() {
        return;
    }
    let deficit = majority.len() - minority.len();
    for _ in 0..deficit {
        let pick = minority[rng.gen_range(0..minority.len())];
        let dup = samples[pick].clone();
        samples.push(dup);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

const BATCH_SIZE: usize = 32;

impl DecisionModel {
    /// Mini-batch SGD. T2 minimizes binary cross-entropy through the
    /// logistic output; T1 minimizes squared error against its ratio label
    /// on the raw output. Returns the mean loss per epoch. Deterministic
    /// under `seed`; zero epochs leaves the model unchanged.
    pub fn train(
        &mut self,
        samples: &[TrainSample],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let (mlp, bce): (&mut Mlp, bool) = match self {
            DecisionModel::T1(t1) => (&mut t1.mlp, false),
            DecisionModel::T2(t2) => (&mut t2.mlp, true),
            DecisionModel::Constant(_) => {
                return Err(Error::InvalidArgument("constant stub is not trainable".into()))
            }
        };
        for s in samples {
            if s.features.len() != mlp.input_dim() {
                return Err(Error::Config(format!(
                    "sample feature dim {} does not match model input dim {}",
                    s.features.len(),
                    mlp.input_dim()
                )));
            }
        }
        let grad_raw: Box<dyn Fn(f64, f64) -> f64> = if bce {
            // d(BCE(logistic(raw)))/draw = logistic(raw) - label
            Box::new(|raw, label| logistic(raw) - label)
        } else {
            Box::new(|raw, label| raw - label)
        };
        let loss_of = |mlp: &Mlp, s: &TrainSample| -> f64 {
            let raw = mlp.raw(&s.features);
            if bce {
                let p = logistic(raw).clamp(1e-12, 1.0 - 1e-12);
                -(s.label * p.ln() + (1.0 - s.label) * (1.0 - p).ln())
            } else {
                let d = raw - s.label;
                0.5 * d * d
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(BATCH_SIZE) {
                let batch: Vec<(&[f64], f64)> = chunk
                    .iter()
                    .map(|&i| (samples[i].features.as_slice(), samples[i].label))
                    .collect();
                mlp.sgd_batch(&batch, lr, &grad_raw);
            }
            let total: f64 = samples.iter().map(|s| loss_of(mlp, s)).sum();
            curve.push(total / samples.len() as f64);
        }
        Ok(curve)
    }

    /// Fraction of samples classified correctly at a 0.5 score cutoff.
    pub fn accuracy(&self, samples: &[TrainSample]) -> f64 {
        let correct = samples
            .iter()
            .filter(|s| {
                let score = match self {
                    DecisionModel::T1(t1) => t1.score(&s.features),
                    DecisionModel::T2(t2) => t2.score(&s.features),
                    DecisionModel::Constant(c) => *c,
                };
                (score >= 0.5) == (s.label >= 0.5)
            })
            .count();
        correct as f64 / samples.len().max(1) as f64
    }
}

/// Overlap coefficient between the accepted and rejected score histograms:
/// the shared area under both normalized histograms, in [0, 1]. Reported,
/// not asserted.
pub fn overlap_coefficient(accepted: &[f64], rejected: &[f64], bins: usize) -> f64 {
    if accepted.is_empty() || rejected.is_empty() || bins == 0 {
        return 0.0;
    }
    let hist = |scores: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &s in scores {
            let b = ((s.clamp(0.0, 1.0)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0 / scores.len() as f64;
        }
        h
    };
    let (ha, hr) = (hist(accepted), hist(rejected));
    ha.iter().zip(&hr).map(|(a, r)| a.min(*r)).sum()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

impl DecisionModel {
    /// Same key/shape/values text format as the tiny neural model.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (kind, mlp, extra) = match self {
            DecisionModel::T1(t1) => ("t1", &t1.mlp, String::new()),
            DecisionModel::T2(t2) => ("t2", &t2.mlp, format!(" topk={}", t2.top_k)),
            DecisionModel::Constant(c) => {
                return format!("decision constant value={c}\n");
            }
        };
        let dims = mlp.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "decision {kind} dims={dims}{extra}").unwrap();
        for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
            let (fan_in, fan_out) = (mlp.dims[l], mlp.dims[l + 1]);
            write_tensor(&mut out, &format!("w{l}"), fan_out, fan_in, w);
            write_tensor(&mut out, &format!("b{l}"), fan_out, 1, b);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty decision model".into() })?;
        let rest = header.strip_prefix("decision ").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "expected `decision` header".into(),
        })?;
        let mut parts = rest.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let mut dims: Vec<usize> = Vec::new();
        let mut top_k = DEFAULT_TOP_K;
        let mut constant = None;
        for kv in parts {
            if let Some((k, v)) = kv.split_once('=') {
                match k {
                    "dims" => {
                        dims = v
                            .split(',')
                            .map(|d| {
                                d.parse().map_err(|_| Error::Parse {
                                    line: 1,
                                    msg: "bad dims".into(),
                                })
                            })
                            .collect::<Result<_>>()?;
                    }
                    "topk" => {
                        top_k = v
                            .parse()
                            .map_err(|_| Error::Parse { line: 1, msg: "bad topk".into() })?;
                    }
                    "value" => {
                        constant = Some(
                            v.parse::<f64>()
                                .map_err(|_| Error::Parse { line: 1, msg: "bad value".into() })?,
                        );
                    }
                    _ => {}
                }
            }
        }
        if kind == "constant" {
            let c = constant
                .ok_or_else(|| Error::Parse { line: 1, msg: "constant needs value=".into() })?;
            return Ok(DecisionModel::Constant(c));
        }
        if dims.len() < 2 {
            return Err(Error::Parse { line: 1, msg: "header must set dims".into() });
        }
        let tensors = crate::model::read_tensors(lines)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let get = |name: String| -> Result<Vec<f64>> {
                tensors
                    .get(&name)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {name}") })
            };
            weights.push(get(format!("w{l}"))?);
            biases.push(get(format!("b{l}"))?);
        }
        let mlp = Mlp { dims, weights, biases };
        match kind {
            "t1" => Ok(DecisionModel::T1(DecisionT1 { mlp })),
            "t2" => Ok(DecisionModel::T2(DecisionT2 { mlp, top_k })),
            other => Err(Error::Parse { line: 1, msg: format!("unknown kind {other:?}") }),
        }
    }
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    let line = values.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(" ");
    writeln!(out, "{line}").unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn t2_features_hand_cases() {
        let f = extract_features_t2(&Distribution::one_hot(3, 0), 2).unwrap();
        assert_eq!(f, vec![1.0, 0.0, 0.0]);

        let f = extract_features_t2(&Distribution::uniform(4), 2).unwrap();
        assert_eq!(f[..2], [0.25, 0.25]);
        assert!((f[2] - 4.0f64.ln()).abs() < 1e-12);

        let f = extract_features_t2(&dist(&[0.5, 0.3, 0.2]), 3).unwrap();
        assert_eq!(f[..3], [0.5, 0.3, 0.2]);
        let h = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
        assert!((f[3] - h).abs() < 1e-12);
        assert!((h - 1.0297).abs() < 1e-4);

        assert!(extract_features_t2(&Distribution::uniform(3), 4).is_err());
    }

    #[test]
    fn stop_rule_threshold_cases() {
        assert!(should_stop(&[0.1, 0.2, 0.39], 0.4).unwrap());
        assert!(!should_stop(&[0.1, 0.9], 0.4).unwrap());
        // Boundary is strict less-than.
        assert!(!should_stop(&[0.4], 0.4).unwrap());
        assert!(should_stop(&[0.4 - 1e-12], 0.4).unwrap());
        assert!(should_stop(&[], 0.4).is_err());
    }

    #[test]
    fn stop_rule_is_monotone_in_scores() {
        // Raising any score never flips false -> true.
        let base = [0.1, 0.35, 0.2];
        let beta = 0.4;
        let before = should_stop(&base, beta).unwrap();
        for i in 0..base.len() {
            for bump in [0.01, 0.3, 0.9] {
                let mut raised = base;
                raised[i] += bump;
                let after = should_stop(&raised, beta).unwrap();
                assert!(!(!before && after), "raising a score enabled stopping");
            }
        }
    }

    #[test]
    fn t2_scores_stay_in_unit_interval() {
        let t2 = DecisionT2::new(3, 5);
        for f in [
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 100.0],
            vec![-50.0, 50.0, 0.0, 3.0],
        ] {
            let s = t2.score(&f);
            assert!((0.0..=1.0).contains(&s), "score {s}");
        }
    }

    fn separable_fixture() -> Vec<TrainSample> {
        // Accepted cluster near (1, 0, ..), rejected near (0, 1, ..).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut samples = Vec::new();
        for i in 0..200 {
            let accepted = i % 2 == 0;
            let n: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 0.1).collect();
            let features = if accepted {
                vec![0.9 + n[0], 0.05 + n[1], n[2]]
            } else {
                vec![0.1 + n[0], 0.8 + n[1], 2.0 + n[2]]
            };
            samples.push(TrainSample { features, label: accepted as u64 as f64, step_id: i });
        }
        samples
    }

    #[test]
    fn t2_training_separates_a_separable_fixture() {
        let samples = separable_fixture();
        let mut model = DecisionModel::T2(DecisionT2::new(2, 1));
        let curve = model.train(&samples, 80, 0.5, 7).unwrap();
        assert!(curve.first().unwrap() > curve.last().unwrap());
        assert!(model.accuracy(&samples) > 0.95, "accuracy {}", model.accuracy(&samples));
    }

    #[test]
    fn zero_epochs_leaves_the_model_unchanged() {
        let samples = separable_fixture();
        let mut model = DecisionModel::T2(DecisionT2::new(2, 1));
        let before = model.clone();
        let curve = model.train(&samples, 0, 0.5, 7).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn constant_labels_drive_a_constant_predictor() {
        let mut samples = separable_fixture();
        for s in &mut samples {
            s.label = 1.0;
        }
        let mut model = DecisionModel::T2(DecisionT2::new(2, 1));
        model.train(&samples, 100, 0.5, 7).unwrap();
        let scores: Vec<f64> = samples
            .iter()
            .map(|s| match &model {
                DecisionModel::T2(t2) => t2.score(&s.features),
                _ => unreachable!(),
            })
            .collect();
        for s in scores {
            assert!(s > 0.9, "score {s} should approach 1 for all-positive labels");
        }
    }

    #[test]
    fn decision_model_text_round_trip() {
        let t2 = DecisionModel::T2(DecisionT2::new(4, 9));
        assert_eq!(DecisionModel::from_text(&t2.to_text()).unwrap(), t2);
        let t1 = DecisionModel::T1(DecisionT1::new(6, 3));
        assert_eq!(DecisionModel::from_text(&t1.to_text()).unwrap(), t1);
        let c = DecisionModel::Constant(0.25);
        assert_eq!(DecisionModel::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn train_sample_line_round_trip() {
        let s = TrainSample { features: vec![0.5, 0.25, 1.5], label: 1.0, step_id: 12 };
        assert_eq!(TrainSample::parse_line(&s.to_line()).unwrap(), s);
    }

    #[test]
    fn overlap_coefficient_extremes() {
        let sep = overlap_coefficient(&[0.9, 0.95, 0.99], &[0.0, 0.05, 0.1], 10);
        assert_eq!(sep, 0.0);
        let same = overlap_coefficient(&[0.5, 0.5], &[0.5, 0.5], 10);
        assert!((same - 1.0).abs() < 1e-12);
    }
}
