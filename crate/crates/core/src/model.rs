//! Language-model abstraction: exact tabular n-gram models and a tiny
//! trainable feed-forward model.
//!
//! Tabular models make draft/target divergence fully controllable and keep
//! the enumeration oracle exact. The neural model exists so that draft
//! hidden states are non-degenerate inputs for the hidden-state decision
//! model; it is a two-layer feed-forward next-token predictor over a fixed
//! context window, trained by plain SGD.
//!
//! `forward` evaluates a whole token tree in one call using the
//! topology-aware mask: each node's logits equal the model run on the
//! unique root-to-node path appended to the prefix, which is exactly what
//! fused tree attention computes on real hardware.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::tree::MaskView;

/// A dense token id space `0..size`, with optional display strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    labels: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be >= 2, got {size}")));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut v = Self::new(labels.len())?;
        v.labels = Some(labels);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, token: u32) -> String {
        match &self.labels {
            Some(labels) => labels[token as usize].clone(),
            None => token.to_string(),
        }
    }
}

/// Exact conditional next-token tables keyed by the last `order` tokens.
///
/// Contexts shorter than `order` (near the start of text) are looked up by
/// their full available length. Missing rows fall back to `default`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    vocab: usize,
    order: usize,
    table: BTreeMap<Vec<u32>, Distribution>,
    default: Distribution,
}

impl TabularModel {
    pub fn new(
        vocab: usize,
        order: usize,
        table: BTreeMap<Vec<u32>, Distribution>,
        default: Distribution,
    ) -> Result<Self> {
        if default.len() != vocab {
            return Err(Error::Config("default row length must equal vocab size".into()));
        }
        for (ctx, row) in &table {
            if ctx.len() > order {
                return Err(Error::Config(format!(
                    "context {ctx:?} longer than order {order}"
                )));
            }
            if row.len() != vocab {
                return Err(Error::Config(format!(
                    "row for context {ctx:?} has length {}, expected {vocab}",
                    row.len()
                )));
            }
            if ctx.iter().any(|&t| t as usize >= vocab) {
                return Err(Error::Config(format!("context {ctx:?} has out-of-vocab token")));
            }
        }
        Ok(Self { vocab, order, table, default })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn row(&self, context: &[u32]) -> &Distribution {
        let start = context.len().saturating_sub(self.order);
        self.table.get(&context[start..]).unwrap_or(&self.default)
    }

    /// Iterates every explicit context row in sorted context order.
    pub fn contexts(&self) -> impl Iterator<Item = (&Vec<u32>, &Distribution)> {
        self.table.iter()
    }

    /// The row used for contexts without an explicit table entry.
    pub fn default_row(&self) -> &Distribution {
        &self.default
    }
}

/// Two-layer feed-forward next-token model over a fixed context window.
/// Input is the concatenated one-hot encoding of the last `window` tokens;
/// the tanh hidden layer doubles as the model's hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNeuralModel {
    vocab: usize,
    window: usize,
    hidden: usize,
    /// hidden x (window * vocab), row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// vocab x hidden, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TinyNeuralModel {
    pub fn new_random(vocab: usize, window: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = window * vocab;
        let scale1 = (1.0 / input as f64).sqrt();
        let scale2 = (1.0 / hidden as f64).sqrt();
        let mut gen = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s).collect()
        };
        Self {
            vocab,
            window,
            hidden,
            w1: gen(hidden * input, scale1),
            b1: vec![0.0; hidden],
            w2: gen(vocab * hidden, scale2),
            b2: vec![0.0; vocab],
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn input_features(&self, context: &[u32]) -> Vec<f64> {
        // Last `window` tokens, left-padded with all-zero slots.
        let mut x = vec![0.0; self.window * self.vocab];
        let take = context.len().min(self.window);
        let offset = self.window - take;
        for (slot, &tok) in context[context.len() - take..].iter().enumerate() {
            x[(offset + slot) * self.vocab + tok as usize] = 1.0;
        }
        x
    }

    /// Returns (logits, hidden activation) for one context.
    pub fn eval(&self, context: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let x = self.input_features(context);
        let input = x.len();
        let mut h = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.b1[i];
            for j in 0..input {
                acc += self.w1[i * input + j] * x[j];
            }
            h[i] = acc.tanh();
        }
        let mut logits = vec![0.0; self.vocab];
        for i in 0..self.vocab {
            let mut acc = self.b2[i];
            for j in 0..self.hidden {
                acc += self.w2[i * self.hidden + j] * h[j];
            }
            logits[i] = acc;
        }
        (logits, h)
    }

    /// Plain SGD on next-token cross-entropy over the corpus sequences.
    /// Returns the mean loss per epoch.
    pub fn train(&mut self, corpus: &[Vec<u32>], epochs: usize, lr: f64, seed: u64) -> Vec<f64> {
        let mut samples: Vec<(Vec<u32>, u32)> = Vec::new();
        for seq in corpus {
            for t in 1..seq.len() {
                let start = t.saturating_sub(self.window);
                samples.push((seq[start..t].to_vec(), seq[t]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut curve = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            // Fisher-Yates shuffle, seeded.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut total_loss = 0.0;
            for &si in &order {
                let (context, label) = &samples[si];
                total_loss += self.sgd_step(context, *label, lr);
            }
            curve.push(total_loss / samples.len().max(1) as f64);
        }
        curve
    }

    fn sgd_step(&mut self, context: &[u32], label: u32, lr: f64) -> f64 {
        let x = self.input_features(context);
        let input = x.len();
        let (logits, h) = self.eval(context);
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -probs[label as usize].max(1e-300).ln();

        // dL/dlogits = softmax - one_hot(label)
        let mut glogits = probs;
        glogits[label as usize] -= 1.0;

        // Backprop into the hidden layer before updating w2.
        let mut gh = vec![0.0; self.hidden];
        for i in 0..self.vocab {
            for j in 0..self.hidden {
                gh[j] += self.w2[i * self.hidden + j] * glogits[i];
            }
        }
        for i in 0..self.vocab {
            for j in 0..self.hidden {
                self.w2[i * self.hidden + j] -= lr * glogits[i] * h[j];
            }
            self.b2[i] -= lr * glogits[i];
        }
        for j in 0..self.hidden {
            let gpre = gh[j] * (1.0 - h[j] * h[j]);
            for k in 0..input {
                if x[k] != 0.0 {
                    self.w1[j * input + k] -= lr * gpre * x[k];
                }
            }
            self.b1[j] -= lr * gpre;
        }
        loss
    }
}

/// The pluggable model: exact table lookups or the tiny neural net.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tabular(TabularModel),
    TinyNeural(TinyNeuralModel),
}

/// Per-node logits and hidden states from one masked tree forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
}

impl Model {
    pub fn vocab_size(&self) -> usize {
        match self {
            Model::Tabular(m) => m.vocab,
            Model::TinyNeural(m) => m.vocab,
        }
    }

    /// Longest context suffix the model can distinguish: table order for
    /// tabular models, input window for the neural one.
    pub fn context_horizon(&self) -> usize {
        match self {
            Model::Tabular(m) => m.order,
            Model::TinyNeural(m) => m.window,
        }
    }

    /// Dimension of the per-position hidden state. For tabular models the
    /// next-token probability vector doubles as the hidden state.
    pub fn hidden_size(&self) -> usize {
        match self {
            Model::Tabular(m) => m.vocab,
            Model::TinyNeural(m) => m.hidden,
        }
    }

    /// Logits and hidden state for the next token after `context`.
    /// Tabular logits are `ln(p)`, with zero-probability tokens at `-inf`.
    pub fn next(&self, context: &[u32]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Model::Tabular(m) => {
                let row = m.row(context);
                let logits = row
                    .probs()
                    .iter()
                    .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                    .collect();
                (logits, row.probs().to_vec())
            }
            Model::TinyNeural(m) => m.eval(context),
        }
    }

    /// The next-token distribution after `context`, at the given temperature.
    pub fn next_distribution(&self, context: &[u32], temperature: f64) -> Result<Distribution> {
        match self {
            // Avoids the ln/exp round trip so table rows survive bit-exactly
            // at temperature 1.
            Model::Tabular(m) => m.row(context).with_temperature(temperature),
            Model::TinyNeural(m) => {
                crate::dist::apply_temperature(&m.eval(context).0, temperature)
            }
        }
    }

    /// Evaluates every tree node in one masked pass. Node `j`'s context is
    /// the prefix followed by the tokens of its mask ancestors in
    /// topological order. With empty `tree_tokens`, returns one result for
    /// the last prefix position.
    pub fn forward<M: MaskView>(
        &self,
        prefix: &[u32],
        tree_tokens: &[u32],
        mask: &M,
        positions: &[usize],
    ) -> Result<ForwardResult> {
        if mask.dim() != tree_tokens.len() || positions.len() != tree_tokens.len() {
            return Err(Error::Config(format!(
                "dimension mismatch: {} tokens, {}x{} mask, {} positions",
                tree_tokens.len(),
                mask.dim(),
                mask.dim(),
                positions.len()
            )));
        }
        if tree_tokens.is_empty() {
            if prefix.is_empty() {
                return Err(Error::Config("empty tree requires a nonempty prefix".into()));
            }
            let (logits, hidden) = self.next(prefix);
            return Ok(ForwardResult { logits: vec![logits], hidden: vec![hidden] });
        }
        let mut logits = Vec::with_capacity(tree_tokens.len());
        let mut hidden = Vec::with_capacity(tree_tokens.len());
        for node in 0..tree_tokens.len() {
            let ancestors = mask.ancestors(node);
            if positions[node] != prefix.len() + ancestors.len() - 1 {
                return Err(Error::Config(format!(
                    "position {} for node {node} inconsistent with depth {}",
                    positions[node],
                    ancestors.len()
                )));
            }
            let mut context = prefix.to_vec();
            context.extend(ancestors.iter().map(|&a| tree_tokens[a]));
            let (l, h) = self.next(&context);
            logits.push(l);
            hidden.push(h);
        }
        Ok(ForwardResult { logits, hidden })
    }
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

impl TabularModel {
    /// Plain-text table: `vocab=<n> order=<k>` header, then one line per
    /// context (`ids | probs`). The default row is written with an empty
    /// context.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "vocab={} order={}", self.vocab, self.order).unwrap();
        let fmt_row = |ctx: &[u32], row: &Distribution| {
            let ids = ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
            let probs = row
                .probs()
                .iter()
                .map(|p| format!("{p:.17}"))
                .collect::<Vec<_>>()
                .join(" ");
            format!("{ids} | {probs}")
        };
        for (ctx, row) in &self.table {
            writeln!(out, "{}", fmt_row(ctx, row)).unwrap();
        }
        writeln!(out, "{}", fmt_row(&[], &self.default)).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty model file".into() })?;
        let (vocab, order) = parse_header(header, "vocab", "order")
            .ok_or_else(|| Error::Parse { line: 1, msg: "expected `vocab=<n> order=<k>`".into() })?;
        let mut table = BTreeMap::new();
        let mut default = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (ctx_part, prob_part) = line.split_once('|').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "missing `|` separator".into(),
            })?;
            let ctx: Vec<u32> = ctx_part
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad token id {t:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            let probs: Vec<f64> = prob_part
                .split_whitespace()
                .map(|p| {
                    p.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad probability {p:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            let row = Distribution::new(probs).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            if ctx.is_empty() {
                default = Some(row);
            } else {
                table.insert(ctx, row);
            }
        }
        let default = default.unwrap_or_else(|| Distribution::uniform(vocab));
        Self::new(vocab, order, table, default)
    }
}

impl TinyNeuralModel {
    /// Named weight matrices in a key/shape/values text format:
    /// a `tinyneural` header, then `tensor <name> <rows> <cols>` followed by
    /// one line of row-major values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "tinyneural vocab={} window={} hidden={}",
            self.vocab, self.window, self.hidden
        )
        .unwrap();
        let input = self.window * self.vocab;
        write_tensor(&mut out, "w1", self.hidden, input, &self.w1);
        write_tensor(&mut out, "b1", self.hidden, 1, &self.b1);
        write_tensor(&mut out, "w2", self.vocab, self.hidden, &self.w2);
        write_tensor(&mut out, "b2", self.vocab, 1, &self.b2);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty model file".into() })?;
        let rest = header.strip_prefix("tinyneural ").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "expected `tinyneural` header".into(),
        })?;
        let mut vocab = None;
        let mut window = None;
        let mut hidden = None;
        for kv in rest.split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                let v: usize = v.parse().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad value {v:?}"),
                })?;
                match k {
                    "vocab" => vocab = Some(v),
                    "window" => window = Some(v),
                    "hidden" => hidden = Some(v),
                    _ => {}
                }
            }
        }
        let (vocab, window, hidden) = match (vocab, window, hidden) {
            (Some(v), Some(w), Some(h)) => (v, w, h),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "header must set vocab, window, hidden".into(),
                })
            }
        };
        let tensors = read_tensors(lines)?;
        let input = window * vocab;
        let get = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let (shape, values) = tensors.get(name).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing tensor {name}"),
            })?;
            if *shape != (rows, cols) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("tensor {name} has shape {shape:?}, expected ({rows}, {cols})"),
                });
            }
            Ok(values.clone())
        };
        Ok(Self {
            vocab,
            window,
            hidden,
            w1: get("w1", hidden, input)?,
            b1: get("b1", hidden, 1)?,
            w2: get("w2", vocab, hidden)?,
            b2: get("b2", vocab, 1)?,
        })
    }
}

impl Model {
    pub fn to_text(&self) -> String {
        match self {
            Model::Tabular(m) => m.to_text(),
            Model::TinyNeural(m) => m.to_text(),
        }
    }

    /// Parses either serialized form, dispatching on the header line.
    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with("tinyneural") {
            Ok(Model::TinyNeural(TinyNeuralModel::from_text(text)?))
        } else {
            Ok(Model::Tabular(TabularModel::from_text(text)?))
        }
    }
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    let line = values.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(" ");
    writeln!(out, "{line}").unwrap();
}

pub(crate) fn read_tensors<'a, I: Iterator<Item = &'a str>>(
    mut lines: I,
) -> Result<BTreeMap<String, ((usize, usize), Vec<f64>)>> {
    let mut tensors = BTreeMap::new();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::Parse { line: 0, msg: format!("expected tensor header, got {line:?}") });
        }
        let name = parts[1].to_string();
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| Error::Parse { line: 0, msg: "bad tensor rows".into() })?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| Error::Parse { line: 0, msg: "bad tensor cols".into() })?;
        let values_line = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("tensor {name} missing values") })?;
        let values: Vec<f64> = values_line
            .split_whitespace()
            .map(|v| {
                v.parse().map_err(|_| Error::Parse { line: 0, msg: format!("bad value {v:?}") })
            })
            .collect::<Result<_>>()?;
        if values.len() != rows * cols {
            return Err(Error::Parse {
                line: 0,
                msg: format!("tensor {name}: {} values, expected {}", values.len(), rows * cols),
            });
        }
        tensors.insert(name, ((rows, cols), values));
    }
    Ok(tensors)
}

fn parse_header(line: &str, key_a: &str, key_b: &str) -> Option<(usize, usize)> {
    let mut a = None;
    let mut b = None;
    for kv in line.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        let v: usize = v.parse().ok()?;
        if k == key_a {
            a = Some(v);
        } else if k == key_b {
            b = Some(v);
        }
    }
    Some((a?, b?))
}
