//! Synthetic model and prompt generators.
//!
//! Benchmarks need controllable draft/target pairs: the acceptance rate
//! depends only on how far the draft distribution sits from the target,
//! so the pair is built as a random tabular target plus a derived draft
//! (temperature-smoothed rows, optionally noise-perturbed). Everything is
//! seeded and reproducible.
//!
//! Models are addressed by descriptor strings so the CLI can either load
//! a serialized model from a file path or construct one on the fly:
//!
//! - `synthetic:vocab=8,order=1,seed=42,concentration=0.5` — random
//!   tabular model; optional `smooth=T` rescales every row by temperature
//!   T (T > 1 flattens), optional `noise=E,noise_seed=S` mixes in an
//!   E-weighted random row.
//! - `neural:vocab=8,window=2,hidden=16,seed=7` — randomly initialized
//!   tiny neural model; optional `train_epochs=N,train_lr=R` fits it to a
//!   corpus sampled from a synthetic tabular model with the same seed.
//! - any other string — path to a model file in the text format of
//!   [`crate::model::Model::from_text`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::model::{Model, TabularModel, TinyNeuralModel};

/// Parameters for a random tabular model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab: usize,
    pub order: usize,
    pub seed: u64,
    /// Peakedness of each row: large values give near-uniform rows, small
    /// values concentrate mass on few tokens.
    pub concentration: f64,
}

impl SyntheticSpec {
    pub fn new(vocab: usize, order: usize, seed: u64, concentration: f64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocab must be >= 2".into()));
        }
        if concentration <= 0.0 || !concentration.is_finite() {
            return Err(Error::InvalidArgument("concentration must be positive".into()));
        }
        Ok(Self { vocab, order, seed, concentration })
    }
}

fn random_row<R: Rng + ?Sized>(vocab: usize, concentration: f64, rng: &mut R) -> Distribution {
    // Exponential draws raised to 1/concentration: the exponent drives the
    // spread of the normalized weights.
    let weights: Vec<f64> = (0..vocab)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            (-u.ln()).powf(1.0 / concentration)
        })
        .collect();
    Distribution::from_weights(weights).expect("positive weights")
}

/// Builds a random order-n tabular model with one row per context.
pub fn synthetic_target(spec: &SyntheticSpec) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let default = random_row(spec.vocab, spec.concentration, &mut rng);
    let mut table = BTreeMap::new();
    if spec.order > 0 {
        // Full-order contexts only; shorter histories fall through to the
        // default row.
        let mut ctx = vec![0u32; spec.order];
        loop {
            table.insert(ctx.clone(), random_row(spec.vocab, spec.concentration, &mut rng));
            let mut i = 0;
            loop {
                if i == spec.order {
                    let model = TabularModel::new(spec.vocab, spec.order, table, default)?;
                    return Ok(Model::Tabular(model));
                }
                ctx[i] += 1;
                if (ctx[i] as usize) < spec.vocab {
                    break;
                }
                ctx[i] = 0;
                i += 1;
            }
        }
    }
    Ok(Model::Tabular(TabularModel::new(spec.vocab, 0, table, default)?))
}

/// Derives a draft from a tabular target by re-tempering every row:
/// `smooth` > 1 flattens rows toward uniform, < 1 sharpens them, = 1 is an
/// exact copy (acceptance rate 1).
pub fn smoothed_draft(target: &Model, smooth: f64) -> Result<Model> {
    let tab = match target {
        Model::Tabular(t) => t,
        _ => return Err(Error::InvalidArgument("smoothed_draft needs a tabular model".into())),
    };
    let table: BTreeMap<Vec<u32>, Distribution> = tab
        .contexts()
        .map(|(ctx, row)| Ok((ctx.clone(), row.with_temperature(smooth)?)))
        .collect::<Result<_>>()?;
    let default = tab.default_row().with_temperature(smooth)?;
    Ok(Model::Tabular(TabularModel::new(target.vocab_size(), tab.order(), table, default)?))
}

/// Mixes every row of a tabular model with an independent random row:
/// `epsilon` = 0 leaves the model unchanged, 1 replaces it entirely.
pub fn noise_perturbed(model: &Model, epsilon: f64, seed: u64) -> Result<Model> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument("epsilon must lie in [0,1]".into()));
    }
    let tab = match model {
        Model::Tabular(t) => t,
        _ => return Err(Error::InvalidArgument("noise_perturbed needs a tabular model".into())),
    };
    let vocab = model.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = |row: &Distribution, rng: &mut ChaCha8Rng| -> Result<Distribution> {
        let noise = random_row(vocab, 1.0, rng);
        let probs: Vec<f64> = row
            .probs()
            .iter()
            .zip(noise.probs())
            .map(|(&a, &b)| (1.0 - epsilon) * a + epsilon * b)
            .collect();
        Distribution::new(probs)
    };
    let default = mix(tab.default_row(), &mut rng)?;
    let mut table = BTreeMap::new();
    for (ctx, row) in tab.contexts() {
        table.insert(ctx.clone(), mix(row, &mut rng)?);
    }
    Ok(Model::Tabular(TabularModel::new(vocab, tab.order(), table, default)?))
}

/// Samples `count` prompts of length `len` from a model; the corpus
/// counterpart to the synthetic models.
pub fn synthetic_prompts(
    model: &Model,
    count: usize,
    len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if len == 0 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p: Vec<u32> = vec![rng.gen_range(0..model.vocab_size() as u32)];
        while p.len() < len {
            let d = model.next_distribution(&p, temperature)?;
            p.push(d.sample(&mut rng));
        }
        prompts.push(p);
    }
    Ok(prompts)
}

// ---------------------------------------------------------------------------
// Descriptor parsing
// ---------------------------------------------------------------------------

fn parse_params(body: &str, descriptor: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("bad parameter `{part}` in descriptor `{descriptor}`"))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(
    params: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse `{key}={v}`"))),
    }
}

/// Resolves a model descriptor: `synthetic:...`, `neural:...`, or a file
/// path (see module docs for the grammar).
pub fn resolve_model(descriptor: &str) -> Result<Model> {
    if let Some(body) = descriptor.strip_prefix("synthetic:") {
        let params = parse_params(body, descriptor)?;
        for key in params.keys() {
            if !matches!(
                key.as_str(),
                "vocab" | "order" | "seed" | "concentration" | "smooth" | "noise" | "noise_seed"
            ) {
                return Err(Error::InvalidArgument(format!(
                    "unknown parameter `{key}` in descriptor `{descriptor}`"
                )));
            }
        }
        let spec = SyntheticSpec::new(
            take(&params, "vocab", 8usize)?,
            take(&params, "order", 1usize)?,
            take(&params, "seed", 0u64)?,
            take(&params, "concentration", 0.7f64)?,
        )?;
        let mut model = synthetic_target(&spec)?;
        if let Some(smooth) = params.get("smooth") {
            let t: f64 = smooth
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse `smooth={smooth}`")))?;
            model = smoothed_draft(&model, t)?;
        }
        if params.contains_key("noise") {
            let eps: f64 = take(&params, "noise", 0.0)?;
            let nseed: u64 = take(&params, "noise_seed", spec.seed.wrapping_add(1))?;
            model = noise_perturbed(&model, eps, nseed)?;
        }
        return Ok(model);
    }
    if let Some(body) = descriptor.strip_prefix("neural:") {
        let params = parse_params(body, descriptor)?;
        for key in params.keys() {
            if !matches!(
                key.as_str(),
                "vocab" | "window" | "hidden" | "seed" | "train_epochs" | "train_lr"
            ) {
                return Err(Error::InvalidArgument(format!(
                    "unknown parameter `{key}` in descriptor `{descriptor}`"
                )));
            }
        }
        let vocab: usize = take(&params, "vocab", 8)?;
        let window: usize = take(&params, "window", 2)?;
        let hidden: usize = take(&params, "hidden", 16)?;
        let seed: u64 = take(&params, "seed", 0)?;
        let mut net = TinyNeuralModel::new_random(vocab, window, hidden, seed);
        let epochs: usize = take(&params, "train_epochs", 0)?;
        if epochs > 0 {
            let lr: f64 = take(&params, "train_lr", 0.1)?;
            let teacher = synthetic_target(&SyntheticSpec::new(vocab, 1, seed, 0.5)?)?;
            let corpus = synthetic_prompts(&teacher, 64, 24, 1.0, seed ^ 0x5eed)?;
            net.train(&corpus, epochs, lr, seed ^ 0x7ea1);
        }
        return Ok(Model::TinyNeural(net));
    }
    let text = std::fs::read_to_string(descriptor)?;
    Model::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_target_is_deterministic_under_seed() {
        let spec = SyntheticSpec::new(6, 1, 9, 0.5).unwrap();
        let a = synthetic_target(&spec).unwrap();
        let b = synthetic_target(&spec).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = synthetic_target(&SyntheticSpec::new(6, 1, 10, 0.5).unwrap()).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn smoothing_at_one_is_identity_and_large_t_flattens() {
        let spec = SyntheticSpec::new(5, 1, 3, 0.4).unwrap();
        let target = synthetic_target(&spec).unwrap();
        let same = smoothed_draft(&target, 1.0).unwrap();
        let p = target.next_distribution(&[2], 1.0).unwrap();
        let q = same.next_distribution(&[2], 1.0).unwrap();
        assert!(p.tv_distance(&q) < 1e-12);
        let flat = smoothed_draft(&target, 50.0).unwrap();
        let f = flat.next_distribution(&[2], 1.0).unwrap();
        assert!(f.tv_distance(&Distribution::uniform(5)) < 0.05);
    }

    #[test]
    fn noise_perturbation_moves_rows_and_zero_epsilon_does_not() {
        let spec = SyntheticSpec::new(5, 1, 3, 0.4).unwrap();
        let target = synthetic_target(&spec).unwrap();
        let unchanged = noise_perturbed(&target, 0.0, 7).unwrap();
        assert_eq!(target.to_text(), unchanged.to_text());
        let moved = noise_perturbed(&target, 0.5, 7).unwrap();
        let p = target.next_distribution(&[1], 1.0).unwrap();
        let q = moved.next_distribution(&[1], 1.0).unwrap();
        assert!(p.tv_distance(&q) > 1e-6);
    }

    #[test]
    fn prompt_corpus_is_seeded_and_sized() {
        let spec = SyntheticSpec::new(4, 1, 1, 1.0).unwrap();
        let model = synthetic_target(&spec).unwrap();
        let a = synthetic_prompts(&model, 10, 5, 1.0, 42).unwrap();
        let b = synthetic_prompts(&model, 10, 5, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| p.len() == 5));
    }

    #[test]
    fn descriptors_resolve_and_reject_unknown_keys() {
        let m = resolve_model("synthetic:vocab=4,order=1,seed=2,smooth=2.0").unwrap();
        assert_eq!(m.vocab_size(), 4);
        let n = resolve_model("neural:vocab=4,window=1,hidden=8,seed=3").unwrap();
        assert_eq!(n.vocab_size(), 4);
        assert!(resolve_model("synthetic:vocab=4,frobnicate=1").is_err());
        assert!(resolve_model("synthetic:vocab").is_err());
    }

    #[test]
    fn file_descriptor_round_trips_through_serialization() {
        let spec = SyntheticSpec::new(4, 1, 5, 0.6).unwrap();
        let model = synthetic_target(&spec).unwrap();
        let dir = std::env::temp_dir().join("mcsd-synth-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.txt");
        std::fs::write(&path, model.to_text()).unwrap();
        let loaded = resolve_model(path.to_str().unwrap()).unwrap();
        assert_eq!(loaded.to_text(), model.to_text());
    }
}
