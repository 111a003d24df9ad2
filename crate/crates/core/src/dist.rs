//! Probability distributions over a token vocabulary.
//!
//! `Distribution` is the currency of every sampling and verification step:
//! draft proposals, target verification, residual resampling, and the exact
//! enumeration oracle all trade in these vectors.

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over a dense token vocabulary (ids `0..len`).
///
/// Invariants: every entry is non-negative and finite, and the entries sum
/// to one within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 1 {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "probs[{i}] = {p} is negative or non-finite"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Builds from non-negative weights, normalizing to sum one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {sum}, cannot normalize"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    /// Point mass on `token`.
    pub fn one_hot(len: usize, token: u32) -> Self {
        let mut probs = vec![0.0; len];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.probs[token as usize]
    }

    /// Index of the largest probability, ties broken by lowest token id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Draws one token; deterministic given the rng state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
        // Rounding can leave acc fractionally below 1; fall back to the last
        // token with nonzero mass.
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("distribution has positive mass") as u32
    }

    /// Applies sampling temperature to the probability vector itself:
    /// `t = 0` collapses to the argmax one-hot, `t > 0` rescales as
    /// `p_i^(1/t)` renormalized (equivalent to softmax of `ln(p)/t`).
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be a finite non-negative real, got {temperature}"
            )));
        }
        if temperature == 0.0 {
            return Ok(Self::one_hot(self.len(), self.argmax()));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let max = self.probs.iter().cloned().fold(f64::MIN, f64::max);
        let weights: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { ((p.ln() - max.ln()) / temperature).exp() } else { 0.0 })
            .collect();
        Self::from_weights(weights)
    }

    /// Zeroes `token` and renormalizes. `None` when all mass sat on `token`.
    pub fn excluding(&self, token: u32) -> Option<Self> {
        let mut probs = self.probs.clone();
        probs[token as usize] = 0.0;
        Self::from_weights(probs).ok()
    }

    /// Number of tokens with strictly positive probability.
    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Total variation distance: half the L1 distance.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// The `k` largest probabilities, sorted descending.
    pub fn top_k(&self, k: usize) -> Vec<f64> {
        let mut sorted = self.probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sorted.truncate(k);
        sorted
    }
}

/// Converts raw logits to a `Distribution` under sampling temperature.
///
/// `t = 0` yields the argmax one-hot (ties broken by lowest token id);
/// `t > 0` yields `softmax(logits / t)`. Entries of `-inf` mark excluded
/// tokens and map to probability zero; `NaN` or `+inf` is rejected.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Distribution> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be a finite non-negative real, got {temperature}"
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l.is_nan() || l == f64::INFINITY {
            return Err(Error::InvalidArgument(format!("logit {l} is not admissible")));
        }
        max = max.max(l);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("all logits are -inf".into()));
    }
    if temperature == 0.0 {
        let argmax = logits.iter().position(|&l| l == max).unwrap();
        return Ok(Distribution::one_hot(logits.len(), argmax as u32));
    }
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    Distribution::from_weights(weights)
}

/// Result of computing the rejection-resampling residual `norm(max(0, p − q))`.
#[derive(Debug, Clone, PartialEq)]
pub enum Residual {
    /// The normalized positive part of `p − q`.
    Remainder(Distribution),
    /// `p` and `q` carry identical mass everywhere: zero residual. The caller
    /// falls back to sampling from `p` itself.
    Zero,
}

/// The replacement distribution after a rejection: `norm(max(0, p − q))`.
///
/// When `p == q` the residual has no mass; `Residual::Zero` tells the caller
/// to sample from `p` directly instead.
pub fn residual_distribution(p: &Distribution, q: &Distribution) -> Residual {
    assert_eq!(p.len(), q.len(), "dimension mismatch");
    let weights: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| (pi - qi).max(0.0))
        .collect();
    match Distribution::from_weights(weights) {
        Ok(d) => Residual::Remainder(d),
        Err(_) => Residual::Zero,
    }
}

/// `residual_distribution` with the documented fallback applied: returns `p`
/// itself when the residual is empty.
pub fn residual_or_target(p: &Distribution, q: &Distribution) -> Distribution {
    match residual_distribution(p, q) {
        Residual::Remainder(d) => d,
        Residual::Zero => p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(probs: &[f64]) -> Distribution {
        Distribution::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn rejects_negative_and_unnormalized() {
        assert!(Distribution::new(vec![0.5, -0.1, 0.6]).is_err());
        assert!(Distribution::new(vec![0.5, 0.4]).is_err());
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn temperature_uniform_logits_stay_uniform() {
        let d = apply_temperature(&[1.0, 1.0, 1.0], 0.7).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_zero_is_argmax_one_hot() {
        let d = apply_temperature(&[2.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0, 0.0]);
        // Tie broken by lowest token id.
        let tie = apply_temperature(&[3.0, 3.0, 1.0], 0.0).unwrap();
        assert_eq!(tie.argmax(), 0);
        assert_eq!(tie.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn temperature_one_softmax_hand_check() {
        // softmax([ln 2, 0, 0]) = [2, 1, 1] / 4
        let d = apply_temperature(&[2.0f64.ln(), 0.0, 0.0], 1.0).unwrap();
        assert!((d.prob(0) - 0.5).abs() < 1e-12);
        assert!((d.prob(1) - 0.25).abs() < 1e-12);
        assert!((d.prob(2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn negative_temperature_is_an_error() {
        assert!(apply_temperature(&[1.0, 2.0], -0.5).is_err());
        assert!(dist(&[0.5, 0.5]).with_temperature(-1.0).is_err());
    }

    #[test]
    fn sample_one_hot_is_constant() {
        let d = dist(&[0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), 1);
        }
    }

    #[test]
    fn sample_frequency_matches_mass() {
        let d = dist(&[0.5, 0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let hits = (0..n).filter(|_| d.sample(&mut rng) == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn sample_is_reproducible_under_seed() {
        let d = Distribution::uniform(4);
        let first = d.sample(&mut ChaCha8Rng::seed_from_u64(9));
        for _ in 0..10 {
            assert_eq!(d.sample(&mut ChaCha8Rng::seed_from_u64(9)), first);
        }
    }

    #[test]
    fn residual_hand_cases() {
        // max(0, p-q) = [0.4, 0] -> [1, 0]
        let r = residual_distribution(&dist(&[0.6, 0.4]), &dist(&[0.2, 0.8]));
        assert_eq!(r, Residual::Remainder(dist(&[1.0, 0.0])));

        let p = dist(&[0.5, 0.5]);
        assert_eq!(residual_distribution(&p, &p), Residual::Zero);
        assert_eq!(residual_or_target(&p, &p), p);

        let r = residual_distribution(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]));
        assert_eq!(r, Residual::Remainder(dist(&[1.0, 0.0])));
    }

    #[test]
    fn top_k_and_entropy() {
        let d = dist(&[0.2, 0.5, 0.3]);
        assert_eq!(d.top_k(2), vec![0.5, 0.3]);
        assert!((Distribution::uniform(4).entropy() - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(Distribution::one_hot(3, 1).entropy(), 0.0);
    }
}
