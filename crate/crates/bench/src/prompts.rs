//! Prompt ingestion: plain token-id lines or JSON-lines records with a
//! `prompt` field, plus seeded subsampling.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parses a prompt corpus. A line starting with `{` is a JSON record with a
/// `prompt` array of token ids; anything else is whitespace-separated token
/// ids. Blank lines are skipped; malformed lines report their line number.
pub fn parse_prompts(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut prompts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let prompt: Vec<u32> = if trimmed.starts_with('{') {
            let record: serde_json::Value = serde_json::from_str(trimmed)
                .with_context(|| format!("line {line_no}: invalid JSON record"))?;
            let arr = record
                .get("prompt")
                .and_then(|v| v.as_array())
                .with_context(|| format!("line {line_no}: record has no `prompt` array"))?;
            arr.iter()
                .map(|v| {
                    v.as_u64()
                        .and_then(|n| u32::try_from(n).ok())
                        .with_context(|| format!("line {line_no}: non-integer token id"))
                })
                .collect::<Result<_>>()?
        } else {
            trimmed
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>()
                        .with_context(|| format!("line {line_no}: bad token id {tok:?}"))
                })
                .collect::<Result<_>>()?
        };
        if prompt.is_empty() {
            bail!("line {line_no}: empty prompt");
        }
        prompts.push(prompt);
    }
    if prompts.is_empty() {
        bail!("prompt corpus is empty");
    }
    Ok(prompts)
}

pub fn ingest_prompts(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read prompt file {}", path.display()))?;
    parse_prompts(&text).with_context(|| format!("in prompt file {}", path.display()))
}

/// Deterministic N-subset preserving corpus order. Returns the subset and
/// whether N was clamped to the corpus size.
pub fn subsample(prompts: Vec<Vec<u32>>, n: usize, seed: u64) -> (Vec<Vec<u32>>, bool) {
    if n >= prompts.len() {
        let clamped = n > prompts.len();
        return (prompts, clamped);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..prompts.len()).collect();
    // Partial Fisher-Yates: the first n slots end up a uniform subset.
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..n].to_vec();
    chosen.sort_unstable();
    (chosen.into_iter().map(|i| prompts[i].clone()).collect(), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_lines_parse_in_order() {
        let prompts = parse_prompts("1 2 3\n4 5\n6\n").unwrap();
        assert_eq!(prompts, vec![vec![1, 2, 3], vec![4, 5], vec![6]]);
    }

    #[test]
    fn json_records_parse_and_mix_with_plain() {
        let prompts = parse_prompts("{\"prompt\": [1, 2]}\n3 4\n").unwrap();
        assert_eq!(prompts, vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = parse_prompts("1 2\nx y\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
        let err = parse_prompts("{\"nope\": 1}\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }

    #[test]
    fn subsample_is_deterministic_and_clamps() {
        let corpus: Vec<Vec<u32>> = (0..100u32).map(|i| vec![i]).collect();
        let (a, clamped_a) = subsample(corpus.clone(), 10, 7);
        let (b, _) = subsample(corpus.clone(), 10, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(!clamped_a);
        // Order preserved.
        let ids: Vec<u32> = a.iter().map(|p| p[0]).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
        let (full, clamped) = subsample(corpus.clone(), 1000, 7);
        assert_eq!(full.len(), 100);
        assert!(clamped);
    }
}
