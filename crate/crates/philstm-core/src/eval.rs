//! Corpus-level BLEU, held-out perplexity and corpus statistics.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward_batch, BatchItem, PhiModel};

/// Cumulative BLEU-1..4 with per-order clipped precisions and the brevity
/// penalty.
#[derive(Clone, Debug, Serialize)]
pub struct BleuReport {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub brevity_penalty: f64,
    /// Modified n-gram precisions for n = 1..max_n.
    pub precisions: Vec<f64>,
}

impl BleuReport {
    pub fn score(&self, n: usize) -> f64 {
        match n {
            1 => self.b1,
            2 => self.b2,
            3 => self.b3,
            4 => self.b4,
            _ => panic!("BLEU order {} out of range", n),
        }
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level cumulative BLEU against multiple references per candidate.
///
/// Clipped n-gram counts are pooled over the corpus, precisions 1..n are
/// combined by geometric mean with uniform weights, and the brevity penalty
/// is exp(1 - r/c) for c < r with r the closest reference length (ties going
/// to the shorter reference). A zero precision yields a zero cumulative
/// score at that order; no smoothing is applied.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Validation("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates but {} reference groups",
            candidates.len(),
            references.len()
        )));
    }
    assert!((1..=4).contains(&max_n), "BLEU order must be 1..=4");

    let mut clipped = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Validation("candidate with no references".into()));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                (
                    (l as i64 - cand.len() as i64).abs(),
                    l, // tie: shorter reference
                )
            })
            .unwrap();

        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                let allowed = max_ref.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += (*count).min(allowed);
                totals[n - 1] += count;
            }
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                clipped[i] as f64 / totals[i] as f64
            }
        })
        .collect();

    let brevity_penalty = if cand_len < ref_len && cand_len > 0 {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };

    let cumulative = |n: usize| -> f64 {
        if n > max_n {
            return 0.0;
        }
        if precisions[..n].iter().any(|&p| p == 0.0) {
            return 0.0;
        }
        let log_mean = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        brevity_penalty * log_mean.exp()
    };

    Ok(BleuReport {
        b1: cumulative(1),
        b2: cumulative(2),
        b3: cumulative(3),
        b4: cumulative(4),
        brevity_penalty,
        precisions,
    })
}

/// Mean per-sentence log2 perplexity of a dataset under the model.
pub fn eval_perplexity(model: &PhiModel, items: &[BatchItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let fwd = forward_batch(model, items, None, None);
    let sum: f64 = fwd.sentences.iter().map(|s| s.log2_ppl()).sum();
    Ok(sum / items.len() as f64)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CorpusStats {
    pub name: String,
    pub sentences: usize,
    pub vocab_size: usize,
    pub word_count: usize,
    pub avg_caption_length: f64,
}

/// Distinct words, total words and average length per named corpus.
pub fn corpus_stats(corpora: &[(String, Vec<Vec<String>>)]) -> Vec<CorpusStats> {
    corpora
        .iter()
        .map(|(name, sentences)| {
            let word_count: usize = sentences.iter().map(|s| s.len()).sum();
            let mut distinct: Vec<&str> = sentences
                .iter()
                .flat_map(|s| s.iter().map(|w| w.as_str()))
                .collect();
            distinct.sort_unstable();
            distinct.dedup();
            CorpusStats {
                name: name.clone(),
                sentences: sentences.len(),
                vocab_size: distinct.len(),
                word_count,
                avg_caption_length: if sentences.is_empty() {
                    0.0
                } else {
                    word_count as f64 / sentences.len() as f64
                },
            }
        })
        .collect()
}
