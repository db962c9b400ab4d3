//! Translation quality metrics: corpus BLEU-4 with add-one smoothing on the
//! higher n-gram orders, exact sequence match, and edit-distance token
//! accuracy.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BLEU_METHOD: &str = "bleu4, add-one smoothing on n>=2 numerator and denominator \
                                (diverges from unsmoothed sacre-BLEU on short toy sentences)";

fn ngram_counts<Tok: std::hash::Hash + Eq + Clone>(
    tokens: &[Tok],
    n: usize,
) -> HashMap<Vec<Tok>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 100]`: clipped n-gram precisions with
/// add-one smoothing for n >= 2, brevity penalty `exp(1 - r/c)` when the
/// candidate corpus is shorter than the reference corpus.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Input("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "BLEU needs matched corpora, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Input("BLEU references must be nonempty".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                let clip = ref_counts.get(&gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
                totals[n - 1] += count;
            }
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (num, den) = if n == 1 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            ((matches[n - 1] + 1) as f64, (totals[n - 1] + 1) as f64)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let precision = (log_sum / 4.0).exp();
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * precision)
}

pub fn exact_match_rate<Tok: PartialEq>(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| c == r)
        .count();
    hits as f64 / candidates.len() as f64
}

fn levenshtein<Tok: PartialEq>(a: &[Tok], b: &[Tok]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level token accuracy: `1 - total_edits / total_reference_tokens`,
/// clamped to `[0, 1]`. With single-character tokens this is character
/// accuracy.
pub fn char_accuracy<Tok: PartialEq>(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> f64 {
    let mut edits = 0usize;
    let mut ref_tokens = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        edits += levenshtein(c, r);
        ref_tokens += r.len();
    }
    if ref_tokens == 0 {
        return 0.0;
    }
    (1.0 - edits as f64 / ref_tokens as f64).clamp(0.0, 1.0)
}
