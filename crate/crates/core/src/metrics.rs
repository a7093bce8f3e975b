//! Corpus-level BLEU, wall-clock instrumentation, and attention-map
//! divergence.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corpus BLEU with its per-order precisions.
#[derive(Clone, Debug)]
pub struct BleuScore {
    /// In [0, 1]; multiply by 100 for the reporting convention.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// (matches+1)/(total+1) per order; for short synthetic sentences where
    /// higher orders would be 0/0.
    AddOne,
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-wide clipped n-gram matches and total candidate n-grams, one
/// reference per candidate.
pub fn modified_ngram_precision<T: Eq + std::hash::Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    n: usize,
) -> (u64, u64) {
    let mut matches = 0;
    let mut total = 0;
    for (cand, reference) in candidates.iter().zip(references) {
        let ref_counts = ngram_counts(reference, n);
        for (gram, count) in ngram_counts(cand, n) {
            matches += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    (matches, total)
}

/// Geometric mean of p1..p_max_n with the standard brevity penalty, counts
/// summed corpus-wide before the ratios are taken.
pub fn corpus_bleu<T: Eq + std::hash::Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::Contract("corpus_bleu over zero candidates".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Contract(format!("reference {i} is empty")));
    }
    let candidate_len: usize = candidates.iter().map(Vec::len).sum();
    let reference_len: usize = references.iter().map(Vec::len).sum();

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (matches, total) = modified_ngram_precision(candidates, references, n);
        let p = match smoothing {
            Smoothing::None => {
                if total == 0 {
                    0.0
                } else {
                    matches as f64 / total as f64
                }
            }
            Smoothing::AddOne => (matches + 1) as f64 / (total + 1) as f64,
        };
        precisions.push(p);
    }

    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    };
    let score = if candidate_len == 0 || precisions.iter().any(|p| *p <= 0.0) {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}

/// Monotonic wall-clock time of `f`, in seconds.
pub fn time_block<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Accumulates wall-clock seconds per label; labels may nest freely.
#[derive(Default, Debug)]
pub struct Timings {
    acc: BTreeMap<String, f64>,
}

impl Timings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scope<R>(&mut self, label: &str, f: impl FnOnce(&mut Timings) -> R) -> R {
        let start = Instant::now();
        let out = f(self);
        *self.acc.entry(label.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }

    pub fn get(&self, label: &str) -> f64 {
        self.acc.get(label).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.acc.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Jensen-Shannon divergence between two distributions (natural log).
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let kl_to_mid = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                if *x > 0.0 {
                    x * (x / (0.5 * (x + y))).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    };
    0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)
}

/// Mean over query rows of the JSD between two attention matrices of the
/// same shape.
pub fn attention_divergence(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "attention maps must share a shape");
    let cols = a.cols();
    let rows = a.rows();
    let mut total = 0.0;
    for (pa, qa) in a.data().chunks(cols).zip(b.data().chunks(cols)) {
        total += jensen_shannon(pa, qa);
    }
    total / rows as f64
}
