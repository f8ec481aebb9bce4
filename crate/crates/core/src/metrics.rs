//! Ranking comparison and quality metrics.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ranked list contains a duplicate entry at position {0}")]
    Duplicate(usize),
    #[error("persistence p must be in (0, 1), got {0}")]
    BadPersistence(f64),
    #[error("intra-list similarity needs at least 2 items, got {0}")]
    TooFewItems(usize),
}

fn check_unique<T: Eq + Hash>(list: &[T]) -> Result<(), MetricError> {
    let mut seen = HashSet::with_capacity(list.len());
    for (i, x) in list.iter().enumerate() {
        if !seen.insert(x) {
            return Err(MetricError::Duplicate(i));
        }
    }
    Ok(())
}

/// Extrapolated rank-biased overlap (Webber, Moffat & Zobel 2010) evaluated
/// at the depth of the shorter list:
///
/// ```text
/// RBO_ext = (X_k / k) * p^k + (1 - p) / p * sum_{d=1..k} (X_d / d) * p^d
/// ```
///
/// where `X_d` is the overlap of the two depth-`d` prefixes. Both lists
/// must be duplicate-free. Two empty lists are identical (1.0).
pub fn rbo<T: Eq + Hash>(a: &[T], b: &[T], p: f64) -> Result<f64, MetricError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricError::BadPersistence(p));
    }
    check_unique(a)?;
    check_unique(b)?;
    let k = a.len().min(b.len());
    if k == 0 {
        return Ok(if a.is_empty() && b.is_empty() { 1.0 } else { 0.0 });
    }
    let mut seen_a = HashSet::with_capacity(k);
    let mut seen_b = HashSet::with_capacity(k);
    let mut overlap = 0usize;
    let mut sum = 0.0;
    let mut weight = 1.0;
    for d in 1..=k {
        let (x, y) = (&a[d - 1], &b[d - 1]);
        if x == y {
            overlap += 1;
        } else {
            if seen_b.contains(x) {
                overlap += 1;
            }
            if seen_a.contains(y) {
                overlap += 1;
            }
        }
        seen_a.insert(x);
        seen_b.insert(y);
        weight *= p;
        sum += overlap as f64 / d as f64 * weight;
    }
    let tail = overlap as f64 / k as f64 * weight;
    Ok((tail + (1.0 - p) / p * sum).clamp(0.0, 1.0))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Mean pairwise cosine over all unordered pairs.
pub fn ils(vectors: &[&[f32]]) -> Result<f64, MetricError> {
    let n = vectors.len();
    if n < 2 {
        return Err(MetricError::TooFewItems(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(vectors[i], vectors[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// nDCG with gain `2^rel - 1` and `log2(rank + 1)` discount at `depth`.
/// `None` when the judgments contain no positive grade.
pub fn ndcg_at<T: Eq + Hash>(ranking: &[T], judgments: &HashMap<T, f64>, depth: usize) -> Option<f64> {
    let gain = |rel: f64| 2f64.powf(rel) - 1.0;
    let discount = |i: usize| ((i + 2) as f64).log2();
    let mut ideal: Vec<f64> = judgments.values().copied().filter(|r| *r > 0.0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(depth).enumerate().map(|(i, &r)| gain(r) / discount(i)).sum();
    let dcg: f64 = ranking
        .iter()
        .take(depth)
        .enumerate()
        .map(|(i, id)| gain(judgments.get(id).copied().unwrap_or(0.0)) / discount(i))
        .sum();
    Some(dcg / idcg)
}

pub fn ndcg_at_10<T: Eq + Hash>(ranking: &[T], judgments: &HashMap<T, f64>) -> Option<f64> {
    ndcg_at(ranking, judgments, 10)
}

/// Mean cosine between each result and the normalized mean of the seeds.
pub fn centroid_similarity(results: &[&[f32]], seeds: &[&[f32]]) -> f64 {
    if results.is_empty() || seeds.is_empty() {
        return 0.0;
    }
    let dim = seeds[0].len();
    let mut centroid = vec![0.0f32; dim];
    for s in seeds {
        for (c, x) in centroid.iter_mut().zip(s.iter()) {
            *c += x / seeds.len() as f32;
        }
    }
    results.iter().map(|r| cosine(r, &centroid)).sum::<f64>() / results.len() as f64
}
