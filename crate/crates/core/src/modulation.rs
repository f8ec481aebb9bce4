//! Score modulations and candidate selection.
//!
//! A pipeline run always executes in this order, whatever order the caller
//! listed the modulations in:
//!
//! 1. centroid: shift the query toward the mean of example embeddings
//! 2. base similarity: `scores = M @ q`
//! 3. trajectory: `scores = 0.5 * scores + 0.5 * (M @ (to - from))`
//! 4. decay: `scores *= 1 / (1 + age_days / half_life)`
//! 5. suppress: `scores -= w * (M @ s)` for each suppression direction
//! 6. selection: plain top-K, or MMR when `diverse` is set
//!
//! Scores are never renormalized between steps, so they are only comparable
//! within a single configuration.
//!
//! Every step is also exposed as a free function for callers that want to
//! drive the score array directly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::kernel::{self, dot, project};
use crate::store::{CandidateView, EmbeddingStore};

pub const DEFAULT_POOL: usize = 500;
pub const DEFAULT_LAMBDA: f32 = 0.7;
pub const DEFAULT_CENTROID_ALPHA: f32 = 0.5;
pub const DEFAULT_SUPPRESS_WEIGHT: f32 = 0.5;
pub const DEFAULT_HALF_LIFE_DAYS: f32 = 30.0;
pub const TRAJECTORY_BLEND: f32 = 0.5;
/// MMR considers this many times the requested output size.
pub const MMR_OVERSAMPLE: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("centroid example id {0:?} is not in the embedding store")]
    UnknownExample(String),
    #[error("query vector has {actual} dimensions, store has {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid modulation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub ids: Vec<String>,
    pub alpha: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub half_life_days: f32,
}

impl Default for Decay {
    fn default() -> Self {
        Self {
            half_life_days: DEFAULT_HALF_LIFE_DAYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppress {
    pub text: String,
    pub weight: f32,
}

impl Suppress {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            weight: DEFAULT_SUPPRESS_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diverse {
    pub lambda: f32,
}

impl Default for Diverse {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub centroid: Option<Centroid>,
    pub trajectory: Option<Trajectory>,
    pub decay: Option<Decay>,
    pub suppress: Vec<Suppress>,
    pub diverse: Option<Diverse>,
    pub pool: usize,
}

impl Default for ModulationSpec {
    fn default() -> Self {
        Self {
            centroid: None,
            trajectory: None,
            decay: None,
            suppress: Vec::new(),
            diverse: None,
            pool: DEFAULT_POOL,
        }
    }
}

impl ModulationSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        if self.pool == 0 {
            return bad("pool must be positive".into());
        }
        if let Some(c) = &self.centroid {
            if c.ids.is_empty() {
                return bad("centroid needs at least one example id".into());
            }
            if !(0.0..=1.0).contains(&c.alpha) {
                return bad(format!("centroid alpha {} outside [0, 1]", c.alpha));
            }
        }
        if let Some(d) = &self.decay {
            if !(d.half_life_days.is_finite() && d.half_life_days > 0.0) {
                return bad(format!("decay half-life {} must be positive", d.half_life_days));
            }
        }
        if let Some(d) = &self.diverse {
            if !(0.0..=1.0).contains(&d.lambda) {
                return bad(format!("diverse lambda {} outside [0, 1]", d.lambda));
            }
        }
        for s in &self.suppress {
            if !s.weight.is_finite() {
                return bad(format!("suppress weight {} is not finite", s.weight));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub score: f32,
}

/// `normalize(alpha * q + (1 - alpha) * mean(examples))`.
pub fn apply_centroid(q: &[f32], examples: &[&[f32]], alpha: f32) -> Vec<f32> {
    assert!(!examples.is_empty(), "centroid needs examples");
    let n = examples.len() as f32;
    let mut out: Vec<f32> = q.iter().map(|x| alpha * x).collect();
    for e in examples {
        for (o, x) in out.iter_mut().zip(e.iter()) {
            *o += (1.0 - alpha) * x / n;
        }
    }
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn base_scores(view: &CandidateView<'_>, q: &[f32]) -> Result<Vec<f32>, PipelineError> {
    if q.len() != view.dim() {
        return Err(PipelineError::DimMismatch {
            expected: view.dim(),
            actual: q.len(),
        });
    }
    Ok(project(view, q))
}

/// Blends in similarity to the (unnormalized) direction `to - from`.
pub fn apply_trajectory(scores: &mut [f32], view: &CandidateView<'_>, from: &[f32], to: &[f32]) {
    let direction: Vec<f32> = to.iter().zip(from).map(|(b, a)| b - a).collect();
    let directional = project(view, &direction);
    for (s, d) in scores.iter_mut().zip(directional) {
        *s = TRAJECTORY_BLEND * *s + (1.0 - TRAJECTORY_BLEND) * d;
    }
}

pub fn decay_factor(age_days: f32, half_life_days: f32) -> f32 {
    1.0 / (1.0 + age_days / half_life_days)
}

pub fn apply_decay(scores: &mut [f32], ages_days: &[f32], half_life_days: f32) {
    for (s, &age) in scores.iter_mut().zip(ages_days) {
        *s *= decay_factor(age, half_life_days);
    }
}

pub fn apply_suppress(scores: &mut [f32], view: &CandidateView<'_>, direction: &[f32], weight: f32) {
    let penalty = project(view, direction);
    for (s, p) in scores.iter_mut().zip(penalty) {
        *s -= weight * p;
    }
}

/// Orders by score descending, then id ascending.
fn rank_order(view: &CandidateView<'_>, scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then_with(|| view.id(a).cmp(view.id(b)))
}

/// Indices of the `k` best candidates, best first.
fn top_indices(view: &CandidateView<'_>, scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(view, scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(view, scores, a, b));
    idx
}

pub fn top_k(view: &CandidateView<'_>, scores: &[f32], k: usize) -> Vec<ScoredCandidate> {
    top_indices(view, scores, k)
        .into_iter()
        .map(|i| ScoredCandidate {
            id: view.id(i).to_string(),
            score: scores[i],
        })
        .collect()
}

/// Maximal marginal relevance over the top `oversample * k` candidates.
///
/// Each step picks the candidate maximizing
/// `lambda * rel - (1 - lambda) * max_sim`, where `max_sim` is the largest
/// embedding cosine to anything already selected. The first pick is the
/// highest `rel`. Reported scores are the relevance scores; the list order
/// carries the diversification.
pub fn mmr_select(
    view: &CandidateView<'_>,
    scores: &[f32],
    k: usize,
    lambda: f32,
    oversample: usize,
) -> Vec<ScoredCandidate> {
    let pool = top_indices(view, scores, k.saturating_mul(oversample.max(1)));
    let k = k.min(pool.len());
    if k == 0 {
        return Vec::new();
    }
    let dim = view.dim();
    // Pack pool rows contiguously for the pairwise similarity pass.
    let mut rows = Vec::with_capacity(pool.len() * dim);
    for &i in &pool {
        rows.extend_from_slice(view.row(i));
    }
    let rel: Vec<f32> = pool.iter().map(|&i| scores[i]).collect();
    let mut out = Vec::with_capacity(k);

    // Pool is already in (rel desc, id asc) order, so position 0 is the first pick.
    let objective = |j: usize, m: f32| lambda * rel[j] - (1.0 - lambda) * m;
    let row = |j: usize| &rows[j * dim..(j + 1) * dim];
    let mut selected = vec![0usize];
    // Selected rows again, contiguous in selection order, so catch-up
    // passes stream through them.
    let mut selected_rows = Vec::with_capacity(k * dim);
    selected_rows.extend_from_slice(row(0));
    out.push(ScoredCandidate {
        id: view.id(pool[0]).to_string(),
        score: rel[0],
    });
    if k == 1 {
        return out;
    }
    let mut max_sim: Vec<f32> = (0..pool.len()).map(|j| dot(row(j), row(0))).collect();
    // Lazy greedy: max_sim only grows as the selection grows, so a cached
    // objective is an upper bound on the current one. An entry whose cache
    // covers the whole selection and still tops the heap is the exact
    // argmax, with ties going to the earlier pool position as in the plain
    // scan.
    let mut checked = vec![1usize; pool.len()];
    let mut sims = Vec::with_capacity(MMR_CATCHUP_BLOCK);
    let mut heap: BinaryHeap<u64> = (1..pool.len())
        .map(|j| heap_key(objective(j, max_sim[j]), j))
        .collect();
    while out.len() < k {
        let top = heap.pop().expect("pool has unselected candidates");
        let j = key_position(top);
        let mut key = top;
        // Catch up one selected item at a time, stopping as soon as the
        // entry no longer beats the runner-up; the rest can wait.
        while checked[j] < selected.len() {
            let end = (checked[j] + MMR_CATCHUP_BLOCK).min(selected.len());
            let before = max_sim[j];
            kernel::dot_rows(row(j), &selected_rows[checked[j] * dim..end * dim], dim, &mut sims);
            for &sim in &sims {
                if sim > max_sim[j] {
                    max_sim[j] = sim;
                }
            }
            checked[j] = end;
            if max_sim[j] > before {
                key = heap_key(objective(j, max_sim[j]), j);
                if heap.peek().is_some_and(|&next| key < next) {
                    break;
                }
            }
        }
        if checked[j] < selected.len() || heap.peek().is_some_and(|&next| key < next) {
            heap.push(key);
            continue;
        }
        selected.push(j);
        selected_rows.extend_from_slice(row(j));
        out.push(ScoredCandidate {
            id: view.id(pool[j]).to_string(),
            score: rel[j],
        });
    }
    out
}

/// Selected items compared per catch-up step; independent dots in a block
/// overlap in the pipeline.
const MMR_CATCHUP_BLOCK: usize = 16;

/// Heap key ordering like `(objective, Reverse(position))`: the high half
/// holds the objective's bits remapped so unsigned order follows
/// `f32::total_cmp`, the low half the complemented pool position.
fn heap_key(objective: f32, position: usize) -> u64 {
    debug_assert!(position <= u32::MAX as usize);
    let bits = objective.to_bits();
    let ordered = if bits >> 31 == 1 { !bits } else { bits | 1 << 31 };
    (u64::from(ordered) << 32) | u64::from(!(position as u32))
}

fn key_position(key: u64) -> usize {
    !(key as u32) as usize
}

/// Reference MMR that rescans the whole pool every step.
#[cfg(test)]
fn mmr_select_eager(
    view: &CandidateView<'_>,
    scores: &[f32],
    k: usize,
    lambda: f32,
    oversample: usize,
) -> Vec<ScoredCandidate> {
    let pool = top_indices(view, scores, k.saturating_mul(oversample.max(1)));
    let k = k.min(pool.len());
    let dim = view.dim();
    let mut rows = Vec::with_capacity(pool.len() * dim);
    for &i in &pool {
        rows.extend_from_slice(view.row(i));
    }
    let rel: Vec<f32> = pool.iter().map(|&i| scores[i]).collect();
    let mut max_sim = vec![f32::NEG_INFINITY; pool.len()];
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(k);
    let mut pick = 0;
    for step in 0..k {
        if step > 0 {
            let mut best: Option<(usize, f32)> = None;
            for j in 0..pool.len() {
                if taken[j] {
                    continue;
                }
                let objective = lambda * rel[j] - (1.0 - lambda) * max_sim[j];
                if best.map_or(true, |(_, b)| objective > b) {
                    best = Some((j, objective));
                }
            }
            pick = best.unwrap().0;
        }
        taken[pick] = true;
        out.push(ScoredCandidate {
            id: view.id(pool[pick]).to_string(),
            score: rel[pick],
        });
        update_max_sim(&rows, dim, pick, &taken, &mut max_sim);
    }
    out
}

#[cfg(test)]
fn update_max_sim(rows: &[f32], dim: usize, pick: usize, taken: &[bool], max_sim: &mut [f32]) {
    let chosen = &rows[pick * dim..(pick + 1) * dim];
    for (j, m) in max_sim.iter_mut().enumerate() {
        if !taken[j] {
            let sim = dot(&rows[j * dim..(j + 1) * dim], chosen);
            if sim > *m {
                *m = sim;
            }
        }
    }
}

/// Resolved query-side vectors for one pipeline run.
struct QueryVectors {
    query: Vec<f32>,
    trajectory: Option<(Vec<f32>, Vec<f32>)>,
    suppress: Vec<(Vec<f32>, f32)>,
}

fn resolve_vectors(
    spec: &ModulationSpec,
    query_text: Option<&str>,
    store: &EmbeddingStore,
    embedder: &dyn Embedder,
) -> Result<QueryVectors, PipelineError> {
    let text_query = match query_text {
        Some(t) if !t.trim().is_empty() => Some(embedder.embed_for("similar", t)?),
        _ => None,
    };
    let query = match (&spec.centroid, text_query) {
        (Some(c), q) => {
            let examples = c
                .ids
                .iter()
                .map(|id| store.vector(id).ok_or_else(|| PipelineError::UnknownExample(id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            match q {
                Some(q) => apply_centroid(&q, &examples, c.alpha),
                // No text direction: the examples' mean is the query.
                None => apply_centroid(&vec![0.0; store.dim()], &examples, 0.0),
            }
        }
        (None, Some(q)) => q,
        (None, None) => {
            return Err(PipelineError::InvalidSpec(
                "a query needs similar text or centroid examples".into(),
            ))
        }
    };
    if query.len() != store.dim() {
        return Err(PipelineError::DimMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    let trajectory = match &spec.trajectory {
        Some(t) => Some((embedder.embed_for("from", &t.from)?, embedder.embed_for("to", &t.to)?)),
        None => None,
    };
    let suppress = spec
        .suppress
        .iter()
        .map(|s| Ok((embedder.embed_for("suppress", &s.text)?, s.weight)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(QueryVectors {
        query,
        trajectory,
        suppress,
    })
}

/// Runs the fixed-order pipeline and returns at most `spec.pool` candidates.
pub fn run_pipeline(
    spec: &ModulationSpec,
    query_text: Option<&str>,
    view: &CandidateView<'_>,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredCandidate>, PipelineError> {
    spec.validate()?;
    let vectors = resolve_vectors(spec, query_text, view.store(), embedder)?;
    if view.is_empty() {
        return Ok(Vec::new());
    }
    let scores = modulated_scores(spec, &vectors, view)?;
    Ok(match spec.diverse {
        Some(d) => mmr_select(view, &scores, spec.pool, d.lambda, MMR_OVERSAMPLE),
        None => top_k(view, &scores, spec.pool),
    })
}

/// Full score array after every score-shaping step (no selection).
pub fn score_candidates(
    spec: &ModulationSpec,
    query_text: Option<&str>,
    view: &CandidateView<'_>,
    embedder: &dyn Embedder,
) -> Result<Vec<f32>, PipelineError> {
    spec.validate()?;
    let vectors = resolve_vectors(spec, query_text, view.store(), embedder)?;
    modulated_scores(spec, &vectors, view)
}

/// All score-shaping steps in one pass over the candidate rows. Arithmetic
/// matches applying [`base_scores`], [`apply_trajectory`], [`apply_decay`]
/// and [`apply_suppress`] in turn.
fn modulated_scores(
    spec: &ModulationSpec,
    vectors: &QueryVectors,
    view: &CandidateView<'_>,
) -> Result<Vec<f32>, PipelineError> {
    if vectors.query.len() != view.dim() {
        return Err(PipelineError::DimMismatch {
            expected: view.dim(),
            actual: vectors.query.len(),
        });
    }
    let direction: Option<Vec<f32>> = vectors
        .trajectory
        .as_ref()
        .map(|(from, to)| to.iter().zip(from).map(|(b, a)| b - a).collect());
    let mut projections: Vec<&[f32]> = vec![&vectors.query];
    if let Some(d) = &direction {
        projections.push(d);
    }
    let first_suppress = projections.len();
    projections.extend(vectors.suppress.iter().map(|(v, _)| v.as_slice()));

    let m = projections.len();
    let dots = kernel::project_many(view, &projections);
    let ages = view.ages_days();
    let scores = dots
        .chunks_exact(m)
        .enumerate()
        .map(|(i, cells)| {
            let mut s = cells[0];
            if direction.is_some() {
                s = TRAJECTORY_BLEND * s + (1.0 - TRAJECTORY_BLEND) * cells[1];
            }
            if let Some(d) = spec.decay {
                s *= decay_factor(ages[i], d.half_life_days);
            }
            for (p, (_, weight)) in cells[first_suppress..].iter().zip(&vectors.suppress) {
                s -= weight * p;
            }
            s
        })
        .collect();
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashProjectionEmbedder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n).map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (format!("c{i:04}"), v)
        });
        EmbeddingStore::from_rows(dim, rows).unwrap().0
    }

    fn dot64(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn lazy_mmr_matches_eager_scan() {
        for seed in 0..20 {
            let store = random_store(400, 24, 100 + seed);
            let view = store.full_view(0.0);
            let s = base_scores(&view, store.row(seed as usize)).unwrap();
            for (k, lambda) in [(1, 0.7), (10, 0.7), (50, 0.5), (133, 0.9), (400, 0.0)] {
                assert_eq!(
                    mmr_select(&view, &s, k, lambda, 3),
                    mmr_select_eager(&view, &s, k, lambda, 3),
                    "seed {seed} k {k} lambda {lambda}"
                );
            }
        }
    }

    #[test]
    fn heap_key_orders_like_objective_then_position() {
        let values = [f32::NEG_INFINITY, -1.5, -0.0, 0.0, 1e-30, 0.25, 0.7, f32::INFINITY];
        for &a in &values {
            for &b in &values {
                for (pa, pb) in [(3, 7), (7, 3), (5, 5)] {
                    let expected = a.total_cmp(&b).then(pb.cmp(&pa));
                    assert_eq!(heap_key(a, pa).cmp(&heap_key(b, pb)), expected, "{a} {pa} vs {b} {pb}");
                }
            }
        }
        assert_eq!(key_position(heap_key(0.3, 1499)), 1499);
    }

    #[test]
    fn fused_scoring_matches_staged_steps() {
        let store = random_store(300, 16, 9);
        let stamps: Vec<(String, f64)> = store.ids().iter().enumerate().map(|(i, id)| (id.clone(), i as f64 * 3600.0)).collect();
        let store = store.with_timestamps(stamps.iter().map(|(id, t)| (id.as_str(), *t)));
        let e = HashProjectionEmbedder::new(16, 2);
        let spec = ModulationSpec {
            trajectory: Some(Trajectory {
                from: "old way".into(),
                to: "new way".into(),
            }),
            decay: Some(Decay { half_life_days: 7.0 }),
            suppress: vec![Suppress::new("noise"), Suppress::new("chatter")],
            ..Default::default()
        };
        let view = store.full_view(400.0 * 3600.0);
        let fused = score_candidates(&spec, Some("query words"), &view, &e).unwrap();

        let mut staged = base_scores(&view, &e.embed("query words").unwrap()).unwrap();
        apply_trajectory(&mut staged, &view, &e.embed("old way").unwrap(), &e.embed("new way").unwrap());
        apply_decay(&mut staged, view.ages_days(), 7.0);
        apply_suppress(&mut staged, &view, &e.embed("noise").unwrap(), 0.5);
        apply_suppress(&mut staged, &view, &e.embed("chatter").unwrap(), 0.5);
        assert_eq!(fused, staged);
    }

    #[test]
    fn centroid_alpha_one_is_identity() {
        let q = [0.6, 0.8];
        let e = [0.0f32, 1.0];
        assert_eq!(apply_centroid(&q, &[&e], 1.0), vec![0.6, 0.8]);
    }

    #[test]
    fn centroid_alpha_zero_is_the_example() {
        let q = [1.0, 0.0];
        let e = [0.6f32, 0.8];
        let out = apply_centroid(&q, &[&e], 0.0);
        assert!((out[0] - 0.6).abs() < 1e-6 && (out[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn centroid_symmetric_blend() {
        let out = apply_centroid(&[1.0, 0.0], &[&[0.0, 1.0]], 0.5);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-6 && (out[1] - h).abs() < 1e-6);
    }

    #[test]
    fn base_scores_self_and_orthogonal() {
        let (store, _) =
            EmbeddingStore::from_rows(2, [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let view = store.full_view(0.0);
        let s = base_scores(&view, &[1.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s[1].abs() < 1e-6);
        assert!(matches!(
            base_scores(&view, &[1.0]),
            Err(PipelineError::DimMismatch { .. })
        ));
    }

    #[test]
    fn base_scores_match_loop_oracle() {
        let store = random_store(50, 8, 11);
        let view = store.full_view(0.0);
        let q = store.row(7).to_vec();
        let s = base_scores(&view, &q).unwrap();
        for i in 0..50 {
            let mut oracle = 0.0f64;
            for d in 0..8 {
                oracle += f64::from(store.row(i)[d]) * f64::from(q[d]);
            }
            assert!((f64::from(s[i]) - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn trajectory_with_equal_endpoints_halves() {
        let store = random_store(20, 8, 2);
        let view = store.full_view(0.0);
        let q = store.row(0).to_vec();
        let mut s = base_scores(&view, &q).unwrap();
        let before = s.clone();
        apply_trajectory(&mut s, &view, &q, &q);
        for (a, b) in s.iter().zip(before) {
            assert!((a - 0.5 * b).abs() < 1e-7);
        }
    }

    #[test]
    fn trajectory_matches_formula() {
        let store = random_store(20, 8, 3);
        let view = store.full_view(0.0);
        let q = store.row(1).to_vec();
        let (from, to) = (store.row(2).to_vec(), store.row(3).to_vec());
        let mut s = base_scores(&view, &q).unwrap();
        apply_trajectory(&mut s, &view, &from, &to);
        for i in 0..20 {
            let row = store.row(i);
            let dir: Vec<f32> = to.iter().zip(&from).map(|(b, a)| b - a).collect();
            let oracle = 0.5 * dot64(row, &q) + 0.5 * dot64(row, &dir);
            assert!((f64::from(s[i]) - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_factors() {
        assert_eq!(decay_factor(0.0, 7.0), 1.0);
        assert_eq!(decay_factor(7.0, 7.0), 0.5);
        assert_eq!(decay_factor(21.0, 7.0), 0.25);
        let mut s = vec![0.8, 0.8];
        apply_decay(&mut s, &[0.0, 30.0], 30.0);
        assert_eq!(s, vec![0.8, 0.4]);
    }

    #[test]
    fn suppress_exact_drop_and_orthogonal_noop() {
        let (store, _) =
            EmbeddingStore::from_rows(2, [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let view = store.full_view(0.0);
        let mut s = vec![0.9, 0.3];
        apply_suppress(&mut s, &view, &[1.0, 0.0], 0.5);
        assert!((s[0] - 0.4).abs() < 1e-7);
        assert_eq!(s[1], 0.3);
    }

    #[test]
    fn suppress_order_commutes() {
        let store = random_store(30, 8, 4);
        let view = store.full_view(0.0);
        let base = base_scores(&view, store.row(0)).unwrap();
        let (s1, s2) = (store.row(5), store.row(9));
        let mut a = base.clone();
        apply_suppress(&mut a, &view, s1, 0.5);
        apply_suppress(&mut a, &view, s2, 0.5);
        let mut b = base;
        apply_suppress(&mut b, &view, s2, 0.5);
        apply_suppress(&mut b, &view, s1, 0.5);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let (store, _) = EmbeddingStore::from_rows(
            1,
            [("b", vec![1.0]), ("a", vec![1.0]), ("c", vec![1.0])],
        )
        .unwrap();
        let view = store.full_view(0.0);
        let got = top_k(&view, &[0.5, 0.5, 0.9], 3);
        let ids: Vec<_> = got.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn mmr_lambda_one_is_top_k() {
        let store = random_store(200, 16, 5);
        let view = store.full_view(0.0);
        let s = base_scores(&view, store.row(3)).unwrap();
        assert_eq!(mmr_select(&view, &s, 10, 1.0, 3), top_k(&view, &s, 10));
    }

    #[test]
    fn mmr_skips_duplicate_of_first_pick() {
        let (store, _) = EmbeddingStore::from_rows(
            2,
            [("1", vec![1.0, 0.0]), ("2", vec![1.0, 0.0]), ("3", vec![0.6, 0.8])],
        )
        .unwrap();
        let view = store.full_view(0.0);
        let got = mmr_select(&view, &[0.9, 0.85, 0.7], 2, 0.7, 3);
        let ids: Vec<_> = got.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
        // Relevance score is what gets reported.
        assert_eq!(got[1].score, 0.7);
    }

    #[test]
    fn mmr_exhausts_small_pool() {
        let store = random_store(4, 4, 6);
        let view = store.full_view(0.0);
        assert_eq!(mmr_select(&view, &[0.1, 0.2, 0.3, 0.4], 10, 0.7, 3).len(), 4);
    }

    /// Orderings where every step attains the MMR objective maximum,
    /// found by enumerating all k-permutations.
    fn brute_force_mmr(rel: &[f64], rows: &[Vec<f32>], k: usize, lambda: f64) -> Vec<Vec<usize>> {
        fn rec(
            prefix: &mut Vec<usize>,
            rel: &[f64],
            rows: &[Vec<f32>],
            k: usize,
            lambda: f64,
            out: &mut Vec<Vec<usize>>,
        ) {
            if prefix.len() == k {
                out.push(prefix.clone());
                return;
            }
            let objective = |c: usize, prefix: &[usize]| {
                if prefix.is_empty() {
                    rel[c]
                } else {
                    let ms = prefix
                        .iter()
                        .map(|&s| dot64(&rows[c], &rows[s]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    lambda * rel[c] - (1.0 - lambda) * ms
                }
            };
            let remaining: Vec<usize> = (0..rel.len()).filter(|c| !prefix.contains(c)).collect();
            let best = remaining
                .iter()
                .map(|&c| objective(c, prefix))
                .fold(f64::NEG_INFINITY, f64::max);
            for c in remaining {
                if objective(c, prefix) >= best - 1e-5 {
                    prefix.push(c);
                    rec(prefix, rel, rows, k, lambda, out);
                    prefix.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), rel, rows, k, lambda, &mut out);
        out
    }

    #[test]
    fn mmr_matches_brute_force_on_random_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..300 {
            let store = random_store(6, 4, 1000 + trial);
            let view = store.full_view(0.0);
            let rel: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = rng.gen_range(1..=6);
            let lambda = rng.gen_range(0.0..1.0f32);
            let got: Vec<usize> = mmr_select(&view, &rel, k, lambda, 3)
                .iter()
                .map(|c| store.index_of(&c.id).unwrap())
                .collect();
            let rows: Vec<Vec<f32>> = (0..6).map(|i| store.row(i).to_vec()).collect();
            let rel64: Vec<f64> = rel.iter().map(|&x| f64::from(x)).collect();
            let valid = brute_force_mmr(&rel64, &rows, k.min(6), f64::from(lambda));
            assert!(valid.contains(&got), "trial {trial}: {got:?} not in {valid:?}");
        }
    }

    #[test]
    fn empty_view_gives_empty_result() {
        let store = random_store(10, 8, 8);
        let e = HashProjectionEmbedder::new(8, 0);
        let view = store.subset(Vec::<String>::new(), 0.0);
        let out = run_pipeline(&ModulationSpec::default(), Some("x"), &view, &e).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unknown_centroid_id_is_named() {
        let store = random_store(10, 8, 9);
        let e = HashProjectionEmbedder::new(8, 0);
        let spec = ModulationSpec {
            centroid: Some(Centroid {
                ids: vec!["c0001".into(), "missing".into()],
                alpha: 0.5,
            }),
            ..Default::default()
        };
        let err = run_pipeline(&spec, Some("x"), &store.full_view(0.0), &e).unwrap_err();
        assert!(matches!(err, PipelineError::UnknownExample(id) if id == "missing"));
    }

    #[test]
    fn plain_spec_is_top_k_cosine() {
        let store = random_store(100, 8, 10);
        let e = HashProjectionEmbedder::new(8, 0);
        let view = store.full_view(0.0);
        let spec = ModulationSpec {
            pool: 7,
            ..Default::default()
        };
        let got = run_pipeline(&spec, Some("hello world"), &view, &e).unwrap();
        let q = e.embed("hello world").unwrap();
        let expected = top_k(&view, &base_scores(&view, &q).unwrap(), 7);
        assert_eq!(got, expected);
    }
}
