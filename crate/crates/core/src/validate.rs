//! Validation suites.
//!
//! The algebraic suite recomputes every modulation formula independently in
//! `f64`, straight from the raw rows and text embeddings, and compares the
//! result against the pipeline's scores candidate by candidate.
//!
//! The behavioral suite checks that each modulation moves rankings in its
//! intended direction on clustered synthetic corpora.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::{Embedder, HashProjectionEmbedder};
use crate::metrics::{centroid_similarity, ils, ndcg_at_10, rbo};
use crate::modulation::{
    run_pipeline, Centroid, Decay, Diverse, ModulationSpec, ScoredCandidate, Suppress, Trajectory,
    DEFAULT_CENTROID_ALPHA, DEFAULT_SUPPRESS_WEIGHT,
};
use crate::store::EmbeddingStore;
use crate::synth::{ClusterSpec, SyntheticCorpus};

pub const ALGEBRAIC_TOLERANCE: f64 = 1e-3;
pub const RBO_PERSISTENCE: f64 = 0.9;

const SECONDS_PER_DAY: f64 = 86_400.0;

/// A corpus ready for scoring.
pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub store: EmbeddingStore,
    pub embedder: HashProjectionEmbedder,
}

impl Fixture {
    pub fn clustered(n: usize, spec: &ClusterSpec, dim: usize, seed: u64, now: f64) -> Self {
        let corpus = SyntheticCorpus::clustered(n, spec, seed, now);
        let embedder = HashProjectionEmbedder::new(dim, seed ^ 0x5eed);
        let store = corpus.build_store(&embedder).expect("synthetic store");
        Self {
            corpus,
            store,
            embedder,
        }
    }

    /// Wraps an existing index. `words` (from its content) stand in for the
    /// cluster vocabularies when generating query and modulation text.
    pub fn from_index(store: EmbeddingStore, embedder: HashProjectionEmbedder, words: Vec<String>, now: f64) -> Self {
        let words = if words.is_empty() { vec!["index".to_string()] } else { words };
        let half = words.len().div_ceil(2);
        let corpus = SyntheticCorpus {
            records: Vec::new(),
            cluster_of: Vec::new(),
            cluster_vocab: vec![words[..half].to_vec(), words[half..].to_vec()]
                .into_iter()
                .filter(|v| !v.is_empty())
                .collect(),
            shared_vocab: words,
            timestamps: Vec::new(),
            now,
        };
        Self {
            corpus,
            store,
            embedder,
        }
    }

    /// Loads an on-disk index as an algebraic-suite fixture.
    pub fn open_index(db: &std::path::Path, now: f64) -> Result<Self, crate::index::IndexError> {
        let loaded = crate::index::LoadedIndex::open(db)?;
        let conn = loaded.connect()?;
        let mut stmt = conn.prepare("SELECT content FROM chunks ORDER BY id LIMIT 500")?;
        let mut seen = std::collections::BTreeSet::new();
        let mut words = Vec::new();
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        for content in rows {
            for w in content?.split_whitespace() {
                let w: String = w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
                if w.len() > 2 && words.len() < 60 && seen.insert(w.clone()) {
                    words.push(w);
                }
            }
        }
        drop(stmt);
        Ok(Self::from_index(loaded.store, loaded.embedder, words, now))
    }

    fn run(&self, spec: &ModulationSpec, text: Option<&str>) -> Vec<ScoredCandidate> {
        let view = self.store.full_view(self.corpus.now);
        run_pipeline(spec, text, &view, &self.embedder).expect("pipeline on fixture")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlgebraicConfig {
    pub tolerance: f64,
    /// Candidates compared per operation per corpus.
    pub candidates_per_op: usize,
    /// Added to every suppress weight handed to the engine (the oracle keeps
    /// the nominal weight). Non-zero values check the suite's sensitivity.
    pub engine_weight_offset: f32,
}

impl Default for AlgebraicConfig {
    fn default() -> Self {
        Self {
            tolerance: ALGEBRAIC_TOLERANCE,
            candidates_per_op: 100,
            engine_weight_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OperationReport {
    pub operation: &'static str,
    pub comparisons: usize,
    pub mismatches: usize,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgebraicReport {
    pub corpora: usize,
    pub operations: Vec<OperationReport>,
    pub comparisons: usize,
    pub mismatches: usize,
    pub passed: bool,
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn words(v: &[String], idx: &[usize]) -> String {
    idx.iter().map(|&i| v[i % v.len()].as_str()).collect::<Vec<_>>().join(" ")
}

/// Independent recomputation of one candidate's final score.
fn oracle_score(
    fixture: &Fixture,
    spec: &ModulationSpec,
    text: &str,
    id: &str,
) -> f64 {
    let e = &fixture.embedder;
    let store = &fixture.store;
    let row = store.vector(id).expect("candidate in store");
    let mut q: Vec<f64> = e.embed(text).unwrap().iter().map(|&x| f64::from(x)).collect();
    if let Some(c) = &spec.centroid {
        let alpha = f64::from(c.alpha);
        let n = c.ids.len() as f64;
        for (d, qd) in q.iter_mut().enumerate() {
            let mean: f64 = c.ids.iter().map(|i| f64::from(store.vector(i).unwrap()[d])).sum::<f64>() / n;
            *qd = alpha * *qd + (1.0 - alpha) * mean;
        }
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.iter_mut().for_each(|x| *x /= norm);
    }
    let mut score: f64 = row.iter().zip(&q).map(|(r, qd)| f64::from(*r) * qd).sum();
    if let Some(t) = &spec.trajectory {
        let a = e.embed(&t.from).unwrap();
        let b = e.embed(&t.to).unwrap();
        let directional: f64 = row
            .iter()
            .zip(a.iter().zip(&b))
            .map(|(r, (x, y))| f64::from(*r) * (f64::from(*y) - f64::from(*x)))
            .sum();
        score = 0.5 * score + 0.5 * directional;
    }
    if let Some(d) = spec.decay {
        let idx = store.index_of(id).unwrap();
        let ts = store.timestamp(idx).unwrap_or(fixture.corpus.now);
        let age = ((fixture.corpus.now - ts) / SECONDS_PER_DAY).max(0.0);
        score /= 1.0 + age / f64::from(d.half_life_days);
    }
    for s in &spec.suppress {
        score -= f64::from(s.weight) * dot64(row, &e.embed(&s.text).unwrap());
    }
    score
}

/// The five operations checked by the algebraic suite, each as a spec
/// paired with its query text.
fn algebraic_cases(fixture: &Fixture, pool: usize, seed: u64) -> Vec<(&'static str, ModulationSpec, String)> {
    let c = &fixture.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v0 = &c.cluster_vocab[0];
    let v1 = &c.cluster_vocab[1 % c.cluster_vocab.len()];
    let query = words(v0, &[0, 1, 2]);
    let base = ModulationSpec {
        pool,
        ..Default::default()
    };
    let n = fixture.store.len();
    let example_ids: Vec<String> = rand::seq::index::sample(&mut rng, n, n.min(3))
        .into_iter()
        .map(|i| fixture.store.ids()[i].clone())
        .collect();
    vec![
        (
            "suppress",
            ModulationSpec {
                suppress: vec![Suppress::new(words(v0, &[3, 4]))],
                ..base.clone()
            },
            query.clone(),
        ),
        (
            "multi-suppress",
            ModulationSpec {
                suppress: vec![Suppress::new(words(v0, &[3, 4])), Suppress::new(words(&c.shared_vocab, &[0, 1]))],
                ..base.clone()
            },
            query.clone(),
        ),
        (
            "trajectory",
            ModulationSpec {
                trajectory: Some(Trajectory {
                    from: words(v0, &[5, 6]),
                    to: words(v1, &[0, 1]),
                }),
                ..base.clone()
            },
            query.clone(),
        ),
        (
            "decay",
            ModulationSpec {
                decay: Some(Decay { half_life_days: 7.0 }),
                ..base.clone()
            },
            query.clone(),
        ),
        (
            "centroid",
            ModulationSpec {
                centroid: Some(Centroid {
                    ids: example_ids,
                    alpha: DEFAULT_CENTROID_ALPHA,
                }),
                ..base
            },
            query,
        ),
    ]
}

/// Pipeline scores versus direct formula recomputation.
pub fn algebraic_suite(fixtures: &[Fixture], config: &AlgebraicConfig) -> AlgebraicReport {
    let names = ["suppress", "multi-suppress", "trajectory", "decay", "centroid"];
    let mut ops: Vec<OperationReport> = names
        .iter()
        .map(|&operation| OperationReport {
            operation,
            comparisons: 0,
            mismatches: 0,
            max_abs_error: 0.0,
        })
        .collect();
    for (fi, fixture) in fixtures.iter().enumerate() {
        for (name, spec, text) in algebraic_cases(fixture, config.candidates_per_op, fi as u64) {
            let mut engine_spec = spec.clone();
            for s in &mut engine_spec.suppress {
                s.weight += config.engine_weight_offset;
            }
            let got = fixture.run(&engine_spec, Some(&text));
            let op = ops.iter_mut().find(|o| o.operation == name).unwrap();
            for c in got {
                let want = oracle_score(fixture, &spec, &text, &c.id);
                let err = (f64::from(c.score) - want).abs();
                op.comparisons += 1;
                op.max_abs_error = op.max_abs_error.max(err);
                if err > config.tolerance {
                    op.mismatches += 1;
                }
            }
        }
    }
    let comparisons = ops.iter().map(|o| o.comparisons).sum();
    let mismatches = ops.iter().map(|o| o.mismatches).sum();
    AlgebraicReport {
        corpora: fixtures.len(),
        operations: ops,
        comparisons,
        mismatches,
        passed: mismatches == 0,
    }
}

/// The default four-corpus algebraic fixture set.
pub fn algebraic_fixtures(chunks: usize, dim: usize) -> Vec<Fixture> {
    let now = 1.8e9;
    (0..4)
        .map(|i| {
            let spec = ClusterSpec {
                clusters: 3 + i,
                ..Default::default()
            };
            Fixture::clustered(chunks, &spec, dim, 100 + i as u64, now)
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    pub modulation: String,
    pub queries: usize,
    /// Mean RBO of modulated vs baseline top-k.
    pub rbo: f64,
    pub ils: f64,
    pub baseline_ils: f64,
    pub centroid_sim: f64,
    pub baseline_centroid_sim: f64,
    pub ndcg_at_10: Option<f64>,
    pub baseline_ndcg_at_10: Option<f64>,
    pub mean_age_days: f64,
    pub baseline_mean_age_days: f64,
    /// Baseline mean age minus modulated mean age; positive means more recent.
    pub mean_age_shift_days: f64,
}

impl MetricReport {
    pub fn ils_reduction(&self) -> f64 {
        if self.baseline_ils == 0.0 {
            0.0
        } else {
            1.0 - self.ils / self.baseline_ils
        }
    }

    pub fn ndcg_retention(&self) -> Option<f64> {
        match (self.ndcg_at_10, self.baseline_ndcg_at_10) {
            (Some(m), Some(b)) if b > 0.0 => Some(m / b),
            _ => None,
        }
    }

    pub fn centroid_sim_delta(&self) -> f64 {
        self.centroid_sim - self.baseline_centroid_sim
    }
}

#[derive(Debug, Clone)]
pub struct BehavioralConfig {
    pub queries: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for BehavioralConfig {
    fn default() -> Self {
        Self {
            queries: 30,
            top_k: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BehavioralReport {
    pub reports: Vec<MetricReport>,
}

impl BehavioralReport {
    pub fn get(&self, modulation: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.modulation == modulation)
    }

    /// The direction each modulation must move its metric.
    pub fn directions_hold(&self) -> Vec<(&'static str, bool)> {
        let get = |m| self.get(m).expect("all modulations reported");
        vec![
            ("diverse lowers ILS", get("diverse").ils < get("diverse").baseline_ils),
            ("decay lowers mean age", get("decay").mean_age_shift_days > 0.0),
            ("centroid raises centroid similarity", get("centroid").centroid_sim_delta() > 0.0),
            ("suppress changes ranking", get("suppress").rbo < 1.0),
            ("trajectory changes ranking", get("trajectory").rbo < 1.0),
        ]
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    rbo: f64,
    ils: f64,
    base_ils: f64,
    csim: f64,
    base_csim: f64,
    ndcg: f64,
    base_ndcg: f64,
    ndcg_n: usize,
    age: f64,
    base_age: f64,
}

fn mean_age(fixture: &Fixture, list: &[ScoredCandidate]) -> f64 {
    let now = fixture.corpus.now;
    let sum: f64 = list
        .iter()
        .map(|c| {
            let ts = fixture.store.timestamp(fixture.store.index_of(&c.id).unwrap()).unwrap_or(now);
            (now - ts) / SECONDS_PER_DAY
        })
        .sum();
    sum / list.len().max(1) as f64
}

/// Per-modulation behavioral metrics averaged over generated queries.
pub fn behavioral_suite(fixture: &Fixture, config: &BehavioralConfig) -> BehavioralReport {
    let c = &fixture.corpus;
    let k = config.top_k;
    let clusters = c.cluster_vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut acc: HashMap<&'static str, Accum> = HashMap::new();
    let vecs = |list: &[ScoredCandidate]| -> Vec<&[f32]> {
        list.iter().map(|s| fixture.store.vector(&s.id).unwrap()).collect()
    };
    let ids = |list: &[ScoredCandidate]| -> Vec<String> { list.iter().map(|s| s.id.clone()).collect() };

    for qi in 0..config.queries {
        let cluster = qi % clusters;
        let vocab = &c.cluster_vocab[cluster];
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, vocab.len(), 6).into_vec();
        let query = words(vocab, &picked[..3]);
        let query_words: Vec<&str> = picked[..3].iter().map(|&i| vocab[i].as_str()).collect();

        // Graded relevance: cluster members, one grade per shared query word.
        let judgments: HashMap<String, f64> = c
            .records
            .iter()
            .zip(&c.cluster_of)
            .filter(|(_, &cl)| cl == cluster)
            .map(|(r, _)| {
                let hits = r.content.split(' ').filter(|w| query_words.contains(w)).count();
                (r.id.clone(), hits as f64)
            })
            .filter(|(_, g)| *g > 0.0)
            .collect();

        let plain = ModulationSpec {
            pool: k,
            ..Default::default()
        };
        let baseline = fixture.run(&plain, Some(&query));
        let base_ids = ids(&baseline);
        let base_ils = ils(&vecs(&baseline)).unwrap_or(0.0);
        let base_ndcg = ndcg_at_10(&base_ids, &judgments);

        let seeds: Vec<String> = baseline.iter().skip(k / 2).take(3).map(|s| s.id.clone()).collect();
        let seed_vecs: Vec<&[f32]> = seeds.iter().map(|id| fixture.store.vector(id).unwrap()).collect();

        let other = &c.cluster_vocab[(cluster + 1) % clusters];
        let cases: Vec<(&'static str, ModulationSpec)> = vec![
            (
                "diverse",
                ModulationSpec {
                    diverse: Some(Diverse::default()),
                    ..plain.clone()
                },
            ),
            (
                "suppress",
                ModulationSpec {
                    suppress: vec![Suppress {
                        text: words(vocab, &picked[3..6]),
                        weight: DEFAULT_SUPPRESS_WEIGHT,
                    }],
                    ..plain.clone()
                },
            ),
            (
                "decay",
                ModulationSpec {
                    decay: Some(Decay { half_life_days: 7.0 }),
                    ..plain.clone()
                },
            ),
            (
                "centroid",
                ModulationSpec {
                    centroid: Some(Centroid {
                        ids: seeds.clone(),
                        alpha: DEFAULT_CENTROID_ALPHA,
                    }),
                    ..plain.clone()
                },
            ),
            (
                "trajectory",
                ModulationSpec {
                    trajectory: Some(Trajectory {
                        from: words(vocab, &picked[3..5]),
                        to: words(other, &[0, 1]),
                    }),
                    ..plain.clone()
                },
            ),
        ];
        for (name, spec) in cases {
            let got = fixture.run(&spec, Some(&query));
            let got_ids = ids(&got);
            let a = acc.entry(name).or_default();
            a.n += 1;
            a.rbo += rbo(&got_ids, &base_ids, RBO_PERSISTENCE).unwrap();
            a.ils += ils(&vecs(&got)).unwrap_or(0.0);
            a.base_ils += base_ils;
            a.csim += centroid_similarity(&vecs(&got), &seed_vecs);
            a.base_csim += centroid_similarity(&vecs(&baseline), &seed_vecs);
            if let (Some(m), Some(b)) = (ndcg_at_10(&got_ids, &judgments), base_ndcg) {
                a.ndcg += m;
                a.base_ndcg += b;
                a.ndcg_n += 1;
            }
            a.age += mean_age(fixture, &got);
            a.base_age += mean_age(fixture, &baseline);
        }
    }

    let order = ["diverse", "suppress", "decay", "centroid", "trajectory"];
    let reports = order
        .iter()
        .map(|&name| {
            let a = &acc[name];
            let n = a.n.max(1) as f64;
            let ndcg_n = a.ndcg_n as f64;
            MetricReport {
                modulation: name.to_string(),
                queries: a.n,
                rbo: a.rbo / n,
                ils: a.ils / n,
                baseline_ils: a.base_ils / n,
                centroid_sim: a.csim / n,
                baseline_centroid_sim: a.base_csim / n,
                ndcg_at_10: (a.ndcg_n > 0).then(|| a.ndcg / ndcg_n),
                baseline_ndcg_at_10: (a.ndcg_n > 0).then(|| a.base_ndcg / ndcg_n),
                mean_age_days: a.age / n,
                baseline_mean_age_days: a.base_age / n,
                mean_age_shift_days: (a.base_age - a.age) / n,
            }
        })
        .collect();
    BehavioralReport { reports }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebraic_passes_and_catches_perturbation() {
        let fixtures = algebraic_fixtures(200, 64);
        let report = algebraic_suite(&fixtures, &AlgebraicConfig::default());
        assert!(report.passed, "{report:?}");
        assert_eq!(report.comparisons, 4 * 5 * 100);

        let perturbed = AlgebraicConfig {
            engine_weight_offset: 1e-2,
            ..Default::default()
        };
        let report = algebraic_suite(&fixtures, &perturbed);
        assert!(!report.passed);
    }

    #[test]
    fn algebraic_runs_on_single_chunk() {
        let f = Fixture::clustered(1, &ClusterSpec::default(), 32, 1, 1.8e9);
        let report = algebraic_suite(std::slice::from_ref(&f), &AlgebraicConfig::default());
        assert!(report.passed);
        assert_eq!(report.comparisons, 5);
    }

    #[test]
    fn behavioral_directions() {
        let f = Fixture::clustered(900, &ClusterSpec::default(), 128, 3, 1.8e9);
        let report = behavioral_suite(&f, &BehavioralConfig::default());
        for (what, ok) in report.directions_hold() {
            assert!(ok, "{what}: {report:?}");
        }
    }
}
