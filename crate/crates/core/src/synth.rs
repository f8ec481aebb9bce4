//! Seeded synthetic corpora.
//!
//! Documents are bags of words drawn from per-cluster vocabularies plus a
//! shared vocabulary, so with the hash embedder the similarity structure is
//! known by construction. Timestamps spread uniformly over a window ending
//! at `now`.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embed::Embedder;
use crate::index::CorpusRecord;
use crate::store::{EmbeddingStore, StoreError};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub vocab_per_cluster: usize,
    pub shared_vocab: usize,
    pub cluster_words_per_doc: usize,
    pub shared_words_per_doc: usize,
    pub spread_days: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            vocab_per_cluster: 30,
            shared_vocab: 30,
            cluster_words_per_doc: 6,
            shared_words_per_doc: 2,
            spread_days: 90.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    /// Cluster index per record.
    pub cluster_of: Vec<usize>,
    pub cluster_vocab: Vec<Vec<String>>,
    pub shared_vocab: Vec<String>,
    /// Epoch seconds per record.
    pub timestamps: Vec<f64>,
    pub now: f64,
}

pub fn cluster_word(cluster: usize, i: usize) -> String {
    format!("k{cluster}w{i}")
}

pub fn shared_word(i: usize) -> String {
    format!("common{i}")
}

fn iso(ts: f64) -> String {
    DateTime::<Utc>::from_timestamp(ts.floor() as i64, 0)
        .expect("timestamp in range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

impl SyntheticCorpus {
    /// `n` documents spread round-robin over the clusters.
    pub fn clustered(n: usize, spec: &ClusterSpec, seed: u64, now: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cluster_vocab: Vec<Vec<String>> = (0..spec.clusters)
            .map(|c| (0..spec.vocab_per_cluster).map(|i| cluster_word(c, i)).collect())
            .collect();
        let shared: Vec<String> = (0..spec.shared_vocab).map(shared_word).collect();
        let mut corpus = Self {
            records: Vec::with_capacity(n),
            cluster_of: Vec::with_capacity(n),
            cluster_vocab,
            shared_vocab: shared,
            timestamps: Vec::with_capacity(n),
            now,
        };
        for i in 0..n {
            let c = i % spec.clusters.max(1);
            let mut words: Vec<&str> = corpus.cluster_vocab[c]
                .choose_multiple(&mut rng, spec.cluster_words_per_doc)
                .map(String::as_str)
                .collect();
            words.extend(
                corpus
                    .shared_vocab
                    .choose_multiple(&mut rng, spec.shared_words_per_doc)
                    .map(String::as_str),
            );
            words.shuffle(&mut rng);
            let ts = now - rng.gen_range(0.0..spec.spread_days) * SECONDS_PER_DAY;
            let content = words.join(" ");
            corpus.push(format!("d{i:06}"), content, "assistant", c, ts);
        }
        corpus
    }

    pub fn push(&mut self, id: String, content: String, kind: &str, cluster: usize, ts: f64) {
        self.records.push(CorpusRecord {
            id,
            content,
            kind: kind.to_string(),
            session_id: format!("s{}", self.records.len() / 50),
            project: "synthetic".into(),
            created_at: iso(ts),
            tool_name: None,
            file: None,
        });
        self.cluster_of.push(cluster);
        self.timestamps.push(ts);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Embeds every record and attaches timestamps.
    pub fn build_store(&self, embedder: &dyn Embedder) -> Result<EmbeddingStore, StoreError> {
        let rows = self.records.iter().map(|r| {
            let v = embedder.embed(&r.content).expect("synthetic content is non-empty");
            (r.id.clone(), v)
        });
        let (store, _) = EmbeddingStore::from_rows(embedder.dim(), rows)?;
        let stamps = self
            .records
            .iter()
            .zip(&self.timestamps)
            .map(|(r, ts)| (r.id.as_str(), *ts));
        Ok(store.with_timestamps(stamps))
    }

    pub fn as_numbered(&self) -> Vec<(usize, CorpusRecord)> {
        self.records.iter().cloned().enumerate().map(|(i, r)| (i + 1, r)).collect()
    }
}

/// `n` random unit vectors with ids `r0000000..`; no text behind them.
pub fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n).map(|i| {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        (format!("r{i:07}"), v)
    });
    EmbeddingStore::from_rows(dim, rows)
        .expect("gaussian rows are non-zero")
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashProjectionEmbedder;

    #[test]
    fn deterministic_and_well_formed() {
        let spec = ClusterSpec::default();
        let a = SyntheticCorpus::clustered(30, &spec, 5, 1e9);
        let b = SyntheticCorpus::clustered(30, &spec, 5, 1e9);
        assert_eq!(a.records, b.records);
        assert_eq!(a.cluster_of[4], 1);
        for (r, ts) in a.records.iter().zip(&a.timestamps) {
            assert_eq!(r.content.split(' ').count(), 8);
            assert!(*ts <= 1e9 && *ts > 1e9 - 90.0 * SECONDS_PER_DAY);
            assert!(crate::index::parse_timestamp(&r.created_at).is_some());
        }
        let e = HashProjectionEmbedder::new(32, 0);
        assert_eq!(a.build_store(&e).unwrap().len(), 30);
    }
}
