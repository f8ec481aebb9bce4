//! Latency and memory benchmarks at corpus scale.
//!
//! Each size gets a fresh SQLite database with random-word chunks and a
//! matching matrix of random unit vectors. Every timing discards one warm-up
//! run and reports the median of the rest.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::params;
use serde::Serialize;

use crate::embed::HashProjectionEmbedder;
use crate::grammar;
use crate::index::{open_writable, record_embedder, IndexError};
use crate::kernel;
use crate::modulation::run_pipeline;
use crate::sql::{self, QueryContext};
use crate::store::EmbeddingStore;
use crate::synth::random_store;

const SECONDS_PER_DAY: f64 = 86_400.0;
const VOCAB: usize = 5000;
const WORDS_PER_CHUNK: usize = 8;

/// Three score modulations plus MMR.
pub const MODULATED_TOKENS: &str =
    "similar:w17 w4242 w933 from:w12 w88 to:w3001 w76 decay:7 suppress:w5 w600 diverse";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub dim: usize,
    pub seed: u64,
    /// Approximate size of the pre-filtered candidate set.
    pub prefilter_candidates: usize,
    /// Rayon threads for the scoring path; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![250_000, 500_000, 750_000, 1_000_000],
            reps: 10,
            dim: 128,
            seed: 42,
            prefilter_candidates: 11_000,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub chunks: usize,
    pub dim: usize,
    pub base_matmul_ms: f64,
    pub modulated_mmr_ms: f64,
    pub full_pipeline_ms: f64,
    pub keyword_ms: f64,
    pub hybrid_ms: f64,
    pub prefilter_candidates: usize,
    pub prefiltered_phase2_ms: f64,
    pub matrix_bytes: usize,
}

/// Runs `f` once to warm up, then `reps` more times; median milliseconds.
pub fn median_ms<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    f();
    median((0..reps.max(1)).map(|_| time_ms(&mut f)).collect())
}

/// Like [`median_ms`] for two closures, alternating them every rep so
/// both see the same machine conditions.
pub fn paired_median_ms<F: FnMut(), G: FnMut()>(reps: usize, mut f: F, mut g: G) -> (f64, f64) {
    f();
    g();
    let (a, b): (Vec<f64>, Vec<f64>) = (0..reps.max(1)).map(|_| (time_ms(&mut f), time_ms(&mut g))).unzip();
    (median(a), median(b))
}

fn time_ms<F: FnMut()>(f: &mut F) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    }
}

/// A benchmark corpus on disk plus its in-memory matrix.
pub struct BenchCorpus {
    pub store: EmbeddingStore,
    pub embedder: HashProjectionEmbedder,
    pub now: f64,
    /// Name of the project holding roughly `prefilter_candidates` chunks.
    pub prefilter_sql: String,
}

/// Writes `n` chunks to `db` (which must not exist yet) and builds the
/// matching matrix. Chunk `i` belongs to project `p{i % groups}` so one
/// project is about `prefilter_candidates` rows.
pub fn build_corpus(
    n: usize,
    dim: usize,
    seed: u64,
    prefilter_candidates: usize,
    db: &Path,
) -> Result<BenchCorpus, IndexError> {
    let now = 1.8e9;
    let embedder = HashProjectionEmbedder::new(dim, seed);
    let groups = (n / prefilter_candidates.max(1)).max(1);
    let mut conn = open_writable(db)?;
    record_embedder(&conn, &embedder)?;
    conn.execute_batch("PRAGMA synchronous = OFF")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(n, dim, seed ^ 0xbe7c);
    let mut stamps = Vec::with_capacity(n);
    let tx = conn.transaction()?;
    {
        let mut insert = tx.prepare(
            "INSERT INTO chunks(id, content, type, session_id, project, created_at, timestamp)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        )?;
        let mut content = String::new();
        for (i, id) in store.ids().iter().enumerate() {
            content.clear();
            for w in 0..WORDS_PER_CHUNK {
                if w > 0 {
                    content.push(' ');
                }
                content.push_str(&format!("w{}", rng.gen_range(0..VOCAB)));
            }
            let ts = now - rng.gen_range(0.0..90.0) * SECONDS_PER_DAY;
            let kind = if i % 3 == 0 { "tool" } else { "assistant" };
            insert.execute(params![
                id,
                content,
                kind,
                format!("s{}", i / 200),
                format!("p{}", i % groups),
                "2027-01-15 08:00:00",
                ts
            ])?;
            stamps.push(ts);
        }
    }
    tx.commit()?;
    let store = {
        let ids: Vec<String> = store.ids().to_vec();
        store.with_timestamps(ids.iter().map(String::as_str).zip(stamps))
    };
    Ok(BenchCorpus {
        store,
        embedder,
        now,
        prefilter_sql: "SELECT id FROM chunks WHERE project = 'p0'".into(),
    })
}

/// Times every row column on an already-built corpus.
pub fn measure(corpus: &BenchCorpus, db: &Path, reps: usize) -> Result<BenchRow, sql::MaterializeError> {
    let store = &corpus.store;
    let embedder = &corpus.embedder;
    let conn = sql::open_read_only(db)?;
    let ctx = QueryContext {
        store,
        embedder,
        now: corpus.now,
    };
    let parsed = grammar::parse(MODULATED_TOKENS)?;
    let q = crate::embed::Embedder::embed(embedder, parsed.query_text().unwrap_or("w1"))
        .map_err(crate::modulation::PipelineError::from)?;

    let full = store.full_view(corpus.now);
    let base_matmul_ms = median_ms(reps, || {
        std::hint::black_box(kernel::project(&full, &q));
    });
    let full_sql = format!(
        "SELECT v.id, v.score, c.type FROM vec_ops('{MODULATED_TOKENS}') v \
         JOIN chunks c ON c.id = v.id ORDER BY v.score DESC LIMIT 10"
    );
    let full_pipeline_ms = median_ms(reps, || {
        std::hint::black_box(sql::run(&conn, &ctx, &full_sql).unwrap());
    });
    let keyword_sql = "SELECT id, rank FROM keyword('w17') ORDER BY rank DESC LIMIT 10";
    let keyword_ms = median_ms(reps, || {
        std::hint::black_box(sql::run(&conn, &ctx, keyword_sql).unwrap());
    });
    let hybrid_sql = format!(
        "SELECT k.id, k.rank, v.score FROM keyword('w17') k \
         JOIN vec_ops('{MODULATED_TOKENS}') v ON v.id = k.id ORDER BY v.score DESC LIMIT 10"
    );
    let hybrid_ms = median_ms(reps, || {
        std::hint::black_box(sql::run(&conn, &ctx, &hybrid_sql).unwrap());
    });

    // Phase 2 only: the pre-filter ids are fetched once, outside the timer.
    // Full and pre-filtered runs alternate so their ratio is not skewed by
    // a slow stretch on one side.
    let ids = sql::run_prefilter(&conn, &corpus.prefilter_sql)?;
    let prefilter_candidates = ids.len();
    let (modulated_mmr_ms, prefiltered_phase2_ms) = paired_median_ms(
        reps,
        || {
            let view = store.full_view(corpus.now);
            std::hint::black_box(run_pipeline(&parsed.spec, parsed.query_text(), &view, embedder).unwrap());
        },
        || {
            let view = store.subset(ids.iter().map(String::as_str), corpus.now);
            std::hint::black_box(run_pipeline(&parsed.spec, parsed.query_text(), &view, embedder).unwrap());
        },
    );

    Ok(BenchRow {
        chunks: store.len(),
        dim: store.dim(),
        base_matmul_ms,
        modulated_mmr_ms,
        full_pipeline_ms,
        keyword_ms,
        hybrid_ms,
        prefilter_candidates,
        prefiltered_phase2_ms,
        matrix_bytes: store.matrix_bytes(),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Query(#[from] sql::MaterializeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

/// Builds and measures each size in turn under `workdir`, removing each
/// database before moving to the next size.
pub fn run(config: &BenchConfig, workdir: &Path, mut on_row: impl FnMut(&BenchRow) + Send) -> Result<Vec<BenchRow>, BenchError> {
    let body = |on_row: &mut (dyn FnMut(&BenchRow) + Send)| -> Result<Vec<BenchRow>, BenchError> {
        let mut rows = Vec::with_capacity(config.sizes.len());
        for &n in &config.sizes {
            let db = workdir.join(format!("bench-{n}.db"));
            remove_db(&db)?;
            let corpus = build_corpus(n, config.dim, config.seed, config.prefilter_candidates, &db)?;
            let row = measure(&corpus, &db, config.reps)?;
            drop(corpus);
            remove_db(&db)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    };
    match config.threads {
        #[cfg(feature = "parallel")]
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| BenchError::Threads(e.to_string()))?
            .install(|| body(&mut on_row)),
        _ => body(&mut on_row),
    }
}

fn remove_db(db: &Path) -> std::io::Result<()> {
    for suffix in ["", "-wal", "-shm", ".pem"] {
        let p = format!("{}{suffix}", db.display());
        match std::fs::remove_file(&p) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    Ok(())
}

/// Least-squares R² of `y` against `x`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        let mut calls = 0;
        let m = median_ms(3, || calls += 1);
        assert_eq!(calls, 4);
        assert!(m >= 0.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(vec![5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn paired_runs_alternate() {
        let log = std::cell::RefCell::new(Vec::new());
        paired_median_ms(2, || log.borrow_mut().push('f'), || log.borrow_mut().push('g'));
        assert_eq!(log.into_inner(), ['f', 'g', 'f', 'g', 'f', 'g']);
    }

    #[test]
    fn r_squared_of_line_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        assert!((r_squared(&x, &y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_corpus_measures() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("b.db");
        let corpus = build_corpus(3000, 32, 1, 500, &db).unwrap();
        let row = measure(&corpus, &db, 2).unwrap();
        assert_eq!(row.matrix_bytes, 3000 * 32 * 4);
        assert_eq!(row.prefilter_candidates, 500);
    }
}
