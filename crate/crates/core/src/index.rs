//! On-disk index: a SQLite database plus an embedding sidecar next to it.
//!
//! `<db>` holds the `chunks` table, full-text index, views, and presets;
//! `<db>.pem` holds the embedding matrix. The embedder configuration is
//! recorded in `_meta` so queries embed text the same way ingestion did.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder, HashProjectionEmbedder};
use crate::sql::schema;
use crate::store::{EmbeddingStore, LoadReport, StoreError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("sql error: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index metadata: {0}")]
    Meta(String),
    #[error("embedder has {embedder} dimensions but the index was built with {index}")]
    DimMismatch { embedder: usize, index: usize },
}

/// One line of the ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub content: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub session_id: String,
    pub project: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

/// Parses ISO-8601 timestamps: RFC 3339, naive date-times (taken as UTC),
/// or bare dates.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc())
}

pub fn epoch_seconds(dt: &DateTime<Utc>) -> f64 {
    dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub line: usize,
    pub reason: String,
}

/// Reads newline-delimited JSON records. Blank lines are skipped; lines that
/// fail to decode are returned as rejections with their 1-based line number.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<(Vec<(usize, CorpusRecord)>, Vec<Rejected>), IndexError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusRecord>(&line) {
            Ok(r) => records.push((i + 1, r)),
            Err(e) => rejected.push(Rejected {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, rejected))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestCounts {
    pub inserted: usize,
    pub skipped_duplicate: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub counts: IngestCounts,
    pub rejected: Vec<Rejected>,
}

pub fn sidecar_path(db: &Path) -> PathBuf {
    let mut s = db.as_os_str().to_owned();
    s.push(".pem");
    PathBuf::from(s)
}

/// Opens (creating if needed) a writable database with the schema applied.
pub fn open_writable(db: &Path) -> Result<Connection, IndexError> {
    let conn = Connection::open(db)?;
    conn.pragma_update(None, "journal_mode", "WAL")?;
    schema::init(&conn)?;
    Ok(conn)
}

/// Records the hash embedder parameters so later loads can rebuild it.
pub fn record_embedder(conn: &Connection, embedder: &HashProjectionEmbedder) -> Result<(), IndexError> {
    let dim = embedder.dim().to_string();
    let seed = embedder.seed().to_string();
    match schema::get_meta(conn, "embedder_dim")? {
        Some(existing) if existing != dim => {
            return Err(IndexError::DimMismatch {
                embedder: embedder.dim(),
                index: existing.parse().unwrap_or(0),
            })
        }
        _ => {}
    }
    schema::set_meta(conn, "embedder", "hash-projection")?;
    schema::set_meta(conn, "embedder_dim", &dim)?;
    schema::set_meta(conn, "embedder_seed", &seed)?;
    Ok(())
}

/// Inserts records into `chunks` (full-text index follows via triggers) and
/// appends their embeddings to the sidecar. `line` numbers are only used
/// for rejection reports.
pub fn ingest(
    records: &[(usize, CorpusRecord)],
    embedder: &dyn Embedder,
    db: &Path,
) -> Result<IngestReport, IndexError> {
    let mut conn = open_writable(db)?;
    let sidecar = sidecar_path(db);
    let existing = if sidecar.exists() {
        EmbeddingStore::load(&sidecar)?.0
    } else {
        EmbeddingStore::empty(embedder.dim())?
    };
    if existing.dim() != embedder.dim() {
        return Err(IndexError::DimMismatch {
            embedder: embedder.dim(),
            index: existing.dim(),
        });
    }

    let mut report = IngestReport::default();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut accepted: Vec<(&CorpusRecord, String, f64)> = Vec::new();
    for (line, r) in records {
        let Some(ts) = parse_timestamp(&r.created_at) else {
            report.rejected.push(Rejected {
                line: *line,
                reason: format!("malformed created_at {:?}", r.created_at),
            });
            continue;
        };
        if r.content.trim().is_empty() {
            report.rejected.push(Rejected {
                line: *line,
                reason: "empty content".into(),
            });
            continue;
        }
        if existing.index_of(&r.id).is_some() || !seen.insert(r.id.as_str()) {
            report.counts.skipped_duplicate += 1;
            continue;
        }
        let created = ts.format("%Y-%m-%d %H:%M:%S").to_string();
        accepted.push((r, created, epoch_seconds(&ts)));
    }

    #[cfg(feature = "parallel")]
    let iter = accepted.par_iter();
    #[cfg(not(feature = "parallel"))]
    let iter = accepted.iter();
    let vectors: Vec<Vec<f32>> = iter
        .map(|(r, _, _)| embedder.embed(&r.content))
        .collect::<Result<_, _>>()?;

    let tx = conn.transaction()?;
    let mut inserted_rows = Vec::with_capacity(accepted.len());
    {
        let mut insert = tx.prepare(
            "INSERT OR IGNORE INTO chunks(id, content, type, session_id, project, tool_name, file, created_at, timestamp)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
        )?;
        for ((r, created, ts), v) in accepted.iter().zip(vectors) {
            let n = insert.execute(params![
                r.id, r.content, r.kind, r.session_id, r.project, r.tool_name, r.file, created, ts
            ])?;
            if n == 0 {
                // Present in the database but missing from the sidecar.
                report.counts.skipped_duplicate += 1;
            } else {
                inserted_rows.push((r.id.clone(), v));
            }
        }
    }
    tx.commit()?;

    let (grown, skipped) = existing.appended(inserted_rows)?;
    report.counts.skipped_duplicate += skipped;
    report.counts.inserted = grown.len() - existing.len();
    grown.save(&sidecar)?;
    report.counts.rejected = report.rejected.len();
    Ok(report)
}

/// Everything a query needs, loaded from disk.
pub struct LoadedIndex {
    pub db_path: PathBuf,
    pub store: EmbeddingStore,
    pub embedder: HashProjectionEmbedder,
    pub report: LoadReport,
}

impl LoadedIndex {
    pub fn open(db: &Path) -> Result<Self, IndexError> {
        let conn = crate::sql::open_read_only(db)?;
        let meta = |key: &str| -> Result<String, IndexError> {
            schema::get_meta(&conn, key)?.ok_or_else(|| IndexError::Meta(format!("missing _meta key {key}")))
        };
        let dim: usize = meta("embedder_dim")?
            .parse()
            .map_err(|_| IndexError::Meta("embedder_dim is not an integer".into()))?;
        let seed: u64 = meta("embedder_seed")?
            .parse()
            .map_err(|_| IndexError::Meta("embedder_seed is not an integer".into()))?;
        let embedder = HashProjectionEmbedder::new(dim, seed);

        let sidecar = sidecar_path(db);
        let (store, report) = if sidecar.exists() {
            EmbeddingStore::load(&sidecar)?
        } else {
            (EmbeddingStore::empty(dim)?, LoadReport::default())
        };
        if store.dim() != dim {
            return Err(IndexError::DimMismatch {
                embedder: dim,
                index: store.dim(),
            });
        }
        let mut stmt = conn.prepare("SELECT id, timestamp FROM chunks")?;
        let stamps = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, f64>(1)?)))?
            .collect::<Result<Vec<_>, _>>()?;
        let store = store.with_timestamps(stamps.iter().map(|(id, ts)| (id.as_str(), *ts)));
        Ok(Self {
            db_path: db.to_path_buf(),
            store,
            embedder,
            report,
        })
    }

    pub fn connect(&self) -> Result<Connection, IndexError> {
        Ok(crate::sql::open_read_only(&self.db_path)?)
    }
}

/// Creates or extends an index with the hash embedder.
pub fn index_records(
    records: &[(usize, CorpusRecord)],
    db: &Path,
    dim: usize,
    seed: u64,
) -> Result<IngestReport, IndexError> {
    let embedder = HashProjectionEmbedder::new(dim, seed);
    {
        let conn = open_writable(db)?;
        record_embedder(&conn, &embedder)?;
    }
    ingest(records, &embedder, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, content: &str, created: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            content: content.into(),
            kind: "assistant".into(),
            session_id: "s1".into(),
            project: "core".into(),
            created_at: created.into(),
            tool_name: None,
            file: None,
        }
    }

    #[test]
    fn timestamps() {
        assert!(parse_timestamp("2026-03-12T16:24:00Z").is_some());
        assert!(parse_timestamp("2026-03-12T16:24:00+02:00").is_some());
        assert!(parse_timestamp("2026-03-12 16:24:00").is_some());
        assert!(parse_timestamp("2026-03-12").is_some());
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn ingest_counts_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("c.db");
        let recs = vec![
            (1, record("a", "alpha beta", "2026-01-01T00:00:00Z")),
            (2, record("b", "beta gamma", "2026-01-02T00:00:00Z")),
            (3, record("a", "dup", "2026-01-03T00:00:00Z")),
            (4, record("c", "gamma delta", "not a date")),
        ];
        let report = index_records(&recs, &db, 16, 1).unwrap();
        assert_eq!(
            report.counts,
            IngestCounts {
                inserted: 2,
                skipped_duplicate: 1,
                rejected: 1
            }
        );
        assert_eq!(report.rejected[0].line, 4);

        // Re-ingesting the same ids skips them all.
        let again = index_records(&recs[..2], &db, 16, 1).unwrap();
        assert_eq!(again.counts.inserted, 0);
        assert_eq!(again.counts.skipped_duplicate, 2);

        let loaded = LoadedIndex::open(&db).unwrap();
        assert_eq!(loaded.store.len(), 2);
        assert_eq!(loaded.embedder.seed(), 1);
        let conn = loaded.connect().unwrap();
        let fts: i64 = conn
            .query_row("SELECT COUNT(*) FROM chunks_fts WHERE chunks_fts MATCH 'beta'", [], |r| r.get(0))
            .unwrap();
        assert_eq!(fts, 2);
    }

    #[test]
    fn dim_change_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("c.db");
        let recs = vec![(1, record("a", "alpha", "2026-01-01"))];
        index_records(&recs, &db, 16, 1).unwrap();
        assert!(matches!(
            index_records(&recs, &db, 32, 1),
            Err(IndexError::DimMismatch { .. })
        ));
    }
}
