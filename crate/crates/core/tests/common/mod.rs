#![allow(dead_code)]

use std::path::PathBuf;

use pem_core::index::{index_records, CorpusRecord, LoadedIndex};
use pem_core::sql::QueryContext;
use rusqlite::Connection;
use tempfile::TempDir;

/// 2027-01-15T08:00:00Z.
pub const NOW: f64 = 1_800_000_000.0;

pub fn record(id: &str, content: &str, kind: &str, session: &str, created_at: &str) -> CorpusRecord {
    CorpusRecord {
        id: id.into(),
        content: content.into(),
        kind: kind.into(),
        session_id: session.into(),
        project: "fixture".into(),
        created_at: created_at.into(),
        tool_name: None,
        file: None,
    }
}

/// An indexed database in a temporary directory.
pub struct TestDb {
    pub dir: TempDir,
    pub path: PathBuf,
    pub index: LoadedIndex,
}

impl TestDb {
    pub fn build(records: &[CorpusRecord], dim: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.db");
        let numbered: Vec<_> = records.iter().cloned().enumerate().map(|(i, r)| (i + 1, r)).collect();
        let report = index_records(&numbered, &path, dim, seed).unwrap();
        assert_eq!(report.counts.rejected, 0, "{:?}", report.rejected);
        let index = LoadedIndex::open(&path).unwrap();
        Self { dir, path, index }
    }

    pub fn connect(&self) -> Connection {
        self.index.connect().unwrap()
    }

    pub fn ctx(&self) -> QueryContext<'_> {
        QueryContext {
            store: &self.index.store,
            embedder: &self.index.embedder,
            now: NOW,
        }
    }
}

/// Text column values of `column`, in row order.
pub fn texts(rs: &pem_core::sql::ResultSet, column: &str) -> Vec<String> {
    rs.values(column).map(|c| c.as_text().expect("text cell").to_string()).collect()
}
