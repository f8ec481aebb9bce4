//! Query materializer.
//!
//! One agent statement runs as three phases:
//!
//! 1. pre-filter: the optional second `vec_ops()` argument is a read-only
//!    `SELECT` whose `id` column defines which chunks enter scoring;
//! 2. scoring: the modulation pipeline runs over those candidates and the
//!    top `pool` rows land in a per-statement temp table `(id, score)`;
//!    `keyword()` lands BM25 hits in a temp table `(id, rank, snippet)`;
//! 3. compose: each pseudo-call is replaced by its temp table name and the
//!    rewritten statement runs on the same read-only connection.
//!
//! Temp tables live on the statement's connection and are dropped when the
//! statement finishes, including on error.

pub mod scan;
pub mod schema;

use std::path::Path;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::Serialize;
use thiserror::Error;

use crate::embed::Embedder;
use crate::grammar::{self, GrammarError};
use crate::modulation::{run_pipeline, PipelineError};
use crate::store::EmbeddingStore;

pub use scan::{contains_pseudo_syntax, scan, splice, PseudoCall, PseudoKind, ScanError};

/// Upper bound on rows materialized by one `keyword()` call.
pub const KEYWORD_LIMIT: usize = 1000;

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error("read-only SQL: {0}")]
    ReadOnly(String),
    #[error("vec_ops tokens: {0}")]
    Grammar(#[from] GrammarError),
    #[error("Phase 2 scoring failed: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("Phase 1 pre-filter failed: {0}")]
    PreFilter(String),
    #[error("Phase 1 pre-filter failed: query must return an `id` column (got: {0})")]
    PreFilterSchema(String),
    #[error("keyword({term:?}) failed: {message}")]
    Keyword { term: String, message: String },
    #[error("rewritten SQL is invalid: {message}\n  original:  {original}\n  rewritten: {rewritten}")]
    InvalidRewrite {
        original: String,
        rewritten: String,
        message: String,
    },
    #[error("unknown preset @{name}; available: {}", available.iter().map(|p| format!("@{p}")).collect::<Vec<_>>().join(", "))]
    UnknownPreset { name: String, available: Vec<String> },
    #[error("sql error: {0}")]
    Sql(#[from] rusqlite::Error),
}

/// What a statement runs against.
#[derive(Clone, Copy)]
pub struct QueryContext<'a> {
    pub store: &'a EmbeddingStore,
    pub embedder: &'a dyn Embedder,
    /// Query time, epoch seconds. Chunk ages are measured from here.
    pub now: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Cell::Integer(i) => Some(*i),
            _ => None,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(x) => write!(f, "{x:.4}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Blob(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ResultSet {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of one column, in row order.
    pub fn values<'a>(&'a self, name: &str) -> impl Iterator<Item = &'a Cell> + 'a {
        let idx = self.column(name);
        self.rows.iter().filter_map(move |r| idx.map(|i| &r[i]))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TempTable {
    pub name: String,
    pub kind: PseudoKind,
    pub rows: usize,
    /// Candidates that entered scoring (vec_ops only).
    pub candidates: Option<usize>,
    /// Rows returned by the pre-filter, before unknown ids were dropped.
    pub prefilter_rows: Option<usize>,
}

impl Serialize for PseudoKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaterializedQuery {
    pub rewritten_sql: String,
    pub temp_tables: Vec<TempTable>,
    pub plan_note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOutput {
    pub materialized: MaterializedQuery,
    pub result: ResultSet,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Output {
    Rows(QueryOutput),
    Preset {
        name: String,
        sections: Vec<(String, ResultSet)>,
    },
}

/// Opens the database read-only. Temp tables still work: they live in the
/// connection's private temp schema.
pub fn open_read_only(path: impl AsRef<Path>) -> rusqlite::Result<Connection> {
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
    )
}

/// Drops every registered temp table when it goes out of scope.
struct TempTables<'c> {
    conn: &'c Connection,
    names: Vec<String>,
}

impl Drop for TempTables<'_> {
    fn drop(&mut self) {
        for name in &self.names {
            let _ = self.conn.execute_batch(&format!("DROP TABLE IF EXISTS temp.{name}"));
        }
    }
}

fn temp_name(kind: PseudoKind, ordinal: usize) -> String {
    format!("_pem_{}_{}_{:08x}", kind.name(), ordinal, rand::random::<u32>())
}

fn require_read_only_head(sql: &str, what: &str) -> Result<(), MaterializeError> {
    match scan::statement_head(sql)?.as_deref() {
        Some("SELECT") | Some("WITH") => Ok(()),
        Some(other) => Err(MaterializeError::ReadOnly(format!(
            "{what} must be a SELECT or WITH statement, got {other}"
        ))),
        None => Err(MaterializeError::ReadOnly(format!(
            "{what} must be a SELECT or WITH statement"
        ))),
    }
}

/// Routes `@preset` strings to [`run_preset`] and everything else to [`run`].
pub fn execute(conn: &Connection, ctx: &QueryContext<'_>, input: &str) -> Result<Output, MaterializeError> {
    let trimmed = input.trim();
    if let Some(rest) = trimmed.strip_prefix('@') {
        let name = rest.split_whitespace().next().unwrap_or("");
        let sections = run_preset(conn, ctx, name)?;
        return Ok(Output::Preset {
            name: name.to_string(),
            sections,
        });
    }
    run(conn, ctx, trimmed).map(Output::Rows)
}

/// Materializes and executes one read-only statement.
pub fn run(conn: &Connection, ctx: &QueryContext<'_>, sql: &str) -> Result<QueryOutput, MaterializeError> {
    require_read_only_head(sql, "statement")?;
    let calls = scan(sql)?;

    let mut tables = TempTables {
        conn,
        names: Vec::with_capacity(calls.len()),
    };
    let mut infos = Vec::with_capacity(calls.len());
    let mut plan = Vec::new();
    for (i, call) in calls.iter().enumerate() {
        let name = temp_name(call.kind, i);
        let info = match call.kind {
            PseudoKind::VecOps => {
                let prefilter = call.args.get(1).map(String::as_str);
                // Register before creating so a failure midway still drops it.
                tables.names.push(name.clone());
                execute_vec_ops(conn, ctx, &call.args[0], prefilter, &name)?
            }
            PseudoKind::Keyword => {
                tables.names.push(name.clone());
                execute_keyword(conn, &call.args[0], &name)?
            }
        };
        match (info.prefilter_rows, info.candidates) {
            (Some(p), Some(c)) => plan.push(format!(
                "phase 1: {} pre-filter returned {p} ids ({} not embedded)",
                name,
                p.saturating_sub(c)
            )),
            (None, Some(c)) => plan.push(format!("phase 1: {name} no pre-filter, {c} candidates")),
            _ => {}
        }
        plan.push(format!("phase 2: {} {} -> {} rows", call.kind, name, info.rows));
        infos.push(info);
    }

    let rewritten = splice(sql, &calls, &tables.names);
    if contains_pseudo_syntax(&rewritten)? {
        return Err(MaterializeError::InvalidRewrite {
            original: sql.to_string(),
            rewritten,
            message: "pseudo-function syntax survived rewriting".into(),
        });
    }
    let mut stmt = conn.prepare(&rewritten).map_err(|e| {
        if calls.is_empty() {
            MaterializeError::Sql(e)
        } else {
            MaterializeError::InvalidRewrite {
                original: sql.to_string(),
                rewritten: rewritten.clone(),
                message: e.to_string(),
            }
        }
    })?;
    if !stmt.readonly() {
        return Err(MaterializeError::ReadOnly("statement would modify the database".into()));
    }
    let result = collect(&mut stmt)?;
    plan.push(format!("phase 3: compose -> {} rows", result.rows.len()));
    drop(stmt);

    Ok(QueryOutput {
        materialized: MaterializedQuery {
            rewritten_sql: rewritten,
            temp_tables: infos,
            plan_note: plan.join("\n"),
        },
        result,
    })
}

fn collect(stmt: &mut rusqlite::Statement<'_>) -> Result<ResultSet, MaterializeError> {
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
    let n = columns.len();
    let mut rows = Vec::new();
    let mut cursor = stmt.raw_query();
    while let Some(row) = cursor.next()? {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(Cell::from_ref(row.get_ref(i)?));
        }
        rows.push(out);
    }
    Ok(ResultSet { columns, rows })
}

/// Phase 1: runs the pre-filter and returns its `id` column.
pub fn run_prefilter(conn: &Connection, sql: &str) -> Result<Vec<String>, MaterializeError> {
    require_read_only_head(sql, "pre-filter").map_err(|e| match e {
        MaterializeError::ReadOnly(m) => MaterializeError::PreFilter(m),
        other => other,
    })?;
    let inner = scan(sql).map_err(|e| MaterializeError::PreFilter(e.to_string()))?;
    if !inner.is_empty() {
        return Err(MaterializeError::PreFilter(
            "pseudo-functions cannot appear inside a pre-filter".into(),
        ));
    }
    let mut stmt = conn
        .prepare(sql)
        .map_err(|e| MaterializeError::PreFilter(e.to_string()))?;
    if !stmt.readonly() {
        return Err(MaterializeError::PreFilter("pre-filter would modify the database".into()));
    }
    let names = stmt.column_names();
    let col = names
        .iter()
        .position(|c| c.eq_ignore_ascii_case("id"))
        .ok_or_else(|| MaterializeError::PreFilterSchema(names.join(", ")))?;
    let mut ids = Vec::new();
    let mut rows = stmt.raw_query();
    loop {
        let row = match rows.next() {
            Ok(Some(row)) => row,
            Ok(None) => break,
            Err(e) => return Err(MaterializeError::PreFilter(e.to_string())),
        };
        match row.get_ref(col).map_err(|e| MaterializeError::PreFilter(e.to_string()))? {
            ValueRef::Text(t) => ids.push(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Integer(i) => ids.push(i.to_string()),
            ValueRef::Real(f) => ids.push(f.to_string()),
            ValueRef::Null | ValueRef::Blob(_) => {}
        }
    }
    Ok(ids)
}

/// Phases 1 and 2 for one `vec_ops()` call; writes `(id, score)` rows to `table`.
pub fn execute_vec_ops(
    conn: &Connection,
    ctx: &QueryContext<'_>,
    tokens: &str,
    prefilter: Option<&str>,
    table: &str,
) -> Result<TempTable, MaterializeError> {
    let parsed = grammar::parse(tokens)?;
    let (view, prefilter_rows) = match prefilter {
        Some(sql) => {
            let ids = run_prefilter(conn, sql)?;
            let n = ids.len();
            (ctx.store.subset(ids, ctx.now), Some(n))
        }
        None => (ctx.store.full_view(ctx.now), None),
    };
    let scored = run_pipeline(&parsed.spec, parsed.query_text(), &view, ctx.embedder)?;

    conn.execute_batch(&format!(
        "CREATE TEMP TABLE {table} (id TEXT PRIMARY KEY, score REAL NOT NULL)"
    ))?;
    conn.execute_batch("SAVEPOINT pem_fill")?;
    let fill = || -> rusqlite::Result<()> {
        let mut insert = conn.prepare(&format!("INSERT INTO temp.{table}(id, score) VALUES (?1, ?2)"))?;
        for c in &scored {
            insert.execute(rusqlite::params![c.id, f64::from(c.score)])?;
        }
        Ok(())
    };
    match fill() {
        Ok(()) => conn.execute_batch("RELEASE pem_fill")?,
        Err(e) => {
            let _ = conn.execute_batch("ROLLBACK TO pem_fill; RELEASE pem_fill");
            return Err(e.into());
        }
    }
    Ok(TempTable {
        name: table.to_string(),
        kind: PseudoKind::VecOps,
        rows: scored.len(),
        candidates: Some(view.len()),
        prefilter_rows,
    })
}

/// Quotes a term as an FTS5 phrase.
fn fts_phrase(term: &str) -> String {
    format!("\"{}\"", term.replace('"', "\"\""))
}

/// BM25 full-text search; writes `(id, rank, snippet)` rows to `table`, with
/// `rank` positive and higher meaning a better match.
pub fn execute_keyword(conn: &Connection, term: &str, table: &str) -> Result<TempTable, MaterializeError> {
    let term_err = |message: String| MaterializeError::Keyword {
        term: term.to_string(),
        message,
    };
    if term.trim().is_empty() {
        return Err(term_err("search term is empty".into()));
    }
    conn.execute_batch(&format!(
        "CREATE TEMP TABLE {table} (id TEXT, rank REAL NOT NULL, snippet TEXT)"
    ))?;
    let fill = format!(
        "INSERT INTO temp.{table}(id, rank, snippet)
         SELECT c.id, -bm25(chunks_fts), snippet(chunks_fts, 0, '[', ']', '...', 12)
         FROM chunks_fts JOIN chunks c ON c.rowid = chunks_fts.rowid
         WHERE chunks_fts MATCH ?1
         ORDER BY bm25(chunks_fts), c.id
         LIMIT {KEYWORD_LIMIT}"
    );
    let rows = match conn.execute(&fill, [term]) {
        Ok(n) => n,
        Err(first) => {
            // Operator characters (dots, hyphens, quotes) break the FTS5 query
            // syntax; retry the whole term as a phrase.
            conn.execute_batch(&format!("DELETE FROM temp.{table}"))?;
            conn.execute(&fill, [fts_phrase(term)])
                .map_err(|second| term_err(format!("{first}; as quoted phrase: {second}")))?
        }
    };
    Ok(TempTable {
        name: table.to_string(),
        kind: PseudoKind::Keyword,
        rows,
        candidates: None,
        prefilter_rows: None,
    })
}

pub fn preset_names(conn: &Connection) -> Result<Vec<String>, MaterializeError> {
    let mut stmt = conn.prepare("SELECT name FROM _presets ORDER BY name")?;
    let names = stmt
        .query_map([], |r| r.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;
    Ok(names)
}

/// Runs every `-- @query:` section of a stored preset through [`run`].
pub fn run_preset(
    conn: &Connection,
    ctx: &QueryContext<'_>,
    name: &str,
) -> Result<Vec<(String, ResultSet)>, MaterializeError> {
    let script: Option<String> = {
        let mut stmt = conn.prepare("SELECT sql FROM _presets WHERE name = ?1")?;
        let mut rows = stmt.query([name])?;
        match rows.next()? {
            Some(r) => Some(r.get(0)?),
            None => None,
        }
    };
    let Some(script) = script else {
        return Err(MaterializeError::UnknownPreset {
            name: name.to_string(),
            available: preset_names(conn)?,
        });
    };
    schema::split_sections(&script)
        .into_iter()
        .map(|(section, sql)| Ok((section, run(conn, ctx, &sql)?.result)))
        .collect()
}

/// Runs the orientation preset.
pub fn orient(conn: &Connection, ctx: &QueryContext<'_>) -> Result<Vec<(String, ResultSet)>, MaterializeError> {
    run_preset(conn, ctx, "orient")
}
