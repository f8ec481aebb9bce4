//! Relational schema, full-text index, and stored presets.

use rusqlite::{params, Connection};

pub const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS chunks (
    id          TEXT PRIMARY KEY,
    content     TEXT NOT NULL,
    type        TEXT,
    session_id  TEXT,
    project     TEXT,
    tool_name   TEXT,
    file        TEXT,
    created_at  TEXT NOT NULL,
    timestamp   REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS chunks_type ON chunks(type);
CREATE INDEX IF NOT EXISTS chunks_session ON chunks(session_id);
CREATE INDEX IF NOT EXISTS chunks_created ON chunks(created_at);

CREATE VIRTUAL TABLE IF NOT EXISTS chunks_fts USING fts5(
    content,
    content='chunks',
    content_rowid='rowid'
);

CREATE TRIGGER IF NOT EXISTS chunks_fts_insert AFTER INSERT ON chunks BEGIN
    INSERT INTO chunks_fts(rowid, content) VALUES (new.rowid, new.content);
END;
CREATE TRIGGER IF NOT EXISTS chunks_fts_delete BEFORE DELETE ON chunks BEGIN
    INSERT INTO chunks_fts(chunks_fts, rowid, content) VALUES ('delete', old.rowid, old.content);
END;
CREATE TRIGGER IF NOT EXISTS chunks_fts_update AFTER UPDATE ON chunks BEGIN
    INSERT INTO chunks_fts(chunks_fts, rowid, content) VALUES ('delete', old.rowid, old.content);
    INSERT INTO chunks_fts(rowid, content) VALUES (new.rowid, new.content);
END;

CREATE VIEW IF NOT EXISTS messages AS
    SELECT id, content, timestamp, created_at, session_id, project, type, tool_name, file
    FROM chunks WHERE type IS NULL OR type <> 'file';

CREATE VIEW IF NOT EXISTS sessions AS
    SELECT session_id, project,
           COUNT(*) AS message_count,
           MIN(created_at) AS started_at,
           MAX(created_at) AS ended_at
    FROM chunks GROUP BY session_id;

CREATE TABLE IF NOT EXISTS _meta (
    key   TEXT PRIMARY KEY,
    value TEXT
);

CREATE TABLE IF NOT EXISTS _presets (
    name        TEXT PRIMARY KEY,
    description TEXT NOT NULL,
    params      TEXT NOT NULL DEFAULT '',
    sql         TEXT NOT NULL
);
";

pub const ORIENT_PRESET: &str = "-- @query: now
SELECT datetime('now') AS now, 'UTC' AS timezone;

-- @query: about
SELECT value AS description FROM _meta WHERE key = 'description';

-- @query: shape
SELECT 'chunks' AS what, COUNT(*) AS n FROM chunks
UNION ALL
SELECT 'sources', COUNT(DISTINCT session_id) FROM chunks;

-- @query: query_surface
SELECT CASE m.type WHEN 'view' THEN 'view' ELSE 'table' END AS kind,
    m.name AS name,
    GROUP_CONCAT(p.name, ', ') AS columns,
    CASE m.name
        WHEN 'chunks' THEN 'Unified surface: all chunks. type: user_prompt|assistant|tool_call|file.'
        WHEN 'messages' THEN 'Message chunks only (no file bodies).'
        WHEN 'sessions' THEN 'One row per source session.'
        ELSE ''
    END AS note
FROM sqlite_master m, pragma_table_info(m.name) p
WHERE m.type = 'view' OR (m.type = 'table' AND m.name = 'chunks')
GROUP BY m.name
UNION ALL
SELECT 'table_function', 'vec_ops', '(id, score)',
    'vec_ops(''similar:QUERY TOKENS'', pre_filter_sql). Semantic retrieval; use after FROM/JOIN.'
UNION ALL
SELECT 'table_function', 'keyword', '(id, rank, snippet)',
    'keyword(term). BM25 full-text search; rank is positive, higher is better.'
ORDER BY kind, name;

-- @query: presets
SELECT name, description, params FROM _presets ORDER BY name;
";

const RECENT_PRESET: &str = "-- @query: recent
SELECT id, created_at, type, session_id, substr(content, 1, 120) AS excerpt
FROM chunks ORDER BY timestamp DESC, id LIMIT 20;
";

const TYPES_PRESET: &str = "-- @query: types
SELECT type, COUNT(*) AS n FROM chunks GROUP BY type ORDER BY n DESC, type;
";

pub const DEFAULT_DESCRIPTION: &str =
    "Indexed chunks with metadata. Each source is a session, each chunk is a message, tool call, or file snapshot.";

/// Creates tables, views, and the default presets if they are missing.
pub fn init(conn: &Connection) -> rusqlite::Result<()> {
    conn.execute_batch(SCHEMA)?;
    let presets = [
        ("orient", "Full orientation: schema, counts, functions, presets", ORIENT_PRESET),
        ("recent", "Latest 20 chunks", RECENT_PRESET),
        ("types", "Chunk counts by type", TYPES_PRESET),
    ];
    for (name, description, sql) in presets {
        conn.execute(
            "INSERT OR IGNORE INTO _presets(name, description, params, sql) VALUES (?1, ?2, '', ?3)",
            params![name, description, sql],
        )?;
    }
    conn.execute(
        "INSERT OR IGNORE INTO _meta(key, value) VALUES ('description', ?1)",
        params![DEFAULT_DESCRIPTION],
    )?;
    Ok(())
}

pub fn set_meta(conn: &Connection, key: &str, value: &str) -> rusqlite::Result<()> {
    conn.execute(
        "INSERT INTO _meta(key, value) VALUES (?1, ?2)
         ON CONFLICT(key) DO UPDATE SET value = excluded.value",
        params![key, value],
    )?;
    Ok(())
}

pub fn get_meta(conn: &Connection, key: &str) -> rusqlite::Result<Option<String>> {
    let mut stmt = conn.prepare("SELECT value FROM _meta WHERE key = ?1")?;
    let mut rows = stmt.query(params![key])?;
    match rows.next()? {
        Some(row) => row.get(0),
        None => Ok(None),
    }
}

/// Splits a preset script into `(section name, sql)` pairs on
/// `-- @query: <name>` marker lines.
pub fn split_sections(script: &str) -> Vec<(String, String)> {
    let mut sections: Vec<(String, String)> = Vec::new();
    for line in script.lines() {
        if let Some(name) = line.trim().strip_prefix("-- @query:") {
            sections.push((name.trim().to_string(), String::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    sections
        .into_iter()
        .map(|(n, b)| (n, b.trim().to_string()))
        .filter(|(_, b)| !b.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orient_has_five_sections() {
        let names: Vec<String> = split_sections(ORIENT_PRESET).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["now", "about", "shape", "query_surface", "presets"]);
    }

    #[test]
    fn init_is_idempotent() {
        let conn = Connection::open_in_memory().unwrap();
        init(&conn).unwrap();
        init(&conn).unwrap();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM _presets", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 3);
        set_meta(&conn, "dim", "128").unwrap();
        set_meta(&conn, "dim", "64").unwrap();
        assert_eq!(get_meta(&conn, "dim").unwrap().as_deref(), Some("64"));
        assert_eq!(get_meta(&conn, "nope").unwrap(), None);
    }
}
