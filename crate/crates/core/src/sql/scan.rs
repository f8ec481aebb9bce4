//! Lexical scanning for pseudo-function calls.
//!
//! This is deliberately not a SQL parser. The lexer understands string
//! literals (with `''` escapes), quoted identifiers, and comments, which is
//! enough to find `vec_ops(...)` / `keyword(...)` in FROM/JOIN position,
//! extract their literal arguments, and splice in temp table names. Anything
//! it cannot make sense of is an error rather than a guess.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("rewrite failed: unterminated {what} starting at byte {at}")]
    Unterminated { what: &'static str, at: usize },
    #[error("rewrite failed: unbalanced parentheses at byte {at}")]
    Unbalanced { at: usize },
    #[error("only a single statement is allowed (found more SQL after ';' at byte {at})")]
    MultiStatement { at: usize },
    #[error("{name}() at byte {at} is a table source: always use after FROM or JOIN")]
    Misplaced { name: &'static str, at: usize },
    #[error("{name}() at byte {at}: {reason}")]
    BadArguments {
        name: &'static str,
        at: usize,
        reason: String,
    },
    #[error("empty statement")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoKind {
    VecOps,
    Keyword,
}

impl PseudoKind {
    pub fn name(self) -> &'static str {
        match self {
            PseudoKind::VecOps => "vec_ops",
            PseudoKind::Keyword => "keyword",
        }
    }

    fn from_word(word: &str) -> Option<Self> {
        if word.eq_ignore_ascii_case("vec_ops") {
            Some(PseudoKind::VecOps)
        } else if word.eq_ignore_ascii_case("keyword") {
            Some(PseudoKind::Keyword)
        } else {
            None
        }
    }
}

impl fmt::Display for PseudoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCall {
    pub kind: PseudoKind,
    /// Unescaped literal arguments.
    pub args: Vec<String>,
    /// Byte range from the function name through the closing parenthesis.
    pub span: Range<usize>,
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word,
    Str(String),
    QuotedIdent,
    Punct(u8),
    Other,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub kind: Tok,
    pub span: Range<usize>,
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b >= 0x80
}

fn is_ident_continue(b: u8) -> bool {
    is_ident_start(b) || b.is_ascii_digit() || b == b'$'
}

pub(crate) fn lex(sql: &str) -> Result<Vec<Token>, ScanError> {
    let b = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'-' && b.get(i + 1) == Some(&b'-') {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if c == b'/' && b.get(i + 1) == Some(&b'*') {
            i += 2;
            loop {
                if i + 1 >= b.len() {
                    return Err(ScanError::Unterminated {
                        what: "comment",
                        at: start,
                    });
                }
                if b[i] == b'*' && b[i + 1] == b'/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
        } else if c == b'\'' {
            let mut value = Vec::new();
            i += 1;
            loop {
                match b.get(i) {
                    None => {
                        return Err(ScanError::Unterminated {
                            what: "string literal",
                            at: start,
                        })
                    }
                    Some(b'\'') if b.get(i + 1) == Some(&b'\'') => {
                        value.push(b'\'');
                        i += 2;
                    }
                    Some(b'\'') => {
                        i += 1;
                        break;
                    }
                    Some(&x) => {
                        value.push(x);
                        i += 1;
                    }
                }
            }
            // Literal boundaries are ASCII quotes, so the content is valid UTF-8.
            let value = String::from_utf8(value).expect("slice of a str between ASCII quotes");
            out.push(Token {
                kind: Tok::Str(value),
                span: start..i,
            });
        } else if c == b'"' || c == b'`' || c == b'[' {
            let close = if c == b'[' { b']' } else { c };
            i += 1;
            loop {
                match b.get(i) {
                    None => {
                        return Err(ScanError::Unterminated {
                            what: "quoted identifier",
                            at: start,
                        })
                    }
                    Some(&x) if x == close && close != b']' && b.get(i + 1) == Some(&close) => i += 2,
                    Some(&x) if x == close => {
                        i += 1;
                        break;
                    }
                    Some(_) => i += 1,
                }
            }
            out.push(Token {
                kind: Tok::QuotedIdent,
                span: start..i,
            });
        } else if is_ident_start(c) {
            while i < b.len() && is_ident_continue(b[i]) {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Word,
                span: start..i,
            });
        } else if c.is_ascii_digit() || (c == b'.' && b.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'.') {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Other,
                span: start..i,
            });
        } else {
            i += 1;
            out.push(Token {
                kind: Tok::Punct(c),
                span: start..i,
            });
        }
    }
    Ok(out)
}

fn word<'a>(sql: &'a str, t: &Token) -> Option<&'a str> {
    matches!(t.kind, Tok::Word).then(|| &sql[t.span.clone()])
}

fn is_word(sql: &str, t: Option<&Token>, expect: &str) -> bool {
    t.and_then(|t| word(sql, t))
        .is_some_and(|w| w.eq_ignore_ascii_case(expect))
}

/// Words that can follow a table source but are not an alias.
const NON_ALIAS: &[&str] = &[
    "where", "join", "inner", "left", "right", "full", "outer", "cross", "natural", "on", "using",
    "order", "group", "having", "limit", "offset", "union", "intersect", "except", "window",
];

/// Leading keyword of the statement, uppercased, skipping opening parentheses.
pub fn statement_head(sql: &str) -> Result<Option<String>, ScanError> {
    let tokens = lex(sql)?;
    Ok(tokens
        .iter()
        .find(|t| !matches!(t.kind, Tok::Punct(b'(')))
        .and_then(|t| word(sql, t))
        .map(str::to_ascii_uppercase))
}

/// Finds every pseudo-function call in a single statement.
pub fn scan(sql: &str) -> Result<Vec<PseudoCall>, ScanError> {
    let tokens = lex(sql)?;
    if tokens.is_empty() {
        return Err(ScanError::Empty);
    }

    let mut depth: i64 = 0;
    for (i, t) in tokens.iter().enumerate() {
        match t.kind {
            Tok::Punct(b'(') => depth += 1,
            Tok::Punct(b')') => {
                depth -= 1;
                if depth < 0 {
                    return Err(ScanError::Unbalanced { at: t.span.start });
                }
            }
            Tok::Punct(b';') => {
                if let Some(next) = tokens[i + 1..].iter().find(|t| t.kind != Tok::Punct(b';')) {
                    return Err(ScanError::MultiStatement {
                        at: next.span.start,
                    });
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(ScanError::Unbalanced { at: sql.len() });
    }

    let mut calls = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let kind = match word(sql, t).and_then(PseudoKind::from_word) {
            Some(k) if matches!(tokens.get(i + 1).map(|t| &t.kind), Some(Tok::Punct(b'('))) => k,
            _ => {
                i += 1;
                continue;
            }
        };
        let name = kind.name();
        let at = t.span.start;
        let prev = i.checked_sub(1).map(|p| &tokens[p]);
        if !(is_word(sql, prev, "from") || is_word(sql, prev, "join")) {
            return Err(ScanError::Misplaced { name, at });
        }
        let bad = |reason: &str| ScanError::BadArguments {
            name,
            at,
            reason: reason.to_string(),
        };

        // name ( 'lit' [, 'lit']* )
        let mut args = Vec::new();
        let mut j = i + 2;
        loop {
            match tokens.get(j).map(|t| &t.kind) {
                Some(Tok::Str(s)) => args.push(s.clone()),
                Some(Tok::Punct(b')')) if args.is_empty() => return Err(bad("missing arguments")),
                _ => return Err(bad("arguments must be single-quoted string literals")),
            }
            j += 1;
            match tokens.get(j).map(|t| &t.kind) {
                Some(Tok::Punct(b',')) => j += 1,
                Some(Tok::Punct(b')')) => break,
                _ => return Err(bad("expected ',' or ')' after argument")),
            }
        }
        let close = &tokens[j];
        match kind {
            PseudoKind::VecOps if args.len() > 2 => {
                return Err(bad("takes a token string and an optional pre-filter query"))
            }
            PseudoKind::Keyword if args.len() != 1 => return Err(bad("takes exactly one search term")),
            _ => {}
        }

        let mut k = j + 1;
        let mut alias = None;
        if is_word(sql, tokens.get(k), "as") {
            k += 1;
            match tokens.get(k) {
                Some(t) if matches!(t.kind, Tok::Word | Tok::QuotedIdent) => {
                    alias = Some(sql[t.span.clone()].to_string());
                }
                _ => return Err(bad("AS must be followed by an alias")),
            }
        } else if let Some(w) = tokens.get(k).and_then(|t| word(sql, t)) {
            if !NON_ALIAS.iter().any(|kw| w.eq_ignore_ascii_case(kw)) {
                alias = Some(w.to_string());
            }
        }

        calls.push(PseudoCall {
            kind,
            args,
            span: t.span.start..close.span.end,
            alias,
        });
        i = j + 1;
    }
    Ok(calls)
}

/// True if any `vec_ops(` / `keyword(` appears outside literals and comments.
pub fn contains_pseudo_syntax(sql: &str) -> Result<bool, ScanError> {
    let tokens = lex(sql)?;
    Ok(tokens.windows(2).any(|w| {
        word(sql, &w[0]).and_then(PseudoKind::from_word).is_some() && w[1].kind == Tok::Punct(b'(')
    }))
}

/// Replaces each call span with its table name, back to front.
pub fn splice(sql: &str, calls: &[PseudoCall], names: &[String]) -> String {
    assert_eq!(calls.len(), names.len(), "one table name per call");
    let mut order: Vec<usize> = (0..calls.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(calls[i].span.start));
    let mut out = sql.to_string();
    for i in order {
        out.replace_range(calls[i].span.clone(), &names[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SUPPRESSION_QUERY: &str = "SELECT v.id, v.score, m.content
FROM vec_ops(
    'similar:how the system works architecture
     diverse
     suppress:website landing page design tagline
     suppress:documentation readme community post',
    'SELECT id FROM messages
     WHERE type = ''assistant'' AND length(content) > 300') v
JOIN messages m ON v.id = m.id
ORDER BY v.score DESC LIMIT 5";

    const HYBRID_QUERY: &str = "SELECT k.id, k.rank, v.score, m.content
FROM keyword('provenance') k
JOIN vec_ops('similar:file identity tracking diverse') v
    ON k.id = v.id
JOIN messages m ON k.id = m.id
ORDER BY v.score DESC LIMIT 10";

    #[test]
    fn finds_vec_ops_with_prefilter() {
        let calls = scan(SUPPRESSION_QUERY).unwrap();
        assert_eq!(calls.len(), 1);
        let c = &calls[0];
        assert_eq!(c.kind, PseudoKind::VecOps);
        assert_eq!(c.args.len(), 2);
        assert!(c.args[1].contains("WHERE type = 'assistant' AND length(content) > 300"));
        assert_eq!(c.alias.as_deref(), Some("v"));
        assert!(SUPPRESSION_QUERY[c.span.clone()].starts_with("vec_ops("));
        assert!(SUPPRESSION_QUERY[c.span.clone()].ends_with("300')"));
    }

    #[test]
    fn plain_select_has_no_calls() {
        assert!(scan("SELECT * FROM messages").unwrap().is_empty());
    }

    #[test]
    fn hybrid_query_has_two_disjoint_calls() {
        let calls = scan(HYBRID_QUERY).unwrap();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].kind, PseudoKind::Keyword);
        assert_eq!(calls[1].kind, PseudoKind::VecOps);
        assert!(calls[0].span.end <= calls[1].span.start);
        let out = splice(HYBRID_QUERY, &calls, &["t_k".into(), "t_v".into()]);
        assert!(out.contains("FROM t_k k\nJOIN t_v v"));
        assert!(!contains_pseudo_syntax(&out).unwrap());
    }

    #[test]
    fn pseudo_syntax_inside_strings_and_comments_is_ignored() {
        let sql = "SELECT 'vec_ops(x)' AS s -- keyword('y')\n FROM t /* vec_ops('z') */";
        assert!(scan(sql).unwrap().is_empty());
        assert!(!contains_pseudo_syntax(sql).unwrap());
    }

    #[test]
    fn misplaced_call_is_an_error() {
        let err = scan("SELECT vec_ops('similar:x') FROM t").unwrap_err();
        assert!(err.to_string().contains("always use after FROM or JOIN"));
        assert!(matches!(scan("SELECT * FROM t, keyword('x') k"), Err(ScanError::Misplaced { .. })));
    }

    #[test]
    fn unbalanced_and_unterminated() {
        assert!(matches!(scan("SELECT * FROM vec_ops('similar:x' v"), Err(ScanError::Unbalanced { .. })));
        assert!(matches!(scan("SELECT (1 FROM t"), Err(ScanError::Unbalanced { .. })));
        assert!(matches!(scan("SELECT 1) FROM t"), Err(ScanError::Unbalanced { .. })));
        assert!(matches!(scan("SELECT 'abc FROM t"), Err(ScanError::Unterminated { .. })));
        assert!(matches!(scan("SELECT 1 /* x"), Err(ScanError::Unterminated { .. })));
    }

    #[test]
    fn multi_statement_rejected_but_trailing_semicolon_ok() {
        assert!(scan("SELECT 1;").unwrap().is_empty());
        assert!(matches!(
            scan("SELECT 1; DELETE FROM chunks"),
            Err(ScanError::MultiStatement { .. })
        ));
    }

    #[test]
    fn arity_and_literal_checks() {
        assert!(scan("SELECT * FROM keyword('a', 'b') k").is_err());
        assert!(scan("SELECT * FROM vec_ops('a', 'b', 'c') v").is_err());
        assert!(scan("SELECT * FROM vec_ops() v").is_err());
        assert!(scan("SELECT * FROM vec_ops(tokens) v").is_err());
    }

    #[test]
    fn alias_forms() {
        let c = &scan("SELECT * FROM vec_ops('similar:x') AS hits").unwrap()[0];
        assert_eq!(c.alias.as_deref(), Some("hits"));
        let c = &scan("SELECT * FROM keyword('x') WHERE 1").unwrap()[0];
        assert_eq!(c.alias, None);
    }

    #[test]
    fn cte_body_calls_are_found() {
        let sql = "WITH hits AS (SELECT id FROM vec_ops('similar:x')) SELECT * FROM hits";
        assert_eq!(scan(sql).unwrap().len(), 1);
        assert_eq!(statement_head(sql).unwrap().as_deref(), Some("WITH"));
    }

    #[test]
    fn column_named_keyword_is_not_a_call() {
        assert!(scan("SELECT keyword FROM tags").unwrap().is_empty());
    }
}
