//! Token grammar for `vec_ops()` first arguments.
//!
//! ```text
//! similar:TEXT  suppress:TEXT  decay:N  centroid:id1,id2  from:A to:B  pool:N  diverse
//! ```
//!
//! Tokens are whitespace-delimited and may appear in any order. A head with
//! a payload consumes the words after it until the next recognized head, so
//! `suppress:landing page copy` suppresses the whole phrase.

use std::fmt;

use thiserror::Error;

use crate::modulation::{
    Centroid, Decay, Diverse, ModulationSpec, Suppress, Trajectory, DEFAULT_CENTROID_ALPHA,
    DEFAULT_POOL,
};

pub const VALID_HEADS: &[&str] = &[
    "similar:", "suppress:", "decay:", "centroid:", "from:", "to:", "pool:", "diverse",
];

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("empty token string")]
    Empty,
    #[error("unknown token {token:?}; valid heads: {}", VALID_HEADS.join(" "))]
    UnknownHead { token: String },
    #[error("word {word:?} appears before any token head; start with similar: (valid heads: {})", VALID_HEADS.join(" "))]
    BareWord { word: String },
    #[error("{head} payload empty")]
    EmptyPayload { head: &'static str },
    #[error("{head} expects a positive number, got {token:?}")]
    BadNumber { head: &'static str, token: String },
    #[error("duplicate {head} token")]
    Duplicate { head: &'static str },
    #[error("{present} requires a matching {missing} token")]
    Unpaired {
        present: &'static str,
        missing: &'static str,
    },
    #[error("centroid: ids must be comma-separated without spaces, got {0:?}")]
    BadCentroidIds(String),
    #[error("a query needs similar: text or centroid: examples")]
    NoDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Similar,
    Suppress,
    Decay,
    Centroid,
    From,
    To,
    Pool,
    Diverse,
}

impl Head {
    fn name(self) -> &'static str {
        match self {
            Head::Similar => "similar:",
            Head::Suppress => "suppress:",
            Head::Decay => "decay:",
            Head::Centroid => "centroid:",
            Head::From => "from:",
            Head::To => "to:",
            Head::Pool => "pool:",
            Head::Diverse => "diverse",
        }
    }
}

enum WordKind<'a> {
    Head(Head, &'a str),
    /// Looks like `name:...` but `name` is not a head.
    Unknown,
    Plain,
}

fn classify(word: &str) -> WordKind<'_> {
    if word == "diverse" {
        return WordKind::Head(Head::Diverse, "");
    }
    for head in [
        Head::Similar,
        Head::Suppress,
        Head::Decay,
        Head::Centroid,
        Head::From,
        Head::To,
        Head::Pool,
    ] {
        if let Some(rest) = word.strip_prefix(head.name()) {
            return WordKind::Head(head, rest);
        }
    }
    // Lowercase identifier followed by ':' reads as an attempted head.
    if let Some((name, _)) = word.split_once(':') {
        let mut chars = name.chars();
        if chars.next().is_some_and(|c| c.is_ascii_lowercase())
            && chars.all(|c| c.is_ascii_lowercase() || c == '_')
        {
            return WordKind::Unknown;
        }
    }
    WordKind::Plain
}

#[derive(Debug, Clone)]
pub struct ParsedQuery {
    pub similar_text: String,
    pub spec: ModulationSpec,
    pub raw: String,
}

/// Equality ignores `raw`: two strings that decode to the same query are equal.
impl PartialEq for ParsedQuery {
    fn eq(&self, other: &Self) -> bool {
        self.similar_text == other.similar_text && self.spec == other.spec
    }
}

impl ParsedQuery {
    pub fn query_text(&self) -> Option<&str> {
        (!self.similar_text.is_empty()).then_some(self.similar_text.as_str())
    }
}

pub fn default_spec() -> ModulationSpec {
    ModulationSpec::default()
}

pub fn parse(input: &str) -> Result<ParsedQuery, GrammarError> {
    let words: Vec<&str> = input.split_whitespace().collect();
    if words.is_empty() {
        return Err(GrammarError::Empty);
    }

    // Group words into (head, payload words).
    let mut tokens: Vec<(Head, Vec<&str>)> = Vec::new();
    for word in words {
        match classify(word) {
            WordKind::Head(head, rest) => {
                let mut payload = Vec::new();
                if !rest.is_empty() {
                    payload.push(rest);
                }
                tokens.push((head, payload));
            }
            WordKind::Unknown => {
                return Err(GrammarError::UnknownHead {
                    token: word.to_string(),
                })
            }
            WordKind::Plain => match tokens.last_mut() {
                Some((head, payload)) if *head != Head::Diverse => payload.push(word),
                _ => {
                    return Err(GrammarError::BareWord {
                        word: word.to_string(),
                    })
                }
            },
        }
    }

    let mut similar: Option<String> = None;
    let mut from: Option<String> = None;
    let mut to: Option<String> = None;
    let mut spec = ModulationSpec::default();
    let mut pool_seen = false;

    fn set_once<T>(slot: &mut Option<T>, value: T, head: Head) -> Result<(), GrammarError> {
        if slot.is_some() {
            return Err(GrammarError::Duplicate { head: head.name() });
        }
        *slot = Some(value);
        Ok(())
    }

    for (head, payload) in tokens {
        if head == Head::Diverse {
            set_once(&mut spec.diverse, Diverse::default(), head)?;
            continue;
        }
        if payload.is_empty() {
            return Err(GrammarError::EmptyPayload { head: head.name() });
        }
        let text = payload.join(" ");
        match head {
            Head::Similar => set_once(&mut similar, text, head)?,
            Head::Suppress => spec.suppress.push(Suppress::new(text)),
            Head::Decay => {
                let n = parse_positive(&text, head)?;
                set_once(&mut spec.decay, Decay { half_life_days: n as f32 }, head)?;
            }
            Head::Pool => {
                if pool_seen {
                    return Err(GrammarError::Duplicate { head: head.name() });
                }
                pool_seen = true;
                spec.pool = text
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or(GrammarError::BadNumber {
                        head: head.name(),
                        token: text.clone(),
                    })?;
            }
            Head::Centroid => {
                if payload.len() != 1 {
                    return Err(GrammarError::BadCentroidIds(text));
                }
                let ids: Vec<String> = text.split(',').map(str::to_string).collect();
                if ids.iter().any(String::is_empty) {
                    return Err(GrammarError::BadCentroidIds(text));
                }
                set_once(
                    &mut spec.centroid,
                    Centroid {
                        ids,
                        alpha: DEFAULT_CENTROID_ALPHA,
                    },
                    head,
                )?;
            }
            Head::From => set_once(&mut from, text, head)?,
            Head::To => set_once(&mut to, text, head)?,
            Head::Diverse => unreachable!(),
        }
    }

    spec.trajectory = match (from, to) {
        (Some(from), Some(to)) => Some(Trajectory { from, to }),
        (Some(_), None) => {
            return Err(GrammarError::Unpaired {
                present: "from:",
                missing: "to:",
            })
        }
        (None, Some(_)) => {
            return Err(GrammarError::Unpaired {
                present: "to:",
                missing: "from:",
            })
        }
        (None, None) => None,
    };
    // Suppressions are additive, so order carries no meaning; fixing one makes
    // the float summation order independent of token order too.
    spec.suppress
        .sort_by(|a, b| a.text.cmp(&b.text));

    let similar_text = similar.unwrap_or_default();
    if similar_text.is_empty() && spec.centroid.is_none() {
        return Err(GrammarError::NoDirection);
    }
    Ok(ParsedQuery {
        similar_text,
        spec,
        raw: input.to_string(),
    })
}

fn parse_positive(text: &str, head: Head) -> Result<f64, GrammarError> {
    text.parse::<f64>()
        .ok()
        .filter(|n| n.is_finite() && *n > 0.0)
        .ok_or(GrammarError::BadNumber {
            head: head.name(),
            token: text.to_string(),
        })
}

/// Canonical token string: fixed token order, defaults omitted.
pub fn render(q: &ParsedQuery) -> String {
    q.to_string()
}

impl fmt::Display for ParsedQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if !self.similar_text.is_empty() {
            parts.push(format!("similar:{}", self.similar_text));
        }
        if let Some(c) = &self.spec.centroid {
            parts.push(format!("centroid:{}", c.ids.join(",")));
        }
        if let Some(t) = &self.spec.trajectory {
            parts.push(format!("from:{}", t.from));
            parts.push(format!("to:{}", t.to));
        }
        if let Some(d) = &self.spec.decay {
            parts.push(format!("decay:{}", d.half_life_days));
        }
        for s in &self.spec.suppress {
            parts.push(format!("suppress:{}", s.text));
        }
        if self.spec.diverse.is_some() {
            parts.push("diverse".into());
        }
        if self.spec.pool != DEFAULT_POOL {
            parts.push(format!("pool:{}", self.spec.pool));
        }
        f.write_str(&parts.join(" "))
    }
}
