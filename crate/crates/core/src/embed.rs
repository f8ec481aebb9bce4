//! Text to vector.
//!
//! [`HashProjectionEmbedder`] is a deterministic bag-of-words embedder: each
//! lowercased whitespace token seeds a portable PRNG that draws a Gaussian
//! vector, and a text embeds as the normalized sum of its token vectors.
//! It gives tests a controllable similarity structure with no model files.
//!
//! [`CommandEmbedder`] talks to an external model process over
//! newline-delimited JSON on stdio.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("{origin}: payload empty")]
    EmptyText { origin: String },
    #[error("embedder returned {actual} dimensions, expected {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedder returned a zero or non-finite vector")]
    Degenerate,
    #[error("external embedder failed: {0}")]
    External(String),
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds one text segment into a unit-norm vector.
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;

    /// Like [`Embedder::embed`] but labels an empty-text error with the
    /// token that supplied the text.
    fn embed_for(&self, origin: &str, text: &str) -> Result<Vec<f32>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText {
                origin: origin.to_string(),
            });
        }
        self.embed(text)
    }
}

#[derive(Debug, Clone)]
pub struct HashProjectionEmbedder {
    dim: usize,
    seed: u64,
}

impl HashProjectionEmbedder {
    /// # Panics
    ///
    /// If `dim < 2`.
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "hash embedder needs dim >= 2");
        Self { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit vector assigned to a single (already lowercased) token.
    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        self.add_token(token, &mut acc);
        finish(acc).expect("gaussian draw is never all zero")
    }

    fn add_token(&self, token: &str, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(fnv1a64(token.as_bytes()) ^ self.seed));
        let draw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = draw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, d) in acc.iter_mut().zip(&draw) {
            *a += d / norm;
        }
    }
}

impl Embedder for HashProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut acc = vec![0.0f64; self.dim];
        let mut any = false;
        for token in text.split_whitespace() {
            self.add_token(&token.to_lowercase(), &mut acc);
            any = true;
        }
        if !any {
            return Err(EmbedError::EmptyText {
                origin: "embed".into(),
            });
        }
        finish(acc)
    }
}

fn finish(acc: Vec<f64>) -> Result<Vec<f32>, EmbedError> {
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EmbedError::Degenerate);
    }
    Ok(acc.into_iter().map(|x| (x / norm) as f32).collect())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

/// External embedder speaking NDJSON over a child process's stdio:
/// one `{"text": ...}` line in, one `{"vector": [...]}` line out.
pub struct CommandEmbedder {
    dim: usize,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl CommandEmbedder {
    pub fn spawn(program: &str, args: &[&str], dim: usize) -> Result<Self, EmbedError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EmbedError::External(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            dim,
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl Embedder for CommandEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText {
                origin: "embed".into(),
            });
        }
        let mut guard = self.io.lock().map_err(|_| EmbedError::External("poisoned".into()))?;
        let (_, stdin, stdout) = &mut *guard;
        let mut line = serde_json::to_string(&EmbedRequest { text })
            .map_err(|e| EmbedError::External(e.to_string()))?;
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| EmbedError::External(e.to_string()))?;
        let mut reply = String::new();
        let n = stdout
            .read_line(&mut reply)
            .map_err(|e| EmbedError::External(e.to_string()))?;
        if n == 0 {
            return Err(EmbedError::External("embedder closed its output".into()));
        }
        let resp: EmbedResponse =
            serde_json::from_str(&reply).map_err(|e| EmbedError::External(e.to_string()))?;
        if resp.vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                actual: resp.vector.len(),
            });
        }
        if resp.vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        finish(resp.vector.into_iter().map(f64::from).collect())
    }
}

impl Drop for CommandEmbedder {
    fn drop(&mut self) {
        if let Ok(guard) = self.io.get_mut() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}
