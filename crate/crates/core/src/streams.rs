//! Hierarchical, path-addressed deterministic randomness.
//!
//! Every run owns two trees: an *internal* tree, shared between paired runs
//! (grid offsets, visit thresholds, the initial policy), and a *sample* tree
//! holding the environment draws, which differs between runs. A substream is
//! a pure function of `(root seed, role, path)`:
//!
//! ```text
//! key    = SHA-256("replicable-rl/stream/v1" || role || root_seed || encode(path))
//! stream = ChaCha12(key)
//! ```
//!
//! so a worker can derive the stream it needs without coordinating with any
//! other worker, and results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const DOMAIN_TAG: &[u8] = b"replicable-rl/stream/v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("invalid seed {0:?}: expected a decimal integer or a hex string of at most 64 digits")]
    InvalidSeed(String),
    #[error("categorical weights must be finite, nonnegative and have a positive sum")]
    InvalidWeights,
    #[error("empty range: uniform_int needs n >= 1")]
    EmptyRange,
    #[error("invalid interval [{lo}, {hi})")]
    InvalidInterval { lo: f64, hi: f64 },
}

/// A 256-bit root seed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Seed(pub [u8; 32]);

impl Seed {
    /// Right-aligned big-endian embedding of a 64-bit integer.
    pub fn from_u64(value: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[24..].copy_from_slice(&value.to_be_bytes());
        Seed(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({})", self.to_hex())
    }
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed::from_u64(value)
    }
}

/// Accepts `"42"`, `"0x2a"` or a bare hex string such as `"deadbeef"` that
/// is not a valid decimal number. Decimal inputs must fit in 128 bits.
impl FromStr for Seed {
    type Err = StreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let err = || StreamError::InvalidSeed(s.to_string());
        if trimmed.is_empty() {
            return Err(err());
        }
        let hex_digits = if let Some(rest) = trimmed
            .strip_prefix("0x")
            .or_else(|| trimmed.strip_prefix("0X"))
        {
            rest
        } else if trimmed.bytes().all(|b| b.is_ascii_digit()) {
            let value: u128 = trimmed.parse().map_err(|_| err())?;
            let mut bytes = [0u8; 32];
            bytes[16..].copy_from_slice(&value.to_be_bytes());
            return Ok(Seed(bytes));
        } else {
            trimmed
        };
        if hex_digits.is_empty()
            || hex_digits.len() > 64
            || !hex_digits.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return Err(err());
        }
        let padded = format!("{hex_digits:0>64}");
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(padded, &mut bytes).map_err(|_| err())?;
        Ok(Seed(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Internal,
    Sample,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Internal => 0x49,
            Role::Sample => 0x53,
        }
    }
}

/// Ordered `(label, index)` pairs naming a substream, e.g.
/// `[("iter", 3), ("sa", 17)]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct StreamPath {
    parts: Vec<(String, u64)>,
}

impl StreamPath {
    pub fn root() -> Self {
        StreamPath { parts: Vec::new() }
    }

    pub fn new(label: &str, index: u64) -> Self {
        StreamPath::root().push(label, index)
    }

    pub fn push(mut self, label: &str, index: u64) -> Self {
        self.parts.push((label.to_string(), index));
        self
    }

    pub fn child(&self, label: &str, index: u64) -> Self {
        self.clone().push(label, index)
    }

    pub fn parts(&self) -> &[(String, u64)] {
        &self.parts
    }

    /// Length-prefixed encoding; distinct paths never share an encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.parts.len() * 24);
        out.extend_from_slice(&(self.parts.len() as u64).to_le_bytes());
        for (label, index) in &self.parts {
            out.extend_from_slice(&(label.len() as u64).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
            out.extend_from_slice(&index.to_le_bytes());
        }
        out
    }
}

impl fmt::Display for StreamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("/")?;
        for (i, (label, index)) in self.parts.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{label}:{index}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandTree {
    pub root_seed: Seed,
    pub role: Role,
}

impl RandTree {
    pub fn new(root_seed: impl Into<Seed>, role: Role) -> Self {
        RandTree {
            root_seed: root_seed.into(),
            role,
        }
    }

    pub fn internal(root_seed: impl Into<Seed>) -> Self {
        RandTree::new(root_seed, Role::Internal)
    }

    pub fn sample(root_seed: impl Into<Seed>) -> Self {
        RandTree::new(root_seed, Role::Sample)
    }

    pub fn derive(&self, path: &StreamPath) -> Stream {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN_TAG);
        hasher.update([self.role.tag()]);
        hasher.update(self.root_seed.0);
        hasher.update(path.encode());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Stream {
            rng: ChaCha12Rng::from_seed(key),
        }
    }
}

/// Single-owner uniform generator returned by [`RandTree::derive`].
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha12Rng,
}

impl Stream {
    /// Uniform on `[0, 1)` from the 53 high bits of one 64-bit word.
    pub fn uniform01(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`; a zero-width interval returns `lo`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, StreamError> {
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(StreamError::InvalidInterval { lo, hi });
        }
        if hi == lo {
            return Ok(lo);
        }
        let u = self.uniform01();
        let x = lo + (hi - lo) * u;
        // lo + (hi - lo) * u can round up to hi
        Ok(if x < hi { x } else { lo.max(hi.next_down()) })
    }

    /// Uniform on `{0, ..., n-1}` without modulo bias.
    pub fn uniform_int(&mut self, n: u64) -> Result<u64, StreamError> {
        if n == 0 {
            return Err(StreamError::EmptyRange);
        }
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return Ok(x % n);
            }
        }
    }

    /// Inverse-CDF draw with the cumulative sum taken in ascending index
    /// order. Zero-weight outcomes are never returned.
    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize, StreamError> {
        let total = checked_total(weights)?;
        let u = self.uniform01();
        Ok(invert_cdf(weights, total, u))
    }
}

fn checked_total(weights: &[f64]) -> Result<f64, StreamError> {
    let mut total = 0.0;
    for &w in weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(StreamError::InvalidWeights);
        }
        total += w;
    }
    if total > 0.0 && total.is_finite() {
        Ok(total)
    } else {
        Err(StreamError::InvalidWeights)
    }
}

/// Maps a uniform `u` in `[0, 1)` to an outcome index.
pub(crate) fn invert_cdf(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last_positive = i;
            if target < cumulative {
                return i;
            }
        }
    }
    last_positive
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
