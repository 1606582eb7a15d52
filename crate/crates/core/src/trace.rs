//! Memory request traces: the text format, replay cursor, and the
//! deterministic synthetic generator.
//!
//! Trace text is one request per line, `R <hex-address>` or
//! `W <hex-address>`; `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryRequest {
    pub index: usize,
    pub kind: AccessKind,
    pub address: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    requests: Vec<MemoryRequest>,
}

impl Trace {
    pub fn from_accesses(accesses: impl IntoIterator<Item = (AccessKind, u64)>) -> Self {
        Trace {
            requests: accesses
                .into_iter()
                .enumerate()
                .map(|(index, (kind, address))| MemoryRequest {
                    index,
                    kind,
                    address,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut accesses = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = match parts.next() {
                Some("R") | Some("r") => AccessKind::Read,
                Some("W") | Some("w") => AccessKind::Write,
                Some(other) => {
                    return Err(Error::Trace(format!(
                        "line {}: unknown access kind `{other}`",
                        lineno + 1
                    )))
                }
                None => unreachable!(),
            };
            let addr_text = parts.next().ok_or_else(|| {
                Error::Trace(format!("line {}: missing address", lineno + 1))
            })?;
            if parts.next().is_some() {
                return Err(Error::Trace(format!(
                    "line {}: trailing fields after address",
                    lineno + 1
                )));
            }
            let digits = addr_text
                .strip_prefix("0x")
                .or_else(|| addr_text.strip_prefix("0X"))
                .unwrap_or(addr_text);
            let address = u64::from_str_radix(digits, 16).map_err(|_| {
                Error::Trace(format!("line {}: bad hex address `{addr_text}`", lineno + 1))
            })?;
            accesses.push((kind, address));
        }
        Ok(Trace::from_accesses(accesses))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Trace(format!("{}: {e}", path.display())))?;
        Trace::parse(&text)
    }

    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::with_capacity(self.requests.len() * 16 + header.len() + 4);
        for h in header.lines() {
            let _ = writeln!(out, "# {h}");
        }
        for r in &self.requests {
            let k = match r.kind {
                AccessKind::Read => 'R',
                AccessKind::Write => 'W',
            };
            let _ = writeln!(out, "{k} {:#x}", r.address);
        }
        out
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        fs::write(path, self.to_text(header)).map_err(|e| Error::io(path, e))
    }

    pub fn requests(&self) -> &[MemoryRequest] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Content hash identifying the trace in reports.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.requests {
            h.update([matches!(r.kind, AccessKind::Write) as u8]);
            h.update(r.address.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Replay position into a trace; rewinds on rollback.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceCursor {
    position: usize,
}

impl TraceCursor {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn advance(&mut self) {
        self.position += 1;
    }

    pub fn rewind_to(&mut self, position: usize) {
        debug_assert!(position <= self.position);
        self.position = position;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    /// Number of requests.
    pub length: usize,
    /// Bytes touched by the trace.
    pub working_set: u64,
    /// Zipf exponent over line popularity; 0 is uniform.
    pub locality_alpha: f64,
    pub write_fraction: f64,
    /// Probability that a request continues sequentially from the previous
    /// line instead of drawing a fresh popular line.
    pub stride_mix: f64,
}

pub const TRACE_LINE: u64 = 64;
const TRACE_BASE: u64 = 0x1000_0000;

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        SyntheticTraceSpec {
            length: 100_000,
            working_set: 4 * 1024 * 1024,
            locality_alpha: 1.0,
            write_fraction: 0.25,
            stride_mix: 0.2,
        }
    }
}

impl SyntheticTraceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.working_set < TRACE_LINE {
            return Err(Error::Config(format!(
                "trace.working_set must be at least one line ({TRACE_LINE} bytes)"
            )));
        }
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err(Error::Config("trace.write_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.stride_mix) {
            return Err(Error::Config("trace.stride_mix must be in [0, 1]".into()));
        }
        if !(self.locality_alpha >= 0.0 && self.locality_alpha.is_finite()) {
            return Err(Error::Config("trace.alpha must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.working_set / TRACE_LINE
    }

    /// Popularity rank (0 = hottest) to line index. A multiplicative
    /// bijection spreads hot lines across cache sets.
    pub fn line_for_rank(&self, rank: u64) -> u64 {
        scatter(rank, self.lines(), self.rank_multiplier())
    }

    fn rank_multiplier(&self) -> u64 {
        let n = self.lines();
        let mut mult = 0x9E37_79B9u64 % n;
        while mult == 0 || gcd(mult, n) != 1 {
            mult += 1;
        }
        mult
    }

    pub fn address_of_line(line: u64) -> u64 {
        TRACE_BASE + line * TRACE_LINE
    }

    pub fn generate(&self, seed: u64) -> Result<Trace> {
        self.validate()?;
        let n = self.lines();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zipf = Zipf::new(n as f64, self.locality_alpha)
            .map_err(|e| Error::Config(format!("trace.alpha: {e}")))?;
        let mult = self.rank_multiplier();
        let mut prev: Option<u64> = None;
        let mut accesses = Vec::with_capacity(self.length);
        for _ in 0..self.length {
            let line = match prev {
                Some(p) if rng.random::<f64>() < self.stride_mix => (p + 1) % n,
                _ => {
                    let rank = zipf.sample(&mut rng) as u64 - 1;
                    scatter(rank, n, mult)
                }
            };
            prev = Some(line);
            let kind = if rng.random::<f64>() < self.write_fraction {
                AccessKind::Write
            } else {
                AccessKind::Read
            };
            let offset = rng.random_range(0..TRACE_LINE / 8) * 8;
            accesses.push((kind, Self::address_of_line(line) + offset));
        }
        Ok(Trace::from_accesses(accesses))
    }
}

fn scatter(rank: u64, lines: u64, mult: u64) -> u64 {
    ((rank as u128 * mult as u128) % lines as u128) as u64
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
