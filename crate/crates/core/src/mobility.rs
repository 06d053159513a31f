//! Contact generation and trace files.
//!
//! Contacts between each of the N(N-1)/2 node pairs arrive as independent
//! Poisson processes of rate lambda. The superposition is sampled directly:
//! exponential gaps at the aggregate rate, then a uniformly chosen pair.
//! Everything is deterministic given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MobilityError {
    #[error("mobility config: {0}")]
    BadConfig(String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobilityConfig {
    /// Number of nodes, including the source.
    pub n: usize,
    /// Per-pair contact rate.
    pub lambda: f64,
    /// Trace end time.
    pub horizon: f64,
    pub seed: u64,
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<(), MobilityError> {
        if self.n < 2 {
            return Err(MobilityError::BadConfig(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(MobilityError::BadConfig(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(MobilityError::BadConfig(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Aggregate contact rate over all pairs.
    pub fn total_rate(&self) -> f64 {
        self.lambda * (self.n * (self.n - 1) / 2) as f64
    }
}

/// One bidirectional contact; `a < b` always.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ContactEvent {
    pub time: f64,
    pub a: usize,
    pub b: usize,
}

/// Lazy contact generator. Infinite; callers cut it off at their horizon.
/// `generate_trace` and long-running simulations share this so a saved trace
/// and an on-demand stream with the same seed agree event for event.
pub struct ContactStream {
    n: usize,
    t: f64,
    gap: Exp<f64>,
    rng: ChaCha12Rng,
}

impl ContactStream {
    pub fn new(cfg: &MobilityConfig) -> Result<ContactStream, MobilityError> {
        cfg.validate()?;
        let gap = Exp::new(cfg.total_rate())
            .map_err(|e| MobilityError::BadConfig(format!("bad aggregate rate: {e}")))?;
        Ok(ContactStream { n: cfg.n, t: 0.0, gap, rng: ChaCha12Rng::seed_from_u64(cfg.seed) })
    }
}

impl Iterator for ContactStream {
    type Item = ContactEvent;

    fn next(&mut self) -> Option<ContactEvent> {
        self.t += self.gap.sample(&mut self.rng);
        // uniform unordered pair by rejection
        loop {
            let a = self.rng.random_range(0..self.n);
            let b = self.rng.random_range(0..self.n);
            if a != b {
                return Some(ContactEvent { time: self.t, a: a.min(b), b: a.max(b) });
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactTrace {
    pub n: usize,
    pub lambda: f64,
    pub horizon: f64,
    pub seed: u64,
    pub events: Vec<ContactEvent>,
}

/// Materialize the contact process up to the horizon.
pub fn generate_trace(cfg: &MobilityConfig) -> Result<ContactTrace, MobilityError> {
    let stream = ContactStream::new(cfg)?;
    let events = stream.take_while(|ev| ev.time <= cfg.horizon).collect();
    Ok(ContactTrace {
        n: cfg.n,
        lambda: cfg.lambda,
        horizon: cfg.horizon,
        seed: cfg.seed,
        events,
    })
}

/// Write a trace: four header lines, then one `time a b` line per contact.
/// Floats use the shortest round-tripping decimal form, so load(save(t)) == t
/// exactly. The write lands via a temp file and rename.
pub fn save_trace(trace: &ContactTrace, path: &Path) -> Result<(), MobilityError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into())
    ));
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(w, "N={}", trace.n)?;
        writeln!(w, "lambda={}", trace.lambda)?;
        writeln!(w, "horizon={}", trace.horizon)?;
        writeln!(w, "seed={}", trace.seed)?;
        for ev in &trace.events {
            writeln!(w, "{} {} {}", ev.time, ev.a, ev.b)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn header_value(
    lines: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
    key: &str,
) -> Result<String, MobilityError> {
    let (lineno, line) = lines
        .next()
        .ok_or(MobilityError::Parse { line: 0, msg: format!("missing header {key}=") })?;
    let line = line?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .map(|v| v.trim().to_string())
        .ok_or(MobilityError::Parse {
            line: lineno,
            msg: format!("expected header {key}=<value>, got {line:?}"),
        })
}

/// Read a trace file. Only the format is validated (headers, node bounds,
/// strictly increasing times); gap statistics are not, so externally produced
/// traces with arbitrary inter-contact laws load fine.
pub fn load_trace(path: &Path) -> Result<ContactTrace, MobilityError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let n: usize = parse_field(&mut lines, "N")?;
    let lambda: f64 = parse_field(&mut lines, "lambda")?;
    let horizon: f64 = parse_field(&mut lines, "horizon")?;
    let seed: u64 = parse_field(&mut lines, "seed")?;

    let mut events = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let ev = (|| -> Option<ContactEvent> {
            let time: f64 = parts.next()?.parse().ok()?;
            let a: usize = parts.next()?.parse().ok()?;
            let b: usize = parts.next()?.parse().ok()?;
            if parts.next().is_some() {
                return None;
            }
            Some(ContactEvent { time, a, b })
        })()
        .ok_or_else(|| MobilityError::Parse {
            line: lineno,
            msg: format!("expected `time a b`, got {line:?}"),
        })?;
        if ev.a >= ev.b || ev.b >= n {
            return Err(MobilityError::Parse {
                line: lineno,
                msg: format!("pair ({}, {}) invalid for N={} (need a < b < N)", ev.a, ev.b, n),
            });
        }
        if ev.time <= last_time {
            return Err(MobilityError::Parse {
                line: lineno,
                msg: format!("event times must increase strictly ({} after {})", ev.time, last_time),
            });
        }
        last_time = ev.time;
        events.push(ev);
    }
    Ok(ContactTrace { n, lambda, horizon, seed, events })
}

fn parse_field<T: std::str::FromStr>(
    lines: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
    key: &str,
) -> Result<T, MobilityError> {
    let raw = header_value(lines, key)?;
    raw.parse().map_err(|_| MobilityError::Parse {
        line: 0,
        msg: format!("header {key}= has unparseable value {raw:?}"),
    })
}
