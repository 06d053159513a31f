//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers, `#` comments, and a fully resolved echo for output
//! headers. The schema is deliberately small and every error names the
//! offending section, key, and line.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rlncsim_core::protocols::{Deadline, FeedbackMode, Forwarding, ProtocolKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("missing required key {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

/// Everything a `run` or `sweep` invocation needs, resolved with defaults.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub n: usize,
    pub lambda: f64,
    pub horizon: f64,
    /// Replication seeds. Each drives one generated trace (unless a trace
    /// file is given) and the protocol-side randomness of its runs.
    pub seeds: Vec<u64>,
    /// Optional pre-generated contact trace shared by every seed.
    pub trace_path: Option<PathBuf>,
    pub field_k: u32,
    pub field_poly: Option<u32>,
    /// Protocols to run on the same traces, in listed order.
    pub kinds: Vec<ProtocolKind>,
    pub forwarding: Option<Forwarding>,
    pub nu: usize,
    pub buffer: usize,
    pub feedback: FeedbackMode,
    pub deadline: Deadline,
    pub release: Option<f64>,
    pub protocol_seed: u64,
    pub placement: Option<Vec<u32>>,
    pub destinations: Option<BTreeSet<usize>>,
    pub efficiency_window: usize,
    pub record_series: bool,
    pub n_batches: usize,
    pub packet_bits: u32,
    pub out_dir: PathBuf,
    /// Divide every reported time by N - 2 (presentation only, default off).
    pub rescale_timeline: bool,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("mobility", &["n", "lambda", "horizon", "seeds", "trace"]),
    ("field", &["k", "poly"]),
    (
        "protocol",
        &[
            "kind",
            "nu",
            "buffer",
            "feedback",
            "forwarding",
            "deadline",
            "release",
            "protocol_seed",
            "placement",
            "destinations",
            "efficiency_window",
            "record_series",
        ],
    ),
    ("batches", &["n_batches", "packet_bits"]),
    ("outputs", &["directory", "rescale_timeline"]),
];

/// One raw assignment with its provenance.
struct Entry {
    key: String,
    value: String,
    line: usize,
}

fn collect_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut section: Option<&'static (&str, &[&str])> = None;
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("unterminated section header {trimmed:?}"),
                });
            };
            section = Some(
                SECTIONS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| ConfigError::UnknownSection { line, name: name.into() })?,
            );
            continue;
        }
        let Some((key_part, value_part)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got {trimmed:?}"),
            });
        };
        let Some((section_name, keys)) = section else {
            return Err(ConfigError::Syntax {
                line,
                msg: "assignment before any [section] header".into(),
            });
        };
        let key_name = key_part.trim();
        if !keys.contains(&key_name) {
            return Err(ConfigError::UnknownKey {
                line,
                key: format!("{section_name}.{key_name}"),
            });
        }
        let key = format!("{section_name}.{key_name}");
        if entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate { line, key });
        }
        entries.push(Entry { key, value: value_part.trim().to_string(), line });
    }
    Ok(entries)
}

/// Typed view over the collected entries; every getter names the key in its
/// error and marks the entry as consumed.
struct Fields {
    entries: Vec<Entry>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Entry> {
        let pos = self.entries.iter().position(|e| e.key == key)?;
        Some(self.entries.remove(pos))
    }

    fn parsed<T>(
        &mut self,
        key: &str,
        what: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, ConfigError> {
        let Some(entry) = self.take(key) else {
            return Ok(None);
        };
        match parse(&entry.value) {
            Some(v) => Ok(Some(v)),
            None => Err(ConfigError::BadValue {
                line: entry.line,
                key: entry.key,
                msg: format!("expected {what}, got {:?}", entry.value),
            }),
        }
    }

    fn required<T>(
        &mut self,
        key: &str,
        what: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, ConfigError> {
        self.parsed(key, what, parse)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }
}

fn parse_u64_item(s: &str) -> Option<u64> {
    s.trim().parse().ok()
}

fn parse_u32_maybe_hex(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Comma-separated u64 items; `a..b` expands to the inclusive range.
fn parse_seed_list(s: &str) -> Option<Vec<u64>> {
    let mut seeds = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if let Some((lo, hi)) = item.split_once("..") {
            let lo: u64 = lo.trim().parse().ok()?;
            let hi: u64 = hi.trim().parse().ok()?;
            if hi < lo || hi - lo >= 1_000_000 {
                return None;
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(parse_u64_item(item)?);
        }
    }
    Some(seeds)
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    s.split(',').map(|part| item(part.trim())).collect()
}

fn parse_kind_list(s: &str) -> Option<Vec<ProtocolKind>> {
    let kinds = parse_list(s, ProtocolKind::parse)?;
    let mut seen = Vec::new();
    for k in &kinds {
        if seen.contains(k) {
            return None;
        }
        seen.push(*k);
    }
    Some(kinds)
}

fn parse_feedback(s: &str) -> Option<FeedbackMode> {
    if s == "exact" {
        return Some(FeedbackMode::ExactSet);
    }
    let rest = s.strip_prefix("bloom:")?;
    let (counters, hashes) = rest.split_once(':')?;
    Some(FeedbackMode::CountingBloom {
        counters: counters.trim().parse().ok()?,
        hashes: hashes.trim().parse().ok()?,
    })
}

fn parse_forwarding(s: &str) -> Option<Forwarding> {
    match s {
        "gamma" => Some(Forwarding::Gamma),
        "delta" => Some(Forwarding::Delta),
        _ => None,
    }
}

fn parse_deadline(s: &str) -> Option<Deadline> {
    if s == "completion" {
        return Some(Deadline::RunToCompletion);
    }
    parse_finite(s).filter(|t| *t > 0.0).map(Deadline::Fixed)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut f = Fields { entries: collect_entries(text)? };
        let field_k =
            f.parsed("field.k", "an exponent in 1..=16", |s| s.parse::<u32>().ok())?.unwrap_or(8);
        let cfg = ExperimentConfig {
            n: f.required("mobility.n", "a node count", |s| s.parse().ok())?,
            lambda: f.required("mobility.lambda", "a positive rate", parse_finite)?,
            horizon: f.required("mobility.horizon", "a positive duration", parse_finite)?,
            seeds: f.required("mobility.seeds", "a comma-separated seed list", parse_seed_list)?,
            trace_path: f
                .parsed("mobility.trace", "a file path", |s| Some(PathBuf::from(s)))?,
            field_k,
            field_poly: f.parsed("field.poly", "a polynomial (hex or decimal)", parse_u32_maybe_hex)?,
            kinds: f.required(
                "protocol.kind",
                "protocol names, comma separated, no repeats",
                parse_kind_list,
            )?,
            forwarding: f.parsed("protocol.forwarding", "gamma or delta", parse_forwarding)?,
            nu: f.required("protocol.nu", "a batch size", |s| s.parse().ok())?,
            buffer: f.required("protocol.buffer", "a buffer capacity", |s| s.parse().ok())?,
            feedback: f
                .parsed("protocol.feedback", "exact or bloom:<counters>:<hashes>", parse_feedback)?
                .unwrap_or(FeedbackMode::ExactSet),
            deadline: f
                .parsed("protocol.deadline", "completion or a positive duration", parse_deadline)?
                .unwrap_or(Deadline::RunToCompletion),
            release: f.parsed("protocol.release", "a non-negative duration", |s| {
                parse_finite(s).filter(|x| *x >= 0.0)
            })?,
            protocol_seed: f
                .parsed("protocol.protocol_seed", "an integer seed", parse_u64_item)?
                .unwrap_or(0),
            placement: f.parsed("protocol.placement", "comma-separated copy counts", |s| {
                parse_list(s, |item| item.parse::<u32>().ok())
            })?,
            destinations: f.parsed("protocol.destinations", "comma-separated node ids", |s| {
                parse_list(s, |item| item.parse::<usize>().ok()).map(BTreeSet::from_iter)
            })?,
            efficiency_window: f
                .parsed("protocol.efficiency_window", "a window of at least 2 contacts", |s| {
                    s.parse().ok()
                })?
                .unwrap_or(50),
            record_series: f
                .parsed("protocol.record_series", "true or false", parse_bool)?
                .unwrap_or(true),
            n_batches: f.parsed("batches.n_batches", "a batch count", |s| s.parse().ok())?.unwrap_or(1),
            packet_bits: f
                .parsed("batches.packet_bits", "a payload size in bits", |s| s.parse().ok())?
                .unwrap_or(field_k),
            out_dir: f
                .parsed("outputs.directory", "a directory path", |s| Some(PathBuf::from(s)))?
                .unwrap_or_else(|| PathBuf::from("results")),
            rescale_timeline: f
                .parsed("outputs.rescale_timeline", "true or false", parse_bool)?
                .unwrap_or(false),
        };
        debug_assert!(f.entries.is_empty(), "schema tables cover every accepted key");
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n < 2 {
            return fail(format!("mobility.n: need at least 2 nodes, got {}", self.n));
        }
        if self.lambda <= 0.0 {
            return fail(format!("mobility.lambda: must be positive, got {}", self.lambda));
        }
        if self.horizon <= 0.0 {
            return fail(format!("mobility.horizon: must be positive, got {}", self.horizon));
        }
        if self.seeds.is_empty() {
            return fail("mobility.seeds: the seed list is empty".into());
        }
        if self.kinds.is_empty() {
            return fail("protocol.kind: no protocols listed".into());
        }
        if !(1..=16).contains(&self.field_k) {
            return fail(format!("field.k: supported exponents are 1..=16, got {}", self.field_k));
        }
        if self.packet_bits == 0 || self.packet_bits % self.field_k != 0 {
            return fail(format!(
                "batches.packet_bits: {} is not a positive multiple of field.k = {}",
                self.packet_bits, self.field_k
            ));
        }
        if self.buffer > self.n {
            return fail(format!(
                "protocol.buffer: {} exceeds the node count {}",
                self.buffer, self.n
            ));
        }
        if self.rescale_timeline && self.n < 3 {
            return fail("outputs.rescale_timeline: rescaling by n - 2 needs n >= 3".into());
        }
        Ok(())
    }

    /// The engine configuration for one protocol and one replication seed.
    /// The protocol-side stream is decorrelated from the trace seed so that
    /// reusing a seed number for both cannot couple contacts and choices.
    pub fn run_config(&self, kind: ProtocolKind, seed: u64) -> RunConfig {
        RunConfig {
            kind,
            forwarding_override: self.forwarding,
            feedback: self.feedback,
            nu: self.nu,
            buffer: self.buffer,
            n_batches: self.n_batches,
            field_k: self.field_k,
            field_poly: self.field_poly,
            packet_bits: self.packet_bits,
            deadline: self.deadline,
            release_override: self.release,
            seed: self.protocol_seed.wrapping_add(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            destinations: self.destinations.clone(),
            placement_counts: self.placement.clone(),
            record_series: self.record_series,
            efficiency_window: self.efficiency_window,
        }
    }

    /// The fully resolved configuration as `section.key = value` lines,
    /// embedded as a comment header in every output file.
    pub fn echo_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("mobility.n = {}", self.n),
            format!("mobility.lambda = {}", self.lambda),
            format!("mobility.horizon = {}", self.horizon),
            format!(
                "mobility.seeds = {}",
                self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            ),
        ];
        if let Some(path) = &self.trace_path {
            lines.push(format!("mobility.trace = {}", path.display()));
        }
        lines.push(format!("field.k = {}", self.field_k));
        if let Some(poly) = self.field_poly {
            lines.push(format!("field.poly = 0x{poly:x}"));
        }
        lines.push(format!(
            "protocol.kind = {}",
            self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
        ));
        if let Some(fwd) = self.forwarding {
            lines.push(format!(
                "protocol.forwarding = {}",
                match fwd {
                    Forwarding::Gamma => "gamma",
                    Forwarding::Delta => "delta",
                }
            ));
        }
        lines.push(format!("protocol.nu = {}", self.nu));
        lines.push(format!("protocol.buffer = {}", self.buffer));
        lines.push(format!(
            "protocol.feedback = {}",
            match self.feedback {
                FeedbackMode::ExactSet => "exact".to_string(),
                FeedbackMode::CountingBloom { counters, hashes } =>
                    format!("bloom:{counters}:{hashes}"),
            }
        ));
        lines.push(format!(
            "protocol.deadline = {}",
            match self.deadline {
                Deadline::RunToCompletion => "completion".to_string(),
                Deadline::Fixed(t) => t.to_string(),
            }
        ));
        if let Some(r) = self.release {
            lines.push(format!("protocol.release = {r}"));
        }
        lines.push(format!("protocol.protocol_seed = {}", self.protocol_seed));
        if let Some(p) = &self.placement {
            lines.push(format!(
                "protocol.placement = {}",
                p.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        if let Some(d) = &self.destinations {
            lines.push(format!(
                "protocol.destinations = {}",
                d.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        lines.push(format!("protocol.efficiency_window = {}", self.efficiency_window));
        lines.push(format!("protocol.record_series = {}", self.record_series));
        lines.push(format!("batches.n_batches = {}", self.n_batches));
        lines.push(format!("batches.packet_bits = {}", self.packet_bits));
        lines.push(format!("outputs.directory = {}", self.out_dir.display()));
        lines.push(format!("outputs.rescale_timeline = {}", self.rescale_timeline));
        lines
    }
}
