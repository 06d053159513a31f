//! Broadcast protocols on top of a contact process.
//!
//! A run takes one source (node 0) that wants every other node to receive a
//! sequence of batches, each batch being `nu` packets coded together. Relays
//! forward in one of two modes:
//!
//! * [`Forwarding::Gamma`]: send a fresh random linear combination of the
//!   buffer on every contact, no feedback.
//! * [`Forwarding::Delta`]: peers first exchange summaries of what they hold
//!   and a sender only transmits a packet the receiver lacks.
//!
//! Schedules control when batches enter the network: continuously from the
//! source, pre-placed across relays at time zero, or pipelined, where the next
//! batch's packets are distributed one-per-relay while the current batch is
//! still propagating and are only forwardable after a release time.

mod engine;

pub use engine::{
    buffer_indicators, density_snapshot, run_seeding, run_stream, run_trace, RunBuilder,
};

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::bloom::CountingBloom;
use crate::coding::{Buffer, CodedPacket, CodingError};
use crate::gf::FieldError;
use crate::metrics::SeedingReport;
use crate::mobility::MobilityError;

/// Named protocol variants selectable by a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolKind {
    /// Source transmits combinations continuously; relays forward blindly.
    Gamma,
    /// Source transmits continuously; relays use receiver feedback.
    Delta,
    /// Feedback forwarding with the source active for the whole run.
    Benchmark1,
    /// Batch pre-placed one packet per relay at time zero, source still active.
    Benchmark2,
    /// Batch pre-placed at time zero and the source stays silent.
    Benchmark3,
    /// Next batch seeded during the current one's window, blind forwarding.
    PipelinedGamma,
    /// Next batch seeded during the current one's window, with feedback.
    PipelinedDelta,
}

impl ProtocolKind {
    pub fn forwarding(self) -> Forwarding {
        match self {
            ProtocolKind::Gamma | ProtocolKind::PipelinedGamma => Forwarding::Gamma,
            _ => Forwarding::Delta,
        }
    }

    pub fn schedule(self) -> Schedule {
        match self {
            ProtocolKind::Gamma | ProtocolKind::Delta | ProtocolKind::Benchmark1 => {
                Schedule::Continuous
            }
            ProtocolKind::Benchmark2 => Schedule::PrePlaced { source_active: true },
            ProtocolKind::Benchmark3 => Schedule::PrePlaced { source_active: false },
            ProtocolKind::PipelinedGamma | ProtocolKind::PipelinedDelta => Schedule::Pipelined,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Gamma => "gamma",
            ProtocolKind::Delta => "delta",
            ProtocolKind::Benchmark1 => "benchmark1",
            ProtocolKind::Benchmark2 => "benchmark2",
            ProtocolKind::Benchmark3 => "benchmark3",
            ProtocolKind::PipelinedGamma => "pipelined-gamma",
            ProtocolKind::PipelinedDelta => "pipelined-delta",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolKind> {
        let all = [
            ProtocolKind::Gamma,
            ProtocolKind::Delta,
            ProtocolKind::Benchmark1,
            ProtocolKind::Benchmark2,
            ProtocolKind::Benchmark3,
            ProtocolKind::PipelinedGamma,
            ProtocolKind::PipelinedDelta,
        ];
        all.into_iter().find(|k| k.name() == s)
    }
}

/// How relays decide what to send.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Forwarding {
    Gamma,
    Delta,
}

/// When batches enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Continuous,
    PrePlaced { source_active: bool },
    Pipelined,
}

/// Summary structure peers exchange under feedback forwarding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    /// Exchange the exact set of packet ids held.
    ExactSet,
    /// Exchange a counting Bloom filter of the ids held.
    CountingBloom { counters: usize, hashes: u32 },
}

/// How a batch's propagation window ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Deadline {
    /// The window closes the moment every destination has decoded.
    RunToCompletion,
    /// Fixed window length; undelivered destinations are cut off.
    Fixed(f64),
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad run configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
}

/// Full description of one run. Build via [`RunBuilder`] for the common cases.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kind: ProtocolKind,
    /// Replaces the forwarding mode the kind implies, keeping its schedule.
    /// Lets a pre-placed study run blind relays, for instance.
    pub forwarding_override: Option<Forwarding>,
    pub feedback: FeedbackMode,
    /// Packets per batch.
    pub nu: usize,
    /// Per-node buffer capacity in packets, counting held seeds.
    pub buffer: usize,
    pub n_batches: usize,
    /// Field exponent k for GF(2^k).
    pub field_k: u32,
    /// Reduction polynomial override; `None` takes the default for `field_k`.
    pub field_poly: Option<u32>,
    /// Payload size; must be a multiple of `field_k`.
    pub packet_bits: u32,
    pub deadline: Deadline,
    /// Replaces the default seeding release duration `nu / (lambda (n-1))`.
    pub release_override: Option<f64>,
    /// Seed for all protocol-side randomness (content, combination draws,
    /// placement choices). Kept separate from the contact-trace seed.
    pub seed: u64,
    /// Nodes that must decode; `None` means every relay.
    pub destinations: Option<BTreeSet<usize>>,
    /// Pre-placed schedules only: how many relays initially get each packet
    /// (one packet per relay). `None` places each packet on one relay.
    pub placement_counts: Option<Vec<u32>>,
    /// Record entropy / per-contact outcome series (costs memory on long runs).
    pub record_series: bool,
    /// Trailing contact count for the derived efficiency rate series.
    pub efficiency_window: usize,
}

impl RunConfig {
    /// Relay forwarding mode actually in effect.
    pub fn forwarding(&self) -> Forwarding {
        self.forwarding_override.unwrap_or(self.kind.forwarding())
    }

    pub fn validate(&self, n: usize) -> Result<(), ProtocolError> {
        let fail = |msg: String| Err(ProtocolError::BadConfig(msg));
        if n < 2 {
            return fail(format!("need at least 2 nodes, got {n}"));
        }
        if self.nu == 0 {
            return fail("nu must be at least 1".into());
        }
        if self.nu > u16::MAX as usize {
            return fail(format!("nu {} does not fit a packet id", self.nu));
        }
        if self.n_batches == 0 {
            return fail("n_batches must be at least 1".into());
        }
        match self.kind.schedule() {
            Schedule::Continuous => {
                if self.buffer < self.nu {
                    return fail(format!(
                        "buffer {} cannot hold a batch of {}",
                        self.buffer, self.nu
                    ));
                }
            }
            Schedule::PrePlaced { .. } => {
                // Buffers smaller than the batch are allowed here: the
                // one-packet-per-node regime deliberately runs buffer = 1.
                if self.buffer == 0 {
                    return fail("buffer must be at least 1".into());
                }
                let placed: u64 = match &self.placement_counts {
                    Some(counts) => {
                        if counts.len() != self.nu {
                            return fail(format!(
                                "placement counts cover {} packets, batch has {}",
                                counts.len(),
                                self.nu
                            ));
                        }
                        counts.iter().map(|&c| c as u64).sum()
                    }
                    None => self.nu as u64,
                };
                if placed == 0 {
                    return fail("placement must cover at least one relay".into());
                }
                if placed > (n - 1) as u64 {
                    return fail(format!("cannot pre-place {} packets on {} relays", placed, n - 1));
                }
                if self.n_batches != 1 {
                    return fail("pre-placed schedules run a single batch".into());
                }
            }
            Schedule::Pipelined => {
                if self.buffer < self.nu + 1 {
                    return fail(format!(
                        "pipelining needs buffer > nu, got buffer {} with nu {}",
                        self.buffer, self.nu
                    ));
                }
                if self.nu > n - 1 {
                    return fail(format!(
                        "cannot seed {} packets across {} relays",
                        self.nu,
                        n - 1
                    ));
                }
            }
        }
        if self.placement_counts.is_some()
            && !matches!(self.kind.schedule(), Schedule::PrePlaced { .. })
        {
            return fail("placement counts only apply to pre-placed schedules".into());
        }
        if let FeedbackMode::CountingBloom { counters, hashes } = self.feedback {
            if counters == 0 || hashes == 0 {
                return fail("bloom feedback needs counters >= 1 and hashes >= 1".into());
            }
        }
        if let Deadline::Fixed(t) = self.deadline {
            if !(t > 0.0) || !t.is_finite() {
                return fail(format!("fixed deadline must be positive, got {t}"));
            }
        }
        if let Some(r) = self.release_override {
            if !(r >= 0.0) || !r.is_finite() {
                return fail(format!("release override must be >= 0, got {r}"));
            }
        }
        if let Some(dests) = &self.destinations {
            if dests.is_empty() {
                return fail("destination set cannot be empty".into());
            }
            if dests.iter().any(|&d| d == 0 || d >= n) {
                return fail("destinations must be relay indices in 1..n".into());
            }
        }
        if self.efficiency_window < 2 {
            return fail("efficiency window must be at least 2 contacts".into());
        }
        Ok(())
    }
}

/// Key identifying one original packet across batches, for summary filters.
pub fn packet_key(batch_id: u64, packet: u16) -> u64 {
    (batch_id << 16) | packet as u64
}

/// A next-batch packet parked on a relay, waiting for its release time.
#[derive(Clone, Debug)]
pub struct SeededPacket {
    pub packet_id: u16,
    pub packet: CodedPacket,
}

/// Per-node protocol state.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    /// Decoding buffer for the batch currently propagating.
    pub buffer: Buffer,
    /// Ids of the current batch's packets this node is counted as holding.
    /// Under feedback forwarding these are exact; under blind forwarding they
    /// are coverage labels assigned as the rank grows.
    pub held: BTreeSet<u16>,
    /// Seeds for the next batch (first entry is this node's own placement,
    /// later entries are duplicates awaiting relocation).
    pub seeds: Vec<SeededPacket>,
    /// Bloom summary of `held`, maintained only in Bloom feedback mode.
    pub summary: Option<CountingBloom>,
    /// When this node reached full rank on the current batch.
    pub decoded_at: Option<f64>,
}

impl NodeState {
    pub fn new(id: usize, nu: usize, capacity: usize, summary: Option<CountingBloom>) -> Self {
        NodeState {
            id,
            buffer: Buffer::new(nu, capacity),
            held: BTreeSet::new(),
            seeds: Vec::new(),
            summary,
            decoded_at: None,
        }
    }

    pub fn is_source(&self) -> bool {
        self.id == 0
    }

    /// Packets this node is charged for against its buffer capacity.
    pub fn occupancy(&self) -> usize {
        self.buffer.rank() + self.seeds.len()
    }

    /// Whether the peer's summary says it already holds `packet`.
    /// Exact mode consults `held` directly; Bloom mode asks the filter and can
    /// answer yes spuriously, which makes the sender withhold a useful packet.
    pub fn summary_contains(&self, batch_id: u64, packet: u16) -> bool {
        match &self.summary {
            Some(filter) => filter.contains(packet_key(batch_id, packet)),
            None => self.held.contains(&packet),
        }
    }

    pub fn note_held(&mut self, batch_id: u64, packet: u16) {
        if self.held.insert(packet) {
            if let Some(filter) = &mut self.summary {
                filter
                    .insert(packet_key(batch_id, packet))
                    .expect("summary filter saturated");
            }
        }
    }

    /// Drop all state tied to the finished batch, keeping parked seeds.
    pub fn clear_batch(&mut self, batch_id: u64) {
        if let Some(filter) = &mut self.summary {
            for &packet in &self.held {
                filter
                    .remove(packet_key(batch_id, packet))
                    .expect("summary filter lost a recorded packet");
            }
        }
        self.held.clear();
        self.buffer.clear();
        self.decoded_at = None;
    }
}

/// Placement of the next batch: one packet per relay, handed out by the
/// source at its contacts, with relays shedding duplicates onward.
#[derive(Clone, Debug)]
pub struct SeedingState {
    pub batch_index: usize,
    pub batch_id: u64,
    /// Original packets still to hand out, in hand-out order.
    pending: Vec<SeededPacket>,
    pub release_at: f64,
    handovers: u32,
    /// Nodes currently holding at least one seed of this batch.
    holders: u32,
    report: SeedingReport,
    done: bool,
}

/// What a seeding step consumed during one contact.
#[derive(Clone, Copy, Debug, Default)]
pub struct SeedingUse {
    /// Direction a -> b carried a seed handover or relocation.
    pub dir_ab: bool,
    /// Direction b -> a carried one.
    pub dir_ba: bool,
}

impl SeedingState {
    /// `packets` are the batch's originals in hand-out order; `release_at` is
    /// when placed seeds become forwardable.
    pub fn new(
        batch_index: usize,
        batch_id: u64,
        packets: Vec<SeededPacket>,
        started_at: f64,
        release_at: f64,
    ) -> Self {
        let nu = packets.len();
        let mut pending = packets;
        pending.reverse();
        SeedingState {
            batch_index,
            batch_id,
            pending,
            release_at,
            handovers: 0,
            holders: 0,
            report: SeedingReport {
                batch: batch_index,
                started_at,
                release_at,
                finished_at: None,
                source_contacts: 0,
                source_handovers: 0,
                placement_attempts: 0,
                relocations: 0,
                distinct_at_source_done: None,
                complete: false,
            },
            done: nu == 0,
        }
    }

    /// All packets handed out and every one sits on its own relay.
    pub fn complete(&self) -> bool {
        self.done
    }

    pub fn report(&self) -> &SeedingReport {
        &self.report
    }

    /// Consume the report when the batch is promoted or the run ends.
    pub fn into_report(self) -> SeedingReport {
        self.report
    }

    pub fn started_at(&self) -> f64 {
        self.report.started_at
    }

    /// Packets the source never managed to hand out. After promotion these
    /// are injected straight into peers' decoding buffers at later contacts.
    pub fn take_pending(&mut self) -> Vec<SeededPacket> {
        std::mem::take(&mut self.pending)
    }

    fn extras_pending(&self) -> bool {
        self.handovers > self.holders
    }

    fn check_done(&mut self, now: f64) {
        if !self.done && self.pending.is_empty() && !self.extras_pending() {
            self.done = true;
            self.report.finished_at = Some(now);
            self.report.complete = true;
        }
    }

    /// Apply this contact's seeding actions: a source handover toward the
    /// peer, or a duplicate relocation between relays. Both directions are
    /// decided on the state as it was before the contact. Returns which
    /// directions the seeding traffic occupied.
    pub fn on_contact(
        &mut self,
        time: f64,
        a: usize,
        b: usize,
        nodes: &mut [NodeState],
        capacity: usize,
    ) -> SeedingUse {
        let mut used = SeedingUse::default();
        if self.done {
            return used;
        }

        if a == 0 || b == 0 {
            let peer = if a == 0 { b } else { a };
            if !self.pending.is_empty() {
                self.report.source_contacts += 1;
                self.report.placement_attempts += 1;
                let target = &mut nodes[peer];
                let duplicate = !target.seeds.is_empty();
                if target.occupancy() < capacity {
                    let seed = self.pending.pop().expect("pending checked non-empty");
                    target.seeds.push(seed);
                    self.handovers += 1;
                    self.report.source_handovers += 1;
                    if !duplicate {
                        self.holders += 1;
                    }
                    if self.pending.is_empty() {
                        self.report.distinct_at_source_done = Some(!self.extras_pending());
                    }
                    if a == 0 {
                        used.dir_ab = true;
                    } else {
                        used.dir_ba = true;
                    }
                }
                // No room means the peer already holds a seed plus a full
                // buffer; the source keeps the packet and retries elsewhere.
            } else if !self.done {
                self.report.source_contacts += 1;
            }
            self.check_done(time);
            return used;
        }

        // Relay-to-relay: shed duplicates onto unseeded peers with room.
        // Evaluate both directions against the pre-contact seed sets: a node
        // that just received a relocated seed does not shed it back.
        let a_has_extra = nodes[a].seeds.len() >= 2;
        let b_has_extra = nodes[b].seeds.len() >= 2;
        if a_has_extra {
            used.dir_ab = self.relocate(nodes, a, b, capacity);
        }
        if b_has_extra {
            used.dir_ba = self.relocate(nodes, b, a, capacity);
        }
        self.check_done(time);
        used
    }

    /// One relocation offer from a duplicate holder toward a peer; lands only
    /// on an unseeded relay with room.
    fn relocate(&mut self, nodes: &mut [NodeState], from: usize, to: usize, capacity: usize) -> bool {
        if nodes[from].seeds.len() < 2 {
            return false;
        }
        self.report.placement_attempts += 1;
        if !nodes[to].seeds.is_empty() || nodes[to].occupancy() >= capacity {
            return false;
        }
        let seed = nodes[from].seeds.pop().expect("length checked above");
        nodes[to].seeds.push(seed);
        self.holders += 1;
        self.report.relocations += 1;
        true
    }
}

/// Uniform choice among the elements of `set` not present in `exclude`.
pub(crate) fn pick_missing<R: Rng>(
    set: &BTreeSet<u16>,
    exclude: &BTreeSet<u16>,
    rng: &mut R,
) -> Option<u16> {
    let candidates: Vec<u16> = set.difference(exclude).copied().collect();
    candidates.choose(rng).copied()
}

/// Uniform choice of `count` distinct relays out of `1..n`.
pub(crate) fn pick_relays<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut relays: Vec<usize> = (1..n).collect();
    relays.shuffle(rng);
    relays.truncate(count);
    relays
}
