//! Small-instance oracles for the protocol dynamics.
//!
//! The per-contact transfer processes have an exact finite description when
//! node holdings are tracked as sets of packet ids: a discrete-time Markov
//! chain whose step is one uniformly chosen pair meeting and exchanging in
//! both directions. Two transfer rules are built independently:
//!
//! * [`TransferRule::Feedback`]: the sender gives one uniformly chosen packet
//!   the receiver is missing, nothing when there is none.
//! * [`TransferRule::IdealBlind`]: blind recombination in the infinite-field
//!   limit, derived through subspace dimensions: the receiver's span grows
//!   exactly when the sender's span is not contained in it, and the fresh
//!   coverage is uniform over what the sender has beyond the receiver.
//!
//! Building both chains and comparing the matrices entry by entry checks that
//! the two rules generate identical dynamics. The chain is also validated
//! against direct stochastic simulation, and the infinite-field idealization
//! against actual coded runs over growing field sizes.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::coding::{encode_batch, Buffer, InsertOutcome, VariableBatch};
use crate::gf::FieldSpec;
use crate::mobility::{generate_trace, MobilityConfig};
use crate::protocols::{run_trace, Forwarding, ProtocolError, ProtocolKind, RunBuilder};

/// Which per-direction transfer rule drives the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferRule {
    Feedback,
    IdealBlind,
}

/// Holdings of every node as packet-id sets; index 0 is the source and always
/// holds the full batch.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChainState(pub Vec<BTreeSet<u16>>);

impl ChainState {
    /// Source full, relays empty.
    pub fn initial(n: usize, nu: u16) -> ChainState {
        let mut sets = vec![BTreeSet::new(); n];
        sets[0] = (0..nu).collect();
        ChainState(sets)
    }

    pub fn is_absorbing(&self, nu: u16) -> bool {
        self.0.iter().all(|s| s.len() == nu as usize)
    }
}

/// What one direction of an exchange can do: `None` keeps the receiver as it
/// is, `Some(id)` adds that packet id, each with its probability.
type DirectionOutcomes = Vec<(Option<u16>, f64)>;

/// Feedback transfer: the receiver's summary exposes exactly what it misses,
/// and the sender picks uniformly among those packets.
fn feedback_outcomes(sender: &BTreeSet<u16>, receiver: &BTreeSet<u16>) -> DirectionOutcomes {
    let missing: Vec<u16> = sender.difference(receiver).copied().collect();
    if missing.is_empty() {
        return vec![(None, 1.0)];
    }
    let p = 1.0 / missing.len() as f64;
    missing.into_iter().map(|id| (Some(id), p)).collect()
}

/// Blind transfer in the infinite-field limit. With coordinate-aligned spans,
/// the receiver's dimension grows iff the joint span is strictly larger than
/// its own, i.e. iff dim(sender u receiver) > dim(receiver); a vanishing
/// 1/q fraction of combinations fails, which is exactly zero here. The
/// innovative dimension carries a coverage id distributed uniformly over the
/// sender's ids outside the receiver's span.
fn ideal_blind_outcomes(sender: &BTreeSet<u16>, receiver: &BTreeSet<u16>) -> DirectionOutcomes {
    let joint_dim = sender.union(receiver).count();
    if joint_dim == receiver.len() {
        // Sender's span is inside the receiver's: every combination lands in
        // what the receiver already decodes.
        return vec![(None, 1.0)];
    }
    let fresh: Vec<u16> = sender.iter().copied().filter(|id| !receiver.contains(id)).collect();
    let p = 1.0 / fresh.len() as f64;
    fresh.into_iter().map(|id| (Some(id), p)).collect()
}

fn outcomes(rule: TransferRule, sender: &BTreeSet<u16>, receiver: &BTreeSet<u16>) -> DirectionOutcomes {
    match rule {
        TransferRule::Feedback => feedback_outcomes(sender, receiver),
        TransferRule::IdealBlind => ideal_blind_outcomes(sender, receiver),
    }
}

/// The chain over every state reachable from the initial one.
#[derive(Clone, Debug)]
pub struct Chain {
    pub n: usize,
    pub nu: u16,
    pub rule: TransferRule,
    /// Discovery order; index 0 is the initial state.
    pub states: Vec<ChainState>,
    pub index: BTreeMap<ChainState, usize>,
    /// Dense row-stochastic transition matrix in state order.
    pub matrix: Vec<Vec<f64>>,
    /// Index of the all-full state.
    pub absorbing: usize,
}

/// Distribution over successor states of `state` in one step.
fn successors(state: &ChainState, n: usize, rule: TransferRule) -> BTreeMap<ChainState, f64> {
    let pair_count = n * (n - 1) / 2;
    let pair_w = 1.0 / pair_count as f64;
    let mut acc: BTreeMap<ChainState, f64> = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            // Both directions are decided against the pre-contact state and
            // applied together.
            let to_j = outcomes(rule, &state.0[i], &state.0[j]);
            let to_i = outcomes(rule, &state.0[j], &state.0[i]);
            for (gain_j, p1) in &to_j {
                for (gain_i, p2) in &to_i {
                    let mut next = state.clone();
                    if let Some(id) = gain_j {
                        next.0[j].insert(*id);
                    }
                    if let Some(id) = gain_i {
                        next.0[i].insert(*id);
                    }
                    *acc.entry(next).or_insert(0.0) += pair_w * p1 * p2;
                }
            }
        }
    }
    acc
}

/// Breadth-first construction of the reachable chain. States are indexed in
/// discovery order, so walking the state vector front to back visits every
/// state exactly once, including those found along the way.
pub fn build_chain(n: usize, nu: u16, rule: TransferRule) -> Chain {
    assert!(n >= 2, "need a source and at least one relay");
    assert!(nu >= 1);
    let initial = ChainState::initial(n, nu);
    let mut states = vec![initial.clone()];
    let mut index = BTreeMap::new();
    index.insert(initial, 0usize);
    let mut rows: Vec<BTreeMap<usize, f64>> = Vec::new();
    while rows.len() < states.len() {
        let state = states[rows.len()].clone();
        let mut row = BTreeMap::new();
        for (next, p) in successors(&state, n, rule) {
            let next_id = *index.entry(next.clone()).or_insert_with(|| {
                states.push(next);
                states.len() - 1
            });
            *row.entry(next_id).or_insert(0.0) += p;
        }
        rows.push(row);
    }
    let size = states.len();
    let matrix: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|row| {
            let mut dense = vec![0.0; size];
            for (j, p) in row {
                dense[j] = p;
            }
            dense
        })
        .collect();
    let absorbing = states
        .iter()
        .position(|s| s.is_absorbing(nu))
        .expect("the all-full state is reachable");
    Chain { n, nu, rule, states, index, matrix, absorbing }
}

/// Largest deviation of any row sum from one.
pub fn row_stochastic_error(chain: &Chain) -> f64 {
    chain
        .matrix
        .iter()
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Entrywise comparison of two chains over the same instance. Matches states
/// by content, not discovery order. Returns the largest absolute difference;
/// a state present in one chain only counts as a full-mass difference.
pub fn matrix_difference(a: &Chain, b: &Chain) -> f64 {
    assert_eq!(a.n, b.n);
    assert_eq!(a.nu, b.nu);
    if a.states.len() != b.states.len()
        || a.index.keys().any(|s| !b.index.contains_key(s))
    {
        return 1.0;
    }
    let mut worst = 0.0f64;
    for (sa, &ia) in &a.index {
        let ib = b.index[sa];
        for (sc, &ja) in &a.index {
            let jb = b.index[sc];
            let diff = (a.matrix[ia][ja] - b.matrix[ib][jb]).abs();
            worst = worst.max(diff);
        }
    }
    worst
}

/// P(absorbed within k steps) for k = 1..=steps, starting from the initial
/// state.
pub fn absorption_cdf(chain: &Chain, steps: usize) -> Vec<f64> {
    let size = chain.states.len();
    let mut dist = vec![0.0; size];
    dist[0] = 1.0;
    let mut cdf = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = vec![0.0; size];
        for (i, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (j, &p) in chain.matrix[i].iter().enumerate() {
                if p > 0.0 {
                    next[j] += mass * p;
                }
            }
        }
        dist = next;
        cdf.push(dist[chain.absorbing]);
    }
    cdf
}

/// Steps until absorption in one stochastic realization of the feedback
/// chain, simulated directly (uniform pair, uniform missing packet per
/// direction) without touching the matrix machinery. `cap` bounds runaway
/// walks; hitting it reports `cap`.
pub fn simulate_absorption_steps(n: usize, nu: u16, rng: &mut impl Rng, cap: u32) -> u32 {
    let mut state = ChainState::initial(n, nu);
    for step in 1..=cap {
        // uniform unordered pair by rejection
        let (i, j) = loop {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                break (i.min(j), i.max(j));
            }
        };
        let missing_j: Vec<u16> = state.0[i].difference(&state.0[j]).copied().collect();
        let missing_i: Vec<u16> = state.0[j].difference(&state.0[i]).copied().collect();
        if let Some(&id) = pick(&missing_j, rng) {
            state.0[j].insert(id);
        }
        if let Some(&id) = pick(&missing_i, rng) {
            state.0[i].insert(id);
        }
        if state.is_absorbing(nu) {
            return step;
        }
    }
    cap
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl Rng) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.random_range(0..items.len())])
    }
}

/// Empirical absorption CDF over `runs` simulated walks.
pub fn simulated_absorption_cdf(
    n: usize,
    nu: u16,
    runs: u32,
    steps: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; steps];
    for _ in 0..runs {
        let t = simulate_absorption_steps(n, nu, &mut rng, steps as u32 + 1);
        if (t as usize) <= steps {
            counts[t as usize - 1] += 1;
        }
    }
    let mut acc = 0u32;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / runs as f64
        })
        .collect()
}

/// One point of the finite-field comparison: paired single-batch spread
/// runs, blind recombination versus feedback selection, launched from
/// identical initial placements on the same contact traces.
#[derive(Clone, Copy, Debug)]
pub struct QGapPoint {
    pub field_k: u32,
    /// Mean completion time, blind recombination over GF(2^k).
    pub mean_blind: f64,
    /// Mean completion time, feedback forwarding (field-independent).
    pub mean_feedback: f64,
    /// (mean_blind - mean_feedback) / mean_feedback.
    pub relative_gap: f64,
    /// Standard error of the relative gap, from the paired differences.
    pub gap_se: f64,
    /// Mean fraction of blind transmissions that raised the receiver's rank.
    pub innovation_rate_blind: f64,
    /// Same fraction under feedback, which only ever offers what is missing.
    pub innovation_rate_feedback: f64,
}

/// Run the paired experiment across a ladder of field sizes. Both sides
/// start from the same initial condition - one copy of each of the `nu`
/// packets parked on `nu` distinct relays, the source silent from then on -
/// so the runs differ only in the relay forwarding rule: feedback hands over
/// a packet the receiver verifiably lacks, blind forwarding sends a random
/// combination of the sender's buffer. Every trace is run to completion
/// under feedback once and under blind forwarding once per field size; a
/// horizon too short for any run is an error, never a silently dropped
/// sample.
pub fn compare_finite_q(
    n: usize,
    nu: usize,
    buffer: usize,
    lambda: f64,
    horizon: f64,
    n_traces: u32,
    field_ks: &[u32],
    base_seed: u64,
) -> Result<Vec<QGapPoint>, ProtocolError> {
    if n_traces < 2 {
        return Err(ProtocolError::BadConfig("paired comparison needs at least 2 traces".into()));
    }
    let mut feedback_times = Vec::with_capacity(n_traces as usize);
    let mut feedback_rates = Vec::with_capacity(n_traces as usize);
    let mut blind_times: Vec<Vec<f64>> = vec![Vec::with_capacity(n_traces as usize); field_ks.len()];
    let mut blind_rates: Vec<Vec<f64>> = blind_times.clone();
    for t in 0..n_traces {
        let trace = generate_trace(&MobilityConfig {
            n,
            lambda,
            horizon,
            seed: base_seed.wrapping_add(t as u64),
        })?;
        // Completion time plus the useful fraction of transmissions; a run
        // that never needed to transmit wasted nothing.
        let outcome = |cfg| -> Result<(f64, f64), ProtocolError> {
            let m = run_trace(&cfg, &trace)?;
            let completion = m.batches[0].propagation_time().ok_or_else(|| {
                ProtocolError::BadConfig(format!(
                    "horizon {horizon} too short: a run on trace {t} did not complete"
                ))
            })?;
            let rate = if m.transmissions == 0 {
                1.0
            } else {
                1.0 - m.redundant_transmissions as f64 / m.transmissions as f64
            };
            Ok((completion, rate))
        };
        let fb = RunBuilder::new(ProtocolKind::Benchmark3, nu, buffer)
            .forwarding(Forwarding::Delta)
            .placement_counts(vec![1; nu])
            .seed(base_seed ^ 0x5EED_0000 ^ t as u64)
            .record_series(false)
            .build();
        let (time, rate) = outcome(fb)?;
        feedback_times.push(time);
        feedback_rates.push(rate);
        for (ki, &k) in field_ks.iter().enumerate() {
            let blind = RunBuilder::new(ProtocolKind::Benchmark3, nu, buffer)
                .forwarding(Forwarding::Gamma)
                .placement_counts(vec![1; nu])
                .field_k(k)
                .packet_bits(k)
                .seed(base_seed ^ 0xB11D_0000 ^ t as u64)
                .record_series(false)
                .build();
            let (time, rate) = outcome(blind)?;
            blind_times[ki].push(time);
            blind_rates[ki].push(rate);
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_feedback = mean(&feedback_times);
    let rate_feedback = mean(&feedback_rates);
    Ok(field_ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let times = &blind_times[ki];
            let diffs: Vec<f64> = times
                .iter()
                .zip(&feedback_times)
                .map(|(b, f)| b - f)
                .collect();
            let mean_diff = mean(&diffs);
            let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>()
                / (diffs.len() - 1) as f64;
            let se = (var / diffs.len() as f64).sqrt();
            QGapPoint {
                field_k: k,
                mean_blind: mean(times),
                mean_feedback,
                relative_gap: mean_diff / mean_feedback,
                gap_se: se / mean_feedback,
                innovation_rate_blind: mean(&blind_rates[ki]),
                innovation_rate_feedback: rate_feedback,
            }
        })
        .collect())
}

/// How the overlapping spans are arranged in an innovation-rate experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapScenario {
    /// Sender holds the whole batch, receiver one dimension short of it.
    SourceToPartial,
    /// Sender and receiver each hold two of three dimensions, sharing one.
    PartialOverlap,
}

#[derive(Clone, Copy, Debug)]
pub struct InnovationCheck {
    pub field_k: u32,
    pub trials: u32,
    pub successes: u32,
    /// The conditional guarantee the empirical rate must respect: 1 - 1/q.
    pub lower_bound: f64,
}

impl InnovationCheck {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Empirical probability that one blind combination from the sender's span
/// is innovative for the receiver, under the chosen overlap. In both
/// scenarios the sender has exactly one dimension beyond the receiver, so
/// the conditional innovation probability is exactly 1 - 1/q; the sample
/// rate must sit within binomial noise of it.
pub fn blind_innovation_rate(
    field_k: u32,
    scenario: OverlapScenario,
    trials: u32,
    seed: u64,
) -> Result<InnovationCheck, ProtocolError> {
    let field = FieldSpec::new(field_k)?;
    let nu = 3usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let batch = VariableBatch::random(0, nu, field_k, &field, &mut rng)?;
    let master = encode_batch(&batch, &field, &mut rng);
    let mut successes = 0u32;
    for _ in 0..trials {
        let mut sender = Buffer::new(nu, nu);
        let mut receiver = Buffer::new(nu, nu);
        match scenario {
            OverlapScenario::SourceToPartial => {
                for pkt in &master {
                    sender.insert(&field, pkt.clone())?;
                }
                // Receiver: two independent random combinations of the batch.
                while receiver.rank() < 2 {
                    if let Some(pkt) = sender.random_combination(&field, &mut rng) {
                        receiver.insert(&field, pkt)?;
                    }
                }
            }
            OverlapScenario::PartialOverlap => {
                // Shared dimension: master packet 1. Sender adds 0, receiver
                // adds 2, so each is one dimension beyond the other.
                sender.insert(&field, master[0].clone())?;
                sender.insert(&field, master[1].clone())?;
                receiver.insert(&field, master[1].clone())?;
                receiver.insert(&field, master[2].clone())?;
            }
        }
        let combo = sender
            .random_combination(&field, &mut rng)
            .expect("sender holds at least one row");
        if receiver.is_innovative(&field, &combo)? {
            successes += 1;
        }
    }
    Ok(InnovationCheck {
        field_k,
        trials,
        successes,
        lower_bound: 1.0 - 1.0 / (1u64 << field_k) as f64,
    })
}

/// The feedback analogue of the same experiments: the sender transfers a
/// specific packet the receiver is missing, which raises the rank every
/// single time.
pub fn feedback_innovation_rate(
    field_k: u32,
    scenario: OverlapScenario,
    trials: u32,
    seed: u64,
) -> Result<InnovationCheck, ProtocolError> {
    let field = FieldSpec::new(field_k)?;
    let nu = 3usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let batch = VariableBatch::random(0, nu, field_k, &field, &mut rng)?;
    let master = encode_batch(&batch, &field, &mut rng);
    let mut successes = 0u32;
    for _ in 0..trials {
        let mut receiver = Buffer::new(nu, nu);
        let missing: usize = match scenario {
            OverlapScenario::SourceToPartial => {
                receiver.insert(&field, master[0].clone())?;
                receiver.insert(&field, master[1].clone())?;
                2
            }
            OverlapScenario::PartialOverlap => {
                receiver.insert(&field, master[1].clone())?;
                receiver.insert(&field, master[2].clone())?;
                0
            }
        };
        let out = receiver.insert(&field, master[missing].clone())?;
        if out == InsertOutcome::Stored {
            successes += 1;
        }
    }
    Ok(InnovationCheck { field_k, trials, successes, lower_bound: 1.0 })
}
