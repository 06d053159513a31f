//! Spread metrics and analytic companions.
//!
//! Densities count, for each packet lineage, the fraction of relay nodes
//! holding it (the source never counts). The entropy of the normalized
//! density vector, taken to base nu, lands in [0, 1] and peaks at a uniform
//! spread; the expected fraction of efficient contacts is a direct function
//! of the same densities. Closed forms for the seeding phase and tail bounds
//! on completion time live here too, next to their consumers.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least two lineages, got {0}")]
    NuTooSmall(usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("samples must be positive and finite (offender: {0})")]
    BadSample(f64),
    #[error("window must cover at least two contacts, got {0}")]
    WindowTooSmall(usize),
    #[error("densities must lie in [0, 1] (offender: {0})")]
    BadDensity(f64),
}

/// Per-lineage spread at one instant: `holders[i]` relays currently hold
/// lineage `i`, out of `relays` non-source nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityVector {
    pub time: f64,
    pub holders: Vec<u32>,
    pub relays: u32,
}

impl DensityVector {
    /// Raw densities m_i / (N-1).
    pub fn rho(&self) -> Vec<f64> {
        self.holders.iter().map(|&m| m as f64 / self.relays as f64).collect()
    }

    /// Densities rescaled to sum to one; `None` when nothing is held yet.
    pub fn normalized(&self) -> Option<Vec<f64>> {
        let total: u64 = self.holders.iter().map(|&m| m as u64).sum();
        if total == 0 {
            return None;
        }
        Some(self.holders.iter().map(|&m| m as f64 / total as f64).collect())
    }
}

/// Which lineages one node holds; `bits.len()` is its buffer occupancy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferIndicator {
    pub node: usize,
    pub bits: std::collections::BTreeSet<u16>,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EntropyResult {
    /// Entropy of the normalized densities, base nu, in [0, 1].
    pub value: f64,
    /// Set when every density was zero (the value is 0 by convention).
    pub degenerate: bool,
}

/// Entropy of a density vector to base nu = densities.len(). The input does
/// not need to be normalized. A single lineage has no spread diversity to
/// measure, so nu = 1 is rejected; an all-zero vector yields 0, flagged.
/// Zero entries contribute nothing (x log 1/x -> 0 as x -> 0).
pub fn entropy(densities: &[f64]) -> Result<EntropyResult, MetricsError> {
    let nu = densities.len();
    if nu < 2 {
        return Err(MetricsError::NuTooSmall(nu));
    }
    for &d in densities {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(MetricsError::BadDensity(d));
        }
    }
    let total: f64 = densities.iter().sum();
    if total == 0.0 {
        return Ok(EntropyResult { value: 0.0, degenerate: true });
    }
    let ln_nu = (nu as f64).ln();
    let mut h = 0.0;
    for &d in densities {
        if d > 0.0 {
            let w = d / total;
            h -= w * w.ln();
        }
    }
    Ok(EntropyResult { value: (h / ln_nu).clamp(0.0, 1.0), degenerate: false })
}

/// Expected fraction of efficient contacts in the single-packet-per-node
/// regime: sum of rho_k (1 - rho_k). Also applies to buffer-indicator
/// densities when each node is collapsed to an indicator class.
pub fn expected_efficient_fraction(rho: &[f64]) -> Result<f64, MetricsError> {
    for &r in rho {
        if !(0.0..=1.0).contains(&r) || !r.is_finite() {
            return Err(MetricsError::BadDensity(r));
        }
    }
    Ok(rho.iter().map(|&r| r * (1.0 - r)).sum())
}

/// Expected number of efficient next contacts over all relays.
pub fn expected_efficient_contacts(relays: u32, rho: &[f64]) -> Result<f64, MetricsError> {
    Ok(relays as f64 * expected_efficient_fraction(rho)?)
}

/// Expected number of placement attempts to seed nu distinct relays out of a
/// population of n nodes: sum over i of n / (n - i + 1). Attempt i succeeds
/// when the contacted node is not among the i-1 already seeded.
pub fn seeding_expectation(n: u32, nu: u32) -> f64 {
    (1..=nu).map(|i| n as f64 / (n - i + 1) as f64).sum()
}

/// Upper bounds pi_i on the probability that packet i is still co-located
/// with another packet of its batch when the source finishes handing out the
/// batch: the initial placement collides and every remaining per-step
/// relocation opportunity misses. pi_1 = 0 (nothing to collide with).
pub fn seeding_failure_bounds(n: u32, nu: u32) -> Vec<f64> {
    (1..=nu)
        .map(|i| {
            let collide = (i - 1) as f64 / n as f64;
            let stuck: f64 = (i + 1..=nu).map(|k| (k - 1) as f64 / n as f64).product();
            collide * stuck
        })
        .collect()
}

/// Fraction of samples strictly above the threshold.
pub fn empirical_tail(samples: &[f64], tl: f64) -> Result<f64, MetricsError> {
    check_tail_inputs(samples, tl)?;
    let over = samples.iter().filter(|&&t| t > tl).count();
    Ok(over as f64 / samples.len() as f64)
}

/// Markov bound on P[T > tl] from the sample mean, clamped to [0, 1].
pub fn markov_bound(samples: &[f64], tl: f64) -> Result<f64, MetricsError> {
    check_tail_inputs(samples, tl)?;
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok((mean / tl).clamp(0.0, 1.0))
}

/// Chernoff-style bound from the empirical moment generating function:
/// min over a grid of s > 0 of exp(-s tl) * mean(exp(s T_i)), clamped to
/// [0, 1]. The grid is 64 log-spaced points up to s_max = 700 / max(T), which
/// keeps every exp(s T_i) finite in double precision; the optimization runs
/// in log space regardless. For any s this expression dominates the
/// empirical tail, so the minimum does too.
pub fn chernoff_bound(samples: &[f64], tl: f64) -> Result<f64, MetricsError> {
    check_tail_inputs(samples, tl)?;
    let n = samples.len() as f64;
    let max_t = samples.iter().cloned().fold(f64::MIN, f64::max);
    let s_max = 700.0 / max_t;
    let s_min = s_max * 1e-6;
    let ratio = (s_max / s_min).powf(1.0 / 63.0);
    let mut best = f64::INFINITY;
    let mut s = s_min;
    for _ in 0..64 {
        // log of exp(-s tl) * (1/n) sum exp(s T_i), via log-sum-exp
        let m = s * max_t;
        let sum: f64 = samples.iter().map(|&t| (s * t - m).exp()).sum();
        let log_bound = -s * tl + m + sum.ln() - n.ln();
        best = best.min(log_bound);
        s *= ratio;
    }
    Ok(best.exp().clamp(0.0, 1.0))
}

fn check_tail_inputs(samples: &[f64], tl: f64) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(tl > 0.0) || !tl.is_finite() {
        return Err(MetricsError::BadThreshold(tl));
    }
    for &t in samples {
        if !(t > 0.0) || !t.is_finite() {
            return Err(MetricsError::BadSample(t));
        }
    }
    Ok(())
}

/// Trailing-window efficiency rate. `outcomes` holds one entry per contact:
/// its time and how many of its two directions were efficient. Point j (for
/// j >= window) is the efficient-direction count over contacts
/// j-window+1 ..= j divided by the time elapsed since contact j-window, i.e.
/// `window` contacts over `window` inter-contact gaps.
pub fn sliding_efficiency(
    outcomes: &[(f64, u32)],
    window: usize,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    if window < 2 {
        return Err(MetricsError::WindowTooSmall(window));
    }
    if outcomes.len() <= window {
        return Ok(Vec::new());
    }
    let mut series = Vec::with_capacity(outcomes.len() - window);
    let mut sum: u64 = outcomes[1..=window].iter().map(|&(_, e)| e as u64).sum();
    for j in window..outcomes.len() {
        let span = outcomes[j].0 - outcomes[j - window].0;
        series.push((outcomes[j].0, sum as f64 / span));
        if j + 1 < outcomes.len() {
            sum -= outcomes[j - window + 1].1 as u64;
            sum += outcomes[j + 1].1 as u64;
        }
    }
    Ok(series)
}

/// Time average of a piecewise-constant series sampled at event times:
/// each value holds from its own timestamp to the next, the last one ending
/// at `end`. Points at or after `end` are ignored.
pub fn time_average(series: &[(f64, f64)], end: f64) -> Option<f64> {
    let live: Vec<&(f64, f64)> = series.iter().filter(|(t, _)| *t < end).collect();
    let first = live.first()?;
    let span = end - first.0;
    if !(span > 0.0) {
        return None;
    }
    let mut acc = 0.0;
    for pair in live.windows(2) {
        acc += pair[0].1 * (pair[1].0 - pair[0].0);
    }
    let last = live.last()?;
    acc += last.1 * (end - last.0);
    Some(acc / span)
}

/// How one batch's seeding went: placement timing, attempt counts, and
/// whether all packets ended up on distinct relays.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedingReport {
    pub batch: usize,
    pub started_at: f64,
    /// When the seeds become forwardable (start estimate + expected duration).
    pub release_at: f64,
    /// Instant every packet sat on its own relay; `None` if never observed.
    pub finished_at: Option<f64>,
    /// Contacts involving the source while seeding was incomplete.
    pub source_contacts: u32,
    /// Packets actually handed over by the source (= nu when it finished).
    pub source_handovers: u32,
    /// Placement offers, counting source handovers, refused offers, and
    /// relay relocation offers whether or not they landed.
    pub placement_attempts: u32,
    /// Duplicate packets moved onward by a relay.
    pub relocations: u32,
    /// Whether placement was already distinct when the source handed over the
    /// last packet (the strict reading; relocation may still be pending).
    pub distinct_at_source_done: Option<bool>,
    /// All nu packets on distinct relays before the run cut seeding off.
    pub complete: bool,
}

/// Per-batch outcome within a run.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub index: usize,
    /// When the batch's content became available at the source.
    pub created_at: f64,
    /// Propagation start (placement instant, or promotion for pipelined runs).
    pub promoted_at: f64,
    pub seeding: Option<SeedingReport>,
    /// When the last destination decoded, if that happened in the window.
    pub completed_at: Option<f64>,
    /// Destinations decoded within the batch window.
    pub delivered: usize,
    pub destinations: usize,
}

impl BatchRecord {
    /// Propagation time: completion relative to propagation start.
    pub fn propagation_time(&self) -> Option<f64> {
        self.completed_at.map(|t| t - self.promoted_at)
    }

    /// Delay from content availability to full delivery.
    pub fn delay(&self) -> Option<f64> {
        self.completed_at.map(|t| t - self.created_at)
    }
}

/// One contact as a run saw it: who met, and how many of the two transfer
/// directions delivered a packet the receiver could use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactRecord {
    pub time: f64,
    pub a: usize,
    pub b: usize,
    pub efficient_directions: u32,
}

/// Everything a single run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    /// (time, entropy of normalized densities), sampled on change.
    pub entropy_series: Vec<(f64, f64)>,
    /// Raw per-contact outcomes, in time order.
    pub contact_log: Vec<ContactRecord>,
    /// Trailing-window efficiency rate derived from the outcomes.
    pub efficiency_series: Vec<(f64, f64)>,
    pub batches: Vec<BatchRecord>,
    /// Decoded variables per unit time, averaged over destinations.
    pub throughput: f64,
    /// Mean delay over fully delivered batches.
    pub mean_delay: Option<f64>,
    /// Delivered (batch, destination) pairs over all of them.
    pub delivery_ratio: f64,
    pub transmissions: u64,
    pub redundant_transmissions: u64,
    pub source_transmissions: u64,
    /// End of the run: last window close, or the horizon if cut short.
    pub elapsed: f64,
}

impl RunMetrics {
    pub fn entropy_time_average(&self) -> Option<f64> {
        time_average(&self.entropy_series, self.elapsed)
    }

    pub fn efficiency_time_average(&self) -> Option<f64> {
        time_average(&self.efficiency_series, self.elapsed)
    }
}
