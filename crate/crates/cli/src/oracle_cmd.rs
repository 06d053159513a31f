//! The `oracle` subcommand: self-checks that the two transfer rules generate
//! the same small-instance dynamics, that the chain machinery matches direct
//! simulation, that innovation rates respect the field-size bound, and that
//! the finite-field completion-time gap closes as the field grows. Prints one
//! line per check and fails the process (exit code 3) when any check fails.

use rlncsim_core::oracle::{
    absorption_cdf, blind_innovation_rate, build_chain, compare_finite_q,
    feedback_innovation_rate, matrix_difference, row_stochastic_error, simulated_absorption_cdf,
    OverlapScenario, TransferRule,
};

use crate::CliError;

pub struct OracleArgs {
    pub nmax: usize,
    pub numax: u16,
    pub trials: u32,
    /// Field sizes for the innovation-rate checks.
    pub qs: Vec<u64>,
    /// Field sizes for the completion-time ladder.
    pub ladder_qs: Vec<u64>,
    pub traces: u32,
    pub seed: u64,
    pub skip_ladder: bool,
}

struct Report {
    passed: u32,
    failed: u32,
}

impl Report {
    fn check(&mut self, ok: bool, line: String) {
        if ok {
            self.passed += 1;
            println!("[PASS] {line}");
        } else {
            self.failed += 1;
            println!("[FAIL] {line}");
        }
    }
}

fn field_exponents(qs: &[u64], what: &str) -> Result<Vec<u32>, CliError> {
    qs.iter()
        .map(|&q| {
            if q.is_power_of_two() && (2..=65536).contains(&q) {
                Ok(q.trailing_zeros())
            } else {
                Err(CliError::Config(format!(
                    "{what}: field size {q} is not a power of two in 2..=65536"
                )))
            }
        })
        .collect()
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    if args.nmax < 2 || args.numax < 1 {
        return Err(CliError::Config("oracle needs --nmax >= 2 and --numax >= 1".into()));
    }
    if args.trials < 10 {
        return Err(CliError::Config("oracle needs --trials >= 10".into()));
    }
    let ks = field_exponents(&args.qs, "--q")?;
    let ladder_ks = field_exponents(&args.ladder_qs, "--ladder-q")?;
    let mut report = Report { passed: 0, failed: 0 };

    // Exact equality of the two transfer rules on every small instance.
    for n in 2..=args.nmax {
        for nu in 1..=args.numax {
            let feedback = build_chain(n, nu, TransferRule::Feedback);
            let blind = build_chain(n, nu, TransferRule::IdealBlind);
            let row_err = row_stochastic_error(&feedback).max(row_stochastic_error(&blind));
            let gap = matrix_difference(&feedback, &blind);
            report.check(
                row_err <= 1e-12 && gap <= 1e-12,
                format!(
                    "chain n={n} nu={nu}: {} states, row-sum error {row_err:.2e}, rule gap {gap:.2e}",
                    feedback.states.len()
                ),
            );
        }
    }

    // Chain machinery against direct stochastic simulation.
    {
        let (n, nu, steps, runs) = (3, 2, 40, 20_000u32);
        let chain = build_chain(n, nu, TransferRule::Feedback);
        let exact = absorption_cdf(&chain, steps);
        let sampled = simulated_absorption_cdf(n, nu, runs, steps, args.seed);
        let worst_z = exact
            .iter()
            .zip(&sampled)
            .map(|(e, s)| {
                let sigma = (e * (1.0 - e) / runs as f64).sqrt();
                if sigma > 0.0 {
                    (e - s).abs() / sigma
                } else {
                    if e == s { 0.0 } else { f64::INFINITY }
                }
            })
            .fold(0.0f64, f64::max);
        report.check(
            worst_z <= 3.0,
            format!(
                "absorption n={n} nu={nu}: analytic vs {runs} runs, worst per-step z = {worst_z:.2}"
            ),
        );
    }

    // Innovation-rate bounds at the requested field sizes.
    for &k in &ks {
        let q = (1u64 << k) as f64;
        for scenario in [OverlapScenario::SourceToPartial, OverlapScenario::PartialOverlap] {
            let blind = blind_innovation_rate(k, scenario, args.trials, args.seed)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let p = blind.lower_bound;
            let sigma = (p * (1.0 - p) / args.trials as f64).sqrt();
            report.check(
                blind.rate() >= p - 3.0 * sigma,
                format!(
                    "innovation q={} {scenario:?}: blind rate {:.4} vs bound 1 - 1/q = {p:.4} (3 sigma = {:.4})",
                    q, blind.rate(), 3.0 * sigma
                ),
            );
            let fb = feedback_innovation_rate(k, scenario, args.trials, args.seed)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            report.check(
                fb.successes == fb.trials,
                format!(
                    "innovation q={} {scenario:?}: feedback rate {}/{} (must be every trial)",
                    q, fb.successes, fb.trials
                ),
            );
        }
    }

    // Finite-field ladder: paired spread runs from identical placements, so
    // the signed blind-minus-feedback completion gap isolates what blindness
    // costs; it must shrink with q and end below 1%.
    if args.skip_ladder {
        println!("[SKIP] finite-field ladder (--skip-ladder)");
    } else {
        let points = compare_finite_q(15, 3, 3, 1.0, 500.0, args.traces, &ladder_ks, args.seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for pair in points.windows(2) {
            let slack = 3.0 * (pair[0].gap_se + pair[1].gap_se);
            report.check(
                pair[1].relative_gap <= pair[0].relative_gap + slack,
                format!(
                    "ladder q={} -> q={}: relative gap {:+.4} -> {:+.4} (slack {:.4})",
                    1u64 << pair[0].field_k,
                    1u64 << pair[1].field_k,
                    pair[0].relative_gap,
                    pair[1].relative_gap,
                    slack
                ),
            );
        }
        for p in &points {
            report.check(
                p.innovation_rate_feedback >= 1.0 - 1e-12
                    && p.innovation_rate_feedback >= p.innovation_rate_blind,
                format!(
                    "ladder q={}: useful-transmission rate, feedback {:.4} >= blind {:.4}",
                    1u64 << p.field_k,
                    p.innovation_rate_feedback,
                    p.innovation_rate_blind
                ),
            );
        }
        if let Some(first) = points.first() {
            report.check(
                first.relative_gap > 0.0,
                format!(
                    "ladder q={}: blind forwarding must lose time to feedback, gap {:+.4}",
                    1u64 << first.field_k,
                    first.relative_gap
                ),
            );
        }
        if let Some(last) = points.last() {
            report.check(
                last.relative_gap < 0.01,
                format!(
                    "ladder q={}: blind forwarding gives up {:+.5} completion time, must be \
                     under 1% ({} paired traces)",
                    1u64 << last.field_k,
                    last.relative_gap,
                    args.traces
                ),
            );
        }
    }

    println!("oracle: {} passed, {} failed", report.passed, report.failed);
    if report.failed > 0 {
        Err(CliError::Oracle(format!("{} oracle check(s) failed", report.failed)))
    } else {
        Ok(())
    }
}
