//! The `gen-trace` and `run` subcommands.

use std::path::Path;

use rayon::prelude::*;
use rlncsim_core::metrics::RunMetrics;
use rlncsim_core::mobility::{generate_trace, load_trace, save_trace, ContactTrace, MobilityConfig};
use rlncsim_core::protocols::{run_trace, ProtocolKind};

use crate::config::ExperimentConfig;
use crate::output::{num, opt, write_csv, Table, Timeline};
use crate::CliError;

pub fn cmd_gen_trace(
    n: usize,
    lambda: f64,
    horizon: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let trace = generate_trace(&MobilityConfig { n, lambda, horizon, seed })?;
    save_trace(&trace, out)?;
    println!("wrote {} contacts to {}", trace.events.len(), out.display());
    Ok(())
}

/// One finished replication: which protocol, which seed, and its metrics.
struct RunCell {
    kind: ProtocolKind,
    seed: u64,
    metrics: RunMetrics,
}

/// Execute every (protocol, seed) cell and emit the result files:
/// `summary.csv` (one row per cell), `batches.csv` (one row per batch),
/// `aggregate.csv` (per-protocol mean and sd over seeds), and per-cell
/// entropy / efficiency series files when series recording is on.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let shared_trace = match &cfg.trace_path {
        Some(path) => {
            let trace = load_trace(path)?;
            if trace.n != cfg.n {
                return Err(CliError::Config(format!(
                    "mobility.trace: file has n = {}, config says n = {}",
                    trace.n, cfg.n
                )));
            }
            Some(trace)
        }
        None => None,
    };
    let jobs: Vec<(ProtocolKind, u64)> = cfg
        .kinds
        .iter()
        .flat_map(|&kind| cfg.seeds.iter().map(move |&seed| (kind, seed)))
        .collect();
    let cells: Vec<RunCell> = jobs
        .into_par_iter()
        .map(|(kind, seed)| -> Result<RunCell, CliError> {
            let run_cfg = cfg.run_config(kind, seed);
            let metrics = run_cell(cfg, &shared_trace, &run_cfg, seed)?;
            Ok(RunCell { kind, seed, metrics })
        })
        .collect::<Result<_, _>>()?;

    let echo = cfg.echo_lines();
    let tl = Timeline::new(cfg.n, cfg.rescale_timeline);
    write_csv(&out_dir.join("summary.csv"), &echo, &summary_table(&cells, tl))?;
    write_csv(&out_dir.join("batches.csv"), &echo, &batches_table(&cells, tl))?;
    write_csv(&out_dir.join("aggregate.csv"), &echo, &aggregate_table(cfg, &cells, tl))?;
    if cfg.record_series {
        for cell in &cells {
            let tag = format!("{}_s{}", cell.kind.name(), cell.seed);
            write_csv(
                &out_dir.join(format!("entropy_{tag}.csv")),
                &echo,
                &series_table(&cell.metrics.entropy_series, "entropy_norm", false, tl),
            )?;
            write_csv(
                &out_dir.join(format!("efficiency_{tag}.csv")),
                &echo,
                &series_table(
                    &cell.metrics.efficiency_series,
                    "efficiency_per_sim_time",
                    true,
                    tl,
                ),
            )?;
        }
    }
    println!(
        "ran {} cells ({} protocols x {} seeds) into {}",
        cells.len(),
        cfg.kinds.len(),
        cfg.seeds.len(),
        out_dir.display()
    );
    Ok(())
}

fn series_table(
    series: &[(f64, f64)],
    value_column: &'static str,
    value_is_rate: bool,
    tl: Timeline,
) -> Table {
    let mut table = Table::new(vec!["sim_time", value_column]);
    for (t, v) in series {
        let value = if value_is_rate { tl.rate(*v) } else { num(*v) };
        table.push(vec![tl.time(*t), value]);
    }
    table
}

fn summary_table(cells: &[RunCell], tl: Timeline) -> Table {
    let mut table = Table::new(vec![
        "protocol",
        "trace_seed",
        "elapsed_sim_time",
        "batches_count",
        "delivery_ratio",
        "throughput_vars_per_sim_time",
        "mean_delay_sim_time",
        "transmissions_count",
        "redundant_transmissions_count",
        "source_transmissions_count",
        "entropy_time_avg_norm",
        "efficiency_time_avg_per_sim_time",
    ]);
    for cell in cells {
        let m = &cell.metrics;
        table.push(vec![
            cell.kind.name().into(),
            cell.seed.to_string(),
            tl.time(m.elapsed),
            m.batches.len().to_string(),
            num(m.delivery_ratio),
            tl.rate(m.throughput),
            tl.opt_time(m.mean_delay),
            m.transmissions.to_string(),
            m.redundant_transmissions.to_string(),
            m.source_transmissions.to_string(),
            opt(m.entropy_time_average()),
            elapsed_rate(m.efficiency_time_average(), tl),
        ]);
    }
    table
}

fn batches_table(cells: &[RunCell], tl: Timeline) -> Table {
    let mut table = Table::new(vec![
        "protocol",
        "trace_seed",
        "batch_index",
        "created_sim_time",
        "promoted_sim_time",
        "completed_sim_time",
        "propagation_sim_time",
        "delay_sim_time",
        "delivered_count",
        "destinations_count",
        "seeding_started_sim_time",
        "seeding_release_sim_time",
        "seeding_finished_sim_time",
        "seeding_source_contacts_count",
        "seeding_handovers_count",
        "seeding_placement_attempts_count",
        "seeding_relocations_count",
        "seeding_distinct_done",
        "seeding_complete",
    ]);
    for cell in cells {
        for b in &cell.metrics.batches {
            let mut row = vec![
                cell.kind.name().into(),
                cell.seed.to_string(),
                b.index.to_string(),
                tl.time(b.created_at),
                tl.time(b.promoted_at),
                tl.opt_time(b.completed_at),
                tl.opt_time(b.propagation_time()),
                tl.opt_time(b.delay()),
                b.delivered.to_string(),
                b.destinations.to_string(),
            ];
            match &b.seeding {
                Some(s) => row.extend([
                    tl.time(s.started_at),
                    tl.time(s.release_at),
                    tl.opt_time(s.finished_at),
                    s.source_contacts.to_string(),
                    s.source_handovers.to_string(),
                    s.placement_attempts.to_string(),
                    s.relocations.to_string(),
                    s.distinct_at_source_done.map(|d| d.to_string()).unwrap_or_default(),
                    s.complete.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 9)),
            }
            table.push(row);
        }
    }
    table
}

/// Sample mean and standard deviation; the sd cell is empty under two
/// samples, the mean cell empty with none.
pub(crate) fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var =
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

fn aggregate_table(cfg: &ExperimentConfig, cells: &[RunCell], tl: Timeline) -> Table {
    let mut table = Table::new(vec![
        "protocol",
        "seeds_count",
        "elapsed_mean_sim_time",
        "elapsed_sd_sim_time",
        "delivery_ratio_mean",
        "delivery_ratio_sd",
        "throughput_mean_vars_per_sim_time",
        "throughput_sd_vars_per_sim_time",
        "mean_delay_mean_sim_time",
        "mean_delay_sd_sim_time",
        "delay_runs_count",
        "transmissions_mean_count",
        "transmissions_sd_count",
        "redundant_mean_count",
        "redundant_sd_count",
        "source_transmissions_mean_count",
        "source_transmissions_sd_count",
        "entropy_time_avg_mean_norm",
        "entropy_time_avg_sd_norm",
        "efficiency_time_avg_mean_per_sim_time",
        "efficiency_time_avg_sd_per_sim_time",
    ]);
    for &kind in &cfg.kinds {
        let runs: Vec<&RunCell> = cells.iter().filter(|c| c.kind == kind).collect();
        let over = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Vec<f64> {
            runs.iter().filter_map(|c| f(&c.metrics)).collect()
        };
        let elapsed = mean_sd(&over(&|m| Some(m.elapsed)));
        let delivery = mean_sd(&over(&|m| Some(m.delivery_ratio)));
        let throughput = mean_sd(&over(&|m| Some(m.throughput)));
        let delays = over(&|m| m.mean_delay);
        let delay = mean_sd(&delays);
        let tx = mean_sd(&over(&|m| Some(m.transmissions as f64)));
        let redundant = mean_sd(&over(&|m| Some(m.redundant_transmissions as f64)));
        let source_tx = mean_sd(&over(&|m| Some(m.source_transmissions as f64)));
        let entropy = mean_sd(&over(&|m| m.entropy_time_average()));
        let efficiency = mean_sd(&over(&|m| m.efficiency_time_average()));
        table.push(vec![
            kind.name().into(),
            runs.len().to_string(),
            tl.opt_time(elapsed.0),
            tl.opt_time(elapsed.1),
            opt(delivery.0),
            opt(delivery.1),
            elapsed_rate(throughput.0, tl),
            elapsed_rate(throughput.1, tl),
            tl.opt_time(delay.0),
            tl.opt_time(delay.1),
            delays.len().to_string(),
            opt(tx.0),
            opt(tx.1),
            opt(redundant.0),
            opt(redundant.1),
            opt(source_tx.0),
            opt(source_tx.1),
            opt(entropy.0),
            opt(entropy.1),
            elapsed_rate(efficiency.0, tl),
            elapsed_rate(efficiency.1, tl),
        ]);
    }
    table
}

fn elapsed_rate(r: Option<f64>, tl: Timeline) -> String {
    r.map(|x| tl.rate(x)).unwrap_or_default()
}

/// Shared by `run` and `sweep`: run one engine configuration against either
/// the shared loaded trace or a freshly generated one for this seed.
pub(crate) fn run_cell(
    cfg: &ExperimentConfig,
    shared: &Option<ContactTrace>,
    run_cfg: &rlncsim_core::protocols::RunConfig,
    seed: u64,
) -> Result<RunMetrics, CliError> {
    match shared {
        Some(trace) => Ok(run_trace(run_cfg, trace)?),
        None => {
            let trace = generate_trace(&MobilityConfig {
                n: cfg.n,
                lambda: cfg.lambda,
                horizon: cfg.horizon,
                seed,
            })?;
            Ok(run_trace(run_cfg, &trace)?)
        }
    }
}
