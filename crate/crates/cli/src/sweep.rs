//! The `sweep` subcommand: cross-product runs over one swept parameter,
//! replicated over the config's seed list, with per-cell rows and
//! per-value aggregates.

use std::path::Path;

use rayon::prelude::*;
use rlncsim_core::metrics::RunMetrics;
use rlncsim_core::mobility::load_trace;
use rlncsim_core::protocols::ProtocolKind;

use crate::config::ExperimentConfig;
use crate::output::{opt, write_csv, Table, Timeline};
use crate::run::{mean_sd, run_cell};
use crate::CliError;

/// Which knob a sweep varies. Parameter names accept `-` and `_` alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Initial placement shape at a fixed total copy count:
    /// `uniform`, `skewed-2to1`, `all-on-one`.
    Density,
    /// Field size; values must be powers of two up to 2^16.
    Q,
    /// Buffer headroom: buffer = nu + value.
    BMinusNu,
    /// Batch size.
    Nu,
    /// Buffer capacity.
    Buffer,
    /// Batches per run.
    NBatches,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<SweepParam> {
        match s.replace('-', "_").as_str() {
            "density" => Some(SweepParam::Density),
            "q" => Some(SweepParam::Q),
            "b_minus_nu" => Some(SweepParam::BMinusNu),
            "nu" => Some(SweepParam::Nu),
            "buffer" => Some(SweepParam::Buffer),
            "n_batches" => Some(SweepParam::NBatches),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Density => "density",
            SweepParam::Q => "q",
            SweepParam::BMinusNu => "b_minus_nu",
            SweepParam::Nu => "nu",
            SweepParam::Buffer => "buffer",
            SweepParam::NBatches => "n_batches",
        }
    }
}

/// Split `total` copies over `nu` packets in the named shape. Fractional
/// shares are settled by largest remainder, ties to the lower index, so the
/// result is deterministic and sums exactly to `total`.
fn density_counts(shape: &str, nu: usize, total: u32) -> Result<Vec<u32>, CliError> {
    let weights: Vec<f64> = match shape {
        "uniform" => vec![1.0; nu],
        "skewed-2to1" | "skewed-2:1" => {
            let mut w = vec![1.0; nu];
            w[0] = 2.0;
            w
        }
        "all-on-one" => {
            let mut w = vec![0.0; nu];
            w[0] = 1.0;
            w
        }
        other => {
            return Err(CliError::Config(format!(
                "density value {other:?}: expected uniform, skewed-2to1, or all-on-one"
            )))
        }
    };
    let weight_sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| w / weight_sum * total as f64).collect();
    let mut counts: Vec<u32> = shares.iter().map(|s| s.floor() as u32).collect();
    let mut remainders: Vec<(usize, f64)> =
        shares.iter().enumerate().map(|(i, s)| (i, s - s.floor())).collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = total - counts.iter().sum::<u32>();
    for (i, _) in remainders {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    Ok(counts)
}

/// The experiment config for one swept value.
fn apply_value(
    base: &ExperimentConfig,
    param: SweepParam,
    value: &str,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    let parse_usize = |what: &str| -> Result<usize, CliError> {
        value
            .parse()
            .map_err(|_| CliError::Config(format!("{} value {value:?}: expected {what}", param.name())))
    };
    match param {
        SweepParam::Density => {
            // Total copies stay fixed across cells: the base placement's sum,
            // or one copy per relay when the base leaves placement default.
            let total = match &base.placement {
                Some(p) => p.iter().sum(),
                None => (base.n - 1) as u32,
            };
            cfg.placement = Some(density_counts(value, base.nu, total)?);
        }
        SweepParam::Q => {
            let q: u64 = parse_usize("a power of two up to 65536")? as u64;
            if !q.is_power_of_two() || !(2..=65536).contains(&q) {
                return Err(CliError::Config(format!(
                    "q value {value:?}: expected a power of two in 2..=65536"
                )));
            }
            cfg.field_k = q.trailing_zeros();
            // A custom polynomial has the wrong degree for every other k.
            cfg.field_poly = None;
            if cfg.packet_bits % cfg.field_k != 0 {
                cfg.packet_bits = cfg.field_k;
            }
        }
        SweepParam::BMinusNu => cfg.buffer = cfg.nu + parse_usize("a non-negative headroom")?,
        SweepParam::Nu => cfg.nu = parse_usize("a batch size")?,
        SweepParam::Buffer => cfg.buffer = parse_usize("a buffer capacity")?,
        SweepParam::NBatches => cfg.n_batches = parse_usize("a batch count")?,
    }
    cfg.validate()?;
    Ok(cfg)
}

struct SweepCell {
    value: String,
    kind: ProtocolKind,
    seed: u64,
    metrics: RunMetrics,
}

pub fn cmd_sweep(
    base: &ExperimentConfig,
    param_name: &str,
    values_csv: &str,
    out_dir: &Path,
) -> Result<(), CliError> {
    let param = SweepParam::parse(param_name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown sweep parameter {param_name:?}: expected density, q, b_minus_nu, nu, buffer, or n_batches"
        ))
    })?;
    let values: Vec<String> =
        values_csv.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("sweep values list is empty".into()));
    }
    // Resolve every cell's config up front so a bad value fails before any
    // simulation starts.
    let mut cell_cfgs = Vec::new();
    for value in &values {
        cell_cfgs.push((value.clone(), apply_value(base, param, value)?));
    }
    let shared_trace = match &base.trace_path {
        Some(path) => Some(load_trace(path)?),
        None => None,
    };
    let jobs: Vec<(String, ExperimentConfig, ProtocolKind, u64)> = cell_cfgs
        .iter()
        .flat_map(|(value, cfg)| {
            cfg.kinds.iter().flat_map(move |&kind| {
                cfg.seeds
                    .iter()
                    .map(move |&seed| (value.clone(), cfg.clone(), kind, seed))
            })
        })
        .collect();
    let cells: Vec<SweepCell> = jobs
        .into_par_iter()
        .map(|(value, cfg, kind, seed)| -> Result<SweepCell, CliError> {
            let run_cfg = cfg.run_config(kind, seed);
            let metrics = run_cell(&cfg, &shared_trace, &run_cfg, seed).map_err(|e| {
                e.context(format!("{}={value}, {}, seed {seed}", param.name(), kind.name()))
            })?;
            Ok(SweepCell { value, kind, seed, metrics })
        })
        .collect::<Result<_, _>>()?;

    let mut echo = base.echo_lines();
    echo.push(format!("sweep.param = {}", param.name()));
    echo.push(format!("sweep.values = {}", values.join(",")));
    let tl = Timeline::new(base.n, base.rescale_timeline);
    write_csv(&out_dir.join("sweep_runs.csv"), &echo, &runs_table(&cells, param, tl))?;
    write_csv(
        &out_dir.join("sweep_summary.csv"),
        &echo,
        &summary_table(&cells, &values, base, param, tl),
    )?;
    println!(
        "swept {} over {} values ({} cells) into {}",
        param.name(),
        values.len(),
        cells.len(),
        out_dir.display()
    );
    Ok(())
}

fn runs_table(cells: &[SweepCell], param: SweepParam, tl: Timeline) -> Table {
    let mut table = Table::new(vec![
        "param",
        "value",
        "protocol",
        "trace_seed",
        "elapsed_sim_time",
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
            param.name().into(),
            cell.value.clone(),
            cell.kind.name().into(),
            cell.seed.to_string(),
            tl.time(m.elapsed),
            opt(Some(m.delivery_ratio)),
            tl.rate(m.throughput),
            tl.opt_time(m.mean_delay),
            m.transmissions.to_string(),
            m.redundant_transmissions.to_string(),
            m.source_transmissions.to_string(),
            opt(m.entropy_time_average()),
            m.efficiency_time_average().map(|x| tl.rate(x)).unwrap_or_default(),
        ]);
    }
    table
}

fn summary_table(
    cells: &[SweepCell],
    values: &[String],
    base: &ExperimentConfig,
    param: SweepParam,
    tl: Timeline,
) -> Table {
    let mut table = Table::new(vec![
        "param",
        "value",
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
        "redundant_mean_count",
        "redundant_sd_count",
        "entropy_time_avg_mean_norm",
        "entropy_time_avg_sd_norm",
        "efficiency_time_avg_mean_per_sim_time",
        "efficiency_time_avg_sd_per_sim_time",
    ]);
    for value in values {
        for &kind in &base.kinds {
            let group: Vec<&SweepCell> =
                cells.iter().filter(|c| &c.value == value && c.kind == kind).collect();
            let over = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Vec<f64> {
                group.iter().filter_map(|c| f(&c.metrics)).collect()
            };
            let elapsed = mean_sd(&over(&|m| Some(m.elapsed)));
            let delivery = mean_sd(&over(&|m| Some(m.delivery_ratio)));
            let throughput = mean_sd(&over(&|m| Some(m.throughput)));
            let delay = mean_sd(&over(&|m| m.mean_delay));
            let redundant = mean_sd(&over(&|m| Some(m.redundant_transmissions as f64)));
            let entropy = mean_sd(&over(&|m| m.entropy_time_average()));
            let efficiency = mean_sd(&over(&|m| m.efficiency_time_average()));
            let rate = |r: Option<f64>| r.map(|x| tl.rate(x)).unwrap_or_default();
            table.push(vec![
                param.name().into(),
                value.clone(),
                kind.name().into(),
                group.len().to_string(),
                tl.opt_time(elapsed.0),
                tl.opt_time(elapsed.1),
                opt(delivery.0),
                opt(delivery.1),
                rate(throughput.0),
                rate(throughput.1),
                tl.opt_time(delay.0),
                tl.opt_time(delay.1),
                opt(redundant.0),
                opt(redundant.1),
                opt(entropy.0),
                opt(entropy.1),
                rate(efficiency.0),
                rate(efficiency.1),
            ]);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_shapes_keep_the_total_fixed() {
        let uniform = density_counts("uniform", 3, 99).unwrap();
        assert_eq!(uniform, vec![33, 33, 33]);
        let skewed = density_counts("skewed-2to1", 3, 99).unwrap();
        assert_eq!(skewed.iter().sum::<u32>(), 99);
        assert_eq!(skewed, vec![49, 25, 25]);
        let one = density_counts("all-on-one", 3, 99).unwrap();
        assert_eq!(one, vec![99, 0, 0]);
        let colon = density_counts("skewed-2:1", 4, 10).unwrap();
        assert_eq!(colon.iter().sum::<u32>(), 10);
        assert_eq!(colon[0], 4);
        assert!(density_counts("bogus", 3, 9).is_err());
    }

    #[test]
    fn uneven_totals_settle_by_largest_remainder() {
        let counts = density_counts("uniform", 3, 10).unwrap();
        assert_eq!(counts.iter().sum::<u32>(), 10);
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn q_values_must_be_powers_of_two() {
        let base = ExperimentConfig::parse(
            "[mobility]\nn = 8\nlambda = 1\nhorizon = 50\nseeds = 1\n[protocol]\nkind = gamma\nnu = 2\nbuffer = 3\n",
        )
        .unwrap();
        let cfg = apply_value(&base, SweepParam::Q, "256").unwrap();
        assert_eq!(cfg.field_k, 8);
        assert!(apply_value(&base, SweepParam::Q, "3").is_err());
        assert!(apply_value(&base, SweepParam::Q, "131072").is_err());
    }

    #[test]
    fn buffer_headroom_tracks_nu() {
        let base = ExperimentConfig::parse(
            "[mobility]\nn = 8\nlambda = 1\nhorizon = 50\nseeds = 1\n[protocol]\nkind = pipelined-gamma\nnu = 3\nbuffer = 4\n",
        )
        .unwrap();
        let cfg = apply_value(&base, SweepParam::BMinusNu, "2").unwrap();
        assert_eq!(cfg.buffer, 5);
        // Engine-level shape checks still apply downstream; the sweep layer
        // only rejects what the config itself can see.
        assert!(apply_value(&base, SweepParam::Buffer, "9").is_err());
    }

    #[test]
    fn sweep_param_names_accept_both_separators() {
        assert_eq!(SweepParam::parse("b-minus-nu"), Some(SweepParam::BMinusNu));
        assert_eq!(SweepParam::parse("n_batches"), Some(SweepParam::NBatches));
        assert_eq!(SweepParam::parse("lambda"), None);
    }
}
