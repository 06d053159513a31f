//! End-to-end tests of the installed binary: every subcommand, the exit-code
//! contract, determinism of emitted files, and the timeline-rescale flag.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rlncsim"))
}

/// Fresh scratch directory per test.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rlncsim-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const BASE_CONF: &str = "\
[mobility]
n = 10
lambda = 0.6
horizon = 400
seeds = 1, 2

[protocol]
kind = gamma, delta
nu = 2
buffer = 3

[batches]
n_batches = 2
";

#[test]
fn gen_trace_is_deterministic_and_echoes_args() {
    let dir = scratch("gentrace");
    let a = dir.join("a.trace");
    let b = dir.join("b.trace");
    for path in [&a, &b] {
        let out = bin()
            .args(["gen-trace", "--n", "7", "--lambda", "0.3", "--horizon", "50", "--seed", "9"])
            .arg("--out")
            .arg(path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("N=7\nlambda=0.3\nhorizon=50\nseed=9\n"), "header: {text:.80}");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "same flags, same bytes");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_trace_missing_flag_is_a_usage_error() {
    let out = bin().args(["gen-trace", "--n", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_emits_deterministic_tables_with_config_echo() {
    let dir = scratch("run");
    let conf = dir.join("exp.conf");
    write(&conf, BASE_CONF);
    for sub in ["one", "two"] {
        let out = bin()
            .arg("run")
            .arg("--config")
            .arg(&conf)
            .arg("--out-dir")
            .arg(dir.join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["summary.csv", "batches.csv", "aggregate.csv", "entropy_gamma_s1.csv", "efficiency_delta_s2.csv"] {
        let a = fs::read(dir.join("one").join(file)).unwrap();
        let b = fs::read(dir.join("two").join(file)).unwrap();
        assert_eq!(a, b, "{file} must be byte-identical across reruns");
    }
    let summary = fs::read_to_string(dir.join("one/summary.csv")).unwrap();
    assert!(summary.starts_with("# mobility.n = 10\n"), "echo header missing");
    assert!(summary.contains("protocol,trace_seed,elapsed_sim_time"));
    // One row per protocol x seed.
    assert_eq!(summary.lines().filter(|l| l.starts_with("gamma,")).count(), 2);
    assert_eq!(summary.lines().filter(|l| l.starts_with("delta,")).count(), 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn run_rejects_bad_configs_naming_the_field() {
    let dir = scratch("badconf");
    let conf = dir.join("bad.conf");
    write(&conf, "[mobility]\nn = 10\nlambda = 0.6\nhorizon = 50\nseeds = 1\n[protocol]\nkind = delta\nnu = 2\nbuffer = 30\n");
    let out = bin().arg("run").arg("--config").arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("buffer"), "stderr: {}", stderr(&out));

    write(&conf, "[mobility]\nn = 10\nlambda = 0.6\nhorizon = 50\nseeds = \n[protocol]\nkind = delta\nnu = 2\nbuffer = 3\n");
    let out = bin().arg("run").arg("--config").arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seeds"), "stderr: {}", stderr(&out));

    let out = bin().arg("run").arg("--config").arg(dir.join("missing.conf")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn run_uses_a_referenced_trace_file_and_checks_its_shape() {
    let dir = scratch("tracerun");
    let trace = dir.join("shared.trace");
    let out = bin()
        .args(["gen-trace", "--n", "10", "--lambda", "0.6", "--horizon", "400", "--seed", "3"])
        .arg("--out")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let conf = dir.join("exp.conf");
    write(
        &conf,
        &format!(
            "[mobility]\nn = 10\nlambda = 0.6\nhorizon = 400\nseeds = 1, 2\ntrace = {}\n[protocol]\nkind = delta\nnu = 2\nbuffer = 3\n",
            trace.display()
        ),
    );
    let out_dir = dir.join("out");
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&conf)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    // Both seeds share the trace, so both rows report the same elapsed time
    // (protocol randomness differs but completion here is contact-limited).
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| l.starts_with("delta,")).collect();
    assert_eq!(rows.len(), 2);

    // A trace whose node count disagrees with the config is refused.
    write(
        &conf,
        &format!(
            "[mobility]\nn = 12\nlambda = 0.6\nhorizon = 400\nseeds = 1\ntrace = {}\n[protocol]\nkind = delta\nnu = 2\nbuffer = 3\n",
            trace.display()
        ),
    );
    let out = bin().arg("run").arg("--config").arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("n = 10"), "stderr: {}", stderr(&out));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn rescale_flag_divides_reported_times_by_n_minus_2() {
    let dir = scratch("rescale");
    let plain = dir.join("plain.conf");
    let scaled = dir.join("scaled.conf");
    write(&plain, BASE_CONF);
    write(&scaled, &format!("{BASE_CONF}\n[outputs]\nrescale_timeline = true\n"));
    for (conf, sub) in [(&plain, "plain"), (&scaled, "scaled")] {
        let out = bin()
            .arg("run")
            .arg("--config")
            .arg(conf)
            .arg("--out-dir")
            .arg(dir.join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let elapsed = |sub: &str| -> f64 {
        let text = fs::read_to_string(dir.join(sub).join("summary.csv")).unwrap();
        let row = text.lines().find(|l| l.starts_with("gamma,1,")).unwrap();
        row.split(',').nth(2).unwrap().parse().unwrap()
    };
    let ratio = elapsed("plain") / elapsed("scaled");
    assert!((ratio - 8.0).abs() < 1e-9, "n - 2 = 8, got ratio {ratio}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_writes_run_and_summary_tables() {
    let dir = scratch("sweep");
    let conf = dir.join("exp.conf");
    write(&conf, BASE_CONF);
    let out_dir = dir.join("out");
    let out = bin()
        .arg("sweep")
        .arg("--config")
        .arg(&conf)
        .args(["--param", "buffer", "--values", "3,4"])
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let runs = fs::read_to_string(out_dir.join("sweep_runs.csv")).unwrap();
    assert!(runs.contains("# sweep.param = buffer"));
    // 2 values x 2 protocols x 2 seeds
    assert_eq!(runs.lines().filter(|l| l.starts_with("buffer,")).count(), 8);
    let summary = fs::read_to_string(out_dir.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("buffer,")).count(), 4);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_rejects_unknown_parameters_and_bad_values() {
    let dir = scratch("sweepbad");
    let conf = dir.join("exp.conf");
    write(&conf, BASE_CONF);
    let out = bin()
        .arg("sweep")
        .arg("--config")
        .arg(&conf)
        .args(["--param", "lambda", "--values", "1,2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown sweep parameter"));

    let out = bin()
        .arg("sweep")
        .arg("--config")
        .arg(&conf)
        .args(["--param", "q", "--values", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("power of two"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn oracle_quick_run_passes_and_reports() {
    let out = bin()
        .args([
            "oracle",
            "--nmax",
            "3",
            "--numax",
            "2",
            "--trials",
            "400",
            "--skip-ladder",
            "--seed",
            "11",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS] chain n=3 nu=2"), "stdout: {text}");
    assert!(text.contains("[SKIP] finite-field ladder"));
    assert!(text.contains("0 failed"));
}

#[test]
fn worker_count_env_var_is_validated() {
    let dir = scratch("workers");
    let conf = dir.join("exp.conf");
    write(&conf, BASE_CONF);
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&conf)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .env("RLNCSIM_WORKERS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&conf)
        .env("RLNCSIM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("RLNCSIM_WORKERS"));
    fs::remove_dir_all(&dir).unwrap();
}
