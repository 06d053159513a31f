//! Result emission. Every file is CSV with the resolved configuration echoed
//! as `#`-prefixed comment lines above the header row, written atomically via
//! a temporary file in the target directory. Column names carry their unit:
//! `_sim_time` for instants and durations on the simulation clock (divided by
//! N - 2 when timeline rescaling is on), `_count` for event counts, `_ratio`
//! and `_norm` for dimensionless quantities in [0, 1], `_per_sim_time` for
//! rates.

use std::fs;
use std::io;
use std::path::Path;
use std::process;

/// A finished table: header plus rows, all preformatted.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Table {
        Table { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Shortest round-tripping decimal form; the same value always prints the
/// same bytes, which keeps outputs bit-identical across runs.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// Optional value; absent prints as an empty cell.
pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Times on the simulation clock pass through here so the timeline-rescale
/// flag is applied in exactly one place.
#[derive(Clone, Copy, Debug)]
pub struct Timeline {
    divisor: f64,
}

impl Timeline {
    pub fn new(n: usize, rescale: bool) -> Timeline {
        Timeline { divisor: if rescale { (n - 2) as f64 } else { 1.0 } }
    }

    pub fn time(&self, t: f64) -> String {
        num(t / self.divisor)
    }

    pub fn opt_time(&self, t: Option<f64>) -> String {
        t.map(|x| self.time(x)).unwrap_or_default()
    }

    /// Per-time rates scale the other way, so rescaled tables stay coherent.
    pub fn rate(&self, r: f64) -> String {
        num(r * self.divisor)
    }
}

/// Write `# `-prefixed echo lines, then the CSV table, atomically: the bytes
/// land in a temporary file next to the target and are renamed over it, so a
/// crash never leaves a half-written result.
pub fn write_csv(path: &Path, echo: &[String], table: &Table) -> io::Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    for line in echo {
        bytes.extend_from_slice(b"# ");
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
    }
    let mut writer = csv::Writer::from_writer(bytes);
    writer.write_record(&table.columns)?;
    for row in &table.rows {
        writer.write_record(row)?;
    }
    let bytes = writer.into_inner().map_err(io::Error::other)?;
    atomic_write(path, &bytes)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::other(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), process::id()));
    let result = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::env;

    fn scratch(name: &str) -> std::path::PathBuf {
        env::temp_dir().join(format!("rlncsim-output-{}-{name}", process::id()))
    }

    #[test]
    fn csv_carries_echo_header_and_quotes_when_needed() {
        let path = scratch("echo.csv");
        let mut table = Table::new(vec!["label", "value_count"]);
        table.push(vec!["plain".into(), "3".into()]);
        table.push(vec!["with, comma".into(), "4".into()]);
        write_csv(&path, &[String::from("mobility.n = 5")], &table).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::remove_file(&path).unwrap();
        assert!(text.starts_with("# mobility.n = 5\n"));
        assert!(text.contains("label,value_count\n"));
        assert!(text.contains("\"with, comma\",4\n"));
    }

    #[test]
    fn numbers_round_trip_and_rescale_divides() {
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(2.0), "2");
        assert_eq!(opt(None), "");
        let plain = Timeline::new(12, false);
        let scaled = Timeline::new(12, true);
        assert_eq!(plain.time(50.0), "50");
        assert_eq!(scaled.time(50.0), "5");
        assert_eq!(scaled.opt_time(None), "");
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = scratch("atomic-dir");
        let path = dir.join("out.csv");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        let leftovers: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|name| name.contains("tmp"))
            .collect();
        assert!(leftovers.is_empty(), "temp files left behind: {leftovers:?}");
        fs::remove_dir_all(&dir).unwrap();
    }
}
