#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SENSORS: [&str; 4] = ["s01", "s02", "s03", "s04"];
pub const COORDS: [(f64, f64); 4] = [(-37.8136, 144.9631), (-37.8150, 144.9660), (-37.8102, 144.9620), (-37.8180, 144.9700)];

/// Hourly count with daily and weekly cycles and a deterministic jitter.
pub fn count(sensor: usize, hour: usize) -> f64 {
    let day = (hour % 24) as f64 / 24.0;
    let week = (hour % 168) as f64 / 168.0;
    let tau = std::f64::consts::TAU;
    let jitter = ((hour * 7919 + sensor * 104_729) % 13) as f64;
    (200.0 + 120.0 * (tau * day + sensor as f64).sin() + 40.0 * (tau * week).sin() + jitter).round()
}

/// Long-format raw CSV over `weeks` weeks starting on a Monday. Hours of
/// `flat_week` are all zero.
pub fn raw_csv(weeks: usize, flat_week: Option<usize>) -> String {
    let mut out = String::from("sensor_id,timestamp,count\n");
    let start = chrono::NaiveDate::from_ymd_opt(2019, 1, 7).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for h in 0..weeks * 168 {
        let ts = start + chrono::TimeDelta::hours(h as i64);
        for (i, id) in SENSORS.iter().enumerate() {
            let v = if flat_week == Some(h / 168) { 0.0 } else { count(i, h) };
            let _ = writeln!(out, "{id},{},{v}", ts.format("%Y-%m-%dT%H:%M:%S"));
        }
    }
    out
}

pub fn locations_csv() -> String {
    let mut out = String::from("sensor_id,latitude,longitude\n");
    for (id, (lat, lon)) in SENSORS.iter().zip(COORDS) {
        let _ = writeln!(out, "{id},{lat},{lon}");
    }
    out
}

pub fn pedflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = pedflow(args);
    assert!(
        out.status.success(),
        "pedflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Raw data, locations and an ingested panel in `dir`.
pub fn ingested(dir: &Path, weeks: usize, flat_week: Option<usize>) -> PathBuf {
    std::fs::write(dir.join("raw.csv"), raw_csv(weeks, flat_week)).unwrap();
    std::fs::write(dir.join("locations.csv"), locations_csv()).unwrap();
    let panel = dir.join("panel.csv");
    ok(&[
        "ingest",
        "--input",
        p(&dir.join("raw.csv")),
        "--locations",
        p(&dir.join("locations.csv")),
        "--out",
        p(&panel),
    ]);
    panel
}

/// Small training config so CLI tests finish in seconds.
pub fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[train]\nepochs = 2\nhidden = 8\nlayers = 1\nbatch_size = 32\ntau = 50.0\n\n[preprocess]\nruns = 20\n",
    )
    .unwrap();
    path
}
