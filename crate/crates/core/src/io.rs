//! Dataset and ground-truth files.
//!
//! One CSV per sensor. IMU: `t,wx,wy,wz,ax,ay,az`. Radar:
//! `t,scan_id,range,azimuth,elevation,doppler`, one row per target. Floats
//! are written with 17 significant digits so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::Vec3;
use crate::models::{ImuMeasurement, RadarTarget};
use crate::report::CalibrationReport;
use crate::sim::SimDataset;

pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const RADAR_HEADER: [&str; 6] = ["t", "scan_id", "range", "azimuth", "elevation", "doppler"];

/// Version of the JSON files written by this crate.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| IoError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => IoError::io(path, e),
        kind => IoError::format(path, format!("{kind:?}")),
    }
}

fn write_rows<W: Write>(w: W, path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), IoError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        wr.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    wr.flush().map_err(|e| IoError::io(path, e))
}

pub fn write_imu_csv(path: &Path, samples: &[ImuMeasurement]) -> Result<(), IoError> {
    let rows = samples.iter().map(|m| {
        let mut r = vec![fmt(m.t)];
        r.extend(m.gyro.iter().chain(m.accel.iter()).map(|v| fmt(*v)));
        r
    });
    write_rows(create(path)?, path, &IMU_HEADER, rows)
}

pub fn write_radar_csv(path: &Path, targets: &[RadarTarget]) -> Result<(), IoError> {
    let rows = targets.iter().map(|m| {
        vec![fmt(m.t), m.scan_id.to_string(), fmt(m.range), fmt(m.azimuth), fmt(m.elevation), fmt(m.doppler)]
    });
    write_rows(create(path)?, path, &RADAR_HEADER, rows)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = rd.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if found != header {
        return Err(IoError::format(path, format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut out = Vec::new();
    for (line, row) in rd.deserialize::<T>().enumerate() {
        out.push(row.map_err(|e| IoError::format(path, format!("row {}: {e}", line + 2)))?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ImuRow {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Deserialize)]
struct RadarRow {
    t: f64,
    scan_id: u64,
    range: f64,
    azimuth: f64,
    elevation: f64,
    doppler: f64,
}

fn check_times(path: &Path, times: impl Iterator<Item = f64>) -> Result<(), IoError> {
    let mut prev = f64::NEG_INFINITY;
    for (k, t) in times.enumerate() {
        if !t.is_finite() || t < prev {
            return Err(IoError::format(path, format!("row {}: timestamps must be finite and non-decreasing", k + 2)));
        }
        prev = t;
    }
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuMeasurement>, IoError> {
    let rows: Vec<ImuRow> = read_rows(path, &IMU_HEADER)?;
    check_times(path, rows.iter().map(|r| r.t))?;
    Ok(rows
        .into_iter()
        .map(|r| ImuMeasurement { t: r.t, gyro: Vec3::new(r.wx, r.wy, r.wz), accel: Vec3::new(r.ax, r.ay, r.az) })
        .collect())
}

pub fn read_radar_csv(path: &Path) -> Result<Vec<RadarTarget>, IoError> {
    let rows: Vec<RadarRow> = read_rows(path, &RADAR_HEADER)?;
    check_times(path, rows.iter().map(|r| r.t))?;
    Ok(rows
        .into_iter()
        .map(|r| RadarTarget {
            t: r.t,
            scan_id: r.scan_id,
            range: r.range,
            azimuth: r.azimuth,
            elevation: r.elevation,
            doppler: r.doppler,
        })
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::format(path, e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| IoError::format(path, e.to_string()))
}

/// Writes a simulated dataset as `imu{i}.csv`, `radar{j}.csv` and
/// `truth.json` into `dir`; returns the CSV paths. The truth file is a
/// report holding the true parameters.
pub fn write_sim_dataset(dir: &Path, ds: &SimDataset) -> Result<(Vec<PathBuf>, Vec<PathBuf>), IoError> {
    let mut imus = Vec::new();
    for (i, s) in ds.imu.iter().enumerate() {
        let p = dir.join(format!("imu{i}.csv"));
        write_imu_csv(&p, s)?;
        imus.push(p);
    }
    let mut radars = Vec::new();
    for (j, s) in ds.radar.iter().enumerate() {
        let p = dir.join(format!("radar{j}.csv"));
        write_radar_csv(&p, s)?;
        radars.push(p);
    }
    write_json(&dir.join("truth.json"), &CalibrationReport::truth(ds))?;
    Ok((imus, radars))
}
