//! Errors of estimated parameters against ground truth and their
//! aggregation over repeated runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{Rotation, Vec3};
use crate::models::CalibrationParameters;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("sensor rosters differ: {0}")]
    RosterMismatch(String),
    #[error("no runs to aggregate")]
    Empty,
}

/// Errors of one sensor. Rotation errors are the components of
/// `Log(R_trueᵀ R_est)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorError {
    pub sensor: String,
    pub rotation_deg: [f64; 3],
    pub translation_cm: [f64; 3],
    pub time_offset_ms: f64,
    /// IMU only [rad/s].
    pub gyro_bias: Option<[f64; 3]>,
    /// IMU only [m/s²].
    pub accel_bias: Option<[f64; 3]>,
    pub misalignment_deg: Option<[f64; 3]>,
}

impl SensorError {
    pub fn rotation_angle_deg(&self) -> f64 {
        norm(&self.rotation_deg)
    }

    pub fn translation_norm_cm(&self) -> f64 {
        norm(&self.translation_cm)
    }

    /// Named scalar components, used for aggregation.
    pub fn components(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let axes = ["x", "y", "z"];
        let mut push3 = |name: &str, v: &[f64; 3]| {
            for (a, x) in axes.iter().zip(v) {
                out.push((format!("{name}_{a}"), *x));
            }
        };
        push3("rotation_deg", &self.rotation_deg);
        push3("translation_cm", &self.translation_cm);
        if let Some(v) = &self.gyro_bias {
            push3("gyro_bias", v);
        }
        if let Some(v) = &self.accel_bias {
            push3("accel_bias", v);
        }
        if let Some(v) = &self.misalignment_deg {
            push3("misalignment_deg", v);
        }
        out.push(("time_offset_ms".into(), self.time_offset_ms));
        out
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    Vec3::from(*v).norm()
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn rotation_error_deg(est: &Rotation, truth: &Rotation) -> [f64; 3] {
    arr(&(truth.inverse() * *est).log().map(f64::to_degrees))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub sensors: Vec<SensorError>,
    /// Angle between estimated and true gravity in the central frame.
    pub gravity_deg: Option<f64>,
}

/// Root-mean-square error of each parameter family over all sensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRmse {
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub time_offset_ms: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub misalignment_deg: f64,
    pub gravity_deg: Option<f64>,
}

impl FamilyRmse {
    pub const NAMES: [&'static str; 7] =
        ["rotation_deg", "translation_cm", "time_offset_ms", "gyro_bias", "accel_bias", "misalignment_deg", "gravity_deg"];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.rotation_deg),
            Some(self.translation_cm),
            Some(self.time_offset_ms),
            Some(self.gyro_bias),
            Some(self.accel_bias),
            Some(self.misalignment_deg),
            self.gravity_deg,
        ]
    }
}

fn rms<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in it {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

impl ErrorTable {
    /// Compares `est` with `truth`. Gravity is compared as seen from the
    /// central frame, which is independent of the world-frame gauge.
    pub fn compute(
        est: &CalibrationParameters,
        est_body_gravity: Option<Vec3>,
        truth: &CalibrationParameters,
        truth_body_gravity: &Vec3,
    ) -> Result<Self, EvaluationError> {
        if est.imus.len() != truth.imus.len() || est.radars.len() != truth.radars.len() {
            return Err(EvaluationError::RosterMismatch(format!(
                "{} IMUs / {} radars estimated, {} / {} in truth",
                est.imus.len(),
                est.radars.len(),
                truth.imus.len(),
                truth.radars.len()
            )));
        }
        let mut sensors = Vec::new();
        for (i, (e, t)) in est.imus.iter().zip(&truth.imus).enumerate() {
            sensors.push(SensorError {
                sensor: format!("imu{i}"),
                rotation_deg: rotation_error_deg(&e.extrinsics.rotation, &t.extrinsics.rotation),
                translation_cm: arr(&((e.extrinsics.translation - t.extrinsics.translation) * 100.0)),
                time_offset_ms: (e.time_offset - t.time_offset) * 1e3,
                gyro_bias: Some(arr(&(e.intrinsics.gyro_bias - t.intrinsics.gyro_bias))),
                accel_bias: Some(arr(&(e.intrinsics.accel_bias - t.intrinsics.accel_bias))),
                misalignment_deg: Some(rotation_error_deg(&e.intrinsics.misalignment, &t.intrinsics.misalignment)),
            });
        }
        for (j, (e, t)) in est.radars.iter().zip(&truth.radars).enumerate() {
            sensors.push(SensorError {
                sensor: format!("radar{j}"),
                rotation_deg: rotation_error_deg(&e.extrinsics.rotation, &t.extrinsics.rotation),
                translation_cm: arr(&((e.extrinsics.translation - t.extrinsics.translation) * 100.0)),
                time_offset_ms: (e.time_offset - t.time_offset) * 1e3,
                gyro_bias: None,
                accel_bias: None,
                misalignment_deg: None,
            });
        }
        let gravity_deg = est_body_gravity.map(|g| g.angle(truth_body_gravity).to_degrees());
        Ok(Self { sensors, gravity_deg })
    }

    pub fn family_rmse(&self) -> FamilyRmse {
        let imu = || self.sensors.iter().filter(|s| s.gyro_bias.is_some());
        FamilyRmse {
            rotation_deg: rms(self.sensors.iter().map(SensorError::rotation_angle_deg)),
            translation_cm: rms(self.sensors.iter().map(SensorError::translation_norm_cm)),
            time_offset_ms: rms(self.sensors.iter().map(|s| s.time_offset_ms)),
            gyro_bias: rms(imu().filter_map(|s| s.gyro_bias.as_ref().map(norm))),
            accel_bias: rms(imu().filter_map(|s| s.accel_bias.as_ref().map(norm))),
            misalignment_deg: rms(imu().filter_map(|s| s.misalignment_deg.as_ref().map(norm))),
            gravity_deg: self.gravity_deg,
        }
    }

    pub fn max_rotation_deg(&self) -> f64 {
        self.sensors.iter().map(SensorError::rotation_angle_deg).fold(0.0, f64::max)
    }

    pub fn max_translation_cm(&self) -> f64 {
        self.sensors.iter().map(SensorError::translation_norm_cm).fold(0.0, f64::max)
    }

    pub fn max_time_offset_ms(&self) -> f64 {
        self.sensors.iter().map(|s| s.time_offset_ms.abs()).fold(0.0, f64::max)
    }

    pub fn max_gyro_bias(&self) -> f64 {
        self.sensors.iter().filter_map(|s| s.gyro_bias.as_ref().map(norm)).fold(0.0, f64::max)
    }

    pub fn max_accel_bias(&self) -> f64 {
        self.sensors.iter().filter_map(|s| s.accel_bias.as_ref().map(norm)).fold(0.0, f64::max)
    }

    /// Mean rotation angle and translation norm over all sensors.
    pub fn mean_extrinsic_errors(&self) -> (f64, f64) {
        let n = self.sensors.len().max(1) as f64;
        (
            self.sensors.iter().map(SensorError::rotation_angle_deg).sum::<f64>() / n,
            self.sensors.iter().map(SensorError::translation_norm_cm).sum::<f64>() / n,
        )
    }

    /// Plain-text table: one row per sensor.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "sensor", "rx[deg]", "ry[deg]", "rz[deg]", "px[cm]", "py[cm]", "pz[cm]", "dt[ms]"
        );
        for e in &self.sensors {
            let [rx, ry, rz] = e.rotation_deg;
            let [px, py, pz] = e.translation_cm;
            let _ = writeln!(
                s,
                "{:<8} {rx:>9.4} {ry:>9.4} {rz:>9.4} {px:>9.4} {py:>9.4} {pz:>9.4} {:>9.4}",
                e.sensor, e.time_offset_ms
            );
        }
        if let Some(g) = self.gravity_deg {
            let _ = writeln!(s, "gravity direction error: {g:.5} deg");
        }
        s
    }
}

/// Mean and standard deviation of one error component across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sensor: String,
    pub quantity: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Per-component mean and sample standard deviation over several runs.
pub fn aggregate(tables: &[ErrorTable]) -> Result<Vec<AggregateRow>, EvaluationError> {
    if tables.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let roster: Vec<&str> = tables[0].sensors.iter().map(|s| s.sensor.as_str()).collect();
    let mut acc: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for t in tables {
        let names: Vec<&str> = t.sensors.iter().map(|s| s.sensor.as_str()).collect();
        if names != roster {
            return Err(EvaluationError::RosterMismatch(format!("{names:?} vs {roster:?}")));
        }
        for (k, s) in t.sensors.iter().enumerate() {
            for (q, v) in s.components() {
                acc.entry((k, q)).or_default().push(v);
            }
        }
        if let Some(g) = t.gravity_deg {
            acc.entry((usize::MAX, "gravity_deg".into())).or_default().push(g);
        }
    }
    Ok(acc
        .into_iter()
        .map(|((k, quantity), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            AggregateRow {
                sensor: roster.get(k).map_or("suite", |s| s).to_string(),
                quantity,
                mean,
                std: var.sqrt(),
                runs: v.len(),
            }
        })
        .collect())
}

/// Plain-text rendering of [`aggregate`] as `mean ± std`.
pub fn aggregate_text(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{:<8} {:<20} {:>12.5e} ± {:<12.5e} (n={})", r.sensor, r.quantity, r.mean, r.std, r.runs);
    }
    s
}

/// True when every family's RMSE never increases along `series`. Families
/// that are undefined at a stage start at their first defined value.
pub fn is_non_increasing(series: &[FamilyRmse], rel_tol: f64) -> Result<(), String> {
    for (f, name) in FamilyRmse::NAMES.iter().enumerate() {
        let mut prev: Option<f64> = None;
        for (k, s) in series.iter().enumerate() {
            let Some(v) = s.values()[f] else { continue };
            if let Some(p) = prev {
                if v > p * (1.0 + rel_tol) + 1e-12 {
                    return Err(format!("{name} increases at stage {k}: {p:.6e} -> {v:.6e}"));
                }
            }
            prev = Some(v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    fn truth() -> CalibrationParameters {
        SimConfig::default().truth()
    }

    #[test]
    fn identical_parameters_have_zero_error() {
        let t = truth();
        let g = Vec3::new(0.1, 0.2, -9.8);
        let e = ErrorTable::compute(&t, Some(g), &t, &g).unwrap();
        assert_eq!(e.sensors.len(), 6);
        for s in &e.sensors {
            assert!(s.components().iter().all(|(_, v)| v.abs() < 1e-12), "{s:?}");
        }
        assert!(e.gravity_deg.unwrap() < 1e-6);
        assert!(e.max_rotation_deg() < 1e-12);
    }

    #[test]
    fn injected_translation_offset_shows_in_centimeters() {
        let t = truth();
        let mut est = t.clone();
        est.radars[1].extrinsics.translation.x += 0.01;
        est.imus[2].time_offset += 0.002;
        let e = ErrorTable::compute(&est, None, &t, &Vec3::z()).unwrap();
        assert!((e.sensors[4].translation_cm[0] - 1.0).abs() < 1e-12);
        assert_eq!(e.sensors[4].translation_cm[1], 0.0);
        assert!((e.sensors[2].time_offset_ms - 2.0).abs() < 1e-12);
        assert!(e.gravity_deg.is_none());
    }

    #[test]
    fn rotation_error_is_per_axis_angle() {
        let t = truth();
        let mut est = t.clone();
        let d = Rotation::exp(&Vec3::new(0.0, 0.0, 0.5f64.to_radians()));
        est.imus[0].extrinsics.rotation = t.imus[0].extrinsics.rotation * d;
        let e = ErrorTable::compute(&est, None, &t, &Vec3::z()).unwrap();
        let r = e.sensors[0].rotation_deg;
        assert!(r[0].abs() < 1e-12 && r[1].abs() < 1e-12 && (r[2] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn roster_mismatch_is_rejected() {
        let t = truth();
        let mut est = t.clone();
        est.radars.pop();
        assert!(matches!(ErrorTable::compute(&est, None, &t, &Vec3::z()), Err(EvaluationError::RosterMismatch(_))));
    }

    #[test]
    fn aggregation_matches_hand_computed_mean_and_std() {
        let t = truth();
        let tables: Vec<ErrorTable> = [0.01, 0.02, 0.03]
            .iter()
            .map(|dx| {
                let mut est = t.clone();
                est.imus[0].extrinsics.translation.x += dx;
                ErrorTable::compute(&est, None, &t, &Vec3::z()).unwrap()
            })
            .collect();
        let rows = aggregate(&tables).unwrap();
        let r = rows.iter().find(|r| r.sensor == "imu0" && r.quantity == "translation_cm_x").unwrap();
        assert!((r.mean - 2.0).abs() < 1e-12);
        assert!((r.std - 1.0).abs() < 1e-12);
        assert_eq!(r.runs, 3);
        assert_eq!(aggregate(&[]), Err(EvaluationError::Empty));
        assert!(aggregate_text(&rows).contains("translation_cm_x"));
    }

    #[test]
    fn monotonicity_check_skips_undefined_families() {
        let base = FamilyRmse {
            rotation_deg: 1.0,
            translation_cm: 1.0,
            time_offset_ms: 1.0,
            gyro_bias: 1.0,
            accel_bias: 1.0,
            misalignment_deg: 1.0,
            gravity_deg: None,
        };
        let mut second = base;
        second.gravity_deg = Some(0.5);
        second.rotation_deg = 0.5;
        assert!(is_non_increasing(&[base, second], 0.0).is_ok());
        let mut third = second;
        third.translation_cm = 2.0;
        assert!(is_non_increasing(&[base, second, third], 0.0).unwrap_err().contains("translation_cm"));
    }
}
