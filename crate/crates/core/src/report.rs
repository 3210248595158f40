//! Calibration report: solved parameters, stage logs, residual statistics
//! and, when ground truth is known, the error table.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::estimator::ResidualStats;
use crate::evaluation::ErrorTable;
use crate::io::SCHEMA_VERSION;
use crate::lie::{Rotation, Vec3};
use crate::models::{CalibrationParameters, CalibrationState, Gravity, ImuIntrinsics, ImuState, RadarState, SensorExtrinsics};
use crate::pipeline::{Calibration, PipelineConfig, Snapshot};
use crate::sim::{SimConfig, SimDataset, SimError, Trajectory};
use crate::solver::{IterationRecord, Termination};
use crate::spline::{KnotGrid, R3Spline, So3Spline, SplineError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Imu,
    Radar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsReport {
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    pub misalignment_wxyz: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorReport {
    pub id: String,
    pub kind: SensorKind,
    /// Sensor-to-central-frame rotation.
    pub quaternion_wxyz: [f64; 4],
    pub translation_xyz: [f64; 3],
    /// Added to sensor timestamps to reach the central clock [s].
    pub time_offset: f64,
    pub intrinsics: Option<IntrinsicsReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub converged: bool,
    pub offsets_at_bound: Vec<String>,
    pub dropped_residuals: usize,
    pub log: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub stage: String,
    pub params: CalibrationParameters,
    pub body_gravity: Option<[f64; 3]>,
}

/// Counts of standardized residuals in fixed bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub sensor: String,
    pub kind: String,
    /// Bin edges; bin `k` covers `[edges[k], edges[k + 1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values outside the outermost edges.
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    /// Bins of width `width` centered on multiples of `width` up to `±limit`,
    /// so one bin is centered on zero.
    pub fn centered(sensor: &str, kind: &str, values: &[f64], width: f64, limit: f64) -> Self {
        let half = (limit / width).round() as i64;
        let edges: Vec<f64> = (-half..=half + 1).map(|k| (k as f64 - 0.5) * width).collect();
        let mut counts = vec![0; edges.len() - 1];
        let (mut below, mut above) = (0, 0);
        for &v in values {
            if v < edges[0] {
                below += 1;
            } else if v >= edges[edges.len() - 1] {
                above += 1;
            } else {
                let k = ((v - edges[0]) / width).floor() as usize;
                let last = counts.len() - 1;
                counts[k.min(last)] += 1;
            }
        }
        Self { sensor: sensor.into(), kind: kind.into(), edges, counts, below, above }
    }
}

/// Spline control points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineExport {
    pub grid: KnotGrid,
    pub rotation_wxyz: Vec<[f64; 4]>,
    pub velocity: Vec<[f64; 3]>,
}

impl SplineExport {
    pub fn from_state(state: &CalibrationState) -> Self {
        Self {
            grid: state.rotation.grid,
            rotation_wxyz: state.rotation.control_points.iter().map(|r| r.wxyz()).collect(),
            velocity: state.velocity.control_points.iter().map(|v| [v.x, v.y, v.z]).collect(),
        }
    }

    pub fn splines(&self) -> Result<(So3Spline, R3Spline), SplineError> {
        let rot = self.rotation_wxyz.iter().map(quaternion).collect();
        let vel = self.velocity.iter().map(|v| Vec3::from(*v)).collect();
        Ok((So3Spline::new(self.grid, rot)?, R3Spline::new(self.grid, vel)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub sensors: Vec<SensorReport>,
    /// World-frame gravity [m/s²].
    pub gravity: [f64; 3],
    /// Gravity in the central frame at `reference_time`.
    pub body_gravity: [f64; 3],
    pub reference_time: f64,
    /// Earliest and latest sensor timestamps.
    pub data_span: [f64; 2],
    pub time_offsets_estimated: bool,
    pub intrinsics_estimated: bool,
    /// `|Σ Log R_i|, |Σ p_i|, |Σ τ_i|` over the IMUs.
    pub center_sums: [f64; 3],
    #[serde(default)]
    pub residuals: Vec<ResidualStats>,
    #[serde(default)]
    pub histograms: Vec<Histogram>,
    #[serde(default)]
    pub stages: Vec<StageReport>,
    #[serde(default)]
    pub snapshots: Vec<SnapshotReport>,
    pub splines: Option<SplineExport>,
    pub config: Option<PipelineConfig>,
    /// Set on ground-truth reports of simulated datasets.
    pub simulation: Option<SimConfig>,
    pub errors: Option<ErrorTable>,
}

/// Unit quaternions are taken verbatim so a written report reads back
/// bit-exactly; anything else is normalized.
fn quaternion(q: &[f64; 4]) -> Rotation {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() < 1e-12 {
        Rotation::from_wxyz_unchecked(q[0], q[1], q[2], q[3])
    } else {
        Rotation::from_wxyz(q[0], q[1], q[2], q[3])
    }
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn stage_report(s: &Snapshot, offsets_at_bound: Vec<String>) -> StageReport {
    StageReport {
        stage: s.stage.clone(),
        iterations: s.summary.iterations,
        initial_cost: s.summary.initial_cost,
        final_cost: s.summary.final_cost,
        termination: s.summary.termination,
        converged: s.summary.converged,
        offsets_at_bound,
        dropped_residuals: s.summary.dropped.values().sum(),
        log: s.summary.log.clone(),
    }
}

impl CalibrationReport {
    pub fn new(
        cal: &Calibration,
        names: (&[String], &[String]),
        data_span: (f64, f64),
        config: &PipelineConfig,
        seed: u64,
    ) -> Self {
        let p = &cal.state.params;
        let mut sensors = Vec::new();
        for (s, id) in p.imus.iter().zip(names.0) {
            sensors.push(SensorReport {
                id: id.clone(),
                kind: SensorKind::Imu,
                quaternion_wxyz: s.extrinsics.rotation.wxyz(),
                translation_xyz: arr(&s.extrinsics.translation),
                time_offset: s.time_offset,
                intrinsics: Some(IntrinsicsReport {
                    gyro_bias: arr(&s.intrinsics.gyro_bias),
                    accel_bias: arr(&s.intrinsics.accel_bias),
                    misalignment_wxyz: s.intrinsics.misalignment.wxyz(),
                }),
            });
        }
        for (s, id) in p.radars.iter().zip(names.1) {
            sensors.push(SensorReport {
                id: id.clone(),
                kind: SensorKind::Radar,
                quaternion_wxyz: s.extrinsics.rotation.wxyz(),
                translation_xyz: arr(&s.extrinsics.translation),
                time_offset: s.time_offset,
                intrinsics: None,
            });
        }
        let stages = cal
            .snapshots
            .iter()
            .map(|s| {
                let bound = cal.stages.iter().find(|l| l.stage == s.stage).map(|l| l.offsets_at_bound.clone());
                stage_report(s, bound.unwrap_or_default())
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            sensors,
            gravity: arr(&p.gravity.vector()),
            body_gravity: arr(&cal.final_body_gravity()),
            reference_time: cal.reference_time,
            data_span: [data_span.0, data_span.1],
            time_offsets_estimated: cal.time_offsets_estimated,
            intrinsics_estimated: cal.intrinsics_estimated,
            center_sums: [cal.center_sums.0, cal.center_sums.1, cal.center_sums.2],
            residuals: cal.residuals.clone(),
            histograms: cal.histograms.clone(),
            stages,
            snapshots: cal
                .snapshots
                .iter()
                .map(|s| SnapshotReport { stage: s.stage.clone(), params: s.params.clone(), body_gravity: s.body_gravity.map(|g| arr(&g)) })
                .collect(),
            splines: Some(SplineExport::from_state(&cal.state)),
            config: Some(config.clone()),
            simulation: None,
            errors: None,
        }
    }

    /// Report holding the true parameters of a simulated dataset.
    pub fn truth(ds: &SimDataset) -> Self {
        let p = &ds.truth;
        let data = ds.dataset();
        let span = data.time_span().unwrap_or((0.0, 0.0));
        let t_ref = 0.5 * (span.0 + span.1);
        let g = p.gravity.vector();
        let sensors = p
            .imus
            .iter()
            .enumerate()
            .map(|(i, s)| SensorReport {
                id: format!("imu{i}"),
                kind: SensorKind::Imu,
                quaternion_wxyz: s.extrinsics.rotation.wxyz(),
                translation_xyz: arr(&s.extrinsics.translation),
                time_offset: s.time_offset,
                intrinsics: Some(IntrinsicsReport {
                    gyro_bias: arr(&s.intrinsics.gyro_bias),
                    accel_bias: arr(&s.intrinsics.accel_bias),
                    misalignment_wxyz: s.intrinsics.misalignment.wxyz(),
                }),
            })
            .chain(p.radars.iter().enumerate().map(|(j, s)| SensorReport {
                id: format!("radar{j}"),
                kind: SensorKind::Radar,
                quaternion_wxyz: s.extrinsics.rotation.wxyz(),
                translation_xyz: arr(&s.extrinsics.translation),
                time_offset: s.time_offset,
                intrinsics: None,
            }))
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: ds.config.seed,
            sensors,
            gravity: arr(&g),
            body_gravity: arr(&ds.trajectory.sample(t_ref).kin.rot.inverse_rotate(&g)),
            reference_time: t_ref,
            data_span: [span.0, span.1],
            time_offsets_estimated: true,
            intrinsics_estimated: true,
            center_sums: [0.0; 3],
            residuals: Vec::new(),
            histograms: Vec::new(),
            stages: Vec::new(),
            snapshots: Vec::new(),
            splines: None,
            config: None,
            simulation: Some(ds.config.clone()),
            errors: None,
        }
    }

    /// True central-frame gravity at `t` for ground-truth reports; the
    /// stored value otherwise.
    pub fn body_gravity_at(&self, t: f64) -> Result<Vec3, SimError> {
        match &self.simulation {
            Some(sim) => Ok(Trajectory::new(&sim.trajectory)?.sample(t).kin.rot.inverse_rotate(&Vec3::from(self.gravity))),
            None => Ok(Vec3::from(self.body_gravity)),
        }
    }

    /// IMU and radar ids in roster order.
    pub fn sensor_ids(&self) -> (Vec<String>, Vec<String>) {
        let ids = |k: SensorKind| self.sensors.iter().filter(|s| s.kind == k).map(|s| s.id.clone()).collect();
        (ids(SensorKind::Imu), ids(SensorKind::Radar))
    }

    /// Final parameters in estimator form.
    pub fn parameters(&self) -> CalibrationParameters {
        let rot = quaternion;
        let ext = |s: &SensorReport| SensorExtrinsics { rotation: rot(&s.quaternion_wxyz), translation: Vec3::from(s.translation_xyz) };
        let mut imus = Vec::new();
        let mut radars = Vec::new();
        for s in &self.sensors {
            match s.kind {
                SensorKind::Imu => imus.push(ImuState {
                    extrinsics: ext(s),
                    time_offset: s.time_offset,
                    intrinsics: s.intrinsics.as_ref().map_or_else(ImuIntrinsics::default, |i| ImuIntrinsics {
                        gyro_bias: Vec3::from(i.gyro_bias),
                        accel_bias: Vec3::from(i.accel_bias),
                        misalignment: rot(&i.misalignment_wxyz),
                    }),
                }),
                SensorKind::Radar => radars.push(RadarState { extrinsics: ext(s), time_offset: s.time_offset }),
            }
        }
        CalibrationParameters { imus, radars, gravity: Gravity::from_vector(&Vec3::from(self.gravity)) }
    }

    /// Iteration logs as JSON lines, one record per iteration.
    pub fn write_stage_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            stage: &'a str,
            #[serde(flatten)]
            record: &'a IterationRecord,
        }
        for s in &self.stages {
            for r in &s.log {
                serde_json::to_writer(&mut w, &Line { stage: &s.stage, record: r })?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}
