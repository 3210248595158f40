//! End-to-end calibration: the three initialization stages followed by the
//! batch schedule, with a parameter snapshot after every stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    body_gravity, calibration_grid, center_sums, reference_time, residual_values, run_batch, EstimatorConfig,
    EstimatorError, ResidualStats, StageLog,
};
use crate::init::{
    init_extrinsics_gravity, init_rotation_spline, init_velocity_spline, placeholder_state, InitConfig, InitError,
};
use crate::lie::Vec3;
use crate::models::{CalibrationParameters, CalibrationState, Dataset};
use crate::report::Histogram;
use crate::solver::SolveSummary;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub init: InitConfig,
}

/// Parameters after one stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub stage: String,
    pub params: CalibrationParameters,
    /// Gravity in the central frame at the reference time; `None` before it
    /// is estimated.
    pub body_gravity: Option<Vec3>,
    pub summary: SolveSummary,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub state: CalibrationState,
    /// INIT1, INIT2, INIT3 and one entry per batch stage.
    pub snapshots: Vec<Snapshot>,
    pub stages: Vec<StageLog>,
    pub reference_time: f64,
    pub residuals: Vec<ResidualStats>,
    /// Standardized final residuals per sensor and kind, in bins of 0.25σ.
    pub histograms: Vec<Histogram>,
    /// `(|Σ Log R_i|, |Σ p_i|, |Σ τ_i|)` of the final IMU parameters.
    pub center_sums: (f64, f64, f64),
    pub time_offsets_estimated: bool,
    pub intrinsics_estimated: bool,
}

impl Calibration {
    pub fn final_body_gravity(&self) -> Vec3 {
        self.snapshots.last().and_then(|s| s.body_gravity).expect("gravity estimated by INIT2")
    }
}

/// Histogram bin width and half range in standardized units.
pub const HISTOGRAM_BIN: f64 = 0.25;
pub const HISTOGRAM_LIMIT: f64 = 5.0;

/// Calibrates `data` from scratch.
pub fn calibrate(data: &Dataset, cfg: &PipelineConfig) -> Result<Calibration, PipelineError> {
    let est = &cfg.estimator;
    est.validate()?;
    let grid = calibration_grid(data, est.knot_spacing, est.time_offset_bound)?;
    let t_ref = reference_time(data).ok_or_else(|| EstimatorError::Mismatch("dataset is empty".into()))?;
    let mut snapshots = Vec::new();

    let rot = init_rotation_spline(data, grid, est)?;
    let s1 = placeholder_state(data, grid, &rot.imu_rotations, rot.rotation.clone());
    log::info!("INIT1: cost {:.6e} in {} iterations", rot.summary.final_cost, rot.summary.iterations);
    snapshots.push(Snapshot { stage: "INIT1".into(), params: s1.params.clone(), body_gravity: None, summary: rot.summary.clone() });

    let ext = init_extrinsics_gravity(data, &rot, est, &cfg.init)?;
    let mut s2 = s1;
    s2.params.gravity = ext.gravity;
    for (s, p) in s2.params.imus.iter_mut().zip(&ext.imu_translations) {
        s.extrinsics.translation = *p;
    }
    for (s, e) in s2.params.radars.iter_mut().zip(&ext.radars) {
        s.extrinsics = *e;
    }
    log::info!("INIT2: {} pairs used, {} skipped", ext.pairs_used, ext.pairs_skipped);
    snapshots.push(Snapshot {
        stage: "INIT2".into(),
        body_gravity: Some(body_gravity(&s2, t_ref)?),
        params: s2.params,
        summary: ext.summary.clone(),
    });

    let vel = init_velocity_spline(data, &rot, &ext, est, &cfg.init)?;
    log::info!("INIT3: cost {:.6e} in {} iterations", vel.summary.final_cost, vel.summary.iterations);
    snapshots.push(Snapshot {
        stage: "INIT3".into(),
        params: vel.state.params.clone(),
        body_gravity: Some(body_gravity(&vel.state, t_ref)?),
        summary: vel.summary,
    });

    let batch = run_batch(&vel.state, data, est)?;
    for s in &batch.stages {
        snapshots.push(Snapshot {
            stage: s.stage.clone(),
            params: s.params.clone(),
            body_gravity: Some(s.body_gravity),
            summary: s.summary.clone(),
        });
    }
    let values = residual_values(&batch.state, data, est)?;
    let residuals = values.iter().map(|((s, k), v)| ResidualStats::from_values(s, k, v)).collect();
    let histograms = values
        .iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|((s, k), v)| Histogram::centered(s, k, v, HISTOGRAM_BIN, HISTOGRAM_LIMIT))
        .collect();
    Ok(Calibration {
        histograms,
        center_sums: center_sums(&batch.state.params),
        state: batch.state,
        snapshots,
        stages: batch.stages,
        reference_time: t_ref,
        residuals,
        time_offsets_estimated: est.stages.iter().any(|s| s.frees_time_offsets()),
        intrinsics_estimated: est.stages.iter().any(|s| s.frees_intrinsics()),
    })
}
