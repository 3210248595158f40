//! Residual definitions over the continuous-time state and the staged batch
//! optimization.
//!
//! The central frame's rotation and velocity are cubic B-splines sharing one
//! knot grid. Every sensor reading is predicted at its shifted time
//! `τ + offset`, so time offsets enter only through evaluation times. The
//! gauge is fixed by holding the first rotation control point and by stiff
//! center residuals on the IMU extrinsics and time offsets.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{lift_vec, scale, Rot3, Rotation, Vec3};
use crate::models::{
    doppler_residual, imu_angular_rate, imu_predict, imu_specific_force, radar_velocity, CalibrationParameters,
    CalibrationState, Dataset, Gravity, ImuIntrinsics, ImuMeasurement, ImuState, Kinematics, RadarState,
    SensorExtrinsics, GRAVITY_MAGNITUDE,
};
use crate::real::Real;
use crate::solver::{
    BlockId, Loss, Manifold, ParameterBlock, Plan, Problem, Residual, SolveSummary, SolverError, SolverOptions,
    AutoDiff,
};
use crate::spline::{r3_segment, so3_segment, KnotGrid, R3Spline, So3Spline, SplineError, ORDER};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("state does not match the dataset: {0}")]
    Mismatch(String),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
}

/// Batch stages; each frees a superset of the previous one's blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Spatial extrinsics, gravity and all control points.
    #[serde(rename = "BO1")]
    Spatial,
    /// Adds time offsets.
    #[serde(rename = "BO2")]
    Temporal,
    /// Adds IMU biases and misalignment.
    #[serde(rename = "BO3")]
    Full,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Spatial => "BO1",
            Stage::Temporal => "BO2",
            Stage::Full => "BO3",
        }
    }

    pub fn frees_time_offsets(&self) -> bool {
        !matches!(self, Stage::Spatial)
    }

    pub fn frees_intrinsics(&self) -> bool {
        matches!(self, Stage::Full)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub knot_spacing: f64,
    /// Symmetric box on every time offset.
    pub time_offset_bound: f64,
    /// Cauchy scale in standardized units; `None` disables the robust loss.
    pub cauchy_scale: Option<f64>,
    /// Standard deviation of the gauge-fixing center residuals.
    pub center_sigma: f64,
    pub stages: Vec<Stage>,
    pub solver: SolverOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            knot_spacing: 0.08,
            time_offset_bound: 0.1,
            cauchy_scale: Some(1.0),
            center_sigma: 1e-6,
            stages: vec![Stage::Spatial, Stage::Temporal, Stage::Full],
            solver: SolverOptions::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.into()));
        if !(self.knot_spacing > 0.0 && self.knot_spacing.is_finite()) {
            return bad("knot_spacing must be positive");
        }
        if !(self.time_offset_bound >= 0.0 && self.time_offset_bound.is_finite()) {
            return bad("time_offset_bound must be non-negative");
        }
        if !(self.center_sigma > 0.0) {
            return bad("center_sigma must be positive");
        }
        if let Some(c) = self.cauchy_scale {
            if !(c > 0.0) {
                return bad("cauchy_scale must be positive");
            }
        }
        Ok(())
    }

    pub fn robust_loss(&self) -> Loss {
        self.cauchy_scale.map_or(Loss::Trivial, Loss::Cauchy)
    }
}

/// Knot grid covering every sensor timestamp shifted by up to `bound`.
pub fn calibration_grid(data: &Dataset, knot_spacing: f64, bound: f64) -> Result<KnotGrid, EstimatorError> {
    let (t0, t1) = data.time_span().ok_or_else(|| EstimatorError::Mismatch("dataset is empty".into()))?;
    Ok(KnotGrid::covering(t0 - bound, t1 + bound, knot_spacing)?)
}

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ImuBlocks {
    pub rotation: BlockId,
    pub translation: BlockId,
    pub time_offset: BlockId,
    pub gyro_bias: BlockId,
    pub accel_bias: BlockId,
    pub misalignment: BlockId,
}

#[derive(Clone, Copy, Debug)]
pub struct RadarBlocks {
    pub rotation: BlockId,
    pub translation: BlockId,
    pub time_offset: BlockId,
}

/// Mapping between a [`CalibrationState`] and solver parameter blocks.
#[derive(Clone, Debug)]
pub struct StateBlocks {
    pub grid: KnotGrid,
    pub rot_cps: Arc<Vec<BlockId>>,
    pub vel_cps: Arc<Vec<BlockId>>,
    pub imus: Vec<ImuBlocks>,
    pub radars: Vec<RadarBlocks>,
    pub gravity: BlockId,
}

fn vec_values(v: &Vec3) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn rot_values(r: &Rotation) -> Vec<f64> {
    r.wxyz().to_vec()
}

impl StateBlocks {
    /// Adds all state blocks to `problem`. Control points are keyed by knot
    /// time; sensor parameters and gravity form the border eliminated last.
    pub fn add(problem: &mut Problem, state: &CalibrationState) -> Result<Self, EstimatorError> {
        let grid = state.rotation.grid;
        if state.velocity.grid != grid {
            return Err(EstimatorError::Mismatch("rotation and velocity splines use different grids".into()));
        }
        let mut rot_cps = Vec::with_capacity(grid.count);
        let mut vel_cps = Vec::with_capacity(grid.count);
        for k in 0..grid.count {
            let key = grid.knot_time(k);
            rot_cps.push(problem.add_block(format!("rot_cp[{k}]"), Manifold::So3, rot_values(&state.rotation.control_points[k]), key));
            vel_cps.push(problem.add_block(
                format!("vel_cp[{k}]"),
                Manifold::Euclidean(3),
                vec_values(&state.velocity.control_points[k]),
                key,
            ));
        }
        let border = f64::INFINITY;
        let imus = state
            .params
            .imus
            .iter()
            .enumerate()
            .map(|(i, s)| ImuBlocks {
                rotation: problem.add_block(format!("imu{i}.rotation"), Manifold::So3, rot_values(&s.extrinsics.rotation), border),
                translation: problem.add_block(
                    format!("imu{i}.translation"),
                    Manifold::Euclidean(3),
                    vec_values(&s.extrinsics.translation),
                    border,
                ),
                time_offset: problem.add_block(format!("imu{i}.time_offset"), Manifold::Euclidean(1), vec![s.time_offset], border),
                gyro_bias: problem.add_block(
                    format!("imu{i}.gyro_bias"),
                    Manifold::Euclidean(3),
                    vec_values(&s.intrinsics.gyro_bias),
                    border,
                ),
                accel_bias: problem.add_block(
                    format!("imu{i}.accel_bias"),
                    Manifold::Euclidean(3),
                    vec_values(&s.intrinsics.accel_bias),
                    border,
                ),
                misalignment: problem.add_block(
                    format!("imu{i}.misalignment"),
                    Manifold::So3,
                    rot_values(&s.intrinsics.misalignment),
                    border,
                ),
            })
            .collect();
        let radars = state
            .params
            .radars
            .iter()
            .enumerate()
            .map(|(j, s)| RadarBlocks {
                rotation: problem.add_block(format!("radar{j}.rotation"), Manifold::So3, rot_values(&s.extrinsics.rotation), border),
                translation: problem.add_block(
                    format!("radar{j}.translation"),
                    Manifold::Euclidean(3),
                    vec_values(&s.extrinsics.translation),
                    border,
                ),
                time_offset: problem.add_block(format!("radar{j}.time_offset"), Manifold::Euclidean(1), vec![s.time_offset], border),
            })
            .collect();
        let gravity = problem.add_block(
            "gravity",
            Manifold::Sphere { radius: GRAVITY_MAGNITUDE },
            vec_values(&state.params.gravity.vector()),
            border,
        );
        Ok(Self { grid, rot_cps: Arc::new(rot_cps), vel_cps: Arc::new(vel_cps), imus, radars, gravity })
    }

    /// Reads the current block values back into a state.
    pub fn read(&self, problem: &Problem) -> CalibrationState {
        let rot = |id: BlockId| Rotation::from_slice(problem.values(id));
        let vec = |id: BlockId| Vec3::from_column_slice(problem.values(id));
        let imus = self
            .imus
            .iter()
            .map(|b| ImuState {
                extrinsics: SensorExtrinsics { rotation: rot(b.rotation), translation: vec(b.translation) },
                time_offset: problem.values(b.time_offset)[0],
                intrinsics: ImuIntrinsics {
                    gyro_bias: vec(b.gyro_bias),
                    accel_bias: vec(b.accel_bias),
                    misalignment: rot(b.misalignment),
                },
            })
            .collect();
        let radars = self
            .radars
            .iter()
            .map(|b| RadarState {
                extrinsics: SensorExtrinsics { rotation: rot(b.rotation), translation: vec(b.translation) },
                time_offset: problem.values(b.time_offset)[0],
            })
            .collect();
        let params = CalibrationParameters { imus, radars, gravity: Gravity::from_vector(&vec(self.gravity)) };
        CalibrationState {
            params,
            rotation: So3Spline { grid: self.grid, control_points: self.rot_cps.iter().map(|&b| rot(b)).collect() },
            velocity: R3Spline { grid: self.grid, control_points: self.vel_cps.iter().map(|&b| vec(b)).collect() },
        }
    }

    /// Every block describing sensor parameters or gravity.
    pub fn border_blocks(&self) -> Vec<BlockId> {
        let mut out = Vec::new();
        for b in &self.imus {
            out.extend([b.rotation, b.translation, b.time_offset, b.gyro_bias, b.accel_bias, b.misalignment]);
        }
        for b in &self.radars {
            out.extend([b.rotation, b.translation, b.time_offset]);
        }
        out.push(self.gravity);
        out
    }

    /// Holds every block constant.
    pub fn freeze_all(&self, problem: &mut Problem) {
        for id in self.rot_cps.iter().chain(self.vel_cps.iter()).chain(self.border_blocks().iter()) {
            problem.set_constant(*id, true);
        }
    }

    /// Frees the control points supported by data in `span` (central time).
    /// The first supported rotation control point stays fixed as the world
    /// gauge. Control points without usable support stay constant; the ones
    /// next to the supported range are reset by extrapolation so the weakly
    /// observed spline ends stay smooth.
    pub fn free_control_points(&self, problem: &mut Problem, span: (f64, f64), rotation: bool, velocity: bool) {
        let range = supported_control_points(&self.grid, span);
        let (first, last) = (*range.start(), *range.end());
        let n = self.grid.count;
        let rot = |p: &Problem, k: usize| Rotation::from_slice(p.values(self.rot_cps[k]));
        let vel = |p: &Problem, k: usize| Vec3::from_column_slice(p.values(self.vel_cps[k]));
        let mut outward: Vec<(usize, usize, usize)> = Vec::new();
        if last >= first + 1 {
            outward.extend((last + 1..n).map(|k| (k, k - 1, k - 2)));
            outward.extend((0..first).rev().map(|k| (k, k + 1, k + 2)));
        }
        for (k, a, b) in outward {
            if rotation {
                let (ra, rb) = (rot(problem, a), rot(problem, b));
                problem.set_values(self.rot_cps[k], &rot_values(&(ra * (rb.inverse() * ra))));
            }
            if velocity {
                let v = vel(problem, a) * 2.0 - vel(problem, b);
                problem.set_values(self.vel_cps[k], &vec_values(&v));
            }
        }
        for k in 0..n {
            let inside = range.contains(&k);
            problem.set_constant(self.rot_cps[k], !(rotation && inside && k != first));
            problem.set_constant(self.vel_cps[k], !(velocity && inside));
        }
    }

    /// Sets constant flags and bounds for one batch stage.
    pub fn apply_stage(&self, problem: &mut Problem, stage: Stage, bound: f64, span: (f64, f64)) {
        self.free_control_points(problem, span, true, true);
        for b in &self.imus {
            problem.set_constant(b.rotation, false);
            problem.set_constant(b.translation, false);
            problem.set_constant(b.time_offset, !stage.frees_time_offsets());
            problem.set_bounds(b.time_offset, -bound, bound);
            for id in [b.gyro_bias, b.accel_bias, b.misalignment] {
                problem.set_constant(id, !stage.frees_intrinsics());
            }
        }
        for b in &self.radars {
            problem.set_constant(b.rotation, false);
            problem.set_constant(b.translation, false);
            problem.set_constant(b.time_offset, !stage.frees_time_offsets());
            problem.set_bounds(b.time_offset, -bound, bound);
        }
        problem.set_constant(self.gravity, false);
    }
}

/// Smallest share of its segment that the data must cover before the
/// outermost control point of that segment is estimated. Below it the point
/// barely influences any residual and only slows the solver down.
pub const EDGE_SUPPORT: f64 = 0.3;

/// Control points with usable support in `span`, clipped to the grid.
pub fn supported_control_points(grid: &KnotGrid, span: (f64, f64)) -> std::ops::RangeInclusive<usize> {
    let seg = |t: f64| {
        let s = ((t - grid.start) / grid.dt).floor().max(0.0);
        let k = (s as usize).min(grid.segment_count() - 1);
        (k, (t - grid.knot_time(k)) / grid.dt)
    };
    let (s0, u0) = seg(span.0);
    let (s1, u1) = seg(span.1);
    let first = if 1.0 - u0 < EDGE_SUPPORT && s0 < s1 { s0 + 1 } else { s0 };
    let last = if u1 < EDGE_SUPPORT && s1 > s0 { s1 + crate::spline::DEGREE - 1 } else { s1 + crate::spline::DEGREE };
    first..=last
}

/// Earliest and latest measurement times mapped to the central clock with
/// the current time offsets.
pub fn shifted_span(data: &Dataset, params: &CalibrationParameters) -> Option<(f64, f64)> {
    let mut span: Option<(f64, f64)> = None;
    let mut push = |a: f64, b: f64| {
        span = Some(match span {
            None => (a, b),
            Some((x, y)) => (x.min(a), y.max(b)),
        });
    };
    for (d, s) in data.imus.iter().zip(&params.imus) {
        if let (Some(a), Some(b)) = (d.samples.first(), d.samples.last()) {
            push(a.t + s.time_offset, b.t + s.time_offset);
        }
    }
    for (d, s) in data.radars.iter().zip(&params.radars) {
        if let (Some(a), Some(b)) = (d.targets.first(), d.targets.last()) {
            push(a.t + s.time_offset, b.t + s.time_offset);
        }
    }
    span
}

// ---------------------------------------------------------------------------
// Residual functors
// ---------------------------------------------------------------------------

fn rot_of<T: Real>(p: &[T]) -> Rot3<T> {
    Rot3::from_wxyz_unchecked(p[0], p[1], p[2], p[3])
}

fn vec_of<T: Real>(p: &[T]) -> Vector3<T> {
    Vector3::new(p[0], p[1], p[2])
}

/// Segment index for a sensor time shifted by the value of `offset`.
fn segment_at(blocks: &[ParameterBlock], grid: &KnotGrid, t: f64, offset: BlockId) -> Option<usize> {
    grid.segment(t + blocks[offset.0].values[0]).ok().map(|(i, _)| i)
}

/// Normalized segment time keeping the offset's derivative.
fn segment_u<T: Real>(grid: &KnotGrid, segment: i64, t: f64, offset: T) -> T {
    (offset + t - grid.start) / grid.dt - segment as f64
}

/// Spline kinematics from 4 rotation and (optionally) 4 velocity control
/// point slices.
fn spline_kinematics<T: Real>(rot: &[&[T]], vel: Option<&[&[T]]>, u: T, dt: f64) -> Kinematics<T> {
    let rc: [Rot3<T>; ORDER] = std::array::from_fn(|j| rot_of(rot[j]));
    let rk = so3_segment(&rc, u, dt);
    let (vel, acc) = match vel {
        Some(v) => {
            let vc: [Vector3<T>; ORDER] = std::array::from_fn(|j| vec_of(v[j]));
            let [p, d, _] = r3_segment(&vc, u, dt);
            (p, d)
        }
        None => (Vector3::zeros(), Vector3::zeros()),
    };
    Kinematics { rot: rk.rot, omega: rk.omega, alpha: rk.alpha, vel, acc }
}

fn cps_plan(ids: &[BlockId], segment: usize) -> impl Iterator<Item = BlockId> + '_ {
    ids[segment..segment + ORDER].iter().copied()
}

/// One IMU reading: angular rate (3 rows) and, unless `gyro_only`, specific
/// force (3 more rows). Each triple is a separate robust-loss group.
#[derive(Clone)]
pub struct ImuResidual {
    pub blocks: ImuBlocks,
    pub rot_cps: Arc<Vec<BlockId>>,
    pub vel_cps: Arc<Vec<BlockId>>,
    pub gravity: BlockId,
    pub grid: KnotGrid,
    pub measurement: ImuMeasurement,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub gyro_only: bool,
}

impl Residual for ImuResidual {
    fn kind(&self) -> &'static str {
        if self.gyro_only {
            "gyro"
        } else {
            "imu"
        }
    }

    fn plan(&self, blocks: &[ParameterBlock]) -> Option<Plan> {
        let seg = segment_at(blocks, &self.grid, self.measurement.t, self.blocks.time_offset)?;
        let b = &self.blocks;
        let mut ids = if self.gyro_only {
            vec![b.rotation, b.time_offset, b.gyro_bias, b.misalignment]
        } else {
            vec![b.rotation, b.time_offset, b.gyro_bias, b.misalignment, b.translation, b.accel_bias, self.gravity]
        };
        ids.extend(cps_plan(&self.rot_cps, seg));
        if !self.gyro_only {
            ids.extend(cps_plan(&self.vel_cps, seg));
        }
        let mut plan = Plan::new(ids);
        plan.aux[0] = seg as i64;
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        if self.gyro_only {
            3
        } else {
            6
        }
    }

    fn loss_stride(&self) -> usize {
        3
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let r_bi = rot_of(p[0]);
        let u = segment_u(&self.grid, plan.aux[0], self.measurement.t, p[1][0]);
        let bg = vec_of(p[2]);
        let mis = rot_of(p[3]);
        let wg = T::from_f64(1.0 / self.gyro_sigma);
        if self.gyro_only {
            let k = spline_kinematics(&p[4..8], None, u, self.grid.dt);
            let e = gyro_error(&k, &r_bi, &mis, &bg, &self.measurement);
            for a in 0..3 {
                out[a] = e[a] * wg;
            }
        } else {
            let k = spline_kinematics(&p[7..11], Some(&p[11..15]), u, self.grid.dt);
            let (p_bi, ba, g) = (vec_of(p[4]), vec_of(p[5]), vec_of(p[6]));
            let (eg, ea) = imu_error(&k, &r_bi, &p_bi, &g, &mis, &bg, &ba, &self.measurement);
            let wa = T::from_f64(1.0 / self.accel_sigma);
            for a in 0..3 {
                out[a] = eg[a] * wg;
                out[3 + a] = ea[a] * wa;
            }
        }
        true
    }
}

/// Predicted minus measured angular rate.
pub fn gyro_error<T: Real>(
    k: &Kinematics<T>,
    r_bi: &Rot3<T>,
    misalignment: &Rot3<T>,
    gyro_bias: &Vector3<T>,
    m: &ImuMeasurement,
) -> Vector3<T> {
    misalignment.rotate(&imu_angular_rate(k, r_bi)) + *gyro_bias - lift_vec(&m.gyro)
}

/// Predicted minus measured angular rate and specific force.
#[allow(clippy::too_many_arguments)]
pub fn imu_error<T: Real>(
    k: &Kinematics<T>,
    r_bi: &Rot3<T>,
    p_bi: &Vector3<T>,
    gravity: &Vector3<T>,
    misalignment: &Rot3<T>,
    gyro_bias: &Vector3<T>,
    accel_bias: &Vector3<T>,
    m: &ImuMeasurement,
) -> (Vector3<T>, Vector3<T>) {
    let omega = imu_angular_rate(k, r_bi);
    let f = imu_specific_force(k, r_bi, p_bi, gravity);
    let (gyro, accel) = imu_predict(&omega, &f, misalignment, gyro_bias, accel_bias);
    (gyro - lift_vec(&m.gyro), accel - lift_vec(&m.accel))
}

/// Range-scaled Doppler residual of one target.
pub fn radar_error<T: Real>(k: &Kinematics<T>, r_br: &Rot3<T>, p_br: &Vector3<T>, pt: &DopplerPoint) -> T {
    let v = radar_velocity(k, r_br, p_br);
    doppler_residual(&lift_vec(&pt.position), &v, T::from_f64(pt.range), T::from_f64(pt.doppler))
}

/// One radar target reduced to what the Doppler residual needs.
#[derive(Clone, Copy, Debug)]
pub struct DopplerPoint {
    pub position: Vec3,
    pub range: f64,
    pub doppler: f64,
}

/// All targets of one radar scan; one row (and one robust-loss group) per
/// target, whitened by `range · σ_v`.
#[derive(Clone)]
pub struct RadarScanResidual {
    pub blocks: RadarBlocks,
    pub rot_cps: Arc<Vec<BlockId>>,
    pub vel_cps: Arc<Vec<BlockId>>,
    pub grid: KnotGrid,
    pub t: f64,
    pub points: Vec<DopplerPoint>,
    pub doppler_sigma: f64,
}

impl Residual for RadarScanResidual {
    fn kind(&self) -> &'static str {
        "radar"
    }

    fn plan(&self, blocks: &[ParameterBlock]) -> Option<Plan> {
        let seg = segment_at(blocks, &self.grid, self.t, self.blocks.time_offset)?;
        let b = &self.blocks;
        let mut ids = vec![b.rotation, b.translation, b.time_offset];
        ids.extend(cps_plan(&self.rot_cps, seg));
        ids.extend(cps_plan(&self.vel_cps, seg));
        let mut plan = Plan::new(ids);
        plan.aux[0] = seg as i64;
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        self.points.len()
    }

    fn loss_stride(&self) -> usize {
        1
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let r_br = rot_of(p[0]);
        let p_br = vec_of(p[1]);
        let u = segment_u(&self.grid, plan.aux[0], self.t, p[2][0]);
        let k = spline_kinematics(&p[3..7], Some(&p[7..11]), u, self.grid.dt);
        let v = radar_velocity(&k, &r_br, &p_br);
        for (o, pt) in out.iter_mut().zip(&self.points) {
            let r = doppler_residual(&lift_vec(&pt.position), &v, T::from_f64(pt.range), T::from_f64(pt.doppler));
            *o = r / (pt.range * self.doppler_sigma);
        }
        true
    }
}

/// Which sum a [`CenterResidual`] constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterKind {
    Rotation,
    Translation,
    Time,
}

/// Gauge-fixing sum over all IMUs: `Σ Log R_i`, `Σ p_i` or `Σ τ_i`.
#[derive(Clone)]
pub struct CenterResidual {
    pub kind: CenterKind,
    pub blocks: Vec<BlockId>,
    pub sigma: f64,
}

impl Residual for CenterResidual {
    fn kind(&self) -> &'static str {
        match self.kind {
            CenterKind::Rotation => "center_rotation",
            CenterKind::Translation => "center_translation",
            CenterKind::Time => "center_time",
        }
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        Some(Plan::new(self.blocks.clone()))
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        match self.kind {
            CenterKind::Time => 1,
            _ => 3,
        }
    }

    fn residuals<T: Real>(&self, _: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let w = T::from_f64(1.0 / self.sigma);
        match self.kind {
            CenterKind::Rotation | CenterKind::Translation => {
                let mut s = Vector3::<T>::zeros();
                for b in p {
                    s += if self.kind == CenterKind::Rotation { rot_of(b).log() } else { vec_of(b) };
                }
                let s = scale(&s, w);
                out.copy_from_slice(s.as_slice());
            }
            CenterKind::Time => {
                out[0] = p.iter().fold(T::zero(), |acc, b| acc + b[0]) * w;
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

/// Sensor and kind of every residual block, by block index.
#[derive(Clone, Debug, Default)]
pub struct ResidualLabels {
    pub labels: Vec<(String, &'static str)>,
}

/// Residual families to include when assembling a problem.
#[derive(Clone, Copy, Debug)]
pub struct ResidualSelection {
    pub imu: bool,
    pub gyro_only: bool,
    pub radar: bool,
    pub center_rotation: bool,
    pub center_translation: bool,
    pub center_time: bool,
}

impl ResidualSelection {
    pub fn full() -> Self {
        Self { imu: true, gyro_only: false, radar: true, center_rotation: true, center_translation: true, center_time: true }
    }
}

/// Adds IMU, radar and center residuals for `data` to `problem`.
pub fn add_residuals(
    problem: &mut Problem,
    sb: &StateBlocks,
    data: &Dataset,
    cfg: &EstimatorConfig,
    sel: ResidualSelection,
) -> Result<ResidualLabels, EstimatorError> {
    if data.imus.len() != sb.imus.len() || data.radars.len() != sb.radars.len() {
        return Err(EstimatorError::Mismatch(format!(
            "state has {} IMUs and {} radars, data has {} and {}",
            sb.imus.len(),
            sb.radars.len(),
            data.imus.len(),
            data.radars.len()
        )));
    }
    let loss = cfg.robust_loss();
    let mut labels = ResidualLabels::default();
    for (d, b) in data.imus.iter().zip(&sb.imus).filter(|_| sel.imu) {
        for m in &d.samples {
            let r = ImuResidual {
                blocks: *b,
                rot_cps: sb.rot_cps.clone(),
                vel_cps: sb.vel_cps.clone(),
                gravity: sb.gravity,
                grid: sb.grid,
                measurement: *m,
                gyro_sigma: d.gyro_noise,
                accel_sigma: d.accel_noise,
                gyro_only: sel.gyro_only,
            };
            labels.labels.push((d.name.clone(), r.kind()));
            problem.add_residual(Box::new(AutoDiff(r)), loss);
        }
    }
    if sel.radar {
        for (d, b) in data.radars.iter().zip(&sb.radars) {
            for scan in d.scans() {
                if scan.targets.is_empty() {
                    continue;
                }
                let points = scan
                    .targets
                    .iter()
                    .map(|t| DopplerPoint { position: t.position(), range: t.range, doppler: t.doppler })
                    .collect();
                let r = RadarScanResidual {
                    blocks: *b,
                    rot_cps: sb.rot_cps.clone(),
                    vel_cps: sb.vel_cps.clone(),
                    grid: sb.grid,
                    t: scan.t,
                    points,
                    doppler_sigma: d.doppler_noise,
                };
                labels.labels.push((d.name.clone(), "radar"));
                problem.add_residual(Box::new(AutoDiff(r)), loss);
            }
        }
    }
    let centers = [
        (sel.center_rotation, CenterKind::Rotation),
        (sel.center_translation, CenterKind::Translation),
        (sel.center_time, CenterKind::Time),
    ];
    for (on, kind) in centers {
        if !on || sb.imus.is_empty() {
            continue;
        }
        let blocks = sb
            .imus
            .iter()
            .map(|b| match kind {
                CenterKind::Rotation => b.rotation,
                CenterKind::Translation => b.translation,
                CenterKind::Time => b.time_offset,
            })
            .collect();
        let r = CenterResidual { kind, blocks, sigma: cfg.center_sigma };
        labels.labels.push(("center".into(), r.kind()));
        problem.add_residual(Box::new(AutoDiff(r)), Loss::Trivial);
    }
    Ok(labels)
}

/// Problem over the full state with every residual family.
pub fn build_problem(
    state: &CalibrationState,
    data: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<(Problem, StateBlocks, ResidualLabels), EstimatorError> {
    let mut problem = Problem::new();
    let sb = StateBlocks::add(&mut problem, state)?;
    let labels = add_residuals(&mut problem, &sb, data, cfg, ResidualSelection::full())?;
    Ok((problem, sb, labels))
}

// ---------------------------------------------------------------------------
// Batch optimization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub summary: SolveSummary,
    /// Parameters at the end of the stage.
    pub params: CalibrationParameters,
    /// Time offsets clamped to their bound at the end of the stage.
    pub offsets_at_bound: Vec<String>,
    /// Gravity in the central frame at the reference time.
    pub body_gravity: Vec3,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub state: CalibrationState,
    pub stages: Vec<StageLog>,
}

/// Midpoint of the dataset time span, where gravity is compared in the
/// central frame.
pub fn reference_time(data: &Dataset) -> Option<f64> {
    data.time_span().map(|(a, b)| 0.5 * (a + b))
}

/// `R(t)ᵀ g`: gravity seen from the central frame, free of the world gauge.
pub fn body_gravity(state: &CalibrationState, t: f64) -> Result<Vec3, EstimatorError> {
    Ok(state.rotation.eval(t)?.inverse_rotate(&state.params.gravity.vector()))
}

/// Runs the configured stage schedule starting from `state`.
pub fn run_batch(state: &CalibrationState, data: &Dataset, cfg: &EstimatorConfig) -> Result<BatchResult, EstimatorError> {
    cfg.validate()?;
    let (mut problem, sb, _) = build_problem(state, data, cfg)?;
    let t_ref = reference_time(data).ok_or_else(|| EstimatorError::Mismatch("dataset is empty".into()))?;
    let mut stages = Vec::new();
    for &stage in &cfg.stages {
        let current = sb.read(&problem);
        let span = shifted_span(data, &current.params).ok_or_else(|| EstimatorError::Mismatch("dataset is empty".into()))?;
        sb.apply_stage(&mut problem, stage, cfg.time_offset_bound, span);
        let summary = problem.solve(&cfg.solver)?;
        log::info!(
            "{}: cost {:.6e} -> {:.6e} in {} iterations ({:?})",
            stage.name(),
            summary.initial_cost,
            summary.final_cost,
            summary.iterations,
            summary.termination
        );
        let offsets_at_bound = summary.bounded_blocks.iter().filter(|n| n.ends_with("time_offset")).cloned().collect();
        let state = sb.read(&problem);
        let body_gravity = body_gravity(&state, t_ref)?;
        stages.push(StageLog { stage: stage.name().into(), summary, params: state.params, offsets_at_bound, body_gravity });
    }
    Ok(BatchResult { state: sb.read(&problem), stages })
}

// ---------------------------------------------------------------------------
// Spline fitting
// ---------------------------------------------------------------------------

/// Rotation misfit `Log(R_targetᵀ R(t))` at one time.
struct RotationFit {
    cps: Arc<Vec<BlockId>>,
    grid: KnotGrid,
    t: f64,
    target: Rotation,
}

impl Residual for RotationFit {
    fn kind(&self) -> &'static str {
        "rotation_fit"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        let (seg, _) = self.grid.segment(self.t).ok()?;
        let mut plan = Plan::new(cps_plan(&self.cps, seg).collect());
        plan.aux[0] = seg as i64;
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let u = T::from_f64((self.t - self.grid.start) / self.grid.dt - plan.aux[0] as f64);
        let rc: [Rot3<T>; ORDER] = std::array::from_fn(|j| rot_of(p[j]));
        let r = crate::spline::so3_segment_rotation(&rc, u);
        let e = (Rot3::lift(&self.target.inverse()) * r).log();
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Velocity misfit at one time.
struct VelocityFit {
    cps: Arc<Vec<BlockId>>,
    grid: KnotGrid,
    t: f64,
    target: Vec3,
}

impl Residual for VelocityFit {
    fn kind(&self) -> &'static str {
        "velocity_fit"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        let (seg, _) = self.grid.segment(self.t).ok()?;
        let mut plan = Plan::new(cps_plan(&self.cps, seg).collect());
        plan.aux[0] = seg as i64;
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let u = T::from_f64((self.t - self.grid.start) / self.grid.dt - plan.aux[0] as f64);
        let vc: [Vector3<T>; ORDER] = std::array::from_fn(|j| vec_of(p[j]));
        let [v, _, _] = r3_segment(&vc, u, self.grid.dt);
        let e = v - lift_vec(&self.target);
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Least-squares spline fit of a rotation and velocity curve sampled
/// `per_interval` times per knot interval.
pub fn fit_trajectory(
    grid: KnotGrid,
    per_interval: usize,
    curve: impl Fn(f64) -> (Rotation, Vec3),
) -> Result<(So3Spline, R3Spline), EstimatorError> {
    let n = grid.segment_count() * per_interval.max(1);
    let times: Vec<f64> = (0..n).map(|k| grid.start + (k as f64 + 0.5) * grid.dt / per_interval.max(1) as f64).collect();
    let samples: Vec<(f64, Rotation, Vec3)> = times.iter().map(|&t| {
        let (r, v) = curve(t);
        (t, r, v)
    }).collect();
    // The largest basis weight of control point k sits at knot k - 1.
    let seed_time = |k: usize| (grid.knot_time(k) - grid.dt).clamp(grid.start, grid.end() - 1e-9);
    let mut problem = Problem::new();
    let mut rot = Vec::with_capacity(grid.count);
    let mut vel = Vec::with_capacity(grid.count);
    for k in 0..grid.count {
        let (r, v) = curve(seed_time(k));
        rot.push(problem.add_block(format!("rot_cp[{k}]"), Manifold::So3, rot_values(&r), k as f64));
        vel.push(problem.add_block(format!("vel_cp[{k}]"), Manifold::Euclidean(3), vec_values(&v), k as f64));
    }
    let (rot, vel) = (Arc::new(rot), Arc::new(vel));
    for (t, r, v) in samples {
        problem.add_residual(Box::new(AutoDiff(RotationFit { cps: rot.clone(), grid, t, target: r })), Loss::Trivial);
        problem.add_residual(Box::new(AutoDiff(VelocityFit { cps: vel.clone(), grid, t, target: v })), Loss::Trivial);
    }
    let opts = SolverOptions { function_tolerance: 0.0, initial_lambda: 1e-8, ..SolverOptions::default() };
    problem.solve(&opts)?;
    let rotation = So3Spline { grid, control_points: rot.iter().map(|&b| Rotation::from_slice(problem.values(b))).collect() };
    let velocity = R3Spline { grid, control_points: vel.iter().map(|&b| Vec3::from_column_slice(problem.values(b))).collect() };
    Ok((rotation, velocity))
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub sensor: String,
    pub kind: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub max_abs: f64,
}

impl ResidualStats {
    pub fn from_values(sensor: &str, kind: &str, v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            sensor: sensor.into(),
            kind: kind.into(),
            count: v.len(),
            mean,
            std: var.sqrt(),
            rms: (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
            max_abs: v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        }
    }
}

/// Whitened residuals of every block, grouped by sensor and component kind.
/// IMU blocks are split into `gyro` and `accel` rows.
pub fn standardized_residuals(problem: &Problem, labels: &ResidualLabels) -> BTreeMap<(String, String), Vec<f64>> {
    let mut out: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (i, (sensor, kind)) in labels.labels.iter().enumerate() {
        let Some(r) = problem.evaluate_block(i) else { continue };
        if *kind == "imu" || *kind == "gyro" {
            out.entry((sensor.clone(), "gyro".into())).or_default().extend_from_slice(&r[..3]);
            if r.len() == 6 {
                out.entry((sensor.clone(), "accel".into())).or_default().extend_from_slice(&r[3..]);
            }
        } else {
            out.entry((sensor.clone(), kind.to_string())).or_default().extend(r);
        }
    }
    out
}

/// Standardized residuals of `state` against `data`, by sensor and kind.
pub fn residual_values(
    state: &CalibrationState,
    data: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<BTreeMap<(String, String), Vec<f64>>, EstimatorError> {
    let (problem, _, labels) = build_problem(state, data, cfg)?;
    Ok(standardized_residuals(&problem, &labels))
}

/// Residual statistics of `state` against `data`.
pub fn residual_statistics(
    state: &CalibrationState,
    data: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<Vec<ResidualStats>, EstimatorError> {
    Ok(residual_values(state, data, cfg)?.iter().map(|((s, k), v)| ResidualStats::from_values(s, k, v)).collect())
}

/// Block names and Frobenius norms of the information matrix `JᵀJ` at
/// `state` with every block of the final stage free.
pub fn information_magnitudes(
    state: &CalibrationState,
    data: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<(Vec<String>, Vec<Vec<f64>>), EstimatorError> {
    let (mut problem, sb, _) = build_problem(state, data, cfg)?;
    let span = shifted_span(data, &state.params).ok_or_else(|| EstimatorError::Mismatch("dataset is empty".into()))?;
    sb.apply_stage(&mut problem, Stage::Full, cfg.time_offset_bound, span);
    Ok(problem.block_magnitudes()?)
}

/// Center sums `(|Σ Log R_i|, |Σ p_i|, |Σ τ_i|)` over the IMUs.
pub fn center_sums(params: &CalibrationParameters) -> (f64, f64, f64) {
    let mut r = Vec3::zeros();
    let mut p = Vec3::zeros();
    let mut t = 0.0;
    for s in &params.imus {
        r += s.extrinsics.rotation.log();
        p += s.extrinsics.translation;
        t += s.time_offset;
    }
    (r.norm(), p.norm(), t.abs())
}

#[cfg(test)]
mod tests;
