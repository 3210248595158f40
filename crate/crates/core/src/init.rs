//! Three-stage initialization without prior knowledge.
//!
//! 1. Rotation-only fit of the rotation spline and IMU extrinsic rotations
//!    to the gyro streams.
//! 2. Per-scan radar ego-velocities and velocity-level pre-integration of
//!    the accelerometers give gravity, radar extrinsics and IMU lever arms.
//! 3. The velocity spline is recovered from pre-integration and per-target
//!    Doppler residuals while refining the stage-2 quantities.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    add_residuals, shifted_span, EstimatorConfig, EstimatorError, ResidualSelection, StateBlocks,
};
use crate::lie::{hat, lift_vec, Rot3, Rotation, Vec3};
use crate::models::{
    doppler_row, CalibrationParameters, CalibrationState, Dataset, Gravity, ImuIntrinsics, ImuMeasurement, ImuState,
    RadarScan, RadarState, RadarTarget, SensorExtrinsics,
};
use crate::real::Real;
use crate::solver::{AutoDiff, BlockId, Loss, Manifold, ParameterBlock, Plan, Problem, Residual, SolveSummary, SolverOptions};
use crate::spline::{r3_segment, KnotGrid, R3Spline, So3Spline, ORDER};

#[derive(Debug, Error)]
pub enum InitError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("no IMU data")]
    NoImu,
    #[error("velocity unobservable without radar")]
    NoRadar,
    #[error("{stage}: degenerate input, {reason} (condition {condition:.3e})")]
    Degenerate { stage: &'static str, reason: String, condition: f64 },
    #[error("{stage}: insufficient data, {reason}")]
    InsufficientData { stage: &'static str, reason: String },
}

impl From<crate::solver::SolverError> for InitError {
    fn from(e: crate::solver::SolverError) -> Self {
        InitError::Estimator(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoVelocityOptions {
    pub ransac: bool,
    /// Inlier threshold on the Doppler residual [m/s].
    pub threshold: f64,
    pub iterations: usize,
    /// Largest accepted condition number of the bearing matrix.
    pub max_condition: f64,
    pub seed: u64,
}

impl Default for EgoVelocityOptions {
    fn default() -> Self {
        Self { ransac: true, threshold: 0.2, iterations: 100, max_condition: 1e4, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub ego_velocity: EgoVelocityOptions,
    /// Scan pairs further apart than this many scan periods are skipped.
    pub max_gap_periods: f64,
    /// Largest accepted condition number of the linear stage-2 system.
    pub max_condition: f64,
    /// Prior spread of the accelerometer biases that pre-integration
    /// ignores [m/s²]; widens the pre-integration weights.
    pub accel_bias_sigma: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { ego_velocity: EgoVelocityOptions::default(), max_gap_periods: 3.0, max_condition: 1e8, accel_bias_sigma: 0.1 }
    }
}

// ---------------------------------------------------------------------------
// Ego-velocity
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoVelocityEstimate {
    pub scan_id: u64,
    pub t: f64,
    /// Radar velocity in its own frame.
    pub velocity: Vec3,
    pub inliers: usize,
    pub residual_rms: f64,
    /// `(AᵀA)⁻¹` of the inlier bearing rows; times σ² gives the covariance.
    pub normal_inverse: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EgoVelocityError {
    #[error("scan needs at least 3 targets, got {0}")]
    TooFewTargets(usize),
    #[error("bearings are degenerate (condition {0:.3e})")]
    Degenerate(f64),
}

struct LinearFit {
    velocity: Vec3,
    normal_inverse: Matrix3<f64>,
    condition: f64,
}

fn ego_rows(targets: &[RadarTarget]) -> Vec<(Vec3, f64)> {
    targets.iter().map(|t| (doppler_row(&t.direction()), t.doppler)).collect()
}

/// Least squares of `b = aᵀ v` over the selected rows.
fn fit_rows(rows: &[(Vec3, f64)], idx: impl Iterator<Item = usize>) -> Option<LinearFit> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vec3::zeros();
    for i in idx {
        let (a, b) = rows[i];
        ata += a * a.transpose();
        atb += a * b;
    }
    let eig = SymmetricEigen::new(ata);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    let inv = ata.try_inverse()?;
    Some(LinearFit { velocity: inv * atb, normal_inverse: inv, condition })
}

/// Radar velocity from the Doppler of the static targets of one scan.
pub fn solve_ego_velocity(targets: &[RadarTarget], opts: &EgoVelocityOptions) -> Result<EgoVelocityEstimate, EgoVelocityError> {
    if targets.len() < 3 {
        return Err(EgoVelocityError::TooFewTargets(targets.len()));
    }
    let rows = ego_rows(targets);
    let all: Vec<usize> = (0..rows.len()).collect();
    let residual = |v: &Vec3, i: usize| rows[i].1 - rows[i].0.dot(v);
    let inliers = if opts.ransac && rows.len() > 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(targets[0].scan_id);
        let mut best: (usize, f64, Vec<usize>) = (0, f64::INFINITY, all.clone());
        for _ in 0..opts.iterations {
            let mut pick = [0usize; 3];
            for k in 0..3 {
                pick[k] = loop {
                    let c = rng.random_range(0..rows.len());
                    if !pick[..k].contains(&c) {
                        break c;
                    }
                };
            }
            let Some(fit) = fit_rows(&rows, pick.into_iter()) else { continue };
            if fit.condition > opts.max_condition {
                continue;
            }
            let set: Vec<usize> = all.iter().copied().filter(|&i| residual(&fit.velocity, i).abs() < opts.threshold).collect();
            let score: f64 = set.iter().map(|&i| residual(&fit.velocity, i).powi(2)).sum();
            if set.len() > best.0 || (set.len() == best.0 && score < best.1) {
                best = (set.len(), score, set);
            }
        }
        if best.0 >= 3 {
            best.2
        } else {
            all
        }
    } else {
        all
    };
    let fit = fit_rows(&rows, inliers.iter().copied()).ok_or(EgoVelocityError::Degenerate(f64::INFINITY))?;
    if fit.condition > opts.max_condition {
        return Err(EgoVelocityError::Degenerate(fit.condition));
    }
    let rms = (inliers.iter().map(|&i| residual(&fit.velocity, i).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt();
    Ok(EgoVelocityEstimate {
        scan_id: targets[0].scan_id,
        t: targets[0].t,
        velocity: fit.velocity,
        inliers: inliers.len(),
        residual_rms: rms,
        normal_inverse: fit.normal_inverse,
    })
}

/// Ego-velocities of every usable scan; scans that fail are skipped.
pub fn ego_velocities(scans: &[RadarScan], opts: &EgoVelocityOptions) -> Vec<EgoVelocityEstimate> {
    scans.iter().filter_map(|s| solve_ego_velocity(&s.targets, opts).ok()).collect()
}

// ---------------------------------------------------------------------------
// Stage 1: rotation spline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RotationInit {
    pub rotation: So3Spline,
    pub imu_rotations: Vec<Rotation>,
    pub summary: SolveSummary,
}

/// Gyro sample of `stream` linearly interpolated at `t`.
fn interpolate_gyro(stream: &[ImuMeasurement], t: f64) -> Option<Vec3> {
    let k = stream.partition_point(|m| m.t <= t);
    if k == 0 || k == stream.len() {
        return None;
    }
    let (a, b) = (&stream[k - 1], &stream[k]);
    let w = (t - a.t) / (b.t - a.t);
    Some(a.gyro * (1.0 - w) + b.gyro * w)
}

/// Rotation `Q` minimizing `Σ |x_k - Q y_k|²`, with the singular values of
/// the cross-covariance.
pub fn kabsch(x: &[Vec3], y: &[Vec3]) -> (Rotation, Vec3) {
    let mut h = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let q = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    let mut s = svd.singular_values;
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    (Rotation::from_matrix(&q), s)
}

/// Karcher mean of rotations.
pub fn rotation_mean(rs: &[Rotation]) -> Rotation {
    let mut m = rs[0];
    for _ in 0..50 {
        let step: Vec3 = rs.iter().map(|r| (m.inverse() * *r).log()).sum::<Vec3>() / rs.len() as f64;
        m = (m * Rotation::exp(&step)).normalized();
        if step.norm() < 1e-15 {
            break;
        }
    }
    m
}

/// Closed-form IMU rotations relative to the central frame from gyro
/// alignment, centered so that `Σ Log R_i = 0`.
fn seed_imu_rotations(data: &Dataset) -> Result<Vec<Rotation>, InitError> {
    let reference = &data.imus[0].samples;
    let mut rel = vec![Rotation::identity()];
    for d in &data.imus[1..] {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for m in reference {
            if let Some(w) = interpolate_gyro(&d.samples, m.t) {
                x.push(m.gyro);
                y.push(w);
            }
        }
        let (q, s) = kabsch(&x, &y);
        let condition = s[0] / s[1].max(f64::MIN_POSITIVE);
        if x.len() < 3 || condition > 1e8 {
            return Err(InitError::Degenerate {
                stage: "INIT1",
                reason: format!("{} rotation unobservable, gyro excitation spans fewer than two axes", d.name),
                condition,
            });
        }
        rel.push(q);
    }
    let mean = rotation_mean(&rel);
    Ok(rel.iter().map(|q| mean.inverse() * *q).collect())
}

/// Integrates the first IMU's gyro, rotated into the central frame, from
/// identity at `t0`; returns a rotation lookup.
fn integrate_gyro(samples: &[ImuMeasurement], r_b0: &Rotation) -> impl Fn(f64) -> Rotation {
    let mut times = Vec::with_capacity(samples.len());
    let mut rots = Vec::with_capacity(samples.len());
    let mut r = Rotation::identity();
    for (k, m) in samples.iter().enumerate() {
        if k > 0 {
            let prev = &samples[k - 1];
            let w = r_b0.rotate(&((prev.gyro + m.gyro) * 0.5));
            r = (r * Rotation::exp(&(w * (m.t - prev.t)))).normalized();
        }
        times.push(m.t);
        rots.push(r);
    }
    move |t: f64| {
        let k = times.partition_point(|&x| x <= t).saturating_sub(1).min(times.len() - 1);
        rots[k]
    }
}

pub(crate) fn placeholder_state(data: &Dataset, grid: KnotGrid, imu_rotations: &[Rotation], rotation: So3Spline) -> CalibrationState {
    CalibrationState {
        params: CalibrationParameters {
            imus: imu_rotations
                .iter()
                .map(|r| ImuState {
                    extrinsics: SensorExtrinsics { rotation: *r, translation: Vec3::zeros() },
                    time_offset: 0.0,
                    intrinsics: ImuIntrinsics::default(),
                })
                .collect(),
            radars: vec![RadarState { extrinsics: SensorExtrinsics::default(), time_offset: 0.0 }; data.radars.len()],
            gravity: Gravity::down(),
        },
        rotation,
        velocity: R3Spline::constant(grid, Vec3::zeros()),
    }
}

fn data_span(data: &Dataset, stage: &'static str) -> Result<(f64, f64), InitError> {
    data.time_span().ok_or(InitError::InsufficientData { stage, reason: "dataset is empty".into() })
}

/// Fits the rotation spline and IMU extrinsic rotations to the gyros with
/// time offsets at zero and identity intrinsics.
pub fn init_rotation_spline(data: &Dataset, grid: KnotGrid, cfg: &EstimatorConfig) -> Result<RotationInit, InitError> {
    if data.imus.is_empty() || data.imus[0].samples.len() < 2 {
        return Err(InitError::NoImu);
    }
    let (t0, t1) = data_span(data, "INIT1")?;
    if !grid.contains(t0) || !grid.contains(t1) {
        return Err(EstimatorError::Spline(crate::spline::SplineError::OutOfRange { t: t1, start: grid.start, end: grid.end() }).into());
    }
    let excitation = data
        .imus
        .iter()
        .map(|d| (d.samples.iter().map(|m| m.gyro.norm_squared()).sum::<f64>() / d.samples.len().max(1) as f64).sqrt())
        .fold(f64::INFINITY, f64::min);
    if !(excitation > 1e-6) {
        return Err(InitError::Degenerate {
            stage: "INIT1",
            reason: "rotation unobservable, gyro streams carry no rotation".into(),
            condition: f64::INFINITY,
        });
    }
    let imu_rotations = seed_imu_rotations(data)?;
    let lookup = integrate_gyro(&data.imus[0].samples, &imu_rotations[0]);
    let cps = (0..grid.count).map(|k| lookup(grid.knot_time(k) - grid.dt)).collect();
    let rotation = So3Spline::new(grid, cps).map_err(EstimatorError::from)?;
    let state = placeholder_state(data, grid, &imu_rotations, rotation);

    let mut problem = Problem::new();
    let sb = StateBlocks::add(&mut problem, &state)?;
    let sel = ResidualSelection {
        imu: true,
        gyro_only: true,
        radar: false,
        center_rotation: true,
        center_translation: false,
        center_time: false,
    };
    add_residuals(&mut problem, &sb, data, cfg, sel)?;
    sb.freeze_all(&mut problem);
    sb.free_control_points(&mut problem, (t0, t1), true, false);
    for b in &sb.imus {
        problem.set_constant(b.rotation, false);
    }
    let summary = problem.solve(&cfg.solver)?;
    let out = sb.read(&problem);
    Ok(RotationInit {
        rotation: out.rotation,
        imu_rotations: out.params.imus.iter().map(|s| s.extrinsics.rotation).collect(),
        summary,
    })
}

// ---------------------------------------------------------------------------
// Pre-integration
// ---------------------------------------------------------------------------

/// Accelerometer pre-integration of one IMU over `[t0, t1]`:
/// `V″ = ∫ R R_bi f dt` and `V′ = ∫ R (ω̂̇ + ω̂²) dt`, by the trapezoidal rule
/// at the IMU sample times.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegrationTriple {
    pub t0: f64,
    pub t1: f64,
    pub imu: usize,
    pub v_prime: Matrix3<f64>,
    pub v_dprime: Vec3,
    /// Variance of one component of `V″` from accelerometer noise.
    pub variance: f64,
}

/// Returns `None` when `[t0, t1]` is not covered by samples without gaps.
pub fn preintegrate(
    rotation: &So3Spline,
    r_bi: &Rotation,
    samples: &[ImuMeasurement],
    accel_noise: f64,
    imu: usize,
    t0: f64,
    t1: f64,
) -> Option<PreintegrationTriple> {
    let a = samples.partition_point(|m| m.t <= t0);
    let b = samples.partition_point(|m| m.t < t1);
    if a == 0 || b >= samples.len() || b < a {
        return None;
    }
    let nominal = (samples[samples.len() - 1].t - samples[0].t) / (samples.len() - 1) as f64;
    let interp = |t: f64, k: usize| {
        let (p, q) = (&samples[k - 1], &samples[k]);
        let w = (t - p.t) / (q.t - p.t);
        p.accel * (1.0 - w) + q.accel * w
    };
    let mut pts: Vec<(f64, Vec3)> = Vec::with_capacity(b - a + 2);
    pts.push((t0, interp(t0, a)));
    pts.extend(samples[a..b].iter().map(|m| (m.t, m.accel)));
    pts.push((t1, interp(t1, b)));
    if pts.windows(2).any(|w| w[1].0 - w[0].0 > 5.0 * nominal) {
        return None;
    }
    let integrand = |t: f64, f: &Vec3| -> Option<(Matrix3<f64>, Vec3)> {
        let k = rotation.kinematics(t).ok()?;
        let r = k.rot.to_matrix();
        let w = hat(&k.omega);
        Some((r * (hat(&k.alpha) + w * w), r * r_bi.rotate(f)))
    };
    let mut v_prime = Matrix3::zeros();
    let mut v_dprime = Vec3::zeros();
    let mut prev = integrand(pts[0].0, &pts[0].1)?;
    for w in pts.windows(2) {
        let h = w[1].0 - w[0].0;
        let cur = integrand(w[1].0, &w[1].1)?;
        v_prime += (prev.0 + cur.0) * (0.5 * h);
        v_dprime += (prev.1 + cur.1) * (0.5 * h);
        prev = cur;
    }
    Some(PreintegrationTriple { t0, t1, imu, v_prime, v_dprime, variance: accel_noise * accel_noise * (t1 - t0) * nominal })
}

// ---------------------------------------------------------------------------
// Stage 2: gravity, radar extrinsics, IMU lever arms
// ---------------------------------------------------------------------------

/// Pre-integration variance including the ignored accelerometer bias.
fn pre_variance(pre: &PreintegrationTriple, cfg: &InitConfig) -> f64 {
    let dt = pre.t1 - pre.t0;
    pre.variance + (cfg.accel_bias_sigma * dt).powi(2)
}

/// Rotation-spline quantities at one radar scan.
#[derive(Clone, Copy, Debug)]
struct ScanMotion {
    rot: Matrix3<f64>,
    omega_hat: Matrix3<f64>,
    ego: Vec3,
    /// Variance of one ego-velocity component.
    variance: f64,
}

/// One pre-integration constraint of a radar scan pair and an IMU.
#[derive(Clone, Debug)]
struct PairConstraint {
    radar: usize,
    a: ScanMotion,
    b: ScanMotion,
    pre: PreintegrationTriple,
    sigma: f64,
}

/// Stage-2 residual: central velocity change from two ego-velocities
/// against the pre-integrated accelerometer.
struct Stage2Residual {
    c: PairConstraint,
    blocks: [BlockId; 4],
}

fn mat_mul_vec<T: Real>(m: &Matrix3<f64>, v: &nalgebra::Vector3<T>) -> nalgebra::Vector3<T> {
    nalgebra::Vector3::from_fn(|i, _| v[0] * m[(i, 0)] + v[1] * m[(i, 1)] + v[2] * m[(i, 2)])
}

impl Residual for Stage2Residual {
    fn kind(&self) -> &'static str {
        "preintegration"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        Some(Plan::new(self.blocks.to_vec()))
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, _: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let r_r = Rot3::from_wxyz_unchecked(p[0][0], p[0][1], p[0][2], p[0][3]);
        let p_r = nalgebra::Vector3::new(p[1][0], p[1][1], p[1][2]);
        let g = nalgebra::Vector3::new(p[2][0], p[2][1], p[2][2]);
        let p_i = nalgebra::Vector3::new(p[3][0], p[3][1], p[3][2]);
        let central = |s: &ScanMotion| mat_mul_vec(&s.rot, &(r_r.rotate(&lift_vec(&s.ego)) - mat_mul_vec(&s.omega_hat, &p_r)));
        let c = &self.c;
        let dt = c.pre.t1 - c.pre.t0;
        let e = central(&c.b) - central(&c.a) - lift_vec(&c.pre.v_dprime) - g * T::from_f64(dt)
            + mat_mul_vec(&c.pre.v_prime, &p_i);
        for k in 0..3 {
            out[k] = e[k] / c.sigma;
        }
        true
    }
}

#[derive(Clone, Debug)]
pub struct ExtrinsicsInit {
    /// Free gravity vector before rescaling to the nominal magnitude.
    pub gravity_raw: Vec3,
    pub gravity: Gravity,
    pub radars: Vec<SensorExtrinsics>,
    pub imu_translations: Vec<Vec3>,
    /// Central-frame world velocities recovered at scan times.
    pub velocity_samples: Vec<(f64, Vec3)>,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    pub summary: SolveSummary,
}

fn nominal_period(times: &[f64]) -> f64 {
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).filter(|x| *x > 0.0).collect();
    if d.is_empty() {
        return f64::INFINITY;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Builds the stage-2 constraints for all radar scan pairs and IMUs.
fn pair_constraints(
    data: &Dataset,
    rotation: &So3Spline,
    imu_rotations: &[Rotation],
    cfg: &InitConfig,
) -> (Vec<PairConstraint>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (j, radar) in data.radars.iter().enumerate() {
        let scans = radar.scans();
        let ego = ego_velocities(&scans, &cfg.ego_velocity);
        let period = nominal_period(&scans.iter().map(|s| s.t).collect::<Vec<_>>());
        let sigma2 = radar.doppler_noise * radar.doppler_noise;
        let motion = |e: &EgoVelocityEstimate| -> Option<ScanMotion> {
            let k = rotation.kinematics(e.t).ok()?;
            Some(ScanMotion {
                rot: k.rot.to_matrix(),
                omega_hat: hat(&k.omega),
                ego: e.velocity,
                variance: sigma2 * e.normal_inverse.trace() / 3.0,
            })
        };
        for w in ego.windows(2) {
            let (ea, eb) = (&w[0], &w[1]);
            if eb.t - ea.t > cfg.max_gap_periods * period {
                skipped += 1;
                continue;
            }
            let (Some(a), Some(b)) = (motion(ea), motion(eb)) else {
                skipped += 1;
                continue;
            };
            for (i, imu) in data.imus.iter().enumerate() {
                match preintegrate(rotation, &imu_rotations[i], &imu.samples, imu.accel_noise, i, ea.t, eb.t) {
                    Some(pre) => {
                        let sigma = (a.variance + b.variance + pre_variance(&pre, cfg)).sqrt();
                        out.push(PairConstraint { radar: j, a, b, pre, sigma });
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    (out, skipped)
}

/// Linear solve of the stage-2 system with each radar rotation relaxed to a
/// general 3×3 matrix, then projected onto SO(3).
fn linear_seed(
    constraints: &[PairConstraint],
    n_radars: usize,
    n_imus: usize,
    max_condition: f64,
) -> Result<(Vec3, Vec<SensorExtrinsics>, Vec<Vec3>), InitError> {
    let col_g = 0;
    let col_r = |j: usize| 3 + 12 * j;
    let col_i = |i: usize| 3 + 12 * n_radars + 3 * i;
    let n = 3 + 12 * n_radars + 3 * n_imus;
    let mut a = DMatrix::<f64>::zeros(3 * constraints.len() + 3, n);
    let mut y = DVector::<f64>::zeros(3 * constraints.len() + 3);
    for (row, c) in constraints.iter().enumerate() {
        let w = 1.0 / c.sigma;
        let dt = c.pre.t1 - c.pre.t0;
        for r in 0..3 {
            let ri = 3 * row + r;
            for (s, sign) in [(&c.b, 1.0), (&c.a, -1.0)] {
                // R M v  with M row-major in 9 unknowns.
                for p in 0..3 {
                    for q in 0..3 {
                        a[(ri, col_r(c.radar) + 3 * p + q)] += sign * w * s.rot[(r, p)] * s.ego[q];
                    }
                }
                let rw = s.rot * s.omega_hat;
                for q in 0..3 {
                    a[(ri, col_r(c.radar) + 9 + q)] -= sign * w * rw[(r, q)];
                }
            }
            a[(ri, col_g + r)] = -w * dt;
            for q in 0..3 {
                a[(ri, col_i(c.pre.imu) + q)] = w * c.pre.v_prime[(r, q)];
            }
            y[ri] = w * c.pre.v_dprime[r];
        }
    }
    // Stiff translational center constraint.
    let big = 1e6;
    for r in 0..3 {
        for i in 0..n_imus {
            a[(3 * constraints.len() + r, col_i(i) + r)] = big;
        }
    }
    let scale: Vec<f64> = (0..n).map(|c| a.column(c).norm().max(1e-300)).collect();
    for c in 0..n {
        let s = scale[c];
        a.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (hi, lo) = (sv.max(), sv.min());
    let condition = hi / lo.max(f64::MIN_POSITIVE);
    if condition > max_condition {
        let vt = svd.v_t.as_ref().unwrap();
        let k = sv.imin();
        let null = vt.row(k);
        let name = |c: usize| {
            if c < 3 {
                "gravity".to_string()
            } else if c < col_i(0) {
                let j = (c - 3) / 12;
                if (c - 3) % 12 < 9 {
                    format!("radar{j} rotation")
                } else {
                    format!("radar{j} translation")
                }
            } else {
                format!("imu{} translation", (c - col_i(0)) / 3)
            }
        };
        let worst = (0..n).max_by(|&p, &q| null[p].abs().total_cmp(&null[q].abs())).unwrap();
        return Err(InitError::Degenerate {
            stage: "INIT2",
            reason: format!("{} unobservable from the motion", name(worst)),
            condition,
        });
    }
    let x = svd.solve(&y, 0.0).map_err(|e| InitError::InsufficientData { stage: "INIT2", reason: e.into() })?;
    let x: Vec<f64> = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
    let g = Vec3::new(x[0], x[1], x[2]);
    let radars = (0..n_radars)
        .map(|j| {
            let c = col_r(j);
            let m = Matrix3::from_fn(|p, q| x[c + 3 * p + q]);
            let svd = m.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let d = (u * vt).determinant().signum();
            let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
            SensorExtrinsics { rotation: Rotation::from_matrix(&r), translation: Vec3::new(x[c + 9], x[c + 10], x[c + 11]) }
        })
        .collect();
    let imus = (0..n_imus).map(|i| Vec3::new(x[col_i(i)], x[col_i(i) + 1], x[col_i(i) + 2])).collect();
    Ok((g, radars, imus))
}

/// Center-translation residual over explicit blocks.
struct CenterSum {
    blocks: Vec<BlockId>,
    sigma: f64,
}

impl Residual for CenterSum {
    fn kind(&self) -> &'static str {
        "center_translation"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        Some(Plan::new(self.blocks.clone()))
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, _: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        for k in 0..3 {
            out[k] = p.iter().fold(T::zero(), |acc, b| acc + b[k]) / self.sigma;
        }
        true
    }
}

/// Solves for gravity, radar extrinsics and IMU lever arms from
/// pre-integrated accelerometers and radar ego-velocities.
pub fn init_extrinsics_gravity(
    data: &Dataset,
    rot: &RotationInit,
    est: &EstimatorConfig,
    cfg: &InitConfig,
) -> Result<ExtrinsicsInit, InitError> {
    if data.radars.is_empty() || data.radars.iter().all(|r| r.targets.is_empty()) {
        return Err(InitError::NoRadar);
    }
    let (constraints, skipped) = pair_constraints(data, &rot.rotation, &rot.imu_rotations, cfg);
    if constraints.len() < 4 {
        return Err(InitError::InsufficientData {
            stage: "INIT2",
            reason: format!("only {} usable scan pairs", constraints.len()),
        });
    }
    if skipped > 0 {
        log::warn!("INIT2: skipped {skipped} scan pairs with missing ego-velocity or IMU data");
    }
    let (n_r, n_i) = (data.radars.len(), data.imus.len());
    let (g0, radars0, imus0) = linear_seed(&constraints, n_r, n_i, cfg.max_condition)?;

    let mut problem = Problem::new();
    let r_blocks: Vec<(BlockId, BlockId)> = radars0
        .iter()
        .enumerate()
        .map(|(j, e)| {
            (
                problem.add_block(format!("radar{j}.rotation"), Manifold::So3, e.rotation.wxyz().to_vec(), 0.0),
                problem.add_block(format!("radar{j}.translation"), Manifold::Euclidean(3), e.translation.as_slice().to_vec(), 0.0),
            )
        })
        .collect();
    let g_block = problem.add_block("gravity", Manifold::Euclidean(3), g0.as_slice().to_vec(), 1.0);
    let i_blocks: Vec<BlockId> = imus0
        .iter()
        .enumerate()
        .map(|(i, p)| problem.add_block(format!("imu{i}.translation"), Manifold::Euclidean(3), p.as_slice().to_vec(), 1.0))
        .collect();
    let loss = est.robust_loss();
    for c in &constraints {
        let blocks = [r_blocks[c.radar].0, r_blocks[c.radar].1, g_block, i_blocks[c.pre.imu]];
        problem.add_residual(Box::new(AutoDiff(Stage2Residual { c: c.clone(), blocks })), loss);
    }
    problem.add_residual(Box::new(AutoDiff(CenterSum { blocks: i_blocks.clone(), sigma: est.center_sigma })), Loss::Trivial);
    let summary = problem.solve(&est.solver)?;

    let gravity_raw = Vec3::from_column_slice(problem.values(g_block));
    let radars: Vec<SensorExtrinsics> = r_blocks
        .iter()
        .map(|(r, p)| SensorExtrinsics {
            rotation: Rotation::from_slice(problem.values(*r)),
            translation: Vec3::from_column_slice(problem.values(*p)),
        })
        .collect();
    let imu_translations = i_blocks.iter().map(|b| Vec3::from_column_slice(problem.values(*b))).collect();
    let mut velocity_samples = Vec::new();
    for (j, radar) in data.radars.iter().enumerate() {
        for e in ego_velocities(&radar.scans(), &cfg.ego_velocity) {
            if let Ok(k) = rot.rotation.kinematics(e.t) {
                let ext = &radars[j];
                let body = ext.rotation.rotate(&e.velocity) - k.omega.cross(&ext.translation);
                velocity_samples.push((e.t, k.rot.rotate(&body)));
            }
        }
    }
    velocity_samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ExtrinsicsInit {
        gravity_raw,
        gravity: Gravity::from_vector(&gravity_raw),
        radars,
        imu_translations,
        velocity_samples,
        pairs_used: constraints.len(),
        pairs_skipped: skipped,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Stage 3: velocity spline
// ---------------------------------------------------------------------------

/// Stage-3 residual: spline velocity change against the pre-integrated
/// accelerometer. The plan holds the union of both segments' control points.
struct Stage3Residual {
    pre: PreintegrationTriple,
    sigma: f64,
    grid: KnotGrid,
    vel_cps: std::sync::Arc<Vec<BlockId>>,
    gravity: BlockId,
    translation: BlockId,
}

impl Residual for Stage3Residual {
    fn kind(&self) -> &'static str {
        "preintegration"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        let (s0, _) = self.grid.segment(self.pre.t0).ok()?;
        let (s1, _) = self.grid.segment(self.pre.t1).ok()?;
        let mut ids = vec![self.gravity, self.translation];
        ids.extend_from_slice(&self.vel_cps[s0..s1 + ORDER]);
        let mut plan = Plan::new(ids);
        plan.aux = [s0 as i64, s1 as i64];
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let g = nalgebra::Vector3::new(p[0][0], p[0][1], p[0][2]);
        let p_i = nalgebra::Vector3::new(p[1][0], p[1][1], p[1][2]);
        let [s0, s1] = plan.aux;
        let vel = |seg: i64, t: f64| {
            let base = 2 + (seg - s0) as usize;
            let cps: [nalgebra::Vector3<T>; ORDER] =
                std::array::from_fn(|j| nalgebra::Vector3::new(p[base + j][0], p[base + j][1], p[base + j][2]));
            let u = T::from_f64((t - self.grid.start) / self.grid.dt - seg as f64);
            r3_segment(&cps, u, self.grid.dt)[0]
        };
        let dt = self.pre.t1 - self.pre.t0;
        let e = vel(s1, self.pre.t1) - vel(s0, self.pre.t0) - lift_vec(&self.pre.v_dprime) - g * T::from_f64(dt)
            + mat_mul_vec(&self.pre.v_prime, &p_i);
        for k in 0..3 {
            out[k] = e[k] / self.sigma;
        }
        true
    }
}

/// Least-squares velocity spline through time-stamped samples. Control
/// points without samples in their support take the nearest sample value.
pub fn fit_velocity_samples(grid: KnotGrid, samples: &[(f64, Vec3)]) -> Result<R3Spline, InitError> {
    let inside: Vec<(f64, Vec3)> = samples.iter().copied().filter(|(t, _)| grid.contains(*t)).collect();
    if inside.is_empty() {
        return Err(InitError::InsufficientData { stage: "INIT3", reason: "no velocity samples inside the grid".into() });
    }
    let nearest = |t: f64| {
        let k = inside.partition_point(|s| s.0 < t).min(inside.len() - 1);
        inside[k].1
    };
    let mut problem = Problem::new();
    let ids: Vec<BlockId> = (0..grid.count)
        .map(|k| {
            let v = nearest(grid.knot_time(k) - grid.dt);
            problem.add_block(format!("vel_cp[{k}]"), Manifold::Euclidean(3), v.as_slice().to_vec(), k as f64)
        })
        .collect();
    let ids = std::sync::Arc::new(ids);
    let mut supported = vec![false; grid.count];
    for (t, v) in &inside {
        let (seg, _) = grid.segment(*t).map_err(EstimatorError::from)?;
        supported[seg..seg + ORDER].iter_mut().for_each(|s| *s = true);
        problem.add_residual(
            Box::new(AutoDiff(VelocitySample { grid, cps: ids.clone(), t: *t, target: *v })),
            Loss::Trivial,
        );
    }
    for (k, s) in supported.iter().enumerate() {
        problem.set_constant(ids[k], !s);
    }
    let opts = SolverOptions { initial_lambda: 1e-10, function_tolerance: 0.0, max_iterations: 10, ..SolverOptions::default() };
    problem.solve(&opts)?;
    Ok(R3Spline { grid, control_points: ids.iter().map(|b| Vec3::from_column_slice(problem.values(*b))).collect() })
}

struct VelocitySample {
    grid: KnotGrid,
    cps: std::sync::Arc<Vec<BlockId>>,
    t: f64,
    target: Vec3,
}

impl Residual for VelocitySample {
    fn kind(&self) -> &'static str {
        "velocity_sample"
    }

    fn plan(&self, _: &[ParameterBlock]) -> Option<Plan> {
        let (seg, _) = self.grid.segment(self.t).ok()?;
        let mut plan = Plan::new(self.cps[seg..seg + ORDER].to_vec());
        plan.aux[0] = seg as i64;
        Some(plan)
    }

    fn num_residuals(&self, _: &Plan) -> usize {
        3
    }

    fn residuals<T: Real>(&self, plan: &Plan, p: &[&[T]], out: &mut [T]) -> bool {
        let cps: [nalgebra::Vector3<T>; ORDER] = std::array::from_fn(|j| nalgebra::Vector3::new(p[j][0], p[j][1], p[j][2]));
        let u = T::from_f64((self.t - self.grid.start) / self.grid.dt - plan.aux[0] as f64);
        let v = r3_segment(&cps, u, self.grid.dt)[0];
        for k in 0..3 {
            out[k] = v[k] - T::from_f64(self.target[k]);
        }
        true
    }
}

#[derive(Clone, Debug)]
pub struct VelocityInit {
    pub state: CalibrationState,
    pub summary: SolveSummary,
}

/// Recovers the velocity spline and refines gravity, radar extrinsics and
/// IMU lever arms. Time offsets stay zero and intrinsics at identity.
pub fn init_velocity_spline(
    data: &Dataset,
    rot: &RotationInit,
    ext: &ExtrinsicsInit,
    est: &EstimatorConfig,
    cfg: &InitConfig,
) -> Result<VelocityInit, InitError> {
    if data.radars.is_empty() || data.radars.iter().all(|r| r.targets.is_empty()) {
        return Err(InitError::NoRadar);
    }
    let grid = rot.rotation.grid;
    let velocity = fit_velocity_samples(grid, &ext.velocity_samples)?;
    let mut state = placeholder_state(data, grid, &rot.imu_rotations, rot.rotation.clone());
    state.velocity = velocity;
    state.params.gravity = ext.gravity;
    for (s, p) in state.params.imus.iter_mut().zip(&ext.imu_translations) {
        s.extrinsics.translation = *p;
    }
    for (s, e) in state.params.radars.iter_mut().zip(&ext.radars) {
        s.extrinsics = *e;
    }

    let mut problem = Problem::new();
    let sb = StateBlocks::add(&mut problem, &state)?;
    let sel = ResidualSelection {
        imu: false,
        gyro_only: false,
        radar: true,
        center_rotation: false,
        center_translation: true,
        center_time: false,
    };
    add_residuals(&mut problem, &sb, data, est, sel)?;
    let loss = est.robust_loss();
    for radar in &data.radars {
        let times: Vec<f64> = radar.scans().iter().filter(|s| !s.targets.is_empty()).map(|s| s.t).collect();
        let period = nominal_period(&times);
        for w in times.windows(2) {
            if w[1] - w[0] > cfg.max_gap_periods * period {
                continue;
            }
            for (i, imu) in data.imus.iter().enumerate() {
                let Some(pre) = preintegrate(&rot.rotation, &rot.imu_rotations[i], &imu.samples, imu.accel_noise, i, w[0], w[1])
                else {
                    continue;
                };
                let sigma = pre_variance(&pre, cfg).sqrt().max(1e-12);
                let r = Stage3Residual {
                    pre,
                    sigma,
                    grid,
                    vel_cps: sb.vel_cps.clone(),
                    gravity: sb.gravity,
                    translation: sb.imus[i].translation,
                };
                problem.add_residual(Box::new(AutoDiff(r)), loss);
            }
        }
    }
    sb.freeze_all(&mut problem);
    let span = shifted_span(data, &state.params).ok_or(InitError::InsufficientData { stage: "INIT3", reason: "dataset is empty".into() })?;
    sb.free_control_points(&mut problem, span, false, true);
    problem.set_constant(sb.gravity, false);
    for b in &sb.imus {
        problem.set_constant(b.translation, false);
    }
    for b in &sb.radars {
        problem.set_constant(b.rotation, false);
        problem.set_constant(b.translation, false);
    }
    let summary = problem.solve(&est.solver)?;
    Ok(VelocityInit { state: sb.read(&problem), summary })
}

#[cfg(test)]
mod tests;
