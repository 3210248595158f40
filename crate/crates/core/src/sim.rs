//! Synthetic multi-IMU / multi-radar datasets with exact ground truth.
//!
//! The central frame follows a closed-form figure-eight (Gerono lemniscate)
//! with vertical oscillation. Yaw follows the horizontal heading, roll and
//! pitch oscillate, so every gyro and accelerometer axis is excited. All
//! derivatives are analytic.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{Rotation, Vec3};
use crate::models::{
    cartesian_to_spherical, imu_angular_rate, imu_predict, imu_specific_force, radar_doppler_predict,
    radar_velocity, CalibrationParameters, CalibrationState, Dataset, Gravity, ImuData, RadarData, ImuIntrinsics, ImuMeasurement, ImuState, Kinematics,
    RadarState, RadarTarget, SensorExtrinsics, GRAVITY_MAGNITUDE,
};
use crate::estimator::{fit_trajectory, EstimatorError};
use crate::real::{Jet, Real, Taylor2};
use crate::spline::KnotGrid;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Half-width of the figure eight [m]; 0 gives a hovering trajectory.
    pub half_width: f64,
    /// Period of one figure eight [s].
    pub period: f64,
    /// Vertical oscillation amplitude [m] and period [s].
    pub height_amplitude: f64,
    pub height_period: f64,
    /// Roll/pitch oscillation amplitudes [rad] and frequencies [Hz].
    pub roll_amplitude: f64,
    pub roll_frequency: f64,
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
    /// Yaw follows the horizontal heading when true, otherwise stays zero.
    pub heading_yaw: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            half_width: 15.0,
            period: 20.0,
            height_amplitude: 1.5,
            height_period: 7.0,
            roll_amplitude: 0.17,
            roll_frequency: 0.41,
            pitch_amplitude: 0.15,
            pitch_frequency: 0.53,
            heading_yaw: true,
        }
    }
}

impl TrajectoryConfig {
    pub fn is_static(&self) -> bool {
        self.half_width == 0.0
            && self.height_amplitude == 0.0
            && self.roll_amplitude == 0.0
            && self.pitch_amplitude == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub count: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { count: 100, box_min: [-30.0, -30.0, -10.0], box_max: [30.0, 30.0, 10.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuSimConfig {
    pub rate: f64,
    /// Per-sample standard deviations.
    pub gyro_noise: f64,
    pub accel_noise: f64,
    /// Rotation vector [rad] of the IMU-to-body rotation.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub time_offset: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    /// Rotation vector [rad] of the gyro misalignment.
    pub misalignment: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarSimConfig {
    pub rate: f64,
    /// Sensor-clock time of the first scan [s].
    pub phase: f64,
    pub doppler_noise: f64,
    pub range_noise: f64,
    pub angle_noise: f64,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub time_offset: f64,
    /// Half field of view [rad].
    pub azimuth_fov: f64,
    pub elevation_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    pub trajectory: TrajectoryConfig,
    pub targets: TargetConfig,
    pub imus: Vec<ImuSimConfig>,
    pub radars: Vec<RadarSimConfig>,
}

fn deg(v: f64) -> f64 {
    v.to_radians()
}

impl Default for SimConfig {
    fn default() -> Self {
        let r1 = [0.0, 0.0, 0.5];
        let r2 = [0.3, -0.2, -0.8];
        let r3 = [-r1[0] - r2[0], -r1[1] - r2[1], -r1[2] - r2[2]];
        let p1 = [0.10, 0.05, 0.02];
        let p2 = [-0.08, 0.10, -0.03];
        let p3 = [-p1[0] - p2[0], -p1[1] - p2[1], -p1[2] - p2[2]];
        let imu = |rate, rotation, translation, time_offset, gb, ab, mis| ImuSimConfig {
            rate,
            gyro_noise: 2e-3,
            accel_noise: 2e-2,
            rotation,
            translation,
            time_offset,
            gyro_bias: gb,
            accel_bias: ab,
            misalignment: mis,
        };
        let radar = |phase, rotation, translation, time_offset| RadarSimConfig {
            rate: 10.0,
            phase,
            doppler_noise: 0.05,
            range_noise: 0.05,
            angle_noise: deg(0.5),
            rotation,
            translation,
            time_offset,
            azimuth_fov: deg(70.0),
            elevation_fov: deg(45.0),
            min_range: 0.5,
            max_range: 80.0,
        };
        Self {
            seed: 42,
            duration: 50.0,
            trajectory: TrajectoryConfig::default(),
            targets: TargetConfig::default(),
            imus: vec![
                imu(400.0, r1, p1, 0.005, [5e-4, -8e-4, 3e-4], [0.012, -0.008, 0.02], [2e-3, -1e-3, 3e-3]),
                imu(200.0, r2, p2, -0.008, [-3e-4, 5e-4, 5e-4], [-0.01, 0.015, 0.005], [-2e-3, 3e-3, 1e-3]),
                imu(200.0, r3, p3, 0.003, [8e-4, 3e-4, -5e-4], [0.005, 0.012, -0.015], [1e-3, 2e-3, -2e-3]),
            ],
            radars: vec![
                radar(0.0, [0.02, -0.03, 0.0], [0.30, 0.00, 0.10], 0.012),
                radar(0.033, [0.0, 0.05, deg(90.0)], [0.00, 0.25, 0.05], -0.010),
                radar(0.067, [-0.04, 0.0, deg(-90.0)], [0.00, -0.25, 0.05], 0.018),
            ],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        let tr = &self.trajectory;
        if !(tr.period > 0.0) || !(tr.height_period > 0.0) {
            return bad("trajectory periods must be positive");
        }
        if tr.roll_frequency < 0.0 || tr.pitch_frequency < 0.0 {
            return bad("oscillation frequencies must be non-negative");
        }
        if self.targets.count > 0 && self.targets.count < 10 && !self.radars.is_empty() {
            return bad("at least 10 targets are required");
        }
        if (0..3).any(|k| self.targets.box_min[k] > self.targets.box_max[k]) {
            return bad("target box min exceeds max");
        }
        if self.imus.is_empty() {
            return bad("at least one IMU is required");
        }
        for c in &self.imus {
            if !(c.rate > 0.0) || c.gyro_noise < 0.0 || c.accel_noise < 0.0 {
                return bad("IMU rate must be positive and noise non-negative");
            }
        }
        for c in &self.radars {
            if !(c.rate > 0.0) || c.doppler_noise < 0.0 || c.range_noise < 0.0 || c.angle_noise < 0.0 {
                return bad("radar rate must be positive and noise non-negative");
            }
            if !(c.max_range > c.min_range) {
                return bad("radar max_range must exceed min_range");
            }
        }
        Ok(())
    }

    /// Copy with all measurement noise switched off.
    pub fn noiseless(&self) -> Self {
        let mut c = self.clone();
        for i in &mut c.imus {
            i.gyro_noise = 0.0;
            i.accel_noise = 0.0;
        }
        for r in &mut c.radars {
            r.doppler_noise = 0.0;
            r.range_noise = 0.0;
            r.angle_noise = 0.0;
        }
        c
    }

    /// Ground-truth parameters implied by the config.
    pub fn truth(&self) -> CalibrationParameters {
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        CalibrationParameters {
            imus: self
                .imus
                .iter()
                .map(|c| ImuState {
                    extrinsics: SensorExtrinsics {
                        rotation: Rotation::exp(&v(c.rotation)),
                        translation: v(c.translation),
                    },
                    time_offset: c.time_offset,
                    intrinsics: ImuIntrinsics {
                        gyro_bias: v(c.gyro_bias),
                        accel_bias: v(c.accel_bias),
                        misalignment: Rotation::exp(&v(c.misalignment)),
                    },
                })
                .collect(),
            radars: self
                .radars
                .iter()
                .map(|c| RadarState {
                    extrinsics: SensorExtrinsics {
                        rotation: Rotation::exp(&v(c.rotation)),
                        translation: v(c.translation),
                    },
                    time_offset: c.time_offset,
                })
                .collect(),
            gravity: Gravity::down(),
        }
    }
}

/// Value and first three derivatives of `a·sin(w t)`.
fn sinusoid(a: f64, w: f64, t: f64) -> [f64; 4] {
    let (s, c) = (w * t).sin_cos();
    [a * s, a * w * c, -a * w * w * s, -a * w * w * w * c]
}

/// Closed-form ground-truth motion of the central frame.
#[derive(Clone, Debug)]
pub struct Trajectory {
    cfg: TrajectoryConfig,
}

/// Pose and derivatives at one instant.
#[derive(Clone, Copy, Debug)]
pub struct TruthSample {
    pub position: Vec3,
    pub kin: Kinematics<f64>,
}

impl Trajectory {
    pub fn new(cfg: &TrajectoryConfig) -> Result<Self, SimError> {
        if !(cfg.period > 0.0) || !(cfg.height_period > 0.0) {
            return Err(SimError::InvalidConfig("trajectory periods must be positive".into()));
        }
        Ok(Self { cfg: cfg.clone() })
    }

    /// Position derivatives of orders 0..=3 per axis.
    fn position_derivs(&self, t: f64) -> [[f64; 4]; 3] {
        let c = &self.cfg;
        let w = std::f64::consts::TAU / c.period;
        let wz = std::f64::consts::TAU / c.height_period;
        [
            sinusoid(c.half_width, w, t),
            sinusoid(0.5 * c.half_width, 2.0 * w, t),
            sinusoid(c.height_amplitude, wz, t),
        ]
    }

    /// Roll, pitch, yaw as (angle, rate, acceleration).
    fn euler(&self, t: f64) -> [[f64; 3]; 3] {
        let c = &self.cfg;
        let tau = std::f64::consts::TAU;
        let r = sinusoid(c.roll_amplitude, tau * c.roll_frequency, t);
        let p = sinusoid(c.pitch_amplitude, tau * c.pitch_frequency, t);
        let yaw = if c.heading_yaw && c.half_width > 0.0 {
            let d = self.position_derivs(t);
            let vx = Taylor2 { v: d[0][1], d1: d[0][2], d2: d[0][3] };
            let vy = Taylor2 { v: d[1][1], d1: d[1][2], d2: d[1][3] };
            let h = vy.atan2(vx);
            [h.v, h.d1, h.d2]
        } else {
            [0.0; 3]
        };
        [[r[0], r[1], r[2]], [p[0], p[1], p[2]], yaw]
    }

    pub fn sample(&self, t: f64) -> TruthSample {
        let d = self.position_derivs(t);
        let e = self.euler(t);
        let rot = Rotation::from_euler(e[0][0], e[1][0], e[2][0]);
        // Body rates of the ZYX Euler sequence; jets carry the time derivative.
        let ang = |k: usize| Jet::<1> { re: e[k][0], du: [e[k][1]] };
        let rate = |k: usize| Jet::<1> { re: e[k][1], du: [e[k][2]] };
        let (r, p) = (ang(0), ang(1));
        let (dr, dp, dy) = (rate(0), rate(1), rate(2));
        let wx = dr - dy * p.sin();
        let wy = dp * r.cos() + dy * p.cos() * r.sin();
        let wz = -(dp * r.sin()) + dy * p.cos() * r.cos();
        TruthSample {
            position: Vec3::new(d[0][0], d[1][0], d[2][0]),
            kin: Kinematics {
                rot,
                omega: Vec3::new(wx.re, wy.re, wz.re),
                alpha: Vec3::new(wx.du[0], wy.du[0], wz.du[0]),
                vel: Vec3::new(d[0][1], d[1][1], d[2][1]),
                acc: Vec3::new(d[0][2], d[1][2], d[2][2]),
            },
        }
    }
}

/// Generated measurements plus ground truth.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub config: SimConfig,
    pub imu: Vec<Vec<ImuMeasurement>>,
    pub radar: Vec<Vec<RadarTarget>>,
    /// Scan ids without any visible target, per radar.
    pub empty_scans: Vec<Vec<u64>>,
    pub targets: Vec<Vec3>,
    pub truth: CalibrationParameters,
    pub trajectory: Trajectory,
}

/// Weighting sigmas substituted for noise-free streams.
pub const FALLBACK_SIGMAS: [f64; 3] = [2e-3, 2e-2, 0.05];

fn sigma_or(v: f64, fallback: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        fallback
    }
}

impl SimDataset {
    /// Measurement streams named `imu{i}` / `radar{j}` with the configured
    /// noise levels as weights.
    pub fn dataset(&self) -> Dataset {
        let imus = self
            .imu
            .iter()
            .zip(&self.config.imus)
            .enumerate()
            .map(|(i, (s, c))| ImuData {
                name: format!("imu{i}"),
                samples: s.clone(),
                gyro_noise: sigma_or(c.gyro_noise, FALLBACK_SIGMAS[0]),
                accel_noise: sigma_or(c.accel_noise, FALLBACK_SIGMAS[1]),
            })
            .collect();
        let radars = self
            .radar
            .iter()
            .zip(&self.config.radars)
            .enumerate()
            .map(|(j, (s, c))| RadarData {
                name: format!("radar{j}"),
                targets: s.clone(),
                doppler_noise: sigma_or(c.doppler_noise, FALLBACK_SIGMAS[2]),
            })
            .collect();
        Dataset { imus, radars }
    }

    /// Ground-truth parameters with splines fitted to the analytic motion.
    pub fn truth_state(&self, grid: KnotGrid) -> Result<CalibrationState, EstimatorError> {
        let (rotation, velocity) = fit_trajectory(grid, 8, |t| {
            let s = self.trajectory.sample(t);
            (s.kin.rot, s.kin.vel)
        })?;
        Ok(CalibrationState { params: self.truth.clone(), rotation, velocity })
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("non-negative sigma")
}

pub fn gen_targets(cfg: &TargetConfig, seed: u64) -> Vec<Vec3> {
    let mut rng = rng_for(seed, 0);
    (0..cfg.count)
        .map(|_| {
            Vec3::from_fn(|k, _| {
                let (lo, hi) = (cfg.box_min[k], cfg.box_max[k]);
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
        })
        .collect()
}

fn sample_count(duration: f64, rate: f64, phase: f64) -> usize {
    ((duration - phase) * rate + 1e-9).floor() as usize + 1
}

pub fn synth_imu(
    traj: &Trajectory,
    cfg: &ImuSimConfig,
    truth: &ImuState,
    gravity: &Vec3,
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ImuMeasurement> {
    let (ng, na) = (normal(cfg.gyro_noise), normal(cfg.accel_noise));
    let ext = &truth.extrinsics;
    let intr = &truth.intrinsics;
    (0..sample_count(duration, cfg.rate, 0.0))
        .map(|k| {
            let tau = k as f64 / cfg.rate;
            let s = traj.sample(tau + truth.time_offset);
            let w = imu_angular_rate(&s.kin, &ext.rotation);
            let a = imu_specific_force(&s.kin, &ext.rotation, &ext.translation, gravity);
            let (mut gyro, mut accel) =
                imu_predict(&w, &a, &intr.misalignment, &intr.gyro_bias, &intr.accel_bias);
            if cfg.gyro_noise > 0.0 {
                gyro += Vec3::from_fn(|_, _| ng.sample(rng));
            }
            if cfg.accel_noise > 0.0 {
                accel += Vec3::from_fn(|_, _| na.sample(rng));
            }
            ImuMeasurement { t: tau, gyro, accel }
        })
        .collect()
}

/// Returns the target stream and the ids of scans with no visible target.
pub fn synth_radar(
    traj: &Trajectory,
    cfg: &RadarSimConfig,
    truth: &RadarState,
    targets: &[Vec3],
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<RadarTarget>, Vec<u64>) {
    let (nd, nr, na) = (normal(cfg.doppler_noise), normal(cfg.range_noise), normal(cfg.angle_noise));
    let ext = &truth.extrinsics;
    let mut out = Vec::new();
    let mut empty = Vec::new();
    for k in 0..sample_count(duration, cfg.rate, cfg.phase) {
        let tau = cfg.phase + k as f64 / cfg.rate;
        let s = traj.sample(tau + truth.time_offset);
        let r_wr = s.kin.rot * ext.rotation;
        let pos = s.position + s.kin.rot * ext.translation;
        let v_r = radar_velocity(&s.kin, &ext.rotation, &ext.translation);
        let before = out.len();
        for tgt in targets {
            let p = r_wr.inverse_rotate(&(tgt - pos));
            let (range, az, el) = cartesian_to_spherical(&p);
            if range < cfg.min_range || range > cfg.max_range || az.abs() > cfg.azimuth_fov || el.abs() > cfg.elevation_fov
            {
                continue;
            }
            let mut m = RadarTarget {
                t: tau,
                scan_id: k as u64,
                range,
                azimuth: az,
                elevation: el,
                doppler: radar_doppler_predict(&p, &v_r, range),
            };
            if cfg.range_noise > 0.0 {
                m.range += nr.sample(rng);
            }
            if cfg.angle_noise > 0.0 {
                m.azimuth += na.sample(rng);
                m.elevation += na.sample(rng);
            }
            if cfg.doppler_noise > 0.0 {
                m.doppler += nd.sample(rng);
            }
            out.push(m);
        }
        if out.len() == before {
            empty.push(k as u64);
        }
    }
    (out, empty)
}

pub fn simulate(cfg: &SimConfig) -> Result<SimDataset, SimError> {
    cfg.validate()?;
    let traj = Trajectory::new(&cfg.trajectory)?;
    let truth = cfg.truth();
    let g = truth.gravity.vector();
    let targets = gen_targets(&cfg.targets, cfg.seed);
    let imu = cfg
        .imus
        .iter()
        .zip(&truth.imus)
        .enumerate()
        .map(|(i, (c, t))| synth_imu(&traj, c, t, &g, cfg.duration, &mut rng_for(cfg.seed, 1 + i as u64)))
        .collect();
    let mut radar = Vec::new();
    let mut empty_scans = Vec::new();
    for (j, (c, t)) in cfg.radars.iter().zip(&truth.radars).enumerate() {
        let mut rng = rng_for(cfg.seed, 1000 + j as u64);
        let (stream, empty) = synth_radar(&traj, c, t, &targets, cfg.duration, &mut rng);
        if !empty.is_empty() {
            log::warn!("radar {j}: {} scans without visible targets", empty.len());
        }
        radar.push(stream);
        empty_scans.push(empty);
    }
    Ok(SimDataset { config: cfg.clone(), imu, radar, empty_scans, targets, truth, trajectory: traj })
}

/// Per-axis standard deviation of gyro and accelerometer signals.
pub fn excitation(stream: &[ImuMeasurement]) -> (Vec3, Vec3) {
    let n = stream.len().max(1) as f64;
    let mean_g: Vec3 = stream.iter().map(|m| m.gyro).sum::<Vec3>() / n;
    let mean_a: Vec3 = stream.iter().map(|m| m.accel).sum::<Vec3>() / n;
    let var = |f: &dyn Fn(&ImuMeasurement) -> Vec3, mean: Vec3| -> Vec3 {
        let s: Vec3 = stream.iter().map(|m| (f(m) - mean).component_mul(&(f(m) - mean))).sum();
        (s / n).map(f64::sqrt)
    };
    (var(&|m| m.gyro, mean_g), var(&|m| m.accel, mean_a))
}

/// Static specific force of a level sensor.
pub fn static_specific_force() -> Vector3<f64> {
    Vec3::new(0.0, 0.0, GRAVITY_MAGNITUDE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_config() -> SimConfig {
        let mut cfg = SimConfig::default().noiseless();
        cfg.duration = 2.0;
        cfg.trajectory = TrajectoryConfig {
            half_width: 0.0,
            height_amplitude: 0.0,
            roll_amplitude: 0.0,
            pitch_amplitude: 0.0,
            ..TrajectoryConfig::default()
        };
        for i in &mut cfg.imus {
            i.rotation = [0.0; 3];
            i.translation = [0.0; 3];
            i.time_offset = 0.0;
            i.gyro_bias = [0.0; 3];
            i.accel_bias = [0.0; 3];
            i.misalignment = [0.0; 3];
        }
        cfg
    }

    #[test]
    fn static_trajectory_measurements() {
        let cfg = static_config();
        assert!(cfg.trajectory.is_static());
        let ds = simulate(&cfg).unwrap();
        for m in &ds.imu[0] {
            assert!((m.accel - static_specific_force()).norm() < 1e-12);
            assert!(m.gyro.norm() < 1e-15);
        }
        for stream in &ds.radar {
            assert!(stream.iter().all(|m| m.doppler.abs() < 1e-12));
        }
    }

    #[test]
    fn closed_curve() {
        let traj = Trajectory::new(&TrajectoryConfig { height_period: 10.0, ..Default::default() }).unwrap();
        let (a, b) = (traj.sample(0.0), traj.sample(20.0));
        assert!((a.position - b.position).norm() < 1e-9);
        assert!(Trajectory::new(&TrajectoryConfig { period: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let traj = Trajectory::new(&TrajectoryConfig::default()).unwrap();
        let h = 1e-6;
        for k in 0..200 {
            let t = 0.37 + k as f64 * 0.25;
            let s = traj.sample(t);
            let (sp, sm) = (traj.sample(t + h), traj.sample(t - h));
            let w_fd = (sm.kin.rot.inverse() * sp.kin.rot).log() / (2.0 * h);
            assert!((w_fd - s.kin.omega).norm() < 1e-6, "omega at {t}");
            let a_fd = (sp.kin.omega - sm.kin.omega) / (2.0 * h);
            assert!((a_fd - s.kin.alpha).norm() < 1e-6, "alpha at {t}");
            let v_fd = (sp.position - sm.position) / (2.0 * h);
            assert!((v_fd - s.kin.vel).norm() < 1e-6);
            let acc_fd = (sp.kin.vel - sm.kin.vel) / (2.0 * h);
            assert!((acc_fd - s.kin.acc).norm() < 1e-6);
        }
    }

    #[test]
    fn targets_are_uniform_and_deterministic() {
        assert!(gen_targets(&TargetConfig { count: 0, ..Default::default() }, 1).is_empty());
        let cfg = TargetConfig { count: 10_000, ..Default::default() };
        let a = gen_targets(&cfg, 7);
        assert_eq!(a, gen_targets(&cfg, 7));
        let mean: Vec3 = a.iter().sum::<Vec3>() / a.len() as f64;
        for k in 0..3 {
            let width = cfg.box_max[k] - cfg.box_min[k];
            let center = 0.5 * (cfg.box_max[k] + cfg.box_min[k]);
            let sigma = width / 12f64.sqrt() / (a.len() as f64).sqrt();
            assert!((mean[k] - center).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn lever_arm_at_constant_rate() {
        // Pure constant yaw rate: co-located and offset IMUs differ by hat(w)hat(w)p.
        let k = Kinematics {
            rot: Rotation::identity(),
            omega: Vec3::new(0.0, 0.0, 0.8),
            alpha: Vec3::zeros(),
            vel: Vec3::new(1.0, 0.0, 0.0),
            acc: Vec3::zeros(),
        };
        let g = Gravity::down().vector();
        let p = Vec3::new(0.2, -0.1, 0.05);
        let a0 = imu_specific_force(&k, &Rotation::identity(), &Vec3::zeros(), &g);
        let a1 = imu_specific_force(&k, &Rotation::identity(), &p, &g);
        let h = crate::lie::hat(&k.omega);
        assert!((a1 - a0 - h * h * p).norm() < 1e-9);
    }

    #[test]
    fn deterministic_dataset() {
        let mut cfg = SimConfig::default();
        cfg.duration = 3.0;
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.radar, b.radar);
        cfg.seed += 1;
        let c = simulate(&cfg).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn default_scenario_is_excited_and_visible() {
        let ds = simulate(&SimConfig::default()).unwrap();
        for stream in &ds.imu {
            let (g, a) = excitation(stream);
            assert!(g.min() > 0.05, "gyro excitation {g}");
            assert!(a.min() > 0.3, "accel excitation {a}");
        }
        for (j, stream) in ds.radar.iter().enumerate() {
            let scans = crate::models::group_scans(stream);
            let min = scans.iter().map(|s| s.targets.len()).min().unwrap();
            assert!(ds.empty_scans[j].is_empty());
            assert!(min >= 5, "radar {j} sees only {min} targets in some scan");
        }
        let truth = &ds.truth;
        let log_sum: Vec3 = truth.imus.iter().map(|i| i.extrinsics.rotation.log()).sum();
        let p_sum: Vec3 = truth.imus.iter().map(|i| i.extrinsics.translation).sum();
        let t_sum: f64 = truth.imus.iter().map(|i| i.time_offset).sum();
        assert!(log_sum.norm() < 1e-12 && p_sum.norm() < 1e-12 && t_sum.abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SimConfig::default();
        cfg.duration = 0.0;
        assert!(simulate(&cfg).is_err());
        let mut cfg = SimConfig::default();
        cfg.imus[0].rate = -1.0;
        assert!(cfg.validate().is_err());
    }
}
