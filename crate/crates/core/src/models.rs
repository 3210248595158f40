//! Sensor measurements, IMU/radar measurement models and the calibration state.
//!
//! Frames: `w` world (gravity-aligned up to the rotational gauge), `b` the
//! virtual central IMU, `i` a physical IMU, `r` a radar. Extrinsics map sensor
//! coordinates into `b`. A sensor timestamp `τ` corresponds to central time
//! `τ + offset`.

use nalgebra::{Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::lie::{cross, dot, scale, Rot3, Rotation, Vec3};
use crate::real::Real;
use crate::spline::{R3Spline, So3Spline, SplineError};

/// Gravity magnitude [m/s²].
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// Doppler = `DOPPLER_SIGN * pᵀ v_radar / d`; positive for receding targets.
pub const DOPPLER_SIGN: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuIntrinsics {
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    /// Rotation from the body (accelerometer) frame to the gyroscope frame.
    pub misalignment: Rotation,
}

impl Default for ImuIntrinsics {
    fn default() -> Self {
        Self { gyro_bias: Vec3::zeros(), accel_bias: Vec3::zeros(), misalignment: Rotation::identity() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuMeasurement {
    /// Sensor-clock timestamp [s].
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarTarget {
    /// Sensor-clock timestamp [s].
    pub t: f64,
    pub scan_id: u64,
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub doppler: f64,
}

impl RadarTarget {
    /// Cartesian position in the radar frame.
    pub fn position(&self) -> Vec3 {
        spherical_to_cartesian(self.range, self.azimuth, self.elevation)
    }

    /// Unit line-of-sight direction in the radar frame.
    pub fn direction(&self) -> Vec3 {
        spherical_to_cartesian(1.0, self.azimuth, self.elevation)
    }
}

pub fn spherical_to_cartesian(range: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vec3::new(range * ca * ce, range * sa * ce, range * se)
}

/// Inverse of [`spherical_to_cartesian`]: `(range, azimuth, elevation)`.
pub fn cartesian_to_spherical(p: &Vec3) -> (f64, f64, f64) {
    let range = p.norm();
    let azimuth = p.y.atan2(p.x);
    let elevation = p.z.atan2(p.x.hypot(p.y));
    (range, azimuth, elevation)
}

/// All targets of one radar scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub t: f64,
    pub scan_id: u64,
    pub targets: Vec<RadarTarget>,
}

/// Groups a time-ordered target stream by `scan_id`, preserving order.
pub fn group_scans(targets: &[RadarTarget]) -> Vec<RadarScan> {
    let mut scans: Vec<RadarScan> = Vec::new();
    for tgt in targets {
        match scans.last_mut() {
            Some(s) if s.scan_id == tgt.scan_id => s.targets.push(*tgt),
            _ => scans.push(RadarScan { t: tgt.t, scan_id: tgt.scan_id, targets: vec![*tgt] }),
        }
    }
    scans
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorExtrinsics {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for SensorExtrinsics {
    fn default() -> Self {
        Self { rotation: Rotation::identity(), translation: Vec3::zeros() }
    }
}

/// Gravity with fixed magnitude, parameterized by its direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gravity {
    direction: Vec3,
}

impl Gravity {
    pub fn from_vector(g: &Vec3) -> Self {
        Self { direction: g.normalize() }
    }

    pub fn down() -> Self {
        Self { direction: Vec3::new(0.0, 0.0, -1.0) }
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn vector(&self) -> Vec3 {
        self.direction * GRAVITY_MAGNITUDE
    }

    /// Deterministic orthonormal basis of the tangent plane at the direction.
    pub fn tangent_basis(&self) -> Matrix3x2<f64> {
        sphere_tangent_basis(&self.direction)
    }

    /// Rotates the direction by `Exp(B δ)`; the magnitude stays exact.
    pub fn retract(&self, delta: &Vector2<f64>) -> Self {
        let b = self.tangent_basis();
        let r = Rotation::exp(&(b * delta));
        Self { direction: (r * self.direction).normalize() }
    }
}

/// Tangent basis of the unit sphere at `n`, columns `b1, b2` with
/// `b1 × b2 = n`.
pub fn sphere_tangent_basis(n: &Vec3) -> Matrix3x2<f64> {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = n.cross(&helper).normalize();
    let b2 = n.cross(&b1);
    Matrix3x2::from_columns(&[b2, -b1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub extrinsics: SensorExtrinsics,
    pub time_offset: f64,
    pub intrinsics: ImuIntrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarState {
    pub extrinsics: SensorExtrinsics,
    pub time_offset: f64,
}

/// Measurement stream of one IMU with its noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuData {
    pub name: String,
    pub samples: Vec<ImuMeasurement>,
    /// Per-sample standard deviations used for weighting.
    pub gyro_noise: f64,
    pub accel_noise: f64,
}

/// Target stream of one radar with its Doppler noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarData {
    pub name: String,
    pub targets: Vec<RadarTarget>,
    pub doppler_noise: f64,
}

impl RadarData {
    pub fn scans(&self) -> Vec<RadarScan> {
        group_scans(&self.targets)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub imus: Vec<ImuData>,
    pub radars: Vec<RadarData>,
}

impl Dataset {
    /// Earliest and latest sensor timestamps over all streams.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let times = self
            .imus
            .iter()
            .flat_map(|d| d.samples.iter().map(|m| m.t))
            .chain(self.radars.iter().flat_map(|d| d.targets.iter().map(|m| m.t)));
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((a, b)) => Some((a.min(t), b.max(t))),
        })
    }
}

/// Spatiotemporal and intrinsic sensor parameters plus gravity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParameters {
    pub imus: Vec<ImuState>,
    pub radars: Vec<RadarState>,
    pub gravity: Gravity,
}

/// Full estimation state.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationState {
    pub params: CalibrationParameters,
    /// World-from-body rotation of the central frame.
    pub rotation: So3Spline,
    /// World-frame velocity of the central frame origin.
    pub velocity: R3Spline,
}

impl CalibrationState {
    pub fn kinematics(&self, t: f64) -> Result<Kinematics<f64>, SplineError> {
        let rk = self.rotation.kinematics(t)?;
        let [v, a, _] = self.velocity.eval_all(t)?;
        Ok(Kinematics { rot: rk.rot, omega: rk.omega, alpha: rk.alpha, vel: v, acc: a })
    }
}

/// Central-frame motion at one instant.
#[derive(Clone, Copy, Debug)]
pub struct Kinematics<T> {
    pub rot: Rot3<T>,
    /// Body-frame angular velocity.
    pub omega: Vector3<T>,
    /// Body-frame angular acceleration.
    pub alpha: Vector3<T>,
    /// World-frame velocity.
    pub vel: Vector3<T>,
    /// World-frame acceleration.
    pub acc: Vector3<T>,
}

impl<T: Real> Kinematics<T> {
    pub fn lift(k: &Kinematics<f64>) -> Self {
        use crate::lie::lift_vec;
        Self {
            rot: Rot3::lift(&k.rot),
            omega: lift_vec(&k.omega),
            alpha: lift_vec(&k.alpha),
            vel: lift_vec(&k.vel),
            acc: lift_vec(&k.acc),
        }
    }
}

/// Angular rate in the IMU frame.
pub fn imu_angular_rate<T: Real>(k: &Kinematics<T>, r_bi: &Rot3<T>) -> Vector3<T> {
    r_bi.inverse_rotate(&k.omega)
}

/// Specific force in the IMU frame for an IMU at lever arm `p_bi`.
pub fn imu_specific_force<T: Real>(
    k: &Kinematics<T>,
    r_bi: &Rot3<T>,
    p_bi: &Vector3<T>,
    gravity: &Vector3<T>,
) -> Vector3<T> {
    let rp = k.rot.rotate(p_bi);
    let ww = k.rot.rotate(&k.omega);
    let aw = k.rot.rotate(&k.alpha);
    let acc_i = k.acc + cross(&aw, &rp) + cross(&ww, &cross(&ww, &rp));
    r_bi.inverse_rotate(&k.rot.inverse_rotate(&(acc_i - *gravity)))
}

/// Radar-frame velocity of a radar at lever arm `p_br`.
pub fn radar_velocity<T: Real>(k: &Kinematics<T>, r_br: &Rot3<T>, p_br: &Vector3<T>) -> Vector3<T> {
    let rp = k.rot.rotate(p_br);
    let ww = k.rot.rotate(&k.omega);
    let v_w = k.vel + cross(&ww, &rp);
    r_br.inverse_rotate(&k.rot.inverse_rotate(&v_w))
}

/// World-frame velocity of a sensor at lever arm `p`.
pub fn sensor_world_velocity<T: Real>(k: &Kinematics<T>, p: &Vector3<T>) -> Vector3<T> {
    let rp = k.rot.rotate(p);
    k.vel + cross(&k.rot.rotate(&k.omega), &rp)
}

/// Noise-free IMU reading: `(R_g ω + b_ω, a + b_a)`.
pub fn imu_predict<T: Real>(
    omega: &Vector3<T>,
    accel: &Vector3<T>,
    misalignment: &Rot3<T>,
    gyro_bias: &Vector3<T>,
    accel_bias: &Vector3<T>,
) -> (Vector3<T>, Vector3<T>) {
    (misalignment.rotate(omega) + *gyro_bias, *accel + *accel_bias)
}

/// Inverse of [`imu_predict`] for known intrinsics.
pub fn imu_correct(gyro: &Vec3, accel: &Vec3, intr: &ImuIntrinsics) -> (Vec3, Vec3) {
    (intr.misalignment.inverse_rotate(&(gyro - intr.gyro_bias)), accel - intr.accel_bias)
}

/// Doppler of a static target at `p` (radar frame) seen from a radar moving
/// with `v` (radar frame).
pub fn radar_doppler_predict<T: Real>(p: &Vector3<T>, v: &Vector3<T>, range: T) -> T {
    dot(p, v) * DOPPLER_SIGN / range
}

/// Doppler constraint multiplied by range: `d·v_meas - DOPPLER_SIGN·pᵀv`.
pub fn doppler_residual<T: Real>(p: &Vector3<T>, v: &Vector3<T>, range: T, doppler: T) -> T {
    range * doppler - dot(p, v) * DOPPLER_SIGN
}

/// Direction helper shared by the ego-velocity solver.
pub fn doppler_row(direction: &Vec3) -> Vec3 {
    scale(direction, DOPPLER_SIGN)
}
