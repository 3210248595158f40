//! Uniform B-splines on R³ and SO(3) in cumulative form.
//!
//! Evaluation inside segment `i` at normalized time `u ∈ [0, 1)` uses control
//! points `i..=i+3`:
//!
//! ```text
//! v(u) = c_i + Σ_j λ_j(u) (c_{i+j} - c_{i+j-1})
//! R(u) = R_i · Π_j Exp(λ_j(u) · Log(R_{i+j-1}ᵀ R_{i+j}))
//! ```
//!
//! with `λ_j(u) = [1 u u² u³] · Ñ_j` taken from the cumulative blending matrix.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::lie::{cross, hat, scale, Rot3, Rotation, Vec3};
use crate::real::Real;

/// Degree used by the calibration pipeline.
pub const DEGREE: usize = 3;
/// Control points per segment.
pub const ORDER: usize = DEGREE + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside valid spline interval [{start}, {end})")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("invalid knot grid: {0}")]
    InvalidGrid(String),
    #[error("spline degree must be at least 1")]
    ZeroDegree,
    #[error("expected {expected} control points, got {got}")]
    ControlPointCount { expected: usize, got: usize },
    #[error("non-finite control point at index {0}")]
    NonFinite(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KnotGrid {
    pub start: f64,
    pub dt: f64,
    pub count: usize,
}

impl KnotGrid {
    pub fn new(start: f64, dt: f64, count: usize) -> Result<Self, SplineError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SplineError::InvalidGrid(format!("knot spacing must be positive, got {dt}")));
        }
        if count < ORDER {
            return Err(SplineError::InvalidGrid(format!(
                "need at least {ORDER} control points, got {count}"
            )));
        }
        if !start.is_finite() {
            return Err(SplineError::InvalidGrid("non-finite start time".into()));
        }
        Ok(Self { start, dt, count })
    }

    /// Smallest grid whose valid interval covers `[t0, t1]`.
    pub fn covering(t0: f64, t1: f64, dt: f64) -> Result<Self, SplineError> {
        let segments = ((t1 - t0) / dt).floor() as usize + 1;
        Self::new(t0, dt, segments + DEGREE)
    }

    pub fn end(&self) -> f64 {
        self.start + (self.count - DEGREE) as f64 * self.dt
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end()
    }

    pub fn segment_count(&self) -> usize {
        self.count - DEGREE
    }

    /// Time of control point `k` (the left knot of the segment it starts).
    pub fn knot_time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    fn out_of_range(&self, t: f64) -> SplineError {
        SplineError::OutOfRange { t, start: self.start, end: self.end() }
    }

    /// Segment index and normalized time.
    pub fn segment(&self, t: f64) -> Result<(usize, f64), SplineError> {
        if !self.contains(t) {
            return Err(self.out_of_range(t));
        }
        let s = (t - self.start) / self.dt;
        let i = (s.floor() as usize).min(self.count - ORDER);
        Ok((i, s - i as f64))
    }

    /// Like [`segment`](Self::segment) but keeps derivative information of `t`.
    pub fn segment_generic<T: Real>(&self, t: T) -> Result<(usize, T), SplineError> {
        let (i, _) = self.segment(t.value())?;
        let u = (t - self.start) / self.dt - i as f64;
        Ok((i, u))
    }

    /// Indices `[i, i + 3]` of the control points influencing time `t`.
    pub fn active_range(&self, t: f64) -> Result<std::ops::RangeInclusive<usize>, SplineError> {
        let (i, _) = self.segment(t)?;
        Ok(i..=i + DEGREE)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Standard uniform B-spline basis matrix; row = power of `u`, column =
/// control point within the segment.
pub fn standard_blending_matrix(degree: usize) -> Result<DMatrix<f64>, SplineError> {
    if degree == 0 {
        return Err(SplineError::ZeroDegree);
    }
    let k = degree + 1;
    let mut m = DMatrix::zeros(k, k);
    for n in 0..k {
        for j in 0..k {
            let mut sum = 0.0;
            for l in j..k {
                let sign = if (l - j) % 2 == 0 { 1.0 } else { -1.0 };
                sum += sign * binomial(k, l - j) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
            }
            m[(n, j)] = binomial(k - 1, n) * sum / factorial(k - 1);
        }
    }
    Ok(m)
}

/// Cumulative blending matrix: column `j` is the suffix sum of the standard
/// basis columns `j..=d`.
pub fn cumulative_blending_matrix(degree: usize) -> Result<DMatrix<f64>, SplineError> {
    let mut m = standard_blending_matrix(degree)?;
    let k = degree + 1;
    for j in (0..k - 1).rev() {
        for n in 0..k {
            m[(n, j)] += m[(n, j + 1)];
        }
    }
    Ok(m)
}

fn cubic_cumulative() -> &'static [[f64; ORDER]; ORDER] {
    static M: OnceLock<[[f64; ORDER]; ORDER]> = OnceLock::new();
    M.get_or_init(|| {
        let d = cumulative_blending_matrix(DEGREE).expect("degree 3 is valid");
        let mut out = [[0.0; ORDER]; ORDER];
        for (n, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = d[(n, j)];
            }
        }
        out
    })
}

/// Cumulative basis values `λ_j` and their first two derivatives with respect
/// to `u` (not time).
pub fn cumulative_basis<T: Real>(u: T) -> [[T; ORDER]; 3] {
    let m = cubic_cumulative();
    let u2 = u * u;
    let pw = [T::one(), u, u2, u2 * u];
    let dpw = [T::zero(), T::one(), u * 2.0, u2 * 3.0];
    let ddpw = [T::zero(), T::zero(), T::from_f64(2.0), u * 6.0];
    let mut out = [[T::zero(); ORDER]; 3];
    for j in 0..ORDER {
        for n in 0..ORDER {
            let c = m[n][j];
            if c != 0.0 {
                out[0][j] += pw[n] * c;
                out[1][j] += dpw[n] * c;
                out[2][j] += ddpw[n] * c;
            }
        }
    }
    out
}

/// Value and time derivatives of a cubic R³ segment.
pub fn r3_segment<T: Real>(cps: &[Vector3<T>; ORDER], u: T, dt: f64) -> [Vector3<T>; 3] {
    let b = cumulative_basis(u);
    let mut out = [cps[0], Vector3::zeros(), Vector3::zeros()];
    for j in 1..ORDER {
        let d = cps[j] - cps[j - 1];
        out[0] += scale(&d, b[0][j]);
        out[1] += scale(&d, b[1][j] / dt);
        out[2] += scale(&d, b[2][j] / (dt * dt));
    }
    out
}

/// Rotation with body-frame angular velocity and acceleration.
#[derive(Clone, Copy, Debug)]
pub struct RotationKinematics<T> {
    pub rot: Rot3<T>,
    pub omega: Vector3<T>,
    pub alpha: Vector3<T>,
}

/// Cubic SO(3) segment with analytic body rates.
pub fn so3_segment<T: Real>(cps: &[Rot3<T>; ORDER], u: T, dt: f64) -> RotationKinematics<T> {
    let b = cumulative_basis(u);
    let mut rot = cps[0];
    let mut omega = Vector3::<T>::zeros();
    let mut alpha = Vector3::<T>::zeros();
    for j in 1..ORDER {
        let d = (cps[j - 1].inverse() * cps[j]).log();
        let a = Rot3::exp(&scale(&d, b[0][j]));
        rot = rot * a;
        omega = a.inverse_rotate(&omega) + scale(&d, b[1][j]);
        alpha = a.inverse_rotate(&alpha) + scale(&cross(&omega, &d), b[1][j]) + scale(&d, b[2][j]);
    }
    let inv_dt = 1.0 / dt;
    RotationKinematics {
        rot,
        omega: scale(&omega, T::from_f64(inv_dt)),
        alpha: scale(&alpha, T::from_f64(inv_dt * inv_dt)),
    }
}

/// Rotation-only evaluation (cheaper than [`so3_segment`]).
pub fn so3_segment_rotation<T: Real>(cps: &[Rot3<T>; ORDER], u: T) -> Rot3<T> {
    let b = cumulative_basis(u);
    let mut rot = cps[0];
    for j in 1..ORDER {
        let d = (cps[j - 1].inverse() * cps[j]).log();
        rot = rot * Rot3::exp(&scale(&d, b[0][j]));
    }
    rot
}

fn check_len<T>(grid: &KnotGrid, cps: &[T]) -> Result<(), SplineError> {
    if cps.len() != grid.count {
        return Err(SplineError::ControlPointCount { expected: grid.count, got: cps.len() });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct R3Spline {
    pub grid: KnotGrid,
    pub control_points: Vec<Vec3>,
}

impl R3Spline {
    pub fn new(grid: KnotGrid, control_points: Vec<Vec3>) -> Result<Self, SplineError> {
        check_len(&grid, &control_points)?;
        if let Some(k) = control_points.iter().position(|c| !c.iter().all(|x| x.is_finite())) {
            return Err(SplineError::NonFinite(k));
        }
        Ok(Self { grid, control_points })
    }

    pub fn constant(grid: KnotGrid, value: Vec3) -> Self {
        Self { grid, control_points: vec![value; grid.count] }
    }

    fn window(&self, i: usize) -> [Vec3; ORDER] {
        std::array::from_fn(|j| self.control_points[i + j])
    }

    /// Value (`order = 0`) or time derivative of order 1 or 2.
    pub fn eval(&self, t: f64, order: usize) -> Result<Vec3, SplineError> {
        assert!(order <= 2, "derivative order must be 0, 1 or 2");
        let (i, u) = self.grid.segment(t)?;
        Ok(r3_segment(&self.window(i), u, self.grid.dt)[order])
    }

    pub fn eval_all(&self, t: f64) -> Result<[Vec3; 3], SplineError> {
        let (i, u) = self.grid.segment(t)?;
        Ok(r3_segment(&self.window(i), u, self.grid.dt))
    }

    /// Values at `times` as CSV; fails on times outside the grid.
    pub fn write_samples<W: Write>(&self, mut w: W, times: &[f64]) -> std::io::Result<()> {
        writeln!(w, "t,vx,vy,vz")?;
        for &t in times {
            let v = self.eval(t, 0).map_err(invalid)?;
            writeln!(w, "{:.9},{:.12e},{:.12e},{:.12e}", t, v.x, v.y, v.z)?;
        }
        Ok(())
    }

    pub fn write_control_points<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,t,vx,vy,vz")?;
        for (k, c) in self.control_points.iter().enumerate() {
            writeln!(w, "{},{:.9},{:.12e},{:.12e},{:.12e}", k, self.grid.knot_time(k), c.x, c.y, c.z)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct So3Spline {
    pub grid: KnotGrid,
    pub control_points: Vec<Rotation>,
}

impl So3Spline {
    pub fn new(grid: KnotGrid, control_points: Vec<Rotation>) -> Result<Self, SplineError> {
        check_len(&grid, &control_points)?;
        if let Some(k) = control_points
            .iter()
            .position(|r| !r.wxyz().iter().all(|x| x.is_finite()))
        {
            return Err(SplineError::NonFinite(k));
        }
        Ok(Self { grid, control_points })
    }

    pub fn identity(grid: KnotGrid) -> Self {
        Self { grid, control_points: vec![Rotation::identity(); grid.count] }
    }

    fn window(&self, i: usize) -> [Rotation; ORDER] {
        std::array::from_fn(|j| self.control_points[i + j])
    }

    pub fn eval(&self, t: f64) -> Result<Rotation, SplineError> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_segment_rotation(&self.window(i), u))
    }

    pub fn kinematics(&self, t: f64) -> Result<RotationKinematics<f64>, SplineError> {
        let (i, u) = self.grid.segment(t)?;
        Ok(so3_segment(&self.window(i), u, self.grid.dt))
    }

    /// Body-frame angular velocity `vee(Rᵀ Ṙ)`.
    pub fn angular_velocity(&self, t: f64) -> Result<Vec3, SplineError> {
        Ok(self.kinematics(t)?.omega)
    }

    /// Body-frame angular acceleration.
    pub fn angular_acceleration(&self, t: f64) -> Result<Vec3, SplineError> {
        Ok(self.kinematics(t)?.alpha)
    }

    /// `(R, Ṙ, R̈)` as matrices.
    pub fn derivatives(&self, t: f64) -> Result<[Matrix3<f64>; 3], SplineError> {
        let k = self.kinematics(t)?;
        let r = k.rot.to_matrix();
        let w = hat(&k.omega);
        Ok([r, r * w, r * (hat(&k.alpha) + w * w)])
    }

    /// Values at `times` as CSV; fails on times outside the grid.
    pub fn write_samples<W: Write>(&self, mut w: W, times: &[f64]) -> std::io::Result<()> {
        writeln!(w, "t,qw,qx,qy,qz")?;
        for &t in times {
            let q = self.eval(t).map_err(invalid)?.wxyz();
            writeln!(w, "{:.9},{:.12e},{:.12e},{:.12e},{:.12e}", t, q[0], q[1], q[2], q[3])?;
        }
        Ok(())
    }

    pub fn write_control_points<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,t,qw,qx,qy,qz")?;
        for (k, r) in self.control_points.iter().enumerate() {
            let q = r.wxyz();
            writeln!(
                w,
                "{},{:.9},{:.12e},{:.12e},{:.12e},{:.12e}",
                k,
                self.grid.knot_time(k),
                q[0],
                q[1],
                q[2],
                q[3]
            )?;
        }
        Ok(())
    }
}

fn invalid(e: SplineError) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidInput, e)
}

/// `t0, t0 + step, ...` up to `t1`: `⌊(t1 − t0) / step⌋ + 1` samples.
pub fn sample_times(t0: f64, t1: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || !(t1 >= t0) {
        return Vec::new();
    }
    let n = ((t1 - t0) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| t0 + k as f64 * step).collect()
}
