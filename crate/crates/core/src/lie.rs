//! SO(3) algebra: hat/vee, exponential and logarithm maps, composition.
//!
//! Rotations are stored as unit quaternions `(w, x, y, z)` (Hamilton
//! convention, active rotation). Every routine is generic over [`Real`] so the
//! same code runs on `f64` and on dual numbers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Below this rotation angle [rad] exp/log switch to a Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

pub type Vec3 = Vector3<f64>;
pub type Rotation = Rot3<f64>;

/// Skew-symmetric matrix with `hat(v) * w == v.cross(w)`.
#[inline]
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`]; reads the lower off-diagonal entries.
#[inline]
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[inline]
pub fn cross<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    Vector3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

#[inline]
pub fn dot<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.x * b.x + a.y * b.y + a.z * b.z
}

#[inline]
pub fn scale<T: Real>(a: &Vector3<T>, s: T) -> Vector3<T> {
    Vector3::new(a.x * s, a.y * s, a.z * s)
}

#[inline]
pub fn lift_vec<T: Real>(v: &Vec3) -> Vector3<T> {
    Vector3::new(T::from_f64(v.x), T::from_f64(v.y), T::from_f64(v.z))
}

#[inline]
pub fn vec_value<T: Real>(v: &Vector3<T>) -> Vec3 {
    Vec3::new(v.x.value(), v.y.value(), v.z.value())
}

/// Element of SO(3) as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot3<T> {
    w: T,
    x: T,
    y: T,
    z: T,
}

impl<T: Real> Rot3<T> {
    pub fn identity() -> Self {
        Self { w: T::one(), x: T::zero(), y: T::zero(), z: T::zero() }
    }

    /// Builds from raw quaternion coefficients and renormalizes.
    pub fn from_wxyz(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }.normalized()
    }

    /// Builds from coefficients that are already unit-norm (no renormalization).
    pub fn from_wxyz_unchecked(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_slice(q: &[T]) -> Self {
        Self { w: q[0], x: q[1], y: q[2], z: q[3] }
    }

    pub fn wxyz(&self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn normalized(&self) -> Self {
        let n = (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn lift(r: &Rotation) -> Self {
        Self {
            w: T::from_f64(r.w),
            x: T::from_f64(r.x),
            y: T::from_f64(r.y),
            z: T::from_f64(r.z),
        }
    }

    pub fn value(&self) -> Rotation {
        Rot3 { w: self.w.value(), x: self.x.value(), y: self.y.value(), z: self.z.value() }
    }

    /// Exponential map so(3) -> SO(3).
    pub fn exp(phi: &Vector3<T>) -> Self {
        let theta2 = dot(phi, phi);
        let (w, k) = if theta2.value() < SMALL_ANGLE * SMALL_ANGLE {
            (T::one() - theta2 / 8.0, T::from_f64(0.5) - theta2 / 48.0)
        } else {
            let theta = theta2.sqrt();
            let half = theta * 0.5;
            (half.cos(), half.sin() / theta)
        };
        Self { w, x: phi.x * k, y: phi.y * k, z: phi.z * k }
    }

    /// Logarithm map SO(3) -> so(3), principal branch (`|result| <= pi`).
    ///
    /// For a rotation by exactly pi the two axis signs are equivalent; the
    /// sign is chosen so that the axis component with the largest magnitude
    /// (equivalently, the largest diagonal element of the rotation matrix) is
    /// positive.
    pub fn log(&self) -> Vector3<T> {
        let mut q = *self;
        if q.w.value() < 0.0 {
            q = Self { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        }
        if q.w.value() == 0.0 {
            let (ax, ay, az) = (q.x.value().abs(), q.y.value().abs(), q.z.value().abs());
            let lead = if ax >= ay && ax >= az {
                q.x.value()
            } else if ay >= az {
                q.y.value()
            } else {
                q.z.value()
            };
            if lead < 0.0 {
                q = Self { w: q.w, x: -q.x, y: -q.y, z: -q.z };
            }
        }
        let v = Vector3::new(q.x, q.y, q.z);
        let n2 = dot(&v, &v);
        let factor = if n2.value() < 0.25 * SMALL_ANGLE * SMALL_ANGLE {
            // theta/n = 2/w * (1 - n^2 / (3 w^2)) + O(n^4)
            let w2 = q.w * q.w;
            (T::one() - n2 / (w2 * 3.0)) * 2.0 / q.w
        } else {
            let n = n2.sqrt();
            n.atan2(q.w) * 2.0 / n
        };
        scale(&v, factor)
    }

    pub fn inverse(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn compose(&self, o: &Self) -> Self {
        let (a, b) = (self, o);
        Self {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    /// `R * v`
    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        let u = Vector3::new(self.x, self.y, self.z);
        let t = cross(&u, v) * T::from_f64(2.0);
        let ut = cross(&u, &t);
        Vector3::new(v.x + self.w * t.x + ut.x, v.y + self.w * t.y + ut.y, v.z + self.w * t.z + ut.z)
    }

    /// `R^T * v`
    pub fn inverse_rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.inverse().rotate(v)
    }

    pub fn to_matrix(&self) -> Matrix3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let two = T::from_f64(2.0);
        let one = T::one();
        Matrix3::new(
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        )
    }
}

impl<T: Real> std::ops::Mul for Rot3<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

impl<T: Real> std::ops::Mul<Vector3<T>> for Rot3<T> {
    type Output = Vector3<T>;
    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.rotate(&rhs)
    }
}

impl Rotation {
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Shepperd's method; picks the numerically largest quaternion component.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m.trace();
        let (d0, d1, d2) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
        let q = if tr > d0 && tr > d1 && tr > d2 {
            let s = 2.0 * (1.0 + tr).sqrt();
            Rot3 {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if d0 >= d1 && d0 >= d2 {
            let s = 2.0 * (1.0 + d0 - d1 - d2).sqrt();
            Rot3 {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if d1 >= d2 {
            let s = 2.0 * (1.0 - d0 + d1 - d2).sqrt();
            Rot3 {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = 2.0 * (1.0 - d0 - d1 + d2).sqrt();
            Rot3 {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        let q = q.normalized();
        if q.w < 0.0 {
            Rot3 { w: -q.w, x: -q.x, y: -q.y, z: -q.z }
        } else {
            q
        }
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Angle of `self^T * other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn quaternion_norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Roll-pitch-yaw composition `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rz = Self::exp(&Vec3::new(0.0, 0.0, yaw));
        let ry = Self::exp(&Vec3::new(0.0, pitch, 0.0));
        let rx = Self::exp(&Vec3::new(roll, 0.0, 0.0));
        rz * ry * rx
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}
