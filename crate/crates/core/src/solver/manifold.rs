//! Parameter manifolds: ambient storage, tangent dimension, retraction and
//! first-order lifting of tangent perturbations into dual numbers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::lie::{Rot3, Rotation, Vec3};
use crate::models::sphere_tangent_basis;
use crate::real::{Jet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Manifold {
    Euclidean(usize),
    /// Unit quaternion `wxyz`, right perturbation `q ⊗ Exp(δ)`.
    So3,
    /// 3-vector of fixed norm, perturbed by `Exp(B δ) g`.
    Sphere { radius: f64 },
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::So3 => 4,
            Manifold::Sphere { .. } => 3,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::So3 => 3,
            Manifold::Sphere { .. } => 2,
        }
    }

    /// Retraction `x ⊞ δ`, written into `out`.
    pub fn plus(&self, x: &[f64], delta: &[f64], out: &mut [f64]) {
        match self {
            Manifold::Euclidean(n) => {
                for k in 0..*n {
                    out[k] = x[k] + delta[k];
                }
            }
            Manifold::So3 => {
                let q = Rotation::from_slice(x);
                let d = Vec3::new(delta[0], delta[1], delta[2]);
                let r = (q * Rotation::exp(&d)).normalized();
                out.copy_from_slice(&r.wxyz());
            }
            Manifold::Sphere { radius } => {
                let g = Vec3::new(x[0], x[1], x[2]);
                let b = sphere_tangent_basis(&g);
                let axis = b * nalgebra::Vector2::new(delta[0], delta[1]);
                let n = (Rotation::exp(&axis) * g).normalize() * *radius;
                out.copy_from_slice(n.as_slice());
            }
        }
    }

    /// Ambient value as dual numbers whose derivative slots `offset..` carry
    /// the tangent directions at δ = 0.
    pub fn lift<const N: usize>(&self, x: &[f64], offset: usize, out: &mut Vec<Jet<N>>) {
        out.clear();
        match self {
            Manifold::Euclidean(n) => {
                for k in 0..*n {
                    out.push(Jet::variable(x[k], offset + k));
                }
            }
            Manifold::So3 => {
                let half = |k: usize| {
                    let mut j = Jet::<N>::constant(0.0);
                    j.du[offset + k] = 0.5;
                    j
                };
                let q = Rot3::<Jet<N>>::lift(&Rotation::from_slice(x));
                let dq = Rot3::from_wxyz_unchecked(Jet::constant(1.0), half(0), half(1), half(2));
                out.extend_from_slice(&(q * dq).wxyz());
            }
            Manifold::Sphere { .. } => {
                let g = Vec3::new(x[0], x[1], x[2]);
                let b = sphere_tangent_basis(&g);
                let c0 = b.column(0).cross(&g);
                let c1 = b.column(1).cross(&g);
                for k in 0..3 {
                    let mut j = Jet::<N>::constant(g[k]);
                    j.du[offset] = c0[k];
                    j.du[offset + 1] = c1[k];
                    out.push(j);
                }
            }
        }
    }

    /// Finite-difference step for tangent coordinate `k`.
    pub fn fd_step(&self, x: &[f64], k: usize) -> f64 {
        match self {
            Manifold::Euclidean(_) => 1e-6 * x[k].abs().max(1.0),
            _ => 1e-6,
        }
    }
}

/// Helper to read a Vec3 from a parameter slice.
#[inline]
pub fn vec3<T: Real>(p: &[T]) -> Vector3<T> {
    Vector3::new(p[0], p[1], p[2])
}
