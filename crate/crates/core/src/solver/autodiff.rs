//! Forward-mode automatic differentiation of generic residuals, with a
//! central-difference fallback for blocks wider than the largest jet.

use super::manifold::Manifold;
use super::{CostFunction, Plan};
use crate::real::{Jet, Real};

/// Residual written once over any [`Real`] scalar.
pub trait Residual: Send + Sync {
    fn kind(&self) -> &'static str;
    fn plan(&self, blocks: &[super::ParameterBlock]) -> Option<Plan>;
    fn num_residuals(&self, plan: &Plan) -> usize;
    /// Rows per robust-loss group; 0 means the whole block is one group.
    fn loss_stride(&self) -> usize {
        0
    }
    fn residuals<T: Real>(&self, plan: &Plan, params: &[&[T]], out: &mut [T]) -> bool;
}

pub struct AutoDiff<R>(pub R);

impl<R: Residual> AutoDiff<R> {
    fn linearize_n<const N: usize>(
        &self,
        plan: &Plan,
        params: &[&[f64]],
        manifolds: &[Manifold],
        free: &[bool],
        out: &mut [f64],
        jac: &mut [f64],
    ) -> bool {
        let mut lifted: Vec<Vec<Jet<N>>> = Vec::with_capacity(params.len());
        let mut offset = 0;
        for ((p, m), &f) in params.iter().zip(manifolds).zip(free) {
            let mut v = Vec::with_capacity(p.len());
            if f {
                m.lift::<N>(p, offset, &mut v);
                offset += m.tangent_dim();
            } else {
                v.extend(p.iter().map(|x| Jet::constant(*x)));
            }
            lifted.push(v);
        }
        let refs: Vec<&[Jet<N>]> = lifted.iter().map(|v| v.as_slice()).collect();
        let mut res = vec![Jet::<N>::constant(0.0); out.len()];
        if !self.0.residuals(plan, &refs, &mut res) {
            return false;
        }
        let n = offset;
        for (r, j) in res.iter().enumerate() {
            out[r] = j.re;
            jac[r * n..(r + 1) * n].copy_from_slice(&j.du[..n]);
        }
        true
    }
}

impl<R: Residual> CostFunction for AutoDiff<R> {
    fn kind(&self) -> &'static str {
        self.0.kind()
    }

    fn plan(&self, blocks: &[super::ParameterBlock]) -> Option<Plan> {
        self.0.plan(blocks)
    }

    fn num_residuals(&self, plan: &Plan) -> usize {
        self.0.num_residuals(plan)
    }

    fn loss_stride(&self) -> usize {
        self.0.loss_stride()
    }

    fn evaluate(&self, plan: &Plan, params: &[&[f64]], out: &mut [f64]) -> bool {
        self.0.residuals(plan, params, out)
    }

    fn linearize(
        &self,
        plan: &Plan,
        params: &[&[f64]],
        manifolds: &[Manifold],
        free: &[bool],
        out: &mut [f64],
        jac: &mut [f64],
    ) -> bool {
        let n: usize = manifolds.iter().zip(free).filter(|(_, f)| **f).map(|(m, _)| m.tangent_dim()).sum();
        macro_rules! dispatch {
            ($($k:literal),*) => {
                $(if n <= $k { return self.linearize_n::<$k>(plan, params, manifolds, free, out, jac); })*
            };
        }
        dispatch!(4, 8, 12, 16, 24, 32, 40, 48, 56, 64);
        finite_difference(self, plan, params, manifolds, free, out, jac)
    }
}

/// Central differences in tangent coordinates.
pub fn finite_difference<C: CostFunction + ?Sized>(
    cost: &C,
    plan: &Plan,
    params: &[&[f64]],
    manifolds: &[Manifold],
    free: &[bool],
    out: &mut [f64],
    jac: &mut [f64],
) -> bool {
    if !cost.evaluate(plan, params, out) {
        return false;
    }
    let m = out.len();
    let n: usize = manifolds.iter().zip(free).filter(|(_, f)| **f).map(|(m, _)| m.tangent_dim()).sum();
    let mut owned: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    let mut col = 0;
    for b in 0..params.len() {
        if !free[b] {
            continue;
        }
        let man = manifolds[b];
        let td = man.tangent_dim();
        for k in 0..td {
            let h = man.fd_step(params[b], k);
            let mut delta = vec![0.0; td];
            for (sign, buf) in [(1.0, &mut plus), (-1.0, &mut minus)] {
                delta[k] = sign * h;
                man.plus(params[b], &delta, &mut owned[b]);
                let refs: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
                if !cost.evaluate(plan, &refs, buf) {
                    return false;
                }
            }
            owned[b].copy_from_slice(params[b]);
            for r in 0..m {
                jac[r * n + col] = (plus[r] - minus[r]) / (2.0 * h);
            }
            col += 1;
        }
    }
    true
}
