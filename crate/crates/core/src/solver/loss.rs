//! Robust loss functions `ρ(s)` of the squared residual norm `s`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Trivial,
    /// `ρ(s) = c² ln(1 + s / c²)`.
    Cauchy(f64),
}

impl Loss {
    /// `(ρ, ρ', ρ'')` at `s`.
    pub fn evaluate(&self, s: f64) -> [f64; 3] {
        match *self {
            Loss::Trivial => [s, 1.0, 0.0],
            Loss::Cauchy(c) => {
                let c2 = c * c;
                let sum = 1.0 + s / c2;
                let inv = 1.0 / sum;
                [c2 * sum.ln(), inv, -inv * inv / c2]
            }
        }
    }

    /// Rescales one residual group and its Jacobian rows so that the plain
    /// Gauss-Newton model of the rescaled system matches the robustified cost
    /// to second order. Returns `ρ(s)`.
    pub fn correct(&self, r: &mut [f64], jac: Option<(&mut [f64], usize)>) -> f64 {
        let s: f64 = r.iter().map(|v| v * v).sum();
        let [rho, rho1, rho2] = self.evaluate(s);
        if let Loss::Trivial = self {
            return rho;
        }
        let sqrt_rho1 = rho1.sqrt();
        let alpha = if s == 0.0 || rho2 <= 0.0 { 0.0 } else { 1.0 - (1.0 + 2.0 * s * rho2 / rho1).sqrt() };
        if let Some((j, cols)) = jac {
            if alpha == 0.0 {
                j.iter_mut().for_each(|v| *v *= sqrt_rho1);
            } else {
                let k = alpha / s;
                for c in 0..cols {
                    let rtj: f64 = (0..r.len()).map(|i| r[i] * j[i * cols + c]).sum();
                    for i in 0..r.len() {
                        j[i * cols + c] = sqrt_rho1 * (j[i * cols + c] - k * r[i] * rtj);
                    }
                }
            }
        }
        let scale = sqrt_rho1 / (1.0 - alpha);
        r.iter_mut().for_each(|v| *v *= scale);
        rho
    }
}
