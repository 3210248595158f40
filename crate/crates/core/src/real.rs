//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! automatic differentiation.
//!
//! All residual and spline math is written once against [`Real`]; the solver
//! instantiates it with [`Jet`] to obtain exact tangent-space Jacobians.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

pub trait Real:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Real (non-derivative) part.
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn atan2(self, x: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// Dual number carrying `N` directional derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub re: f64,
    pub du: [f64; N],
}

impl<const N: usize> Jet<N> {
    #[inline]
    pub fn constant(re: f64) -> Self {
        Self { re, du: [0.0; N] }
    }

    /// Independent variable `i`.
    #[inline]
    pub fn variable(re: f64, i: usize) -> Self {
        let mut du = [0.0; N];
        du[i] = 1.0;
        Self { re, du }
    }

    /// `f(self)` given `f(re)` and `f'(re)`.
    #[inline]
    fn chain(&self, f: f64, df: f64) -> Self {
        let mut du = self.du;
        for d in du.iter_mut() {
            *d *= df;
        }
        Self { re: f, du }
    }
}

impl<const N: usize> Zero for Jet<N> {
    #[inline]
    fn zero() -> Self {
        Self::constant(0.0)
    }
    #[inline]
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.du.iter().all(|d| *d == 0.0)
    }
}

impl<const N: usize> One for Jet<N> {
    #[inline]
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.du.iter_mut().zip(rhs.du.iter()) {
            *a += *b;
        }
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.du.iter_mut().zip(rhs.du.iter()) {
            *a -= *b;
        }
        self
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut du = [0.0; N];
        for i in 0..N {
            du[i] = self.re * rhs.du[i] + rhs.re * self.du[i];
        }
        Self { re: self.re * rhs.re, du }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut du = [0.0; N];
        for i in 0..N {
            du[i] = (self.du[i] - re * rhs.du[i]) * inv;
        }
        Self { re, du }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for d in self.du.iter_mut() {
            *d = -*d;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re *= rhs;
        for d in self.du.iter_mut() {
            *d *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<const N: usize> $tr for Jet<N> {
            #[inline]
            fn $m(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

impl<const N: usize> Real for Jet<N> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.chain(r, 0.5 / r)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        // d atan2(y, x) = (x dy - y dx) / (x^2 + y^2)
        let y = self;
        let den = 1.0 / (x.re * x.re + y.re * y.re);
        let mut du = [0.0; N];
        for i in 0..N {
            du[i] = (x.re * y.du[i] - y.re * x.du[i]) * den;
        }
        Self { re: y.re.atan2(x.re), du }
    }
}

/// Second-order truncated Taylor scalar: value plus first and second derivative
/// with respect to one variable (time). Used for closed-form trajectory
/// derivatives in the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taylor2 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Taylor2 {
    pub fn variable(t: f64) -> Self {
        Self { v: t, d1: 1.0, d2: 0.0 }
    }
    pub fn constant(v: f64) -> Self {
        Self { v, d1: 0.0, d2: 0.0 }
    }
    #[inline]
    fn chain(&self, f: f64, df: f64, ddf: f64) -> Self {
        Self { v: f, d1: df * self.d1, d2: ddf * self.d1 * self.d1 + df * self.d2 }
    }
}

impl Zero for Taylor2 {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0 && self.d1 == 0.0 && self.d2 == 0.0
    }
}

impl One for Taylor2 {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl Add for Taylor2 {
    type Output = Self;
    fn add(self, r: Self) -> Self {
        Self { v: self.v + r.v, d1: self.d1 + r.d1, d2: self.d2 + r.d2 }
    }
}

impl Sub for Taylor2 {
    type Output = Self;
    fn sub(self, r: Self) -> Self {
        Self { v: self.v - r.v, d1: self.d1 - r.d1, d2: self.d2 - r.d2 }
    }
}

impl Mul for Taylor2 {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        Self {
            v: self.v * r.v,
            d1: self.v * r.d1 + self.d1 * r.v,
            d2: self.v * r.d2 + 2.0 * self.d1 * r.d1 + self.d2 * r.v,
        }
    }
}

impl Div for Taylor2 {
    type Output = Self;
    fn div(self, r: Self) -> Self {
        let recip = r.chain(1.0 / r.v, -1.0 / (r.v * r.v), 2.0 / (r.v * r.v * r.v));
        self * recip
    }
}

impl Neg for Taylor2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d1: -self.d1, d2: -self.d2 }
    }
}

impl Add<f64> for Taylor2 {
    type Output = Self;
    fn add(self, r: f64) -> Self {
        Self { v: self.v + r, ..self }
    }
}

impl Sub<f64> for Taylor2 {
    type Output = Self;
    fn sub(self, r: f64) -> Self {
        Self { v: self.v - r, ..self }
    }
}

impl Mul<f64> for Taylor2 {
    type Output = Self;
    fn mul(self, r: f64) -> Self {
        Self { v: self.v * r, d1: self.d1 * r, d2: self.d2 * r }
    }
}

impl Div<f64> for Taylor2 {
    type Output = Self;
    fn div(self, r: f64) -> Self {
        self * (1.0 / r)
    }
}

impl AddAssign for Taylor2 {
    fn add_assign(&mut self, r: Self) {
        *self = *self + r;
    }
}
impl SubAssign for Taylor2 {
    fn sub_assign(&mut self, r: Self) {
        *self = *self - r;
    }
}
impl MulAssign for Taylor2 {
    fn mul_assign(&mut self, r: Self) {
        *self = *self * r;
    }
}
impl DivAssign for Taylor2 {
    fn div_assign(&mut self, r: Self) {
        *self = *self / r;
    }
}

impl Real for Taylor2 {
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * r * r))
    }
    fn atan2(self, x: Self) -> Self {
        // Differentiate atan2(y, x) along t through both arguments.
        let y = self;
        let r2 = x.v * x.v + y.v * y.v;
        let num1 = x.v * y.d1 - y.v * x.d1;
        let d1 = num1 / r2;
        // d/dt (num1 / r2)
        let dnum1 = x.v * y.d2 - y.v * x.d2; // x' y' terms cancel
        let dr2 = 2.0 * (x.v * x.d1 + y.v * y.d1);
        let d2 = (dnum1 * r2 - num1 * dr2) / (r2 * r2);
        Self { v: y.v.atan2(x.v), d1, d2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_product_rule() {
        let x = Jet::<2>::variable(3.0, 0);
        let y = Jet::<2>::variable(-2.0, 1);
        let f = x * y + x.sin() / y;
        assert!((f.du[0] - (-2.0 + 3.0f64.cos() / -2.0)).abs() < 1e-14);
        assert!((f.du[1] - (3.0 - 3.0f64.sin() / 4.0)).abs() < 1e-14);
    }

    #[test]
    fn jet_atan2_matches_finite_difference() {
        let (y0, x0) = (0.7, -1.3);
        let j = Jet::<2>::variable(y0, 0).atan2(Jet::<2>::variable(x0, 1));
        let h = 1e-6;
        let dy = (f64::atan2(y0 + h, x0) - f64::atan2(y0 - h, x0)) / (2.0 * h);
        let dx = (f64::atan2(y0, x0 + h) - f64::atan2(y0, x0 - h)) / (2.0 * h);
        assert!((j.du[0] - dy).abs() < 1e-9);
        assert!((j.du[1] - dx).abs() < 1e-9);
    }

    #[test]
    fn taylor2_second_derivatives() {
        let t0 = 0.37;
        let t = Taylor2::variable(t0);
        let f = (t * t).sin() * t.sqrt() + t.cos().atan2(t + 1.0) / (t + 2.0);
        let g = |t: f64| (t * t).sin() * t.sqrt() + t.cos().atan2(t + 1.0) / (t + 2.0);
        let h = 1e-4;
        let d1 = (g(t0 + h) - g(t0 - h)) / (2.0 * h);
        let d2 = (g(t0 + h) - 2.0 * g(t0) + g(t0 - h)) / (h * h);
        assert!((f.d1 - d1).abs() < 1e-7);
        assert!((f.d2 - d2).abs() < 1e-5);
    }
}
