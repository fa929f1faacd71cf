//! Forward-mode automatic differentiation on fixed-width dual numbers.
//!
//! The detector pipeline (track stepping, trilinear voxelization, crosstalk,
//! calibration) is written generically over [`Real`], so the same code path
//! produces plain `f64` images and images carrying tangents with respect to a
//! small set of parameters. [`Dual<N>`] holds a value and `N` partial
//! derivatives; the forward model uses `N = 6` (vertex x/y/z plus one
//! particle's kinetic energy and two direction angles).

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction for the differentiable pipeline.
///
/// Branch decisions (step counts, voxel indices, min/max selection) are taken
/// on [`Real::value`], making every implementation piecewise smooth with
/// kinks only at branch boundaries.
pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn from_f64(c: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// `x^c` for a constant exponent, clamped to zero (with zero tangent)
    /// for `x <= 0`. The clamp covers exhausted residual ranges at track
    /// ends, where the true one-sided derivative is unbounded.
    fn powf_clamped(self, c: f64) -> Self;
    /// The smaller of the two by value.
    fn min_value(self, other: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(c: f64) -> Self {
        c
    }
    #[inline]
    fn value(self) -> f64 {
        self
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
    fn powf_clamped(self, c: f64) -> Self {
        if self <= 0.0 {
            0.0
        } else {
            self.powf(c)
        }
    }
    #[inline]
    fn min_value(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

/// Value plus `N` tangent components.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// A constant: zero tangent.
    #[inline]
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// An independent variable seeded on tangent `slot`.
    #[inline]
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; N];
        d[slot] = 1.0;
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d.iter()) {
            *a += b;
        }
        Dual { v: self.v + rhs.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d.iter()) {
            *a -= b;
        }
        Dual { v: self.v - rhs.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Dual { v: self.v * rhs.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        // True division on the value lane keeps it bit-identical with the
        // plain f64 pipeline; the reciprocal only feeds the tangents.
        let v = self.v / rhs.v;
        let inv = 1.0 / rhs.v;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Dual { v: -self.v, d }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Dual { v: self.v + rhs, d: self.d }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Dual { v: self.v - rhs, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= rhs;
        }
        Dual { v: self.v * rhs, d }
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a /= rhs;
        }
        Dual { v: self.v / rhs, d }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn from_f64(c: f64) -> Self {
        Dual::constant(c)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn sin(self) -> Self {
        // Separate sin/cos calls keep the value lane bit-identical with the
        // plain f64 pipeline (sin_cos can round differently).
        let s = self.v.sin();
        let c = self.v.cos();
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= c;
        }
        Dual { v: s, d }
    }
    #[inline]
    fn cos(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= -s;
        }
        Dual { v: c, d }
    }
    #[inline]
    fn powf_clamped(self, c: f64) -> Self {
        if self.v <= 0.0 {
            return Dual::constant(0.0);
        }
        let v = self.v.powf(c);
        let scale = c * v / self.v; // c * x^(c-1)
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= scale;
        }
        Dual { v, d }
    }
    #[inline]
    fn min_value(self, other: Self) -> Self {
        if self.v <= other.v {
            self
        } else {
            other
        }
    }
}
