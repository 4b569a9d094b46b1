//! Forward-mode dual numbers over any [`Scalar`].

use crate::scalar::Scalar;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value together with its derivative along one seeded direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T> {
    pub val: T,
    pub dot: T,
}

impl<T: Scalar> Dual<T> {
    #[inline]
    pub fn constant(val: T) -> Self {
        Self { val, dot: T::zero() }
    }

    #[inline]
    pub fn variable(val: T) -> Self {
        Self { val, dot: T::one() }
    }

    #[inline]
    pub fn exp(self) -> Self {
        let e = self.val.exp();
        Self { val: e, dot: self.dot * e }
    }

    #[inline]
    pub fn ln(self) -> Self {
        Self { val: self.val.ln(), dot: self.dot / self.val }
    }

    #[inline]
    pub fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Self { val: s, dot: self.dot / (s + s) }
    }

    /// `self ^ rhs`. A constant exponent keeps negative bases usable.
    pub fn pow(self, rhs: Self) -> Self {
        if rhs.dot == T::zero() {
            let b = rhs.val;
            let val = if b == b.round() && b.abs() < T::lit(1024.0) {
                self.val.powi(b.to_i32().unwrap())
            } else {
                self.val.powf(b)
            };
            let dot = if self.dot == T::zero() || b == T::zero() {
                T::zero()
            } else {
                b * self.val.powf(b - T::one()) * self.dot
            };
            return Self { val, dot };
        }
        let val = self.val.powf(rhs.val);
        let dot = val * (rhs.dot * self.val.ln() + rhs.val * self.dot / self.val);
        Self { val, dot }
    }

    pub fn is_finite(&self) -> bool {
        self.val.is_finite() && self.dot.is_finite()
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, r: Self) -> Self {
        Self { val: self.val + r.val, dot: self.dot + r.dot }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, r: Self) -> Self {
        Self { val: self.val - r.val, dot: self.dot - r.dot }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, r: Self) -> Self {
        Self { val: self.val * r.val, dot: self.dot * r.val + self.val * r.dot }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, r: Self) -> Self {
        let q = self.val / r.val;
        Self { val: q, dot: (self.dot - q * r.dot) / r.val }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { val: -self.val, dot: -self.dot }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_quotient_rules() {
        let x = Dual::variable(3.0f64);
        let c = Dual::constant(2.0);
        let f = (x * x + c) / x; // x + 2/x
        assert!((f.val - (3.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((f.dot - (1.0 - 2.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn transcendental_rules() {
        let x = Dual::variable(0.7f64);
        assert!((x.exp().dot - 0.7f64.exp()).abs() < 1e-15);
        assert!((x.ln().dot - 1.0 / 0.7).abs() < 1e-15);
        assert!((x.sqrt().dot - 0.5 / 0.7f64.sqrt()).abs() < 1e-15);
        let p = x.pow(x); // d/dx x^x = x^x (ln x + 1)
        assert!((p.dot - 0.7f64.powf(0.7) * (0.7f64.ln() + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn integer_power_of_negative_base() {
        let x = Dual::variable(-2.0);
        let p = x.pow(Dual::constant(3.0));
        assert_eq!(p.val, -8.0);
        assert_eq!(p.dot, 12.0);
    }
}
