//! Symmetric error laws: density generators, log-generator derivatives,
//! α-moment functionals and standardized samplers.
//!
//! A family is parameterised by its density generator `g`, with density
//! `φ^{-1/2} g((y-μ)²/φ)`. Everything downstream depends on the family only
//! through `t(z) = log g(z²)`, its derivatives and the moments
//! `α_{r,s} = E[t^{(r)}(z) z^s]`.

use crate::error::{Error, Result};
use crate::quadrature::integrate_real_line;
use crate::scalar::Scalar;
use num_traits::{FromPrimitive, Num};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use std::fmt;
use std::str::FromStr;

/// Absolute tolerance for every moment quadrature.
pub const MOMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyKind {
    Normal,
    /// Student-t with `nu` degrees of freedom.
    StudentT {
        nu: f64,
    },
    /// Power exponential with kurtosis parameter `kappa`.
    PowerExponential {
        kappa: f64,
    },
}

/// `E[t^{(r)}(z) z^s]` for the seven `(r, s)` pairs the corrections use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaMoments<T> {
    pub a20: T,
    pub a22: T,
    pub a31: T,
    pub a33: T,
    pub a41: T,
    pub a42: T,
    pub a44: T,
}

impl<T: Copy> AlphaMoments<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> AlphaMoments<U> {
        AlphaMoments {
            a20: f(self.a20),
            a22: f(self.a22),
            a31: f(self.a31),
            a33: f(self.a33),
            a41: f(self.a41),
            a42: f(self.a42),
            a44: f(self.a44),
        }
    }

    pub fn as_array(&self) -> [T; 7] {
        [self.a20, self.a22, self.a31, self.a33, self.a41, self.a42, self.a44]
    }
}

impl AlphaMoments<f64> {
    /// Closed forms for the normal law: `t' = -z`, `t'' = -1`, higher derivatives vanish.
    pub const NORMAL: Self = Self { a20: -1.0, a22: -1.0, a31: 0.0, a33: 0.0, a41: 0.0, a42: 0.0, a44: 0.0 };
}

/// Log-generator and its first four derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TDerivatives<T> {
    pub t: T,
    pub d1: T,
    pub d2: T,
    pub d3: T,
    pub d4: T,
}

impl<T: Copy> TDerivatives<T> {
    pub fn order(&self, r: usize) -> T {
        match r {
            0 => self.t,
            1 => self.d1,
            2 => self.d2,
            3 => self.d3,
            4 => self.d4,
            _ => panic!("derivative order {r} not available"),
        }
    }
}

/// A symmetric family with its cached normalising constant and α-moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricFamily {
    kind: FamilyKind,
    log_norm: f64,
    alpha: AlphaMoments<f64>,
    second_moment: f64,
}

impl SymmetricFamily {
    pub fn normal() -> Self {
        Self::build(FamilyKind::Normal).expect("normal family is always valid")
    }

    /// Student-t; `nu >= 3` so that every α integrand converges.
    pub fn student_t(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu >= 3.0) {
            return Err(Error::InvalidFamily(format!("t({nu}): degrees of freedom must be >= 3")));
        }
        Self::build(FamilyKind::StudentT { nu })
    }

    pub fn power_exponential(kappa: f64) -> Result<Self> {
        if !(kappa > -1.0 && kappa < 1.0) {
            return Err(Error::InvalidFamily(format!("pe({kappa}): kappa must lie in (-1, 1)")));
        }
        Self::build(FamilyKind::PowerExponential { kappa })
    }

    fn build(kind: FamilyKind) -> Result<Self> {
        let mut fam = Self { kind, log_norm: 0.0, alpha: AlphaMoments::NORMAL, second_moment: 1.0 };
        let mass = integrate_real_line(|z| fam.log_kernel(z).exp(), MOMENT_TOL * 1e-3);
        if !mass.converged || !(mass.value > 0.0) {
            return Err(Error::MomentDivergence("normalising constant"));
        }
        fam.log_norm = -mass.value.ln();
        fam.alpha = alpha_moments(&fam)?;
        let m2 = integrate_real_line(|z| z * z * fam.density(z), MOMENT_TOL);
        if !m2.converged {
            return Err(Error::MomentDivergence("second moment"));
        }
        fam.second_moment = m2.value;
        Ok(fam)
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    /// Log of the normalising constant of `g`, obtained by quadrature.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Cached α-moments.
    pub fn alpha(&self) -> &AlphaMoments<f64> {
        &self.alpha
    }

    /// `E[z²]` under the standardized law.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Unnormalised log generator as a function of `z`.
    fn log_kernel(&self, z: f64) -> f64 {
        match self.kind {
            FamilyKind::Normal => -0.5 * z * z,
            FamilyKind::StudentT { nu } => -0.5 * (nu + 1.0) * (nu + z * z).ln(),
            FamilyKind::PowerExponential { kappa } => -0.5 * z.abs().powf(2.0 / (1.0 + kappa)),
        }
    }

    /// Density generator `g(u)` for `u >= 0`.
    pub fn generator(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        (self.log_norm + self.log_kernel(u.sqrt())).exp()
    }

    /// Standardized density at `z`, i.e. `g(z²)`.
    pub fn density(&self, z: f64) -> f64 {
        (self.log_norm + self.log_kernel(z)).exp()
    }

    /// `t(z) = log g(z²)`.
    #[inline]
    pub fn log_gen<T: Scalar>(&self, z: T) -> T {
        let c = T::lit(self.log_norm);
        match self.kind {
            FamilyKind::Normal => c - T::lit(0.5) * z * z,
            FamilyKind::StudentT { nu } => {
                let nu = T::lit(nu);
                c - T::lit(0.5) * (nu + T::one()) * (nu + z * z).ln()
            }
            FamilyKind::PowerExponential { kappa } => c - T::lit(0.5) * z.abs().powf(T::lit(2.0 / (1.0 + kappa))),
        }
    }

    /// `t'(z)`; finite everywhere for the supported families.
    #[inline]
    pub fn dlog_gen<T: Scalar>(&self, z: T) -> T {
        match self.kind {
            FamilyKind::Normal => -z,
            FamilyKind::StudentT { nu } => {
                let nu = T::lit(nu);
                -(nu + T::one()) * z / (nu + z * z)
            }
            FamilyKind::PowerExponential { kappa } => {
                let a = T::lit(2.0 / (1.0 + kappa));
                if z == T::zero() {
                    return T::zero();
                }
                -(a * T::lit(0.5)) * z.signum() * z.abs().powf(a - T::one())
            }
        }
    }

    /// Closed-form `t` and its derivatives up to fourth order.
    pub fn t_derivatives<T: Scalar>(&self, z: T) -> Result<TDerivatives<T>> {
        if !z.is_finite() {
            return Err(Error::Domain("non-finite z".into()));
        }
        let t = self.log_gen(z);
        let d1 = self.dlog_gen(z);
        let one = T::one();
        Ok(match self.kind {
            FamilyKind::Normal => TDerivatives { t, d1, d2: -one, d3: T::zero(), d4: T::zero() },
            FamilyKind::StudentT { nu } => {
                let nu = T::lit(nu);
                let s = nu + z * z;
                let z2 = z * z;
                let d2 = -(nu + one) * (nu - z2) / (s * s);
                let d3 = T::lit(2.0) * (nu + one) * z * (T::lit(3.0) * nu - z2) / (s * s * s);
                let d4 = T::lit(6.0) * (nu + one) * (nu * nu - T::lit(6.0) * nu * z2 + z2 * z2) / (s * s * s * s);
                TDerivatives { t, d1, d2, d3, d4 }
            }
            FamilyKind::PowerExponential { kappa } => {
                let af = 2.0 / (1.0 + kappa);
                let a = T::lit(af);
                let half_a = a * T::lit(0.5);
                if z == T::zero() {
                    // |z|^a is C^4 at the origin only when a is an even integer or a >= 4.
                    let even = (af - af.round()).abs() < 1e-12 && (af.round() as i64) % 2 == 0;
                    if !(even || af >= 4.0) {
                        return Err(Error::NonSmoothAtOrigin);
                    }
                    let fact = |k: f64| -> T {
                        if (af - k).abs() < 1e-12 {
                            // k-th derivative of |z|^k at zero is k!
                            let mut f = 1.0;
                            for i in 1..=(k as i64) {
                                f *= i as f64;
                            }
                            -T::lit(0.5 * f)
                        } else {
                            T::zero()
                        }
                    };
                    return Ok(TDerivatives { t, d1, d2: fact(2.0), d3: fact(3.0), d4: fact(4.0) });
                }
                let az = z.abs();
                let sg = z.signum();
                let c2 = half_a * (a - one);
                let c3 = c2 * (a - T::lit(2.0));
                let c4 = c3 * (a - T::lit(3.0));
                TDerivatives {
                    t,
                    d1,
                    d2: -c2 * az.powf(a - T::lit(2.0)),
                    d3: -c3 * sg * az.powf(a - T::lit(3.0)),
                    d4: -c4 * az.powf(a - T::lit(4.0)),
                }
            }
        })
    }

    /// Sampler for the standardized law (`μ = 0`, `φ = 1`).
    pub fn sampler(&self) -> StandardizedSampler {
        let inner = match self.kind {
            FamilyKind::Normal => SamplerKind::Normal,
            FamilyKind::StudentT { nu } => {
                SamplerKind::StudentT { nu, chi2: ChiSquared::new(nu).expect("validated nu") }
            }
            FamilyKind::PowerExponential { kappa } => SamplerKind::PowerExponential {
                power: 0.5 * (1.0 + kappa),
                gamma: Gamma::new(0.5 * (1.0 + kappa), 2.0).expect("validated kappa"),
            },
        };
        StandardizedSampler { inner }
    }

    /// `count` i.i.d. draws from the standardized law.
    pub fn sample_standardized<T: Scalar, R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<T> {
        let s = self.sampler();
        (0..count).map(|_| T::lit(s.sample(rng))).collect()
    }
}

impl fmt::Display for SymmetricFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FamilyKind::Normal => write!(f, "normal"),
            FamilyKind::StudentT { nu } => write!(f, "t({nu})"),
            FamilyKind::PowerExponential { kappa } => write!(f, "pe({kappa})"),
        }
    }
}

impl FromStr for SymmetricFamily {
    type Err = Error;

    /// Accepts `normal`, `t(ν)` and `pe(κ)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "normal" {
            return Ok(Self::normal());
        }
        let arg = |prefix: &str| -> Option<Result<f64>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(inner.trim().parse::<f64>().map_err(|_| Error::InvalidFamily(s.clone())))
        };
        if let Some(nu) = arg("t") {
            return Self::student_t(nu?);
        }
        if let Some(kappa) = arg("pe") {
            return Self::power_exponential(kappa?);
        }
        Err(Error::InvalidFamily(format!("`{s}` (expected normal, t(nu) or pe(kappa))")))
    }
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Normal,
    StudentT { nu: f64, chi2: ChiSquared<f64> },
    PowerExponential { power: f64, gamma: Gamma<f64> },
}

/// Draws standardized errors `z` with density `g(z²)`.
#[derive(Debug, Clone)]
pub struct StandardizedSampler {
    inner: SamplerKind,
}

impl Distribution<f64> for StandardizedSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.inner {
            SamplerKind::Normal => rng.sample(StandardNormal),
            SamplerKind::StudentT { nu, chi2 } => {
                let n: f64 = rng.sample(StandardNormal);
                n / (chi2.sample(rng) / nu).sqrt()
            }
            SamplerKind::PowerExponential { power, gamma } => {
                let v = gamma.sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * v.powf(*power)
            }
        }
    }
}

/// α-moments by quadrature. The normal law returns its exact closed forms.
pub fn alpha_moments(family: &SymmetricFamily) -> Result<AlphaMoments<f64>> {
    if matches!(family.kind, FamilyKind::Normal) {
        return Ok(AlphaMoments::NORMAL);
    }
    let moment = |r: usize, s: i32, name: &'static str| -> Result<f64> {
        let q = integrate_real_line(
            |z| {
                if z == 0.0 {
                    return 0.0;
                }
                let d = family.t_derivatives(z).expect("z != 0");
                d.order(r) * z.powi(s) * family.density(z)
            },
            MOMENT_TOL,
        );
        if q.converged && q.value.is_finite() {
            Ok(q.value)
        } else {
            Err(Error::MomentDivergence(name))
        }
    };
    Ok(AlphaMoments {
        a20: moment(2, 0, "alpha_20")?,
        a22: moment(2, 2, "alpha_22")?,
        a31: moment(3, 1, "alpha_31")?,
        a33: moment(3, 3, "alpha_33")?,
        a41: moment(4, 1, "alpha_41")?,
        a42: moment(4, 2, "alpha_42")?,
        a44: moment(4, 4, "alpha_44")?,
    })
}

/// The fifteen scalars `N₁ … N₁₅` of the likelihood-ratio correction.
///
/// Generic over any field-like number so the rational coefficients can be
/// checked exactly with `num_rational`.
#[derive(Debug, Clone, PartialEq)]
pub struct BartlettScalars<T> {
    n: [T; 15],
}

impl<T: Clone> BartlettScalars<T> {
    /// `N_i` with the one-based index used throughout the correction formulas.
    pub fn n(&self, i: usize) -> T {
        assert!((1..=15).contains(&i), "N index {i} out of range");
        self.n[i - 1].clone()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.n
    }

    pub fn from_array(n: [T; 15]) -> Self {
        Self { n }
    }
}

#[inline]
fn k<T: FromPrimitive>(v: i64) -> T {
    T::from_i64(v).expect("small integer constant")
}

pub fn bartlett_scalars<T>(alpha: &AlphaMoments<T>) -> Result<BartlettScalars<T>>
where
    T: Clone + Num + FromPrimitive,
{
    let a20 = alpha.a20.clone();
    let a22 = alpha.a22.clone();
    let a31 = alpha.a31.clone();
    let a33 = alpha.a33.clone();
    let a41 = alpha.a41.clone();
    let a42 = alpha.a42.clone();
    if a20.is_zero() {
        return Err(Error::DivisionByZero("alpha_20"));
    }
    let sq = |v: &T| v.clone() * v.clone();
    let a22a33 = a22.clone() * a33.clone();
    let one = T::one();

    let n1 = (a41 + k::<T>(6) * a33.clone() + k::<T>(17) * a22.clone() - one.clone()) / k(64);
    let n2 = (k::<T>(-245) * sq(&a22) + k::<T>(496) * a22.clone() + k::<T>(3) * a22a33.clone()
        - k::<T>(3) * a33.clone()
        - k(251))
        / k(64);
    let n3 = (k::<T>(-17) * sq(&a22) + k::<T>(32) * a22.clone() - a22a33.clone() + a33.clone() - k(15)) / k(64);
    let n4 = (sq(&a33) - k::<T>(39) * sq(&a22) + k::<T>(66) * a22.clone() - k::<T>(6) * a22a33.clone()
        + k::<T>(10) * a33.clone()
        - k(23))
        / k(384);
    let n5 = (sq(&a22) - k::<T>(2) * a22.clone() + one.clone()) / k(64);
    let n6 =
        k::<T>(-5) * (k::<T>(16) * a22.clone() - k::<T>(9) * sq(&a22) + a33.clone() - a22a33.clone() - k(7)) / k(128);
    let n7 =
        (k::<T>(-43) * sq(&a22) + k::<T>(80) * a22.clone() - a22a33.clone() + k::<T>(3) * a33.clone() - k(37)) / k(128);
    let n8 = (sq(&a33)
        + sq(&a22)
        + k::<T>(2) * a22.clone()
        + k::<T>(2) * a33.clone()
        + k::<T>(2) * a22a33.clone()
        + one.clone())
        / k(256);
    let ratio = a31.clone() / a20.clone();
    let n9 = (sq(&ratio) - k(4)) / k(8);
    let s = a31.clone() + k::<T>(2) * a20.clone();
    let n10 =
        (one.clone() - a22.clone()) * (k::<T>(24) * a31.clone() + k::<T>(3) * a20.clone()) / (k::<T>(16) * a20.clone());
    let n11 = s.clone() * (k::<T>(9) * a22.clone() + a33.clone() - k(7)) / (k::<T>(64) * a20.clone());
    let n12 = k::<T>(-5) * s.clone() * (a22.clone() - one.clone()) / (k::<T>(32) * a20.clone());
    let n13 = k::<T>(-1) * s * (k::<T>(-7) * a22 + a33 + k(9)) / (k::<T>(64) * a20.clone());
    let n14 = sq(&ratio) / k(16) + ratio / k(4) + one / k(4);
    let n15 = (a42 + a31 - k::<T>(4) * a20.clone()) / (k::<T>(8) * a20);

    Ok(BartlettScalars { n: [n1, n2, n3, n4, n5, n6, n7, n8, n9, n10, n11, n12, n13, n14, n15] })
}

/// The five scalars `Q₁ … Q₅` of the gradient correction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScalars<T> {
    pub q1: T,
    pub q2: T,
    pub q3: T,
    pub q4: T,
    pub q5: T,
}

pub fn gradient_scalars<T>(alpha: &AlphaMoments<T>) -> GradientScalars<T>
where
    T: Clone + Num + FromPrimitive + std::ops::Neg<Output = T>,
{
    let a = alpha.clone();
    let q1 = (T::one() - k::<T>(3) * a.a22.clone() - a.a33.clone()) / k(8);
    let q2 = -(a.a31.clone() + k::<T>(2) * a.a20.clone()) / k(2);
    let q3 = (k::<T>(7) * a.a22 - T::one() + k::<T>(6) * a.a33 + a.a44) / k(16);
    let q4 = (a.a42 + k::<T>(5) * a.a31 + k::<T>(4) * a.a20) / k(4);
    let q5 = -q2.clone();
    GradientScalars { q1, q2, q3, q4, q5 }
}
