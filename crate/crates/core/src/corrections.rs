//! Bartlett correction of `S_LR` and Bartlett-type correction of `S_g`,
//! evaluated at the restricted estimates.

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::estimation::{FitMode, FitResult};
use crate::families::{bartlett_scalars, gradient_scalars, BartlettScalars, GradientScalars};
use crate::hypothesis::{chi2_pvalue, TestReport};
use crate::linalg::{spd_inverse, symmetric_eigenvalues};
use crate::model::{Dataset, ModelSpec};
use crate::scalar::Scalar;

/// The projections `Z_β`, `Z_δ`, `Z_δ₀` and the diagonal of `Λ`.
#[derive(Debug, Clone)]
pub struct ProjectionSet<T> {
    pub z_beta: Array2<T>,
    pub z_delta: Array2<T>,
    pub z_delta0: Array2<T>,
    /// Diagonal of `Λ = diag(1/φ)`.
    pub lambda: Array1<T>,
    /// The constant dispersion weight `v`.
    pub v: T,
}

fn projection<T: Scalar>(a: &Array2<T>, m: &Array2<T>, what: &'static str) -> Result<Array2<T>> {
    let inv = spd_inverse(m.view(), what)?;
    Ok(a.dot(&inv).dot(&a.t()))
}

/// Builds the projections at the estimates held in `fit`.
pub fn projection_set<T: Scalar>(
    fit: &FitResult<T>,
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
) -> Result<ProjectionSet<T>> {
    let v = spec.dispersion_weight();
    let lambda = fit.phi_hat.mapv(|p| T::one() / p);
    let kept: Vec<usize> = (0..fit.jacobian.ncols()).filter(|j| !fit.boundary.contains(j)).collect();
    let x = &fit.jacobian.select(ndarray::Axis(1), &kept);
    let xlx = crate::linalg::weighted_gram(x.view(), lambda.view());
    let z_beta = projection(x, &xlx, "mean information")?;
    let w = data.w().to_owned();
    let z_delta = projection(&w, &w.t().dot(&w).mapv(|g| g * v), "dispersion information")?;
    let w0 = spec.columns(data, &spec.nuisance());
    let z_delta0 = projection(&w0, &w0.t().dot(&w0).mapv(|g| g * v), "nuisance dispersion information")?;
    Ok(ProjectionSet { z_beta, z_delta, z_delta0, lambda, v })
}

impl<T: Scalar> ProjectionSet<T> {
    /// `Z_δ - Z_δ₀`.
    pub fn difference(&self) -> Array2<T> {
        &self.z_delta - &self.z_delta0
    }

    /// Checks idempotence of `Z_δV` and `Z_δ₀V`, `tr{(Z_δ - Z_δ₀)V} = df` and
    /// positive semidefiniteness of `Z_δ - Z_δ₀`.
    pub fn check_invariants(&self, df: usize, tol: f64) -> Result<()> {
        let tol = T::lit(tol);
        for (z, name) in [(&self.z_delta, "Z_delta V"), (&self.z_delta0, "Z_delta0 V")] {
            let zv = z.mapv(|e| e * self.v);
            let err = max_abs_diff(&zv.dot(&zv), &zv);
            if err > tol {
                return Err(Error::InvalidData(format!("{name} is not idempotent (error {err})")));
            }
        }
        let d = self.difference();
        let trace = d.diag().iter().fold(T::zero(), |a, &e| a + e) * self.v;
        if (trace - T::lit(df as f64)).abs() > tol {
            return Err(Error::InvalidData(format!("trace of (Z_delta - Z_delta0)V is {trace}, expected {df}")));
        }
        let min = symmetric_eigenvalues(d.view())[0];
        if min < -tol {
            return Err(Error::InvalidData(format!("Z_delta - Z_delta0 has eigenvalue {min}")));
        }
        Ok(())
    }
}

fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> T {
    let mut m = T::zero();
    Zip::from(a).and(b).for_each(|&x, &y| m = m.max((x - y).abs()));
    m
}

fn hadamard<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &e| *o *= e);
    out
}

/// `aᵀ M b`.
fn form<T: Scalar>(a: &Array1<T>, m: &Array2<T>, b: &Array1<T>) -> T {
    a.dot(&m.dot(b))
}

fn sum<T: Scalar>(a: &Array1<T>) -> T {
    a.iter().fold(T::zero(), |s, &e| s + e)
}

/// Correction factors for both statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BartlettFactors<T> {
    pub c: T,
    pub eps_delta: T,
    pub eps_beta_delta: T,
    pub eps_delta0: T,
    pub eps_beta_delta0: T,
    pub a_g: T,
    pub b_g: T,
    pub c_g: T,
    pub a1g: T,
    pub a2g: T,
    pub a3g: T,
    pub df: usize,
}

/// Seven-term dispersion block `ε(δ)` or `ε(δ₀)` for the projection `z`.
fn eps_dispersion<T: Scalar>(n: &BartlettScalars<T>, z: &Array2<T>, l: &Array1<T>) -> T {
    let iota = Array1::<T>::ones(z.nrows());
    let zd = z.diag().to_owned();
    let zd2 = &zd * &zd;
    let z3 = hadamard(&hadamard(z, z), z);
    n.n(1) * sum(&zd2)
        + n.n(2) * form(&iota, &z3, &iota)
        + n.n(3) * form(l, &z3, &iota)
        + n.n(4) * form(l, &z3, l)
        + n.n(5) * form(&zd2, z, &iota)
        + n.n(6) * form(&zd2, z, l)
        + (n.n(7) + n.n(8)) * form(&(l * &zd2), z, &iota)
}

/// Five-term block `ε(β,δ)` or `ε(β,δ₀)`; `z_last` carries the projection of the `N₉` term.
fn eps_beta<T: Scalar>(
    n: &BartlettScalars<T>,
    z_beta: &Array2<T>,
    z: &Array2<T>,
    z_last: &Array2<T>,
    l: &Array1<T>,
) -> T {
    let bd = z_beta.diag().to_owned();
    let zd = z.diag().to_owned();
    let lb = l * &bd;
    let zb2_l = hadamard(z_beta, z_beta).dot(l);
    -n.n(15) * sum(&(&lb * &zd)) - (n.n(10) + n.n(12)) * form(&lb, z, &zd) + n.n(14) * form(&lb, z, &lb)
        - (n.n(11) + n.n(13)) * form(&lb, z, &(&zd * l))
        + n.n(9) * form(l, z_last, &zb2_l)
}

/// Projection used in the `N₉` term of `ε(β,δ₀)`. Printed as `Z_δ`; the
/// companion block `ε(β,δ)` uses its own projection there, so `Z_δ₀` is used.
fn second_beta_block_last_projection<T>(p: &ProjectionSet<T>) -> &Array2<T> {
    &p.z_delta0
}

/// The three gradient-correction terms `(A₁ᵍ, A₂ᵍ, A₃ᵍ)`.
fn gradient_terms<T: Scalar>(q: &GradientScalars<T>, a20: T, p: &ProjectionSet<T>) -> (T, T, T) {
    let lit = T::lit;
    let d = p.difference();
    let dd = d.diag().to_owned();
    let bd = p.z_beta.diag().to_owned();
    let z0d = p.z_delta0.diag().to_owned();
    let l = &p.lambda;
    let lb = l * &bd;
    let iota = Array1::<T>::ones(d.nrows());
    let zb2 = hadamard(&p.z_beta, &p.z_beta);
    let z02 = hadamard(&p.z_delta0, &p.z_delta0);
    let d2 = hadamard(&d, &d);
    let d3 = hadamard(&d2, &d);
    let (q1, q2, q3, q4, q5) = (q.q1, q.q2, q.q3, q.q4, q.q5);

    let l_zb2d_l = form(l, &hadamard(&zb2, &d), l);
    let dd_d_lb = form(&dd, &d, &lb);
    let dd_d_z0d = form(&dd, &d, &z0d);
    let dd_d_dd = form(&dd, &d, &dd);
    let sum_d3 = form(&iota, &d3, &iota);
    let tr_l_dd_bd = sum(&(&lb * &dd));

    let a1 = lit(12.0) * a20 * q2 * l_zb2d_l
        + lit(3.0) * q2 * q2 * form(&lb, &d, &lb)
        + lit(6.0) * q2 * q2 * l_zb2d_l
        + lit(3.0) * q1 * q2 * form(&lb, &d, &z0d)
        + lit(3.0) * q1 * q2 * form(&z0d, &d, &lb)
        + lit(3.0) * q1 * q2 * dd_d_lb
        + lit(6.0) * q1 * q2 * form(&dd, &p.z_delta0, &lb)
        + lit(3.0) * q1 * q1 * dd_d_z0d
        + lit(6.0) * q1 * q1 * form(&dd, &p.z_delta0, &z0d)
        + lit(3.0) * q1 * q1 * form(&z0d, &d, &z0d)
        + lit(6.0) * q1 * q1 * form(&iota, &hadamard(&d, &z02), &iota)
        + lit(6.0) * q3 * sum(&(&z0d * &dd))
        - lit(12.0) * q5 * tr_l_dd_bd
        + lit(6.0) * q4 * tr_l_dd_bd;

    let a2 = -lit(3.0) * q1 * q3 * dd_d_lb
        - lit(3.0) * q1 * q1 * dd_d_z0d
        - lit(3.0) * q1 * q1 * form(&dd, &p.z_delta0, &dd)
        - lit(6.0) * q1 * q1 * form(&iota, &hadamard(&d2, &p.z_delta0), &iota)
        - lit(2.25) * q1 * q1 * dd_d_dd
        - lit(1.5) * q1 * q1 * sum_d3
        - lit(3.0) * q3 * sum(&(&dd * &dd));

    let a3 = lit(0.75) * q1 * q1 * dd_d_dd + lit(0.5) * q1 * q1 * sum_d3;
    (a1, a2, a3)
}

/// Assembles all factors from explicit scalars; `a20` enters `A₁ᵍ` directly.
pub fn factors_from_scalars<T: Scalar>(
    p: &ProjectionSet<T>,
    n: &BartlettScalars<T>,
    q: &GradientScalars<T>,
    a20: T,
    df: usize,
) -> Result<BartlettFactors<T>> {
    if df == 0 {
        return Err(Error::DegenerateHypothesis);
    }
    let l = &p.lambda;
    let eps_delta = eps_dispersion(n, &p.z_delta, l);
    let eps_delta0 = eps_dispersion(n, &p.z_delta0, l);
    let eps_beta_delta = eps_beta(n, &p.z_beta, &p.z_delta, &p.z_delta, l);
    let eps_beta_delta0 = eps_beta(n, &p.z_beta, &p.z_delta0, second_beta_block_last_projection(p), l);
    let c = eps_delta + eps_beta_delta - eps_delta0 - eps_beta_delta0;

    let (a1g, a2g, a3g) = gradient_terms(q, a20, p);
    let q_df = T::lit(df as f64);
    let twelve = T::lit(12.0);
    let a_g = a3g / (twelve * q_df * (q_df + T::lit(2.0)) * (q_df + T::lit(4.0)));
    let b_g = (a2g - T::lit(2.0) * a3g) / (twelve * q_df * (q_df + T::lit(2.0)));
    let c_g = (a1g - a2g + a3g) / (twelve * q_df);
    Ok(BartlettFactors { c, eps_delta, eps_beta_delta, eps_delta0, eps_beta_delta0, a_g, b_g, c_g, a1g, a2g, a3g, df })
}

/// Correction factors at the restricted fit.
pub fn bartlett_factors<T: Scalar>(
    restricted: &FitResult<T>,
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
) -> Result<BartlettFactors<T>> {
    if restricted.mode != FitMode::Restricted {
        return Err(Error::MismatchedFits("corrections are evaluated at the restricted fit"));
    }
    let p = projection_set(restricted, spec, data)?;
    factors_at(&p, spec)
}

/// Correction factors for an already built projection set.
pub fn factors_at<T: Scalar>(p: &ProjectionSet<T>, spec: &ModelSpec<T>) -> Result<BartlettFactors<T>> {
    let alpha = spec.family.alpha().map(T::lit);
    let n = bartlett_scalars(&alpha)?;
    let q = gradient_scalars(&alpha);
    factors_from_scalars(p, &n, &q, alpha.a20, spec.df())
}

impl<T: Scalar> BartlettFactors<T> {
    /// `S_LR* = S_LR / (1 + c/df)`.
    pub fn corrected_lr(&self, s: T) -> T {
        s / (T::one() + self.c / T::lit(self.df as f64))
    }

    /// `s(1 - (c_g + b_g s + a_g s²))`, unclamped.
    pub fn gradient_transform(&self, s: T) -> T {
        s * (T::one() - (self.c_g + self.b_g * s + self.a_g * s * s))
    }

    /// Derivative of the gradient transform at `s`.
    pub fn gradient_slope(&self, s: T) -> T {
        T::one() - self.c_g - T::lit(2.0) * self.b_g * s - T::lit(3.0) * self.a_g * s * s
    }

    /// Corrected gradient statistic clamped at zero, with a flag that is set
    /// when the transform is decreasing at `s` or had to be clamped.
    pub fn corrected_gradient(&self, s: T) -> (T, bool) {
        let g = self.gradient_transform(s);
        let flag = self.gradient_slope(s) < T::zero() || g < T::zero();
        (g.max(T::zero()), flag)
    }
}

/// Fills the corrected statistics and their p-values.
pub fn apply_corrections<T: Scalar>(
    report: &TestReport<T>,
    restricted: &FitResult<T>,
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
) -> Result<TestReport<T>> {
    let factors = bartlett_factors(restricted, spec, data)?;
    Ok(with_factors(report, &factors))
}

/// Applies precomputed factors to a report.
pub fn with_factors<T: Scalar>(report: &TestReport<T>, factors: &BartlettFactors<T>) -> TestReport<T> {
    let mut out = report.clone();
    let lr = factors.corrected_lr(report.s_lr);
    let (g, flag) = factors.corrected_gradient(report.s_g);
    out.s_lr_corr = Some(lr);
    out.p_lr_corr = Some(chi2_pvalue(lr.to_f64_lossy(), report.df));
    out.s_g_corr = Some(g);
    out.p_g_corr = Some(chi2_pvalue(g.to_f64_lossy(), report.df));
    out.gradient_non_monotone = flag;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{fit, FitOptions};
    use crate::families::SymmetricFamily;
    use crate::formula::parse_formula;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, k: usize, family: SymmetricFamily, seed: u64) -> (ModelSpec<f64>, Dataset<f64>, FitResult<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let wc = Array2::from_shape_fn((n, k - 1), |_| rng.random::<f64>());
        let e: Vec<f64> = family.sample_standardized(n, &mut rng);
        let y = Array1::from_iter((0..n).map(|l| 1.0 + x[[l, 0]].exp() + x[[l, 1]] + 0.1f64.exp().sqrt() * e[l]));
        let data = Dataset::new(y, x, wc).unwrap();
        let spec = ModelSpec::new(parse_formula("b0 + exp(b1*x1) + b2*x2").unwrap(), family, k).unwrap();
        let r = fit(&spec, &data, FitMode::Restricted, &FitOptions::default()).unwrap();
        (spec, data, r)
    }

    #[test]
    fn projections_satisfy_invariants() {
        let (spec, data, r) = setup(30, 3, SymmetricFamily::student_t(5.0).unwrap(), 4);
        let p = projection_set(&r, &spec, &data).unwrap();
        p.check_invariants(spec.df(), 1e-8).unwrap();
        let tr = |z: &Array2<f64>| z.diag().sum() * p.v;
        assert!((tr(&p.z_delta) - 3.0).abs() < 1e-10);
        assert!((tr(&p.z_delta0) - 1.0).abs() < 1e-10);
        let nv = 30.0 * p.v;
        assert!(p.z_delta0.iter().all(|&e| (e - 1.0 / nv).abs() < 1e-12));
        assert!(max_abs_diff(&p.z_delta, &p.z_delta.t().to_owned()) < 1e-12);
    }

    #[test]
    fn zero_scalars_give_no_correction() {
        let (spec, data, r) = setup(30, 3, SymmetricFamily::normal(), 5);
        let p = projection_set(&r, &spec, &data).unwrap();
        let n = BartlettScalars::from_array([0.0; 15]);
        let q = GradientScalars { q1: 0.0, q2: 0.0, q3: 0.0, q4: 0.0, q5: 0.0 };
        let f = factors_from_scalars(&p, &n, &q, -1.0, 2).unwrap();
        assert_eq!(f.c, 0.0);
        assert_eq!(f.corrected_lr(3.7), 3.7);
        assert_eq!(f.corrected_gradient(3.7), (3.7, false));
    }

    #[test]
    fn polynomial_denominators_for_two_degrees_of_freedom() {
        let (spec, data, r) = setup(30, 3, SymmetricFamily::normal(), 6);
        let f = bartlett_factors(&r, &spec, &data).unwrap();
        assert!((f.c_g - (f.a1g - f.a2g + f.a3g) / 24.0).abs() < 1e-12 * (1.0 + f.c_g.abs()));
        assert!((f.b_g - (f.a2g - 2.0 * f.a3g) / 96.0).abs() < 1e-12 * (1.0 + f.b_g.abs()));
        assert!((f.a_g - f.a3g / 576.0).abs() < 1e-12 * (1.0 + f.a_g.abs()));
        assert_eq!(f.c, f.eps_delta + f.eps_beta_delta - f.eps_delta0 - f.eps_beta_delta0);
    }

    #[test]
    fn corrections_use_restricted_estimates() {
        let (spec, data, r) = setup(30, 3, SymmetricFamily::normal(), 7);
        let full = fit(&spec, &data, FitMode::Full, &FitOptions::default()).unwrap();
        assert!(matches!(bartlett_factors(&full, &spec, &data), Err(Error::MismatchedFits(_))));
        let at_full = factors_at(&projection_set(&full, &spec, &data).unwrap(), &spec).unwrap();
        let at_restricted = bartlett_factors(&r, &spec, &data).unwrap();
        assert!((at_full.c - at_restricted.c).abs() > 1e-6);
    }

    #[test]
    fn monotonicity_flag_and_clamp() {
        let f = BartlettFactors {
            c: 0.0,
            eps_delta: 0.0,
            eps_beta_delta: 0.0,
            eps_delta0: 0.0,
            eps_beta_delta0: 0.0,
            a_g: 0.01f64,
            b_g: 0.0,
            c_g: 0.0,
            a1g: 0.0,
            a2g: 0.0,
            a3g: 0.0,
            df: 2,
        };
        let (g, flag) = f.corrected_gradient(1.0);
        assert!((g - 0.99).abs() < 1e-15 && !flag);
        let (g, flag) = f.corrected_gradient(20.0);
        assert_eq!(g, 0.0);
        assert!(flag);
    }

    #[test]
    fn report_gains_corrected_rows() {
        let (spec, data, _) = setup(30, 3, SymmetricFamily::normal(), 8);
        let run = crate::hypothesis::run_tests(&spec, &data, &FitOptions::default()).unwrap();
        let rep = apply_corrections(&run.report, &run.restricted, &spec, &data).unwrap();
        assert_eq!(rep.s_lr, run.report.s_lr);
        assert!(rep.s_lr_corr.is_some() && rep.s_g_corr.is_some());
        assert!(rep.p_lr_corr.unwrap() >= 0.0 && rep.p_lr_corr.unwrap() <= 1.0);
    }
}
