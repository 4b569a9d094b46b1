//! Likelihood-ratio, score and gradient statistics for `H₀: δ₁ = δ₁⁽⁰⁾`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::estimation::{fit, fit_from, FitMode, FitOptions, FitResult};
use crate::linalg::{gauss_jordan_inverse, spd_inverse, spd_solve};
use crate::model::{Dataset, ModelSpec};
use crate::scalar::Scalar;

/// Bootstrap p-values attached to a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapPValues {
    pub lr: f64,
    pub score: f64,
    pub gradient: f64,
    pub replicates: usize,
}

/// Observed statistics with their χ² p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport<T> {
    pub df: usize,
    pub s_lr: T,
    pub s_r: T,
    pub s_g: T,
    pub p_lr: f64,
    pub p_r: f64,
    pub p_g: f64,
    pub s_lr_corr: Option<T>,
    pub s_g_corr: Option<T>,
    pub p_lr_corr: Option<f64>,
    pub p_g_corr: Option<f64>,
    /// Set when the corrected gradient transform is decreasing at the observed value.
    pub gradient_non_monotone: bool,
    pub bootstrap: Option<BootstrapPValues>,
}

impl<T: Scalar> TestReport<T> {
    pub fn new(df: usize, s_lr: T, s_r: T, s_g: T) -> Self {
        Self {
            df,
            s_lr,
            s_r,
            s_g,
            p_lr: chi2_pvalue(s_lr.to_f64_lossy(), df),
            p_r: chi2_pvalue(s_r.to_f64_lossy(), df),
            p_g: chi2_pvalue(s_g.to_f64_lossy(), df),
            s_lr_corr: None,
            s_g_corr: None,
            p_lr_corr: None,
            p_g_corr: None,
            gradient_non_monotone: false,
            bootstrap: None,
        }
    }

    /// `(name, value, p-value)` rows in reporting order.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64)> {
        let mut rows = vec![("S_LR", self.s_lr.to_f64_lossy(), self.p_lr)];
        if let (Some(s), Some(p)) = (self.s_lr_corr, self.p_lr_corr) {
            rows.push(("S_LR*", s.to_f64_lossy(), p));
        }
        rows.push(("S_r", self.s_r.to_f64_lossy(), self.p_r));
        rows.push(("S_g", self.s_g.to_f64_lossy(), self.p_g));
        if let (Some(s), Some(p)) = (self.s_g_corr, self.p_g_corr) {
            rows.push(("S_g*", s.to_f64_lossy(), p));
        }
        rows
    }

    /// Plain-text report, one statistic per line with its p-value in parentheses.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "degrees of freedom: {}", self.df);
        for (name, value, p) in self.rows() {
            let _ = writeln!(out, "{name:<6} = {value:>10.3} ({p:.3})");
        }
        if self.s_lr_corr.is_some_and(|s| s < T::zero()) {
            let _ = writeln!(out, "note: Bartlett divisor 1 + c/df is negative at this fit");
        }
        if self.gradient_non_monotone {
            let _ = writeln!(out, "note: corrected gradient transform is decreasing at the observed S_g");
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(out, "bootstrap p-values (B = {}):", b.replicates);
            for (name, p) in [("S_LR", b.lr), ("S_r", b.score), ("S_g", b.gradient)] {
                let _ = writeln!(out, "{name:<6}   {p:.3}");
            }
        }
        out
    }

    /// CSV with header `statistic,value,df,p_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,value,df,p_value\n");
        for (name, value, p) in self.rows() {
            let _ = writeln!(out, "{name},{value},{},{p}", self.df);
        }
        if let Some(b) = &self.bootstrap {
            for (name, p) in [("S_LR_boot", b.lr), ("S_r_boot", b.score), ("S_g_boot", b.gradient)] {
                let _ = writeln!(out, "{name},,{},{p}", self.df);
            }
        }
        out
    }
}

/// Upper tail `P(χ²_df > s)`.
pub fn chi2_pvalue(s: f64, df: usize) -> f64 {
    if s.is_nan() {
        return f64::NAN;
    }
    if s <= 0.0 {
        return 1.0;
    }
    if s == f64::INFINITY {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, s / 2.0).clamp(0.0, 1.0)
}

fn check_pair<T: Scalar>(full: &FitResult<T>, restricted: &FitResult<T>) -> Result<()> {
    if full.mode != FitMode::Full || restricted.mode != FitMode::Restricted {
        return Err(Error::MismatchedFits("expected one full and one restricted fit"));
    }
    if full.delta_hat.len() != restricted.delta_hat.len() || full.n() != restricted.n() {
        return Err(Error::MismatchedFits("fits have different dimensions"));
    }
    Ok(())
}

/// `S_LR = 2(l̂ - l̃)`, with rounding-level negatives set to zero.
pub fn lr_statistic<T: Scalar>(full: &FitResult<T>, restricted: &FitResult<T>) -> Result<T> {
    check_pair(full, restricted)?;
    let s = T::lit(2.0) * (full.loglik - restricted.loglik);
    if s < T::zero() && s >= T::lit(-1e-8) {
        Ok(T::zero())
    } else {
        Ok(s)
    }
}

/// Tested components of the restricted score, `Ũ_{δ₁}`.
pub fn restricted_score<T: Scalar>(restricted: &FitResult<T>, spec: &ModelSpec<T>, data: &Dataset<T>) -> Array1<T> {
    restricted.score_delta(spec, data).select(Axis(0), spec.tested())
}

/// `R = W₁ - W₀C` with `C = (W₀ᵀVW₀)⁻¹W₀ᵀVW₁`.
pub fn residual_design<T: Scalar>(spec: &ModelSpec<T>, data: &Dataset<T>) -> Result<Array2<T>> {
    let v = spec.dispersion_weight();
    let w0 = spec.columns(data, &spec.nuisance());
    let w1 = spec.columns(data, spec.tested());
    let k00 = w0.t().dot(&w0).mapv(|g| g * v);
    let k01 = w0.t().dot(&w1).mapv(|g| g * v);
    let c = spd_inverse(k00.view(), "nuisance dispersion information")?.dot(&k01);
    Ok(&w1 - &w0.dot(&c))
}

/// `S_r = Ũ₁ᵀ(RᵀVR)⁻¹Ũ₁` at the restricted fit.
pub fn score_statistic<T: Scalar>(restricted: &FitResult<T>, spec: &ModelSpec<T>, data: &Dataset<T>) -> Result<T> {
    if restricted.mode != FitMode::Restricted {
        return Err(Error::MismatchedFits("score statistic needs the restricted fit"));
    }
    if spec.df() == 0 {
        return Err(Error::DegenerateHypothesis);
    }
    let u1 = restricted_score(restricted, spec, data);
    let r = residual_design(spec, data)?;
    let m = r.t().dot(&r).mapv(|g| g * spec.dispersion_weight());
    let x = spd_solve(m.view(), u1.view(), "tested dispersion information")?;
    Ok(u1.dot(&x))
}

/// The same quadratic form through the tested block of `K_δ⁻¹`, inverted by Gauss–Jordan.
pub fn score_statistic_partitioned<T: Scalar>(
    restricted: &FitResult<T>,
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
) -> Result<T> {
    let u1 = restricted_score(restricted, spec, data);
    let kd = crate::model::info_delta(spec, data);
    let inv = gauss_jordan_inverse(kd.view())?;
    let block = inv.select(Axis(0), spec.tested()).select(Axis(1), spec.tested());
    Ok(u1.dot(&block.dot(&u1)))
}

/// `S_g = Ũ₁ᵀ(δ̂₁ - δ₁⁽⁰⁾)`.
pub fn gradient_statistic<T: Scalar>(
    restricted: &FitResult<T>,
    full: &FitResult<T>,
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
) -> Result<T> {
    check_pair(full, restricted)?;
    let u1 = restricted_score(restricted, spec, data);
    let disp: Array1<T> = spec.tested().iter().zip(spec.delta_hyp()).map(|(&c, &h)| full.delta_hat[c] - h).collect();
    Ok(u1.dot(&disp))
}

/// Both fits and the three first-order statistics.
#[derive(Debug, Clone)]
pub struct TestRun<T> {
    pub full: FitResult<T>,
    pub restricted: FitResult<T>,
    pub report: TestReport<T>,
}

/// Fits the full and restricted models and computes `S_LR`, `S_r` and `S_g`.
pub fn run_tests<T: Scalar>(spec: &ModelSpec<T>, data: &Dataset<T>, options: &FitOptions) -> Result<TestRun<T>> {
    run_tests_from(spec, data, options, None)
}

/// As [`run_tests`], with optional starting values for the restricted fit.
/// The full fit always starts from the restricted estimates.
pub fn run_tests_from<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    options: &FitOptions,
    start: Option<(&Array1<T>, &Array1<T>)>,
) -> Result<TestRun<T>> {
    if spec.df() == 0 {
        return Err(Error::DegenerateHypothesis);
    }
    let from = |mode, b: &Array1<T>, d: &Array1<T>| fit_from(spec, data, mode, options, b.clone(), d.clone());
    let restricted = match start {
        Some((b, d)) => from(FitMode::Restricted, b, d).or_else(|_| fit(spec, data, FitMode::Restricted, options)),
        None => fit(spec, data, FitMode::Restricted, options),
    };
    // Each fit is retried from the other's estimates before giving up.
    let (restricted, full) = match restricted {
        Ok(r) => {
            let full =
                from(FitMode::Full, &r.beta_hat, &r.delta_hat).or_else(|_| fit(spec, data, FitMode::Full, options))?;
            (r, full)
        }
        Err(e) => {
            let full = fit(spec, data, FitMode::Full, options).map_err(|_| e.clone())?;
            let r = from(FitMode::Restricted, &full.beta_hat, &full.delta_hat).map_err(|_| e)?;
            (r, full)
        }
    };
    let s_lr = lr_statistic(&full, &restricted)?;
    let s_r = score_statistic(&restricted, spec, data)?;
    let s_g = gradient_statistic(&restricted, &full, spec, data)?;
    let report = TestReport::new(spec.df(), s_lr, s_r, s_g);
    Ok(TestRun { full, restricted, report })
}
