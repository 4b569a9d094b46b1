//! Maximum-likelihood fitting by alternating Fisher scoring.
//!
//! `β` and `δ` are globally orthogonal, so each iteration takes a scoring
//! step for `β` with information `-α₂₀ X̃ᵀΛX̃` and then one for `δ` with
//! information `WᵀVW` restricted to the free dispersion columns. Both steps
//! are step-halved until the log-likelihood does not decrease.
//!
//! Scoring converges linearly, and slowly when the observed and expected
//! information disagree (extreme dispersion fits, nearly flat mean
//! directions). After `scoring_iter` iterations the fit continues with joint
//! BFGS steps whose metric starts from the scoring information.

use crate::error::{Error, Result};
use crate::linalg::{weighted_gram, Cholesky};
use crate::model::{
    dispersion, dispersion_residuals, info_beta, info_delta, location_residuals, loglik_from, standardized, Dataset,
    ModelSpec,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FitMode {
    Full,
    /// Tested dispersion components pinned at their hypothesised values.
    Restricted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Maximum relative parameter change at convergence.
    pub tol: f64,
    /// Maximum information-scaled score at convergence.
    pub score_tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per scoring step.
    pub step_halving: usize,
    /// Starting point for the least-squares initialisation of `β`; all ones when absent.
    pub beta_start: Option<Vec<f64>>,
    /// Alternating scoring iterations before switching to joint quasi-Newton steps.
    pub scoring_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, score_tol: 1e-6, max_iter: 100, step_halving: 20, beta_start: None, scoring_iter: 20 }
    }
}

/// A converged fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub beta_hat: Array1<T>,
    pub delta_hat: Array1<T>,
    pub loglik: T,
    pub mode: FitMode,
    pub iterations: usize,
    pub converged: bool,
    pub mu_hat: Array1<T>,
    pub phi_hat: Array1<T>,
    pub z_hat: Array1<T>,
    /// `X̃` at the estimate.
    pub jacobian: Array2<T>,
    pub info_beta: Array2<T>,
    pub info_delta: Array2<T>,
    /// Largest information-scaled score component over the free parameters.
    pub scaled_score: T,
    /// Largest relative parameter change in the final iteration.
    pub last_change: T,
    /// Mean parameters held where their Jacobian column vanished; the
    /// likelihood is maximised in the limit along them.
    pub boundary: Vec<usize>,
}

impl<T: Scalar> FitResult<T> {
    pub fn n(&self) -> usize {
        self.mu_hat.len()
    }

    /// Score vector for `δ` at the estimate.
    pub fn score_delta(&self, spec: &ModelSpec<T>, data: &Dataset<T>) -> Array1<T> {
        data.w().t().dot(&dispersion_residuals(&spec.family, self.z_hat.view()))
    }
}

/// Starting values: damped Gauss–Newton least squares for `β`, and the
/// dispersion intercept matched to the mean squared residual.
pub fn initial_values<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    options: &FitOptions,
) -> Result<(Array1<T>, Array1<T>)> {
    spec.check(data)?;
    let p = spec.p();
    let mut beta = match &options.beta_start {
        Some(b) if b.len() == p => Array1::from_iter(b.iter().map(|&v| T::lit(v))),
        Some(b) => return Err(Error::DimensionMismatch(format!("{} starting values for {p} parameters", b.len()))),
        None => Array1::ones(p),
    };
    let y = data.y();
    let sse = |mu: &Array1<T>| -> T { y.iter().zip(mu.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum() };

    let (mut mu, mut jac) = spec.formula.mean_jacobian(data.x(), beta.view())?;
    let ones = Array1::<T>::ones(data.n());
    let gram0 = weighted_gram(jac.view(), ones.view());
    Cholesky::new(gram0.view(), "least-squares jacobian")?;
    let mut current = sse(&mu);
    let mut damping = T::zero();
    for _ in 0..200 {
        let g = jac.t().dot(&(&y - &mu));
        let a = weighted_gram(jac.view(), ones.view());
        let mut accepted = None;
        for _ in 0..30 {
            let mut ad = a.clone();
            for j in 0..p {
                ad[[j, j]] = a[[j, j]] * (T::one() + damping);
            }
            if let Ok(c) = Cholesky::new(ad.view(), "least squares") {
                let step = c.solve(g.view());
                let trial = &beta + &step;
                if let Ok(m) = spec.formula.means(data.x(), trial.view()) {
                    let s = sse(&m);
                    if s <= current {
                        accepted = Some((trial, step, s));
                        break;
                    }
                }
            }
            damping = (damping * T::lit(10.0)).max(T::lit(1e-3));
        }
        let Some((trial, step, s)) = accepted else { break };
        let rel =
            step.iter().zip(trial.iter()).fold(T::zero(), |acc, (&d, &b)| acc.max(d.abs() / b.abs().max(T::one())));
        let improvement = current - s;
        beta = trial;
        current = s;
        damping *= T::lit(0.1);
        if damping < T::lit(1e-10) {
            damping = T::zero();
        }
        let (m, j) = spec.formula.mean_jacobian(data.x(), beta.view())?;
        mu = m;
        jac = j;
        if rel < T::lit(1e-10) || improvement <= T::lit(1e-14) * current {
            break;
        }
    }
    finish_initial(spec, data, beta, &mu)
}

fn finish_initial<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    beta: Array1<T>,
    mu: &Array1<T>,
) -> Result<(Array1<T>, Array1<T>)> {
    let mut delta = Array1::<T>::zeros(spec.k());
    for (&c, &v) in spec.tested().iter().zip(spec.delta_hyp()) {
        delta[c] = v;
    }
    let offset = data.w().dot(&delta);
    let n = T::from_usize(data.n()).unwrap();
    let ms: T = (0..data.n())
        .map(|l| {
            let r = data.y()[l] - mu[l];
            r * r / offset[l].exp()
        })
        .sum::<T>()
        / n;
    let scale = data.y().iter().fold(T::zero(), |a, &v| a + v * v) / n;
    let floor = T::lit(1e-12) * (scale + T::one());
    delta[0] = (ms.max(floor) / T::lit(spec.family.second_moment())).ln();
    Ok((beta, delta))
}

/// Fits the model by alternating Fisher scoring from [`initial_values`].
///
/// When that start leads nowhere (a mean parameter drifting into a region
/// where the information is singular), the fit is retried once from the
/// unrefined `beta_start`.
pub fn fit<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    mode: FitMode,
    options: &FitOptions,
) -> Result<FitResult<T>> {
    let (beta, delta) = initial_values(spec, data, options)?;
    let first = fit_from(spec, data, mode, options, beta, delta);
    if first.is_ok() {
        return first;
    }
    let raw = match &options.beta_start {
        Some(b) => Array1::from_iter(b.iter().map(|&v| T::lit(v))),
        None => Array1::ones(spec.p()),
    };
    let Ok(mu) = spec.formula.means(data.x(), raw.view()) else { return first };
    let Ok((beta, delta)) = finish_initial(spec, data, raw, &mu) else { return first };
    fit_from(spec, data, mode, options, beta, delta).or(first)
}

/// Fits the model starting from the supplied parameter values.
pub fn fit_from<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    mode: FitMode,
    options: &FitOptions,
    mut beta: Array1<T>,
    mut delta: Array1<T>,
) -> Result<FitResult<T>> {
    spec.check(data)?;
    if beta.len() != spec.p() || delta.len() != spec.k() {
        return Err(Error::DimensionMismatch("starting values do not match the model".into()));
    }
    let free: Vec<usize> = match mode {
        FitMode::Full => (0..spec.k()).collect(),
        FitMode::Restricted => {
            for (&c, &v) in spec.tested().iter().zip(spec.delta_hyp()) {
                delta[c] = v;
            }
            spec.nuisance()
        }
    };
    let family = &spec.family;
    let y = data.y();
    let w = data.w();
    let w_free = w.select(Axis(1), &free);
    let v = spec.dispersion_weight();
    let k_free = weighted_gram(w_free.view(), Array1::from_elem(data.n(), v).view());
    let k_free_chol = Cholesky::new(k_free.view(), "dispersion information")?;
    let a20 = spec.location_weight();
    let tol = T::lit(options.tol);
    let score_tol = T::lit(options.score_tol);

    let mut phi = dispersion(w, delta.view());
    let mut mu = spec.formula.means(data.x(), beta.view())?;
    let mut ll = loglik_from(family, y, mu.view(), phi.view());
    if !ll.is_finite() {
        return Err(Error::Domain("log-likelihood is not finite at the starting values".into()));
    }
    // Accepted steps may lose at most this much log-likelihood to rounding;
    // 1e-10 in double precision, wider where the summation error is larger.
    let n_terms = T::lit(data.n() as f64);
    let slack = T::lit(1e-10).max(T::epsilon() * n_terms * (T::one() + ll.abs()));

    let rel_change = |step: &Array1<T>, at: &Array1<T>| -> T {
        step.iter().zip(at.iter()).fold(T::zero(), |acc, (&d, &b)| acc.max(d.abs() / b.abs().max(T::one())))
    };

    let mut last_change = T::infinity();
    let mut bfgs: Option<(Array2<T>, Array1<T>, Array1<T>)> = None;
    let p = beta.len();
    let mut beta_free: Vec<usize> = (0..p).collect();
    let mut initial_diag: Option<Array1<T>> = None;
    for iter in 0..=options.max_iter {
        // Scores and information at the current iterate.
        let (mu_j, jac) = spec.formula.mean_jacobian(data.x(), beta.view())?;
        mu = mu_j;
        let z = standardized(y, mu.view(), phi.view());
        let lambda = phi.mapv(|p| T::one() / p);
        let u_beta_all = jac.t().dot(&location_residuals(family, z.view(), phi.view()));
        let k_beta_all = weighted_gram(jac.view(), lambda.view()).mapv(|g| g * a20);
        let diag0 = initial_diag.get_or_insert_with(|| k_beta_all.diag().to_owned()).clone();
        // A mean parameter whose Jacobian column has collapsed has run off to
        // a limit where it no longer moves the mean; it is held there.
        let kb_chol = loop {
            let sub = k_beta_all.select(Axis(0), &beta_free).select(Axis(1), &beta_free);
            match Cholesky::new(sub.view(), "mean information") {
                Ok(c) => break c,
                Err(e) => {
                    let floor = T::lit(crate::linalg::RCOND_FLOOR);
                    let before = beta_free.len();
                    let tiny =
                        T::epsilon().powi(2) * beta_free.iter().fold(T::zero(), |m, &j| m.max(k_beta_all[[j, j]]));
                    beta_free.retain(|&j| k_beta_all[[j, j]] > floor * diag0[j] && k_beta_all[[j, j]] > tiny);
                    if beta_free.len() == before || beta_free.is_empty() {
                        return Err(e);
                    }
                    bfgs = None;
                }
            }
        };
        let u_beta = select(&u_beta_all, &beta_free);
        let s_delta = dispersion_residuals(family, z.view());
        let u_delta = w_free.t().dot(&s_delta);

        let mut scaled = T::zero();
        for (i, &j) in beta_free.iter().enumerate() {
            scaled = scaled.max(u_beta[i].abs() / k_beta_all[[j, j]].sqrt());
        }
        for j in 0..u_delta.len() {
            scaled = scaled.max(u_delta[j].abs() / k_free[[j, j]].sqrt());
        }
        if iter > 0 && last_change < tol && scaled < score_tol {
            let info_b = info_beta(spec, jac.view(), lambda.view());
            return Ok(FitResult {
                beta_hat: beta,
                delta_hat: delta,
                loglik: ll,
                mode,
                iterations: iter,
                converged: true,
                mu_hat: mu,
                phi_hat: phi,
                z_hat: z,
                jacobian: jac,
                info_beta: info_b,
                info_delta: info_delta(spec, data),
                scaled_score: scaled,
                last_change,
                boundary: (0..p).filter(|j| !beta_free.contains(j)).collect(),
            });
        }
        if iter == options.max_iter {
            break;
        }

        if iter >= options.scoring_iter {
            let grad = concat(&u_beta, &u_delta);
            let h = match bfgs.take() {
                None => block_diag(&kb_chol.inverse(), &k_free_chol.inverse()),
                Some((mut h, prev_theta, prev_grad)) => {
                    let sv = &concat(&select(&beta, &beta_free), &select(&delta, &free)) - &prev_theta;
                    let yv = &prev_grad - &grad;
                    bfgs_update(&mut h, &sv, &yv);
                    h
                }
            };
            let dir = h.dot(&grad);
            let slope = grad.dot(&dir);
            let pf = beta_free.len();
            let d_beta = expand(&dir.slice(ndarray::s![..pf]).to_owned(), &beta_free, p);
            let d_delta = expand(&dir.slice(ndarray::s![pf..]).to_owned(), &free, delta.len());
            let eval = |a: T| -> Option<Trial<T>> {
                let tb = &beta + &d_beta.mapv(|s| s * a);
                let td = &delta + &d_delta.mapv(|s| s * a);
                let (m, jac) = spec.formula.mean_jacobian(data.x(), tb.view()).ok()?;
                let ph = dispersion(w, td.view());
                let l = loglik_from(family, y, m.view(), ph.view());
                let z = standardized(y, m.view(), ph.view());
                let g = jac.t().dot(&location_residuals(family, z.view(), ph.view())).dot(&d_beta)
                    + w.t().dot(&dispersion_residuals(family, z.view())).dot(&d_delta);
                (l.is_finite() && g.is_finite()).then_some(Trial { ll: l, slope: g, state: (tb, td) })
            };
            let theta = concat(&select(&beta, &beta_free), &select(&delta, &free));
            let mut change = T::zero();
            if slope > T::zero() {
                if let Some((a, Trial { ll: l, state: (tb, td), .. })) =
                    line_search(eval, ll, slope, slack, options.step_halving)
                {
                    change = rel_change(&d_beta.mapv(|s| s * a), &tb).max(rel_change(&d_delta.mapv(|s| s * a), &td));
                    phi = dispersion(w, td.view());
                    beta = tb;
                    delta = td;
                    ll = l;
                }
            }
            bfgs = if change > T::zero() { Some((h, theta, grad)) } else { None };
            last_change = change;
            continue;
        }

        // β step.
        let mut change = T::zero();
        if !beta.is_empty() {
            let step = expand(&kb_chol.solve(u_beta.view()), &beta_free, p);
            let slope = u_beta_all.dot(&step);
            let eval = |a: T| -> Option<Trial<T>> {
                let trial = &beta + &step.mapv(|s| s * a);
                let (m, jac) = spec.formula.mean_jacobian(data.x(), trial.view()).ok()?;
                let l = loglik_from(family, y, m.view(), phi.view());
                let z = standardized(y, m.view(), phi.view());
                let g = jac.t().dot(&location_residuals(family, z.view(), phi.view())).dot(&step);
                (l.is_finite() && g.is_finite()).then_some(Trial { ll: l, slope: g, state: (trial, m) })
            };
            if let Some((a, Trial { ll: l, state: (trial, m), .. })) =
                line_search(eval, ll, slope, slack, options.step_halving)
            {
                change = change.max(rel_change(&step.mapv(|s| s * a), &trial));
                beta = trial;
                mu = m;
                ll = l;
            }
        }

        // δ step at the updated β.
        let z = standardized(y, mu.view(), phi.view());
        let u_delta = w_free.t().dot(&dispersion_residuals(family, z.view()));
        let step_free = k_free_chol.solve(u_delta.view());
        let slope = u_delta.dot(&step_free);
        let mut full_step = Array1::<T>::zeros(delta.len());
        for (i, &c) in free.iter().enumerate() {
            full_step[c] = step_free[i];
        }
        let eval = |a: T| -> Option<Trial<T>> {
            let trial = &delta + &full_step.mapv(|s| s * a);
            let ph = dispersion(w, trial.view());
            let l = loglik_from(family, y, mu.view(), ph.view());
            let z = standardized(y, mu.view(), ph.view());
            let g = w.t().dot(&dispersion_residuals(family, z.view())).dot(&full_step);
            (l.is_finite() && g.is_finite()).then_some(Trial { ll: l, slope: g, state: (trial, ph) })
        };
        if let Some((a, Trial { ll: l, state: (trial, ph), .. })) =
            line_search(eval, ll, slope, slack, options.step_halving)
        {
            change = change.max(rel_change(&full_step.mapv(|s| s * a), &trial));
            delta = trial;
            phi = ph;
            ll = l;
        }
        last_change = change;
    }
    Err(Error::NoConvergence { iterations: options.max_iter })
}

fn concat<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array1<T> {
    a.iter().chain(b.iter()).copied().collect()
}

fn select<T: Scalar>(a: &Array1<T>, idx: &[usize]) -> Array1<T> {
    idx.iter().map(|&i| a[i]).collect()
}

fn expand<T: Scalar>(a: &Array1<T>, idx: &[usize], len: usize) -> Array1<T> {
    let mut out = Array1::zeros(len);
    for (&i, &v) in idx.iter().zip(a.iter()) {
        out[i] = v;
    }
    out
}

fn block_diag<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let (p, q) = (a.nrows(), b.nrows());
    let mut out = Array2::zeros((p + q, p + q));
    out.slice_mut(ndarray::s![..p, ..p]).assign(a);
    out.slice_mut(ndarray::s![p.., p..]).assign(b);
    out
}

/// BFGS update of the inverse metric `h` for ascent, with `s` the parameter
/// change and `y` the decrease of the score. Skipped without curvature.
fn bfgs_update<T: Scalar>(h: &mut Array2<T>, s: &Array1<T>, y: &Array1<T>) {
    let sy = s.dot(y);
    if !(sy > T::lit(1e-12) * (s.dot(s) * y.dot(y)).sqrt()) {
        return;
    }
    let rho = T::one() / sy;
    let hy = h.dot(y);
    let yhy = y.dot(&hy);
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            h[[i, j]] += rho * ((T::one() + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

struct Trial<T> {
    ll: T,
    /// Directional derivative of the log-likelihood at the trial point.
    slope: T,
    state: (Array1<T>, Array1<T>),
}

/// Step length along a scoring direction. The unit step is refined by one
/// secant step on the directional derivative, which stays accurate where the
/// log-likelihood itself is too flat to compare; failures are halved.
fn line_search<T: Scalar>(
    eval: impl Fn(T) -> Option<Trial<T>>,
    ll: T,
    slope: T,
    slack: T,
    max_halving: usize,
) -> Option<(T, Trial<T>)> {
    let accept = |l: T| l >= ll - slack;
    if let Some(full) = eval(T::one()).filter(|r| accept(r.ll)) {
        let drop = slope - full.slope;
        if slope > T::zero() && drop > T::zero() {
            let a = (slope / drop).max(T::lit(0.1)).min(T::lit(2.0));
            if (a - T::one()).abs() > T::lit(0.05) {
                if let Some(r) = eval(a).filter(|r| accept(r.ll) && r.ll >= full.ll - slack) {
                    return Some((a, r));
                }
            }
        }
        return Some((T::one(), full));
    }
    let mut a = T::lit(0.5);
    for _ in 0..max_halving {
        if let Some(r) = eval(a).filter(|r| accept(r.ll)) {
            return Some((a, r));
        }
        a *= T::lit(0.5);
    }
    None
}

/// Standard errors from the inverse expected information; NaN for
/// parameters on the boundary.
pub fn standard_errors<T: Scalar>(fit: &FitResult<T>) -> Result<(Array1<T>, Array1<T>)> {
    let p = fit.beta_hat.len();
    let kept: Vec<usize> = (0..p).filter(|j| !fit.boundary.contains(j)).collect();
    let sub = fit.info_beta.select(Axis(0), &kept).select(Axis(1), &kept);
    let ib = crate::linalg::spd_inverse(sub.view(), "mean information")?;
    let mut se_beta = Array1::from_elem(p, T::nan());
    for (i, &j) in kept.iter().enumerate() {
        se_beta[j] = ib[[i, i]].sqrt();
    }
    let id = crate::linalg::spd_inverse(fit.info_delta.view(), "dispersion information")?;
    Ok((se_beta, id.diag().mapv(|v| v.sqrt())))
}

/// Convenience: `(y - μ̂)` residuals.
pub fn residuals<T: Scalar>(fit: &FitResult<T>, y: ArrayView1<T>) -> Array1<T> {
    &y - &fit.mu_hat
}
