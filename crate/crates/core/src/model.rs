//! Model specification and pointwise model quantities.
//!
//! The location is `μ_ℓ = f(x_ℓ; β)` and the dispersion follows the
//! exponential link `φ_ℓ = exp(ω_ℓᵀ δ)`. Under that link `h'_ℓ = φ_ℓ`, so
//! the dispersion weight `v_ℓ = (1 - α₂₂) h'²_ℓ / (4 φ²_ℓ)` is the constant
//! `(1 - α₂₂)/4`.

use crate::error::{Error, Result};
use crate::families::SymmetricFamily;
use crate::formula::MeanFormula;
use crate::linalg::Cholesky;
use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Observed data: responses, mean covariates and the dispersion design.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    y: Array1<T>,
    x: Array2<T>,
    w: Array2<T>,
}

impl<T: Scalar> Dataset<T> {
    /// `wcov` holds the dispersion covariates; the intercept column is added here.
    pub fn new(y: Array1<T>, x: Array2<T>, wcov: Array2<T>) -> Result<Self> {
        let n = y.len();
        if wcov.nrows() != n {
            return Err(Error::DimensionMismatch(format!("{} dispersion rows for {n} responses", wcov.nrows())));
        }
        let mut w = Array2::<T>::ones((n, wcov.ncols() + 1));
        w.slice_mut(s![.., 1..]).assign(&wcov);
        Self::with_design(y, x, w)
    }

    /// `w` is the complete dispersion design; its first column must be all ones.
    pub fn with_design(y: Array1<T>, x: Array2<T>, w: Array2<T>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || w.nrows() != n {
            return Err(Error::DimensionMismatch(format!("y has {n} rows, X has {}, W has {}", x.nrows(), w.nrows())));
        }
        if w.ncols() == 0 || w.column(0).iter().any(|&v| v != T::one()) {
            return Err(Error::InvalidData("first dispersion column must be the constant 1".into()));
        }
        if !y.iter().chain(x.iter()).chain(w.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in data".into()));
        }
        if w.ncols() >= n {
            return Err(Error::InvalidData(format!("{} dispersion columns for {n} observations", w.ncols())));
        }
        let gram = w.t().dot(&w);
        Cholesky::new(gram.view(), "dispersion design is rank deficient")?;
        Ok(Self { y, x, w })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of dispersion parameters `k` (intercept included).
    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn y(&self) -> ArrayView1<'_, T> {
        self.y.view()
    }

    pub fn x(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    pub fn w(&self) -> ArrayView2<'_, T> {
        self.w.view()
    }

    /// Same covariates, new responses.
    pub fn with_response(&self, y: Array1<T>) -> Self {
        assert_eq!(y.len(), self.n());
        Self { y, x: self.x.clone(), w: self.w.clone() }
    }

    /// Same data with the dispersion design replaced (used for reparameterisation checks).
    pub fn with_dispersion_design(&self, w: Array2<T>) -> Result<Self> {
        Self::with_design(self.y.clone(), self.x.clone(), w)
    }
}

/// Mean formula, error law, and the nuisance/tested split of `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    pub formula: MeanFormula,
    pub family: SymmetricFamily,
    k: usize,
    tested: Vec<usize>,
    delta_hyp: Vec<T>,
}

impl<T: Scalar> ModelSpec<T> {
    /// Default partition: the intercept is the nuisance block, columns `1..k` are tested at zero.
    pub fn new(formula: MeanFormula, family: SymmetricFamily, k: usize) -> Result<Self> {
        let tested: Vec<usize> = (1..k).collect();
        let zeros = vec![T::zero(); tested.len()];
        Self::with_partition(formula, family, k, tested, zeros)
    }

    /// General partition: `tested` lists zero-based columns of `W` pinned at `delta_hyp`.
    pub fn with_partition(
        formula: MeanFormula,
        family: SymmetricFamily,
        k: usize,
        mut tested: Vec<usize>,
        delta_hyp: Vec<T>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if tested.len() != delta_hyp.len() {
            return Err(Error::DimensionMismatch("one hypothesised value per tested column".into()));
        }
        let mut pairs: Vec<(usize, T)> = tested.drain(..).zip(delta_hyp).collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Config(format!("dispersion column {} tested twice", w[0].0)));
            }
        }
        if pairs.iter().any(|&(c, _)| c == 0 || c >= k) {
            return Err(Error::Config("tested columns must lie in 1..k (the intercept is a nuisance)".into()));
        }
        if pairs.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Config("hypothesised values must be finite".into()));
        }
        let (tested, delta_hyp) = pairs.into_iter().unzip();
        Ok(Self { formula, family, k, tested, delta_hyp })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.formula.param_count()
    }

    /// Columns of `W` under test (`W₁`).
    pub fn tested(&self) -> &[usize] {
        &self.tested
    }

    /// Nuisance columns of `W` (`W₀`), always containing the intercept.
    pub fn nuisance(&self) -> Vec<usize> {
        (0..self.k).filter(|c| !self.tested.contains(c)).collect()
    }

    pub fn delta_hyp(&self) -> &[T] {
        &self.delta_hyp
    }

    /// Degrees of freedom of the test, `dim δ₁`.
    pub fn df(&self) -> usize {
        self.tested.len()
    }

    /// Dispersion weight `v = (1 - α₂₂)/4` under the exponential link.
    pub fn dispersion_weight(&self) -> T {
        T::lit((1.0 - self.family.alpha().a22) / 4.0)
    }

    /// `-α₂₀`, the scale of the β information.
    pub fn location_weight(&self) -> T {
        T::lit(-self.family.alpha().a20)
    }

    /// Checks that `data` fits this specification.
    pub fn check(&self, data: &Dataset<T>) -> Result<()> {
        if data.k() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "model has k = {}, dispersion design has {} columns",
                self.k,
                data.k()
            )));
        }
        if data.x().ncols() < self.formula.covariate_count() {
            return Err(Error::DimensionMismatch(format!(
                "formula uses {} covariates, data has {}",
                self.formula.covariate_count(),
                data.x().ncols()
            )));
        }
        if data.n() <= self.p() + self.k {
            return Err(Error::InvalidData(format!(
                "n = {} is too small for p = {} and k = {}",
                data.n(),
                self.p(),
                self.k
            )));
        }
        Ok(())
    }

    /// Selects the given columns of `W`.
    pub fn columns(&self, data: &Dataset<T>, cols: &[usize]) -> Array2<T> {
        data.w().select(Axis(1), cols)
    }
}

/// Everything the scoring updates and corrections need at one parameter value.
#[derive(Debug, Clone)]
pub struct ModelQuantities<T> {
    pub mu: Array1<T>,
    pub phi: Array1<T>,
    pub z: Array1<T>,
    /// `X̃ = ∂μ/∂β`, n × p.
    pub jacobian: Array2<T>,
    /// Diagonal of `Λ = diag(1/φ)`.
    pub lambda: Array1<T>,
    /// Diagonal of `V`.
    pub v: Array1<T>,
    /// `h'(τ_ℓ)`, equal to `φ_ℓ` under the exponential link.
    pub h_prime: Array1<T>,
}

fn check_params<T: Scalar>(spec: &ModelSpec<T>, beta: ArrayView1<T>, delta: ArrayView1<T>) -> Result<()> {
    if beta.len() != spec.p() || delta.len() != spec.k() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} mean and {} dispersion parameters, got {} and {}",
            spec.p(),
            spec.k(),
            beta.len(),
            delta.len()
        )));
    }
    if beta.iter().chain(delta.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite parameter".into()));
    }
    Ok(())
}

/// `φ = exp(Wδ)`.
pub fn dispersion<T: Scalar>(w: ArrayView2<T>, delta: ArrayView1<T>) -> Array1<T> {
    w.dot(&delta).mapv(T::exp)
}

pub fn model_quantities<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    beta: ArrayView1<T>,
    delta: ArrayView1<T>,
) -> Result<ModelQuantities<T>> {
    check_params(spec, beta, delta)?;
    let (mu, jacobian) = spec.formula.mean_jacobian(data.x(), beta)?;
    let phi = dispersion(data.w(), delta);
    let z = standardized(data.y(), mu.view(), phi.view());
    let lambda = phi.mapv(|p| T::one() / p);
    let h_prime = phi.clone();
    let c = T::lit(1.0 - spec.family.alpha().a22) / T::lit(4.0);
    let v = Array1::from_iter(h_prime.iter().zip(phi.iter()).map(|(&h, &p)| c * h * h / (p * p)));
    Ok(ModelQuantities { mu, phi, z, jacobian, lambda, v, h_prime })
}

pub(crate) fn standardized<T: Scalar>(y: ArrayView1<T>, mu: ArrayView1<T>, phi: ArrayView1<T>) -> Array1<T> {
    Array1::from_iter((0..y.len()).map(|l| (y[l] - mu[l]) / phi[l].sqrt()))
}

/// `l(θ) = -½ Σ log φ_ℓ + Σ t(z_ℓ)` given fitted means and dispersions.
pub(crate) fn loglik_from<T: Scalar>(
    family: &SymmetricFamily,
    y: ArrayView1<T>,
    mu: ArrayView1<T>,
    phi: ArrayView1<T>,
) -> T {
    let half = T::lit(0.5);
    let mut l = T::zero();
    for i in 0..y.len() {
        let z = (y[i] - mu[i]) / phi[i].sqrt();
        l += family.log_gen(z) - half * phi[i].ln();
    }
    l
}

pub fn log_likelihood<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    beta: ArrayView1<T>,
    delta: ArrayView1<T>,
) -> Result<T> {
    check_params(spec, beta, delta)?;
    let mu = spec.formula.means(data.x(), beta)?;
    let phi = dispersion(data.w(), delta);
    let l = loglik_from(&spec.family, data.y(), mu.view(), phi.view());
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::Domain("log-likelihood is not finite".into()))
    }
}

/// Per-observation `∂l/∂τ_ℓ = -½(1 + t'(z_ℓ) z_ℓ)` under the exponential link.
pub(crate) fn dispersion_residuals<T: Scalar>(family: &SymmetricFamily, z: ArrayView1<T>) -> Array1<T> {
    let half = T::lit(0.5);
    z.mapv(|zl| -half * (T::one() + family.dlog_gen(zl) * zl))
}

/// Per-observation `∂l/∂μ_ℓ = -t'(z_ℓ)/√φ_ℓ`.
pub(crate) fn location_residuals<T: Scalar>(
    family: &SymmetricFamily,
    z: ArrayView1<T>,
    phi: ArrayView1<T>,
) -> Array1<T> {
    Array1::from_iter((0..z.len()).map(|l| -family.dlog_gen(z[l]) / phi[l].sqrt()))
}

/// `U_δ = Wᵀ s` with `s_ℓ = -½(1 + t'(z_ℓ) z_ℓ)`.
pub fn score_delta<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    beta: ArrayView1<T>,
    delta: ArrayView1<T>,
) -> Result<Array1<T>> {
    check_params(spec, beta, delta)?;
    let mu = spec.formula.means(data.x(), beta)?;
    let phi = dispersion(data.w(), delta);
    let z = standardized(data.y(), mu.view(), phi.view());
    Ok(data.w().t().dot(&dispersion_residuals(&spec.family, z.view())))
}

/// `U_β = X̃ᵀ r` with `r_ℓ = -t'(z_ℓ)/√φ_ℓ`.
pub fn score_beta<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    beta: ArrayView1<T>,
    delta: ArrayView1<T>,
) -> Result<Array1<T>> {
    let q = model_quantities(spec, data, beta, delta)?;
    Ok(q.jacobian.t().dot(&location_residuals(&spec.family, q.z.view(), q.phi.view())))
}

/// Expected information for `δ`, `K_δ = WᵀVW`.
pub fn info_delta<T: Scalar>(spec: &ModelSpec<T>, data: &Dataset<T>) -> Array2<T> {
    let v = spec.dispersion_weight();
    data.w().t().dot(&data.w()).mapv(|g| g * v)
}

/// Expected information for `β`, `K_β = -α₂₀ X̃ᵀ Λ X̃`.
pub fn info_beta<T: Scalar>(spec: &ModelSpec<T>, jacobian: ArrayView2<T>, lambda: ArrayView1<T>) -> Array2<T> {
    let c = spec.location_weight();
    crate::linalg::weighted_gram(jacobian, lambda).mapv(|g| g * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(family: SymmetricFamily, seed: u64) -> (ModelSpec<f64>, Dataset<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 25;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let wc = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let y = Array1::from_shape_fn(n, |_| 2.0 + rng.random::<f64>() * 3.0);
        let data = Dataset::new(y, x, wc).unwrap();
        let spec = ModelSpec::new(parse_formula("b0 + exp(b1*x1) + b2*x2").unwrap(), family, 3).unwrap();
        (spec, data)
    }

    #[test]
    fn normal_dispersion_weight_is_half() {
        let (spec, data) = toy(SymmetricFamily::normal(), 1);
        let q = model_quantities(&spec, &data, array![1.0, 1.0, 1.0].view(), array![0.2, -0.3, 0.1].view()).unwrap();
        assert!(q.v.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(q.h_prime.iter().zip(q.phi.iter()).all(|(h, p)| h == p));
    }

    #[test]
    fn zero_delta_gives_unit_dispersion() {
        let (spec, data) = toy(SymmetricFamily::normal(), 2);
        let q = model_quantities(&spec, &data, array![1.0, 0.5, 1.0].view(), Array1::zeros(3).view()).unwrap();
        assert!(q.phi.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn exact_fit_gives_zero_z() {
        let (spec, data) = toy(SymmetricFamily::normal(), 3);
        let beta = array![1.0, 0.5, 2.0];
        let mu = spec.formula.means(data.x(), beta.view()).unwrap();
        let data = data.with_response(mu);
        let q = model_quantities(&spec, &data, beta.view(), array![0.4, 1.0, -1.0].view()).unwrap();
        assert!(q.z.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn normal_loglik_at_perfect_fit() {
        let (spec, data) = toy(SymmetricFamily::normal(), 4);
        let beta = array![1.0, 0.5, 2.0];
        let mu = spec.formula.means(data.x(), beta.view()).unwrap();
        let data = data.with_response(mu);
        let l = log_likelihood(&spec, &data, beta.view(), Array1::zeros(3).view()).unwrap();
        let n = data.n() as f64;
        assert!((l + 0.5 * n * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-10);
    }

    /// Literal summation of log densities, independent of the likelihood code path.
    fn loglik_oracle(fam: &SymmetricFamily, y: &[f64], mu: &[f64], phi: &[f64]) -> f64 {
        y.iter().zip(mu).zip(phi).map(|((&y, &m), &p)| (fam.generator((y - m).powi(2) / p) / p.sqrt()).ln()).sum()
    }

    #[test]
    fn loglik_matches_density_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for fam in [
            SymmetricFamily::normal(),
            SymmetricFamily::student_t(5.0).unwrap(),
            SymmetricFamily::power_exponential(0.3).unwrap(),
        ] {
            for seed in 0..5 {
                let (spec, data) = toy(fam.clone(), seed);
                let beta = Array1::from_shape_fn(3, |_| rng.random_range(0.0..2.0));
                let delta = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
                let l = log_likelihood(&spec, &data, beta.view(), delta.view()).unwrap();
                let mu = spec.formula.means(data.x(), beta.view()).unwrap();
                let phi = dispersion(data.w(), delta.view());
                let o =
                    loglik_oracle(&fam, data.y().as_slice().unwrap(), mu.as_slice().unwrap(), phi.as_slice().unwrap());
                assert!((l - o).abs() < 1e-12 * o.abs().max(1.0), "{fam}: {l} vs {o}");
            }
        }
    }

    #[test]
    fn doubling_dispersion_shifts_loglik() {
        let (spec, data) = toy(SymmetricFamily::student_t(5.0).unwrap(), 7);
        let beta = array![1.0, 0.5, 1.0];
        let delta = array![0.1, 0.2, -0.4];
        let mut shifted = delta.clone();
        shifted[0] += 2f64.ln();
        let l1 = log_likelihood(&spec, &data, beta.view(), delta.view()).unwrap();
        let l2 = log_likelihood(&spec, &data, beta.view(), shifted.view()).unwrap();
        // recompute the t-term change directly
        let mu = spec.formula.means(data.x(), beta.view()).unwrap();
        let phi = dispersion(data.w(), delta.view());
        let mut dt = 0.0;
        for l in 0..data.n() {
            let z = (data.y()[l] - mu[l]) / phi[l].sqrt();
            dt += spec.family.log_gen(z / 2f64.sqrt()) - spec.family.log_gen(z);
        }
        let n = data.n() as f64;
        assert!((l2 - l1 - (-0.5 * n * 2f64.ln() + dt)).abs() < 1e-10);
    }

    #[test]
    fn normal_score_closed_form() {
        let (spec, data) = toy(SymmetricFamily::normal(), 8);
        let beta = array![1.0, 0.5, 1.0];
        let delta = array![0.3, -0.2, 0.5];
        let u = score_delta(&spec, &data, beta.view(), delta.view()).unwrap();
        let q = model_quantities(&spec, &data, beta.view(), delta.view()).unwrap();
        for j in 0..3 {
            let want: f64 = (0..data.n()).map(|l| 0.5 * data.w()[[l, j]] * (q.z[l].powi(2) - 1.0)).sum();
            assert!((u[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_residuals_give_zero_normal_score() {
        let (spec, data) = toy(SymmetricFamily::normal(), 9);
        let beta = array![1.0, 0.5, 1.0];
        let mu = spec.formula.means(data.x(), beta.view()).unwrap();
        let y = Array1::from_iter(mu.iter().enumerate().map(|(l, m)| m + if l % 2 == 0 { 1.0 } else { -1.0 }));
        let data = data.with_response(y);
        let u = score_delta(&spec, &data, beta.view(), Array1::zeros(3).view()).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for fam in [
            SymmetricFamily::normal(),
            SymmetricFamily::student_t(5.0).unwrap(),
            SymmetricFamily::power_exponential(0.3).unwrap(),
        ] {
            let (spec, data) = toy(fam.clone(), 10);
            let beta = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5));
            let delta = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5));
            let ud = score_delta(&spec, &data, beta.view(), delta.view()).unwrap();
            let ub = score_beta(&spec, &data, beta.view(), delta.view()).unwrap();
            let ll = |b: &Array1<f64>, d: &Array1<f64>| log_likelihood(&spec, &data, b.view(), d.view()).unwrap();
            for j in 0..3 {
                let h = 1e-6;
                let (mut dp, mut dm) = (delta.clone(), delta.clone());
                dp[j] += h;
                dm[j] -= h;
                let fd = (ll(&beta, &dp) - ll(&beta, &dm)) / (2.0 * h);
                assert!((fd - ud[j]).abs() < 1e-5 * ud[j].abs().max(1.0), "{fam} δ{j}: {fd} vs {}", ud[j]);
                let (mut bp, mut bm) = (beta.clone(), beta.clone());
                bp[j] += h;
                bm[j] -= h;
                let fd = (ll(&bp, &delta) - ll(&bm, &delta)) / (2.0 * h);
                assert!((fd - ub[j]).abs() < 1e-5 * ub[j].abs().max(1.0), "{fam} β{j}: {fd} vs {}", ub[j]);
            }
        }
    }

    #[test]
    fn partition_validation() {
        let f = parse_formula("b0").unwrap();
        let fam = SymmetricFamily::normal();
        assert!(ModelSpec::<f64>::with_partition(f.clone(), fam.clone(), 3, vec![0], vec![0.0]).is_err());
        assert!(ModelSpec::<f64>::with_partition(f.clone(), fam.clone(), 3, vec![2, 2], vec![0.0, 0.0]).is_err());
        assert!(ModelSpec::<f64>::with_partition(f.clone(), fam.clone(), 3, vec![3], vec![0.0]).is_err());
        let s = ModelSpec::<f64>::with_partition(f, fam, 4, vec![3, 1], vec![0.5, 0.0]).unwrap();
        assert_eq!(s.tested(), &[1, 3]);
        assert_eq!(s.delta_hyp(), &[0.0, 0.5]);
        assert_eq!(s.nuisance(), vec![0, 2]);
        assert_eq!(s.df(), 2);
    }

    #[test]
    fn dataset_validation() {
        let y = array![1.0, 2.0, 3.0];
        let x = Array2::zeros((3, 1));
        assert!(Dataset::new(y.clone(), x.clone(), Array2::zeros((2, 1))).is_err());
        // constant covariate duplicates the intercept
        assert!(matches!(Dataset::new(y.clone(), x.clone(), Array2::ones((3, 1))), Err(Error::SingularInformation(_))));
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(Dataset::new(y, bad, Array2::zeros((3, 0))).is_err());
    }
}
