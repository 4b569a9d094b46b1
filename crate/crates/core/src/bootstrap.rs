//! Parametric bootstrap of `S_LR`, `S_r` and `S_g` under the null model.
//!
//! Replicate `b` simulates `y* = μ̃ + √φ̃ z*` from the restricted fit, refits
//! both models and recomputes the statistics. A replicate that fails to fit is
//! redrawn from its next substream; more than 5% redraws abort the run.
//!
//! Decision rule: reject when the observed value exceeds `q̂₁₋α`, the
//! `⌈(1-α)B⌉`-th order statistic of the replicates. In terms of
//! `p* = #{S_b ≥ S}/B` this is exactly `p* ≤ ⌊αB⌋/B`, which is `p* < α`
//! except when `αB` is an integer and exactly `αB` replicates reach `S`.

use ndarray::Array1;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{FitOptions, FitResult};
use crate::hypothesis::{run_tests_from, BootstrapPValues, TestReport};
use crate::model::{Dataset, ModelSpec};
use crate::scalar::Scalar;
use crate::streams::{attempt_stream, substream};

/// Largest tolerated share of redrawn replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub fit: FitOptions,
    /// Run replicates on the rayon pool.
    pub parallel: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { replicates: 500, seed: 0, alphas: vec![0.10, 0.05, 0.01], fit: FitOptions::default(), parallel: true }
    }
}

/// Bootstrap distribution of one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticBootstrap<T> {
    pub observed: T,
    pub replicates: Vec<T>,
    pub p_value: f64,
    /// `(α, q̂₁₋α)` per requested level.
    pub critical: Vec<(f64, T)>,
}

impl<T: Scalar> StatisticBootstrap<T> {
    fn new(observed: T, replicates: Vec<T>, alphas: &[f64]) -> Self {
        let b = replicates.len();
        let exceed = replicates.iter().filter(|&&s| s >= observed).count();
        let mut sorted = replicates.clone();
        sorted.sort_by(|a, c| a.partial_cmp(c).unwrap_or(std::cmp::Ordering::Equal));
        let critical = alphas.iter().map(|&a| (a, sorted[order_index(a, b)])).collect();
        Self { observed, replicates, p_value: exceed as f64 / b as f64, critical }
    }

    /// Percentile decision at level `alpha`.
    pub fn rejects(&self, alpha: f64) -> bool {
        let q = match self.critical.iter().find(|(a, _)| *a == alpha) {
            Some(&(_, q)) => q,
            None => {
                let mut sorted = self.replicates.clone();
                sorted.sort_by(|a, c| a.partial_cmp(c).unwrap_or(std::cmp::Ordering::Equal));
                sorted[order_index(alpha, sorted.len())]
            }
        };
        self.observed > q
    }
}

/// Zero-based index of the `⌈(1-α)B⌉`-th order statistic.
fn order_index(alpha: f64, b: usize) -> usize {
    let m = ((1.0 - alpha) * b as f64 - 1e-9).ceil() as usize;
    m.clamp(1, b) - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult<T> {
    pub replicates: usize,
    pub lr: StatisticBootstrap<T>,
    pub score: StatisticBootstrap<T>,
    pub gradient: StatisticBootstrap<T>,
    /// Replicates that had to be redrawn.
    pub redraws: usize,
}

impl<T: Scalar> BootstrapResult<T> {
    pub fn p_values(&self) -> BootstrapPValues {
        BootstrapPValues {
            lr: self.lr.p_value,
            score: self.score.p_value,
            gradient: self.gradient.p_value,
            replicates: self.replicates,
        }
    }
}

/// Bootstraps the statistics in `observed` from the restricted fit `restricted`.
pub fn bootstrap_tests<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    restricted: &FitResult<T>,
    observed: &TestReport<T>,
    options: &BootstrapOptions,
) -> Result<BootstrapResult<T>> {
    let b = options.replicates;
    if b < 100 {
        return Err(Error::Config(format!("at least 100 bootstrap replicates are needed, got {b}")));
    }
    let max_failures = (MAX_FAILURE_RATE * b as f64).floor() as usize;
    let one = |i: usize| replicate(spec, data, restricted, options, i, max_failures);
    let outcomes: Vec<Result<([T; 3], usize)>> =
        if options.parallel { (0..b).into_par_iter().map(one).collect() } else { (0..b).map(one).collect() };
    let mut stats = [Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b)];
    let mut redraws = 0;
    for outcome in outcomes {
        match outcome {
            Ok((s, f)) => {
                for (dst, v) in stats.iter_mut().zip(s) {
                    dst.push(v);
                }
                redraws += f;
            }
            Err(Error::TooManyFailures { failures, .. }) => redraws += failures,
            Err(e) => return Err(e),
        }
        if redraws > max_failures {
            return Err(Error::TooManyFailures { failures: redraws, requested: b });
        }
    }
    let [lr, score, gradient] = stats;
    Ok(BootstrapResult {
        replicates: b,
        lr: StatisticBootstrap::new(observed.s_lr, lr, &options.alphas),
        score: StatisticBootstrap::new(observed.s_r, score, &options.alphas),
        gradient: StatisticBootstrap::new(observed.s_g, gradient, &options.alphas),
        redraws,
    })
}

fn replicate<T: Scalar>(
    spec: &ModelSpec<T>,
    data: &Dataset<T>,
    restricted: &FitResult<T>,
    options: &BootstrapOptions,
    index: usize,
    max_failures: usize,
) -> Result<([T; 3], usize)> {
    let n = data.n();
    let scale = restricted.phi_hat.mapv(|p| p.sqrt());
    for attempt in 0..=max_failures {
        let mut rng = substream(options.seed, attempt_stream(index, attempt));
        let z: Vec<T> = spec.family.sample_standardized(n, &mut rng);
        let y = Array1::from_iter((0..n).map(|l| restricted.mu_hat[l] + scale[l] * z[l]));
        let star = data.with_response(y);
        let start = (&restricted.beta_hat, &restricted.delta_hat);
        if let Ok(run) = run_tests_from(spec, &star, &options.fit, Some(start)) {
            let r = run.report;
            return Ok(([r.s_lr, r.s_r, r.s_g], attempt));
        }
    }
    Err(Error::TooManyFailures { failures: max_failures + 1, requested: options.replicates })
}
