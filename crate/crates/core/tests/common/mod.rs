#![allow(dead_code)]

use hsnlm::model::{dispersion, Dataset, ModelSpec};
use hsnlm::{parse_formula, SymmetricFamily};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn families() -> Vec<SymmetricFamily> {
    vec![SymmetricFamily::normal(), "t(5)".parse().unwrap(), "pe(0.3)".parse().unwrap()]
}

/// `b0 + exp(b1*x1) + b2*x2` with U(0,1) covariates, all β = 1.
pub fn simulated(
    family: &SymmetricFamily,
    n: usize,
    k: usize,
    delta: &[f64],
    seed: u64,
) -> (ModelSpec<f64>, Dataset<f64>) {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((n, 2), |_| r.random::<f64>());
    let wc = Array2::from_shape_fn((n, k - 1), |_| r.random::<f64>());
    let template = Dataset::new(Array1::zeros(n), x, wc).unwrap();
    let spec = ModelSpec::new(parse_formula("b0 + exp(b1*x1) + b2*x2").unwrap(), family.clone(), k).unwrap();
    let data = respond(&spec, &template, delta, &mut r);
    (spec, data)
}

/// Fresh responses on the design of `template` at β = 1 and the given δ.
pub fn respond(spec: &ModelSpec<f64>, template: &Dataset<f64>, delta: &[f64], r: &mut ChaCha8Rng) -> Dataset<f64> {
    let beta = Array1::ones(spec.p());
    let mu = spec.formula.means(template.x(), beta.view()).unwrap();
    let phi = dispersion(template.w(), Array1::from(delta.to_vec()).view());
    let z: Vec<f64> = spec.family.sample_standardized(template.n(), r);
    let y = Array1::from_iter((0..template.n()).map(|l| mu[l] + phi[l].sqrt() * z[l]));
    template.with_response(y)
}

pub fn assert_close(a: f64, b: f64, rel: f64, what: &str) {
    assert!((a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0), "{what}: {a} vs {b}");
}
pub mod checks;
