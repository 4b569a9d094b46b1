//! Heteroscedastic symmetric nonlinear regression.
//!
//! Responses follow `y_ℓ ~ S(μ_ℓ, φ_ℓ, g)` with a nonlinear mean
//! `μ_ℓ = f(x_ℓ; β)` and dispersion `φ_ℓ = exp(ω_ℓᵀ δ)`. The crate fits the
//! model by maximum likelihood and tests `H₀: δ₁ = δ₁⁽⁰⁾` with the likelihood
//! ratio, score and gradient statistics, their Bartlett and Bartlett-type
//! corrections, and a parametric bootstrap. A Monte Carlo engine reproduces
//! size and power studies.
//!
//! Numerical routines are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix `f64`.
//!
//! ```
//! use hsnlm::{Dataset, ModelSpec, SymmetricFamily, parse_formula, run_tests, FitOptions};
//! use ndarray::{array, Array2};
//!
//! let x = Array2::from_shape_vec((8, 1), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
//! let w = x.clone();
//! let y = array![1.2, 1.1, 1.5, 1.3, 1.9, 1.4, 2.2, 1.6];
//! let data = Dataset::new(y, x, w).unwrap();
//! let spec = ModelSpec::new(parse_formula("b0 + b1*x1").unwrap(), SymmetricFamily::normal(), 2).unwrap();
//! let run = run_tests(&spec, &data, &FitOptions::default()).unwrap();
//! assert!(run.report.s_lr >= 0.0);
//! ```

pub mod bootstrap;
pub mod corrections;
pub mod dual;
pub mod error;
pub mod estimation;
pub mod families;
pub mod formula;
pub mod hypothesis;
pub mod io;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod quadrature;
pub mod scalar;
pub mod streams;

pub use bootstrap::{bootstrap_tests, BootstrapOptions};
pub use corrections::{apply_corrections, bartlett_factors};
pub use error::{Error, Result};
pub use estimation::{fit, FitMode, FitOptions};
pub use families::SymmetricFamily;
pub use formula::{parse_formula, MeanFormula};
pub use hypothesis::{chi2_pvalue, run_tests};
pub use io::{load_dataset, ColumnMap, CsvTable};
pub use montecarlo::{run_power_experiment, run_size_experiment, RejectionTable, SimulationConfig, Statistic};

pub type Dataset = model::Dataset<f64>;
pub type ModelSpec = model::ModelSpec<f64>;
pub type FitResult = estimation::FitResult<f64>;
pub type TestReport = hypothesis::TestReport<f64>;
pub type TestRun = hypothesis::TestRun<f64>;
pub type BartlettFactors = corrections::BartlettFactors<f64>;
pub type BootstrapResult = bootstrap::BootstrapResult<f64>;
