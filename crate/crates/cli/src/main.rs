//! `hsnlm` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning                                                  |
//! |------|----------------------------------------------------------|
//! | 0    | success                                                  |
//! | 2    | bad command line                                         |
//! | 3    | unreadable or malformed input data                       |
//! | 4    | invalid model, formula, family or configuration          |
//! | 5    | degenerate hypothesis (nothing to test, k = 1)           |
//! | 6    | numerical failure (no convergence, singular information) |
//! | 7    | output could not be written                              |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hsnlm::bootstrap::{bootstrap_tests, BootstrapOptions};
use hsnlm::estimation::{fit, standard_errors, FitMode, FitOptions};
use hsnlm::hypothesis::run_tests;
use hsnlm::montecarlo::{
    parse_grid, run_power_experiment, run_size_experiment, Experiment, SimulationConfig, Statistic,
};
use hsnlm::{
    apply_corrections, BootstrapResult, ColumnMap, CsvTable, Dataset, Error, MeanFormula, ModelSpec, SymmetricFamily,
};

#[derive(Parser, Debug)]
#[command(name = "hsnlm", version, about = "Heteroscedastic symmetric nonlinear regression: fits and dispersion tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the full model and print estimates with standard errors.
    Fit(DataArgs),
    /// Test the tested dispersion coefficients: S_LR, S_r, S_g and corrected versions.
    Test(TestArgs),
    /// Parametric bootstrap of S_LR, S_r and S_g under the null fit.
    Bootstrap(BootArgs),
    /// Monte Carlo null rejection rates.
    Simulate(SimArgs),
    /// Monte Carlo rejection rates over a grid of tested-coefficient values.
    Power(SimArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mean formula over b0, b1, … and x1, x2, … (x's follow --xcols order).
    #[arg(long)]
    formula: Option<String>,
    /// normal, t(nu) or pe(kappa).
    #[arg(long)]
    family: Option<String>,
    /// Response column.
    #[arg(long)]
    ycol: Option<String>,
    /// Mean covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    xcols: Option<Vec<String>>,
    /// Dispersion covariate columns, comma separated (intercept is implicit).
    #[arg(long, value_delimiter = ',')]
    wcols: Option<Vec<String>>,
    /// Dispersion columns under test; defaults to every --wcols column.
    #[arg(long, value_delimiter = ',')]
    test_cols: Option<Vec<String>>,
    /// Hypothesised values of the tested coefficients; defaults to zeros.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    hyp: Option<Vec<f64>>,
    /// Model the log of the response column.
    #[arg(long)]
    log_y: bool,
    /// Flat `key = value` file; keys are the long flag names, command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for text and CSV results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also bootstrap the statistics with this many replicates.
    #[arg(long = "boot-B")]
    boot_b: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct BootArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Bootstrap replicates.
    #[arg(long = "B", alias = "boot-B", default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nominal levels for the percentile decisions.
    #[arg(long, value_delimiter = ',', default_value = "0.10,0.05,0.01")]
    alpha: Vec<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Flat `key = value` experiment configuration; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// One or more dispersion dimensions; each becomes a table column.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Nominal levels.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Statistics to tally, e.g. S_LR,S_r,S_g_boot.
    #[arg(long, value_delimiter = ',')]
    statistics: Option<Vec<String>>,
    /// Bootstrap replicates for bootstrap statistics.
    #[arg(long = "boot-B")]
    boot_b: Option<usize>,
    /// Power grid, `start:end:step` or a comma list.
    #[arg(long)]
    grid: Option<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
struct StageError {
    stage: &'static str,
    code: u8,
    message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Ingestion { .. } | Error::InvalidData(_) | Error::DimensionMismatch(_) | Error::Io(_) => 3,
        Error::InvalidFamily(_)
        | Error::Syntax { .. }
        | Error::UnknownSymbol { .. }
        | Error::Config(_)
        | Error::MismatchedFits(_) => 4,
        Error::DegenerateHypothesis => 5,
        Error::NonSmoothAtOrigin
        | Error::MomentDivergence(_)
        | Error::DivisionByZero(_)
        | Error::Domain(_)
        | Error::SingularInformation(_)
        | Error::NoConvergence { .. }
        | Error::TooManyFailures { .. } => 6,
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for hsnlm::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, code: exit_code(&e), message: e.to_string() })
    }
}

fn config_error(stage: &'static str, message: impl Into<String>) -> StageError {
    StageError { stage, code: 4, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<StageError>().map_or(1, |s| s.code);
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Test(args) => cmd_test(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Simulate(args) => cmd_simulate(args, false),
        Command::Power(args) => cmd_simulate(args, true),
    }
}

fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, StageError> {
    let text = fs::read_to_string(path).map_err(|e| StageError {
        stage: "reading config",
        code: 3,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_error("reading config", format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// A fully resolved data-command setup.
struct Problem {
    spec: ModelSpec,
    data: Dataset,
    out: Option<PathBuf>,
    family: SymmetricFamily,
    formula: MeanFormula,
    formula_text: String,
    columns: ColumnMap,
}

impl DataArgs {
    fn merge_config(mut self) -> Result<Self, StageError> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        for (k, v) in read_key_values(&path)? {
            match k.as_str() {
                "data" => _ = self.data.get_or_insert_with(|| PathBuf::from(&v)),
                "formula" => _ = self.formula.get_or_insert(v),
                "family" => _ = self.family.get_or_insert(v),
                "ycol" => _ = self.ycol.get_or_insert(v),
                "xcols" => _ = self.xcols.get_or_insert_with(|| split_list(&v)),
                "wcols" => _ = self.wcols.get_or_insert_with(|| split_list(&v)),
                "test_cols" => _ = self.test_cols.get_or_insert_with(|| split_list(&v)),
                "hyp" => {
                    if self.hyp.is_none() {
                        let vals = split_list(&v)
                            .iter()
                            .map(|s| s.parse::<f64>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|_| config_error("reading config", format!("bad hyp list '{v}'")))?;
                        self.hyp = Some(vals);
                    }
                }
                "log_y" => self.log_y |= matches!(v.as_str(), "true" | "1" | "yes"),
                "out" => _ = self.out.get_or_insert_with(|| PathBuf::from(&v)),
                _ => return Err(config_error("reading config", format!("unknown key '{k}'"))),
            }
        }
        Ok(self)
    }

    fn resolve(self) -> Result<Problem, StageError> {
        let args = self.merge_config()?;
        let data_path = args.data.ok_or_else(|| config_error("parsing arguments", "--data is required"))?;
        let formula_text = args.formula.ok_or_else(|| config_error("parsing arguments", "--formula is required"))?;
        let ycol = args.ycol.unwrap_or_else(|| "y".into());
        let formula: MeanFormula = formula_text.parse().stage("parsing formula")?;
        let family: SymmetricFamily = args.family.as_deref().unwrap_or("normal").parse().stage("parsing family")?;
        let xcols = match args.xcols {
            Some(x) => x,
            None => (1..=formula.covariate_count()).map(|j| format!("x{j}")).collect(),
        };
        let wcols = args.wcols.unwrap_or_default();
        let columns = ColumnMap { y: ycol, x: xcols, w: wcols };

        let table = CsvTable::from_path(&data_path).stage("reading data")?;
        let mut data: Dataset = columns.dataset(&table).stage("reading data")?;
        if args.log_y {
            let y = data.y().to_owned();
            if y.iter().any(|&v| v <= 0.0) {
                return Err(StageError {
                    stage: "reading data",
                    code: 3,
                    message: "--log-y needs positive responses".into(),
                });
            }
            data = data.with_response(y.mapv(f64::ln));
        }
        if formula.covariate_count() > data.x().ncols() {
            return Err(config_error(
                "building model",
                format!("formula uses {} covariates, {} mapped", formula.covariate_count(), data.x().ncols()),
            ));
        }
        let k = data.k();
        let tested: Vec<usize> = match &args.test_cols {
            None => (1..k).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    columns.w.iter().position(|w| w == n).map(|j| j + 1).ok_or_else(|| {
                        config_error("building model", format!("test column `{n}` is not among --wcols"))
                    })
                })
                .collect::<Result<_, _>>()?,
        };
        let hyp = args.hyp.unwrap_or_else(|| vec![0.0; tested.len()]);
        let spec =
            ModelSpec::with_partition(formula.clone(), family.clone(), k, tested, hyp).stage("building model")?;
        spec.check(&data).stage("building model")?;
        Ok(Problem { spec, data, out: args.out, family, formula, formula_text, columns })
    }
}

fn write_outputs(dir: Option<&Path>, files: &[(&str, String)]) -> anyhow::Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let fail = |e: std::io::Error, what: &Path| StageError {
        stage: "writing output",
        code: 7,
        message: format!("{}: {e}", what.display()),
    };
    fs::create_dir_all(dir).map_err(|e| fail(e, dir))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| fail(e, &path))?;
    }
    Ok(())
}

fn install_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global().context("starting worker threads")?;
    }
    Ok(())
}

fn header(p: &Problem) -> String {
    format!(
        "family: {}\nformula: {}\nresponse: {}\nn = {}, p = {}, k = {}\n",
        p.family,
        p.formula_text.trim(),
        p.columns.y,
        p.data.n(),
        p.spec.p(),
        p.spec.k()
    )
}

fn cmd_fit(args: DataArgs) -> anyhow::Result<()> {
    let prob = args.resolve()?;
    let f = fit(&prob.spec, &prob.data, FitMode::Full, &FitOptions::default()).stage("fitting full model")?;
    let (se_b, se_d) = standard_errors(&f).stage("computing standard errors")?;
    let names = prob.formula.param_names();
    let mut text = header(&prob);
    text.push_str(&format!("log-likelihood = {:.6}\niterations = {}\n\n", f.loglik, f.iterations));
    text.push_str(&format!("{:<10} {:>14} {:>14}\n", "parameter", "estimate", "std.error"));
    let mut csv = String::from("parameter,estimate,std_error\n");
    let mut rows: Vec<(String, f64, f64)> =
        names.iter().enumerate().map(|(j, nm)| (nm.clone(), f.beta_hat[j], se_b[j])).collect();
    rows.extend((0..f.delta_hat.len()).map(|j| (format!("delta{j}"), f.delta_hat[j], se_d[j])));
    for (nm, est, se) in &rows {
        text.push_str(&format!("{nm:<10} {est:>14.6} {se:>14.6}\n"));
        csv.push_str(&format!("{nm},{est},{se}\n"));
    }
    print!("{text}");
    write_outputs(prob.out.as_deref(), &[("fit.txt", text), ("fit.csv", csv)])
}

fn cmd_test(args: TestArgs) -> anyhow::Result<()> {
    install_threads(args.threads)?;
    let prob = args.data.resolve()?;
    let opts = FitOptions::default();
    let run = run_tests(&prob.spec, &prob.data, &opts).stage("fitting models")?;
    let mut report =
        apply_corrections(&run.report, &run.restricted, &prob.spec, &prob.data).stage("computing corrections")?;
    if let Some(b) = args.boot_b {
        let bo = BootstrapOptions { replicates: b, seed: args.seed, fit: opts, ..Default::default() };
        let res = bootstrap_tests(&prob.spec, &prob.data, &run.restricted, &report, &bo).stage("bootstrapping")?;
        report.bootstrap = Some(res.p_values());
    }
    let text = format!("{}\n{}", header(&prob), report.to_text());
    print!("{text}");
    write_outputs(prob.out.as_deref(), &[("report.txt", text), ("report.csv", report.to_csv())])
}

fn bootstrap_text(res: &BootstrapResult, seed: u64) -> String {
    let mut s = format!("B = {}, seed = {seed}, redrawn replicates = {}\n", res.replicates, res.redraws);
    s.push_str(&format!("{:<6} {:>10} {:>8}", "stat", "observed", "p*"));
    for (a, _) in &res.lr.critical {
        s.push_str(&format!(" {:>12}", format!("q(1-{a})")));
    }
    s.push('\n');
    for (name, sb) in [("S_LR", &res.lr), ("S_r", &res.score), ("S_g", &res.gradient)] {
        s.push_str(&format!("{name:<6} {:>10.3} {:>8.3}", sb.observed, sb.p_value));
        for (_, q) in &sb.critical {
            s.push_str(&format!(" {q:>12.3}"));
        }
        s.push('\n');
    }
    s
}

fn cmd_bootstrap(args: BootArgs) -> anyhow::Result<()> {
    install_threads(args.threads)?;
    let prob = args.data.resolve()?;
    let opts = FitOptions::default();
    let run = run_tests(&prob.spec, &prob.data, &opts).stage("fitting models")?;
    let bo = BootstrapOptions { replicates: args.b, seed: args.seed, alphas: args.alpha, fit: opts, parallel: true };
    let res = bootstrap_tests(&prob.spec, &prob.data, &run.restricted, &run.report, &bo).stage("bootstrapping")?;
    let text = format!("{}\n{}", header(&prob), bootstrap_text(&res, args.seed));
    let mut csv = String::from("replicate,S_LR,S_r,S_g\n");
    for i in 0..res.replicates {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            i, res.lr.replicates[i], res.score.replicates[i], res.gradient.replicates[i]
        ));
    }
    print!("{text}");
    write_outputs(prob.out.as_deref(), &[("bootstrap.txt", text), ("bootstrap_replicates.csv", csv)])
}

impl SimArgs {
    /// Base configuration plus the list of `k` columns to run.
    fn resolve(&self, power: bool) -> Result<(SimulationConfig, Vec<usize>), StageError> {
        let mut cfg = SimulationConfig::default();
        if power {
            cfg.k = 4;
        }
        if let Some(path) = &self.config {
            for (k, v) in read_key_values(path)? {
                cfg.set(&k, &v).stage("reading config")?;
            }
        }
        let set = |cfg: &mut SimulationConfig, key: &str, v: String| cfg.set(key, &v).stage("parsing arguments");
        if let Some(f) = &self.family {
            set(&mut cfg, "family", f.clone())?;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(p) = self.p {
            cfg.p = p;
        }
        if let Some(r) = self.reps {
            cfg.reps = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.alpha {
            cfg.levels = a.clone();
        }
        if let Some(st) = &self.statistics {
            cfg.statistics =
                st.iter().map(|s| s.parse::<Statistic>()).collect::<hsnlm::Result<_>>().stage("parsing arguments")?;
        }
        if let Some(b) = self.boot_b {
            cfg.bootstrap_b = b;
        }
        if let Some(g) = &self.grid {
            cfg.grid = Some(parse_grid(g).stage("parsing arguments")?);
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        let ks = self.k.clone().unwrap_or_else(|| vec![cfg.k]);
        if ks.is_empty() {
            return Err(config_error("parsing arguments", "--k needs at least one value"));
        }
        if power && ks.len() > 1 {
            return Err(config_error("parsing arguments", "power runs take a single k"));
        }
        if power && cfg.grid.is_none() {
            return Err(config_error("parsing arguments", "power needs --grid"));
        }
        for &k in &ks {
            SimulationConfig { k, ..cfg.clone() }.validate().stage("validating experiment")?;
        }
        Ok((cfg, ks))
    }
}

fn cmd_simulate(args: SimArgs, power: bool) -> anyhow::Result<()> {
    let (cfg, ks) = args.resolve(power)?;
    let mut runs: Vec<(SimulationConfig, Experiment)> = Vec::new();
    for k in ks {
        let c = SimulationConfig { k, ..cfg.clone() };
        let exp = if power {
            run_power_experiment(&c, c.grid.as_deref().unwrap_or_default())
        } else {
            run_size_experiment(&c)
        }
        .stage("running experiment")?;
        runs.push((c, exp));
    }
    let mut table = runs[0].1.table.clone();
    for (_, e) in &runs[1..] {
        table.merge(e.table.clone());
    }
    let title = if power { "Non-null rejection rates (%)" } else { "Null rejection rates (%)" };
    let mut text = format!("{title}: family {}, n = {}, p = {}\n", cfg.family, cfg.n, cfg.p);
    text.push_str(&table.to_text());
    let mut manifest = String::new();
    let mut configs = String::new();
    for (c, e) in &runs {
        manifest.push_str(&format!("[k = {}]\n{}", c.k, e.manifest.to_text()));
        configs.push_str(&format!("# k = {}\n{}", c.k, c.to_config_text()));
    }
    print!("{text}");
    let csv = table.to_csv().context("rendering table")?;
    write_outputs(
        args.out.as_deref(),
        &[("table.txt", text), ("table.csv", csv), ("manifest.txt", manifest), ("config.txt", configs)],
    )
}
