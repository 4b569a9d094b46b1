//! Size and power experiments.
//!
//! The mean is `b0 + exp(b1*x1) + b2*x2 + … + b_{p-1}*x_{p-1}` and the
//! dispersion design has an intercept plus `k-1` covariates. All covariates
//! are drawn once from U(0,1) and held fixed across replications. Under the
//! null every tested `δ` is zero and `δ₀` is the dispersion intercept.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bootstrap::{bootstrap_tests, BootstrapOptions, MAX_FAILURE_RATE};
use crate::corrections::bartlett_factors;
use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::families::SymmetricFamily;
use crate::formula::{parse_formula, MeanFormula};
use crate::hypothesis::{chi2_pvalue, run_tests_from};
use crate::model::{dispersion, Dataset, ModelSpec};
use crate::streams::{attempt_stream, child_seed, substream};

/// Statistics an experiment can tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Statistic {
    Lr,
    LrCorrected,
    Score,
    Gradient,
    GradientCorrected,
    LrBoot,
    ScoreBoot,
    GradientBoot,
}

impl Statistic {
    pub const ASYMPTOTIC: [Statistic; 5] =
        [Statistic::Lr, Statistic::LrCorrected, Statistic::Score, Statistic::Gradient, Statistic::GradientCorrected];
    pub const BOOTSTRAP: [Statistic; 3] = [Statistic::LrBoot, Statistic::ScoreBoot, Statistic::GradientBoot];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Lr => "S_LR",
            Statistic::LrCorrected => "S_LR*",
            Statistic::Score => "S_r",
            Statistic::Gradient => "S_g",
            Statistic::GradientCorrected => "S_g*",
            Statistic::LrBoot => "S_LR_boot",
            Statistic::ScoreBoot => "S_r_boot",
            Statistic::GradientBoot => "S_g_boot",
        }
    }

    pub fn is_bootstrap(self) -> bool {
        Self::BOOTSTRAP.contains(&self)
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ASYMPTOTIC
            .iter()
            .chain(Self::BOOTSTRAP.iter())
            .copied()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown statistic '{s}'")))
    }
}

/// How the true dispersion parameters are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generation {
    /// Tested coefficients at zero.
    Null,
    /// `δ = (0.1, 0, 0.3, 0.5, 1, 1, 1)` truncated to `k`.
    Preset,
}

/// Dispersion coefficients of the alternative-generation preset.
pub const PRESET_DELTA: [f64; 7] = [0.1, 0.0, 0.3, 0.5, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub family: SymmetricFamily,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub reps: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub statistics: Vec<Statistic>,
    /// Bootstrap replicates per Monte Carlo replication, when bootstrap statistics are requested.
    pub bootstrap_b: usize,
    /// Common value of the tested coefficients for each power cell.
    pub grid: Option<Vec<f64>>,
    /// True mean parameters; empty means all ones.
    pub beta: Vec<f64>,
    pub delta0: f64,
    pub generation: Generation,
    pub fit: FitOptions,
    /// Worker threads; `None` uses every core. Never affects results.
    pub threads: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            family: SymmetricFamily::normal(),
            n: 30,
            p: 3,
            k: 3,
            reps: 10_000,
            levels: vec![0.10, 0.05, 0.01],
            seed: 42,
            statistics: Statistic::ASYMPTOTIC.to_vec(),
            bootstrap_b: 500,
            grid: None,
            beta: Vec::new(),
            delta0: 0.1,
            generation: Generation::Null,
            fit: FitOptions::default(),
            threads: None,
        }
    }
}

fn list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("bad value '{s}' for {key}"))))
        .collect()
}

fn scalar<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `a:b:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.len() {
        1 => list(text, "grid"),
        3 => {
            let a: f64 = scalar(parts[0], "grid")?;
            let b: f64 = scalar(parts[1], "grid")?;
            let step: f64 = scalar(parts[2], "grid")?;
            if !(step > 0.0) || b < a {
                return Err(Error::Config(format!("grid '{text}' needs start <= end and a positive step")));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=count).map(|i| a + i as f64 * step).collect())
        }
        _ => Err(Error::Config(format!("grid '{text}' is neither a:b:step nor a list"))),
    }
}

impl SimulationConfig {
    /// Reads flat `key = value` text. Lines starting with `#` are comments.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "family" => self.family = v.parse()?,
            "n" => self.n = scalar(v, key)?,
            "p" => self.p = scalar(v, key)?,
            "k" => self.k = scalar(v, key)?,
            "reps" => self.reps = scalar(v, key)?,
            "levels" => self.levels = list(v, key)?,
            "seed" => self.seed = scalar(v, key)?,
            "statistics" => self.statistics = list(v, key)?,
            "bootstrap_b" => self.bootstrap_b = scalar(v, key)?,
            "grid" => self.grid = if v.is_empty() { None } else { Some(parse_grid(v)?) },
            "beta" => self.beta = list(v, key)?,
            "delta0" => self.delta0 = scalar(v, key)?,
            "generation" => {
                self.generation = match v {
                    "null" => Generation::Null,
                    "preset" => Generation::Preset,
                    _ => return Err(Error::Config(format!("generation must be null or preset, got '{v}'"))),
                }
            }
            "tol" => self.fit.tol = scalar(v, key)?,
            "score_tol" => self.fit.score_tol = scalar(v, key)?,
            "max_iter" => self.fit.max_iter = scalar(v, key)?,
            "step_halving" => self.fit.step_halving = scalar(v, key)?,
            "threads" => self.threads = Some(scalar(v, key)?),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text of every result-affecting setting; `threads` is left out.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family = {}", self.family);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "p = {}", self.p);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "reps = {}", self.reps);
        let _ = writeln!(s, "levels = {}", join(&self.levels));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "statistics = {}", join(&self.statistics));
        let _ = writeln!(s, "bootstrap_b = {}", self.bootstrap_b);
        let _ = writeln!(s, "grid = {}", self.grid.as_deref().map(join).unwrap_or_default());
        let _ = writeln!(s, "beta = {}", join(&self.beta));
        let _ = writeln!(s, "delta0 = {}", self.delta0);
        let gen = match self.generation {
            Generation::Null => "null",
            Generation::Preset => "preset",
        };
        let _ = writeln!(s, "generation = {gen}");
        let _ = writeln!(s, "tol = {}", self.fit.tol);
        let _ = writeln!(s, "score_tol = {}", self.fit.score_tol);
        let _ = writeln!(s, "max_iter = {}", self.fit.max_iter);
        let _ = writeln!(s, "step_halving = {}", self.fit.step_halving);
        s
    }

    /// SHA-256 of the canonical configuration text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_config_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Config("levels must lie in (0, 1)".into()));
        }
        if self.k < 2 {
            return Err(Error::DegenerateHypothesis);
        }
        if self.p < 2 {
            return Err(Error::Config("p must be at least 2 (intercept and exponential term)".into()));
        }
        if self.n <= self.p + self.k {
            return Err(Error::Config(format!("n = {} is too small for p = {} and k = {}", self.n, self.p, self.k)));
        }
        if !self.beta.is_empty() && self.beta.len() != self.p {
            return Err(Error::Config(format!("beta has {} values, p = {}", self.beta.len(), self.p)));
        }
        if self.statistics.is_empty() {
            return Err(Error::Config("no statistics requested".into()));
        }
        if self.statistics.iter().any(|s| s.is_bootstrap()) && self.bootstrap_b < 100 {
            return Err(Error::Config("bootstrap_b must be at least 100".into()));
        }
        if self.generation == Generation::Preset && self.k > PRESET_DELTA.len() {
            return Err(Error::Config(format!("the preset covers k <= {}", PRESET_DELTA.len())));
        }
        Ok(())
    }

    /// `b0 + exp(b1*x1) + b2*x2 + … + b_{p-1}*x_{p-1}`.
    pub fn formula(&self) -> MeanFormula {
        let mut text = String::from("b0 + exp(b1*x1)");
        for s in 2..self.p {
            let _ = write!(text, " + b{s}*x{s}");
        }
        parse_formula(&text).expect("generated formula parses")
    }

    pub fn spec(&self) -> Result<ModelSpec<f64>> {
        ModelSpec::new(self.formula(), self.family.clone(), self.k)
    }

    /// Fixed covariates `x` (n×(p-1)) and dispersion covariates (n×(k-1)).
    pub fn design(&self) -> (Array2<f64>, Array2<f64>) {
        let mut rng = substream(self.seed, u64::MAX);
        let x = Array2::from_shape_fn((self.n, self.p - 1), |_| rng.random::<f64>());
        let w = Array2::from_shape_fn((self.n, self.k - 1), |_| rng.random::<f64>());
        (x, w)
    }

    fn true_beta(&self) -> Array1<f64> {
        if self.beta.is_empty() {
            Array1::ones(self.p)
        } else {
            Array1::from(self.beta.clone())
        }
    }

    fn true_delta(&self, tested_value: Option<f64>) -> Array1<f64> {
        let mut d = Array1::zeros(self.k);
        match (tested_value, self.generation) {
            (Some(g), _) => {
                d.fill(g);
                d[0] = self.delta0;
            }
            (None, Generation::Null) => d[0] = self.delta0,
            (None, Generation::Preset) => d.assign(&Array1::from(PRESET_DELTA[..self.k].to_vec())),
        }
        d
    }
}

/// Rejection tally for one statistic at one level in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionCell {
    pub statistic: String,
    pub level: f64,
    pub cell: String,
    pub rejections: usize,
    pub replications: usize,
    pub failures: usize,
}

impl RejectionCell {
    pub fn rate(&self) -> f64 {
        self.rejections as f64 / self.replications as f64
    }

    /// Monte Carlo standard error `√(r(1-r)/R)`.
    pub fn mc_se(&self) -> f64 {
        let r = self.rate();
        (r * (1.0 - r) / self.replications as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectionTable {
    pub cells: Vec<RejectionCell>,
}

const CSV_HEADER: [&str; 8] = ["statistic", "level", "cell", "rejections", "replications", "failures", "rate", "mc_se"];

impl RejectionTable {
    pub fn get(&self, statistic: &str, level: f64, cell: &str) -> Option<&RejectionCell> {
        self.cells.iter().find(|c| c.statistic == statistic && c.level == level && c.cell == cell)
    }

    pub fn merge(&mut self, other: RejectionTable) {
        self.cells.extend(other.cells);
    }

    fn distinct<K: PartialEq + Clone>(&self, f: impl Fn(&RejectionCell) -> K) -> Vec<K> {
        let mut out: Vec<K> = Vec::new();
        for c in &self.cells {
            let k = f(c);
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    /// Aligned table: statistics as rows, cells as columns grouped by level,
    /// percentages to one decimal place.
    pub fn to_text(&self) -> String {
        let stats = self.distinct(|c| c.statistic.clone());
        let levels = self.distinct(|c| c.level);
        let cells = self.distinct(|c| c.cell.clone());
        let labels: Vec<String> = levels.iter().map(|a| format!("alpha = {}%", (a * 1000.0).round() / 10.0)).collect();
        let label_len = labels.iter().map(|l| l.len() + 2).max().unwrap_or(0);
        let width =
            (cells.iter().map(|c| c.len()).max().unwrap_or(0).max(6) + 2).max(label_len.div_ceil(cells.len().max(1)));
        let group = width * cells.len();
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "");
        for l in &labels {
            let _ = write!(out, "{l:>group$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "statistic");
        for _ in &levels {
            for c in &cells {
                let _ = write!(out, "{c:>width$}");
            }
        }
        out.push('\n');
        for s in &stats {
            let _ = write!(out, "{s:<12}");
            for &a in &levels {
                for c in &cells {
                    match self.get(s, a, c) {
                        Some(cell) => {
                            let _ = write!(out, "{:>width$.1}", 100.0 * cell.rate());
                        }
                        None => {
                            let _ = write!(out, "{:>width$}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        let mut failures: Vec<(String, usize, usize)> = Vec::new();
        for c in &self.cells {
            if !failures.iter().any(|f| f.0 == c.cell) {
                failures.push((c.cell.clone(), c.failures, c.replications));
            }
        }
        for (cell, f, r) in failures {
            let _ = writeln!(out, "{cell}: {r} replications, {f} redrawn after fit failure");
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(CSV_HEADER).map_err(io)?;
        for c in &self.cells {
            w.write_record([
                c.statistic.clone(),
                c.level.to_string(),
                c.cell.clone(),
                c.rejections.to_string(),
                c.replications.to_string(),
                c.failures.to_string(),
                c.rate().to_string(),
                c.mc_se().to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Ingestion { row: 1, msg: e.to_string() })?.clone();
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Ingestion { row: 1, msg: "unexpected rejection-table header".into() });
        }
        let mut cells = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Ingestion { row, msg: e.to_string() })?;
            let num = |j: usize| -> Result<f64> {
                rec[j].parse().map_err(|_| Error::Ingestion { row, msg: format!("bad number '{}'", &rec[j]) })
            };
            let int = |j: usize| -> Result<usize> {
                rec[j].parse().map_err(|_| Error::Ingestion { row, msg: format!("bad count '{}'", &rec[j]) })
            };
            let cell = RejectionCell {
                statistic: rec[0].to_string(),
                level: num(1)?,
                cell: rec[2].to_string(),
                rejections: int(3)?,
                replications: int(4)?,
                failures: int(5)?,
            };
            if cell.rate() != num(6)? {
                return Err(Error::Ingestion { row, msg: "rate does not match the counts".into() });
            }
            cells.push(cell);
        }
        Ok(Self { cells })
    }
}

/// Statistic values and decisions of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    /// One value per configured statistic; bootstrap entries hold `p*`.
    pub values: Vec<f64>,
    /// `[statistic][level]` rejection flags.
    pub rejects: Vec<Vec<bool>>,
    pub redraws: usize,
}

/// Per-cell outcome with the raw replications.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub label: String,
    pub replicates: Vec<Replicate>,
}

impl CellOutcome {
    pub fn failures(&self) -> usize {
        self.replicates.iter().map(|r| r.redraws).sum()
    }

    /// Values of the `i`-th configured statistic.
    pub fn values(&self, i: usize) -> Vec<f64> {
        self.replicates.iter().map(|r| r.values[i]).collect()
    }
}

/// Record of what was run.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub replications: usize,
    pub failures: Vec<(String, usize)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_sha256 = {}", self.config_hash);
        let _ = writeln!(s, "replications = {}", self.replications);
        for (cell, f) in &self.failures {
            let _ = writeln!(s, "failures[{cell}] = {f}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub table: RejectionTable,
    pub cells: Vec<CellOutcome>,
    pub manifest: Manifest,
}

struct Cell {
    label: String,
    seed: u64,
    delta: Array1<f64>,
}

/// Null rejection rates at the configured design.
pub fn run_size_experiment(cfg: &SimulationConfig) -> Result<Experiment> {
    cfg.validate()?;
    let cell = Cell { label: format!("k={}", cfg.k), seed: cell_seed(cfg.seed, 0.0), delta: cfg.true_delta(None) };
    run_cells(cfg, vec![cell])
}

/// Rejection rates of `H₀: δ₁ = … = 0` when every tested coefficient equals each grid value.
pub fn run_power_experiment(cfg: &SimulationConfig, grid: &[f64]) -> Result<Experiment> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("empty power grid".into()));
    }
    let cells = grid
        .iter()
        .map(|&g| Cell { label: format!("delta={g}"), seed: cell_seed(cfg.seed, g), delta: cfg.true_delta(Some(g)) })
        .collect();
    run_cells(cfg, cells)
}

/// Cells are seeded by their tested value, so the null cell of a power run
/// replays the size experiment exactly.
fn cell_seed(seed: u64, tested_value: f64) -> u64 {
    child_seed(seed, (tested_value + 0.0).to_bits())
}

fn run_cells(cfg: &SimulationConfig, cells: Vec<Cell>) -> Result<Experiment> {
    let work = || -> Result<Vec<CellOutcome>> { cells.iter().map(|c| run_cell(cfg, c)).collect() };
    let outcomes = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let mut table = RejectionTable::default();
    for out in &outcomes {
        let failures = out.failures();
        for (si, st) in cfg.statistics.iter().enumerate() {
            for (li, &level) in cfg.levels.iter().enumerate() {
                table.cells.push(RejectionCell {
                    statistic: st.name().to_string(),
                    level,
                    cell: out.label.clone(),
                    rejections: out.replicates.iter().filter(|r| r.rejects[si][li]).count(),
                    replications: out.replicates.len(),
                    failures,
                });
            }
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        replications: cfg.reps,
        failures: outcomes.iter().map(|o| (o.label.clone(), o.failures())).collect(),
    };
    Ok(Experiment { table, cells: outcomes, manifest })
}

fn run_cell(cfg: &SimulationConfig, cell: &Cell) -> Result<CellOutcome> {
    let spec = cfg.spec()?;
    let (x, wcov) = cfg.design();
    let beta = cfg.true_beta();
    let template = Dataset::new(Array1::zeros(cfg.n), x, wcov)?;
    let mu = spec.formula.means(template.x(), beta.view())?;
    let scale = dispersion(template.w(), cell.delta.view()).mapv(f64::sqrt);
    let max_failures = (MAX_FAILURE_RATE * cfg.reps as f64).floor() as usize;
    let ctx = CellContext { cfg, spec: &spec, template: &template, mu: &mu, scale: &scale, seed: cell.seed };

    let outcomes: Vec<Option<Replicate>> =
        (0..cfg.reps).into_par_iter().map(|r| ctx.replicate(r, max_failures)).collect();
    let mut replicates = Vec::with_capacity(cfg.reps);
    let mut failures = 0;
    for o in outcomes {
        match o {
            Some(rep) => {
                failures += rep.redraws;
                replicates.push(rep);
            }
            None => failures += max_failures + 1,
        }
        if failures > max_failures {
            return Err(Error::TooManyFailures { failures, requested: cfg.reps });
        }
    }
    Ok(CellOutcome { label: cell.label.clone(), replicates })
}

struct CellContext<'a> {
    cfg: &'a SimulationConfig,
    spec: &'a ModelSpec<f64>,
    template: &'a Dataset<f64>,
    mu: &'a Array1<f64>,
    scale: &'a Array1<f64>,
    seed: u64,
}

impl CellContext<'_> {
    fn replicate(&self, index: usize, max_failures: usize) -> Option<Replicate> {
        (0..=max_failures).find_map(|attempt| {
            self.attempt(index, attempt).ok().map(|mut r| {
                r.redraws = attempt;
                r
            })
        })
    }

    fn attempt(&self, index: usize, attempt: usize) -> Result<Replicate> {
        let cfg = self.cfg;
        let mut rng = substream(self.seed, attempt_stream(index, attempt));
        let z: Vec<f64> = self.spec.family.sample_standardized(cfg.n, &mut rng);
        let y = Array1::from_iter((0..cfg.n).map(|l| self.mu[l] + self.scale[l] * z[l]));
        let data = self.template.with_response(y);
        let run = run_tests_from(self.spec, &data, &cfg.fit, None)?;
        let report = &run.report;
        let needs_corrections =
            cfg.statistics.iter().any(|s| matches!(s, Statistic::LrCorrected | Statistic::GradientCorrected));
        let factors = if needs_corrections { Some(bartlett_factors(&run.restricted, self.spec, &data)?) } else { None };
        let boot = if cfg.statistics.iter().any(|s| s.is_bootstrap()) {
            let opts = BootstrapOptions {
                replicates: cfg.bootstrap_b,
                seed: child_seed(self.seed, attempt_stream(index, attempt)),
                alphas: cfg.levels.clone(),
                fit: cfg.fit.clone(),
                parallel: false,
            };
            Some(bootstrap_tests(self.spec, &data, &run.restricted, report, &opts)?)
        } else {
            None
        };
        let df = report.df;
        let mut values = Vec::with_capacity(cfg.statistics.len());
        let mut rejects = Vec::with_capacity(cfg.statistics.len());
        for st in &cfg.statistics {
            let (value, flags): (f64, Vec<bool>) = match st {
                Statistic::Lr | Statistic::Score | Statistic::Gradient => {
                    let s = match st {
                        Statistic::Lr => report.s_lr,
                        Statistic::Score => report.s_r,
                        _ => report.s_g,
                    };
                    let p = chi2_pvalue(s, df);
                    (s, cfg.levels.iter().map(|&a| p < a).collect())
                }
                Statistic::LrCorrected => {
                    let s = factors.as_ref().expect("factors computed").corrected_lr(report.s_lr);
                    let p = chi2_pvalue(s, df);
                    (s, cfg.levels.iter().map(|&a| p < a).collect())
                }
                Statistic::GradientCorrected => {
                    let (s, _) = factors.as_ref().expect("factors computed").corrected_gradient(report.s_g);
                    let p = chi2_pvalue(s, df);
                    (s, cfg.levels.iter().map(|&a| p < a).collect())
                }
                Statistic::LrBoot | Statistic::ScoreBoot | Statistic::GradientBoot => {
                    let b = boot.as_ref().expect("bootstrap computed");
                    let sb = match st {
                        Statistic::LrBoot => &b.lr,
                        Statistic::ScoreBoot => &b.score,
                        _ => &b.gradient,
                    };
                    (sb.p_value, cfg.levels.iter().map(|&a| sb.rejects(a)).collect())
                }
            };
            values.push(value);
            rejects.push(flags);
        }
        Ok(Replicate { values, rejects, redraws: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulationConfig {
        SimulationConfig { n: 20, reps: 40, seed: 3, ..Default::default() }
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = small();
        cfg.family = "t(5)".parse().unwrap();
        cfg.grid = Some(vec![0.5, 1.0]);
        cfg.statistics = vec![Statistic::Lr, Statistic::ScoreBoot];
        let back = SimulationConfig::from_config_text(&cfg.to_config_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.threads = Some(3);
        assert_eq!(other.hash(), cfg.hash());
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(SimulationConfig::from_config_text("nonsense"), Err(Error::Config(_))));
        assert!(matches!(SimulationConfig::from_config_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(SimulationConfig::from_config_text("k = 1"), Err(Error::DegenerateHypothesis)));
        assert!(matches!(SimulationConfig::from_config_text("levels = 0.05, 1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.5:4.0:0.5").unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[7], 4.0);
        assert_eq!(parse_grid("1, 2,3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(parse_grid("1:0:1").is_err());
    }

    #[test]
    fn formula_and_design_shapes() {
        let cfg = SimulationConfig { p: 4, k: 5, ..small() };
        assert_eq!(cfg.formula().param_count(), 4);
        let (x, w) = cfg.design();
        assert_eq!(x.dim(), (20, 3));
        assert_eq!(w.dim(), (20, 4));
        assert_eq!(cfg.true_delta(None).to_vec(), vec![0.1, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(cfg.true_delta(Some(2.0)).to_vec(), vec![0.1, 2.0, 2.0, 2.0, 2.0]);
        let preset = SimulationConfig { generation: Generation::Preset, ..cfg };
        assert_eq!(preset.true_delta(None).to_vec(), vec![0.1, 0.0, 0.3, 0.5, 1.0]);
    }

    #[test]
    fn single_replication_gives_indicator_table() {
        let cfg = SimulationConfig { reps: 1, ..small() };
        let e = run_size_experiment(&cfg).unwrap();
        assert!(e.table.cells.iter().all(|c| c.rate() == 0.0 || c.rate() == 1.0));
        assert_eq!(e.table.cells.len(), 5 * 3);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let one = run_size_experiment(&SimulationConfig { threads: Some(1), ..small() }).unwrap();
        let three = run_size_experiment(&SimulationConfig { threads: Some(3), ..small() }).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn table_csv_round_trips() {
        let e = run_size_experiment(&small()).unwrap();
        let csv = e.table.to_csv().unwrap();
        assert_eq!(RejectionTable::from_csv(&csv).unwrap(), e.table);
        let text = e.table.to_text();
        assert!(text.contains("S_LR*"));
        assert!(text.contains("k=3"));
    }

    #[test]
    fn power_grid_zero_matches_size() {
        let cfg = small();
        let size = run_size_experiment(&cfg).unwrap();
        let power = run_power_experiment(&cfg, &[0.0]).unwrap();
        assert_eq!(power.cells[0].replicates, size.cells[0].replicates);
    }
}
