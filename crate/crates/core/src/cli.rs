//! Command line front end: run configuration, trajectory CSV files and the
//! output manifest.
//!
//! Every CSV value is written with 17 significant digits, so reading a file
//! back reproduces the `f64` bit pattern.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificate::certify;
use crate::error::{Error, Result};
use crate::experiments::{
    baseline_study, comparison_csv, comparison_table, dual_sweep, dual_sweep_csv, iterate_dump, iterate_dump_csv,
    n_sweep, n_sweep_csv, success_rate_study, BaselineConfig, BaselineRecord, InitRanges,
};
use crate::grid::{ControlTrajectory, StateTrajectory, TimeGrid};
use crate::model::{DoubleIntegratorParams, OcpModel, ProblemInstanceId};
use crate::pdp::{pdp_run, PdpConfig, PdpResult};

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "PDP_OUT_DIR";

const DEFAULT_OUT: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentKind {
    DualSweep,
    NSweep,
    SuccessRate,
    IterateDump,
    Baseline,
    /// Success rates of both step rules and the baseline per grid size.
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Grid sizes for the N-sweep and comparison; empty picks the model's default ladder.
    pub n_values: Vec<usize>,
    pub c_values: Vec<f64>,
    pub runs: usize,
    pub init: InitRanges,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::SuccessRate,
            n_values: Vec::new(),
            c_values: (0..=20).map(f64::from).collect(),
            runs: 20,
            init: InitRanges::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("experiment runs must be at least 1".into()));
        }
        if self.c_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("c values must be strictly increasing".into()));
        }
        if self.c_values.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("c values must be finite and nonnegative".into()));
        }
        if self.n_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("N values must be strictly increasing".into()));
        }
        if !(self.baseline.penalty > 0.0 && self.baseline.eps > 0.0) {
            return Err(Error::Config("baseline penalty and eps must be positive".into()));
        }
        self.baseline.inner.validate()?;
        self.init.validate()
    }

    /// `n_values`, or the model's default ladder ending at the comparison grid.
    pub fn grid_ladder(&self, model: ProblemInstanceId) -> Vec<usize> {
        if !self.n_values.is_empty() {
            return self.n_values.clone();
        }
        match model {
            ProblemInstanceId::FreeFlyingRobot => vec![39, 100, 500, 1000],
            _ => vec![20, 100, 500, 1000],
        }
    }
}

/// Declarative run description (TOML). The `pdp` table overrides fields of
/// the model's reference configuration for `step_rule`; a `step_rule` table
/// inside it replaces the rule as a whole. The top-level `seed` drives both
/// random initial guesses and the inner restart seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ProblemInstanceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub double_integrator: Option<DoubleIntegratorParams>,
    #[serde(rename = "N", default = "default_intervals")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rule")]
    pub step_rule: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdp: Option<toml::Table>,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_intervals() -> usize {
    100
}

fn default_rule() -> u8 {
    2
}

impl RunConfig {
    pub fn new(model: ProblemInstanceId) -> Self {
        Self {
            model,
            double_integrator: None,
            n: default_intervals(),
            seed: 0,
            step_rule: default_rule(),
            pdp: None,
            experiment: ExperimentSpec::default(),
            out: None,
        }
    }

    /// Parse and validate a TOML document; `path` only labels diagnostics.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        self.build_model()?;
        self.pdp_config()?;
        self.experiment.validate()
    }

    pub fn build_model(&self) -> Result<OcpModel> {
        match (self.model, &self.double_integrator) {
            (ProblemInstanceId::Custom, _) => Err(Error::Config("custom models cannot be built from a config".into())),
            (ProblemInstanceId::DoubleIntegrator, Some(p)) => p.build().map_err(|e| Error::Config(e.to_string())),
            (_, Some(_)) => Err(Error::Config("double_integrator parameters given for another model".into())),
            (id, None) => id.default_model(),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.build_model()?.t_final(), self.n)
    }

    /// Reference configuration with the `pdp` overrides applied and revalidated.
    pub fn pdp_config(&self) -> Result<PdpConfig> {
        let reference = PdpConfig::reference(self.model, self.step_rule).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = match &self.pdp {
            None => reference,
            Some(overrides) => {
                let mut base = toml::Table::try_from(&reference).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut base, overrides);
                toml::Value::Table(base)
                    .try_into::<PdpConfig>()
                    .map_err(|e| Error::Config(format!("pdp: {}", e.message())))?
            }
        };
        cfg.inner.seed = self.seed;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON of the resolved run.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    fn canonical_json(&self) -> Result<String> {
        let resolved = serde_json::json!({
            "run": self,
            "pdp": self.pdp_config()?,
        });
        Ok(serde_json::to_string(&resolved)?)
    }

    /// `--out`, then the environment override, then the config, then `out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "step_rule" => merge(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// `c` grid from `start:stop:step` (inclusive) or a comma list.
pub fn parse_c_grid(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number {s:?} in c grid {spec:?}")))
    };
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(Error::Config(format!("c grid {spec:?} is not start:stop:step")));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0 && stop >= start) {
            return Err(Error::Config(format!("c grid {spec:?} needs step > 0 and stop >= start")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + i as f64 * step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(Error::Config("empty c grid".into()));
    }
    Ok(values)
}

fn parse_list<T: std::str::FromStr>(spec: &str, what: &str) -> Result<Vec<T>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} {s:?} in {spec:?}")))
        })
        .collect()
}

/// `t,u1..um` with one row per interval, `t` the interval's left node.
pub fn controls_csv(u: &ControlTrajectory, grid: &TimeGrid) -> String {
    let mut out = String::from("t");
    for r in 1..=u.channels() {
        let _ = write!(out, ",u{r}");
    }
    out.push('\n');
    for j in 0..u.intervals() {
        let _ = write!(out, "{:.16e}", grid.time(j));
        for r in 0..u.channels() {
            let _ = write!(out, ",{:.16e}", u.get(r, j));
        }
        out.push('\n');
    }
    out
}

/// `t,x1..xn` with one row per node.
pub fn states_csv(x: &StateTrajectory, grid: &TimeGrid) -> String {
    let mut out = String::from("t");
    for p in 1..=x.dim() {
        let _ = write!(out, ",x{p}");
    }
    out.push('\n');
    for i in 0..x.nodes() {
        let _ = write!(out, "{:.16e}", grid.time(i));
        for p in 0..x.dim() {
            let _ = write!(out, ",{:.16e}", x.get(p, i));
        }
        out.push('\n');
    }
    out
}

/// Header plus numeric rows of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Numeric CSV with a header line. Errors carry the 1-based line number.
pub fn parse_csv(text: &str, path: &Path) -> Result<CsvTable> {
    let parse_error = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(parse_error(1, "missing header".into()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            parse_error(line, message)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_error(line, format!("column {:?}: {field:?} is not a number", header[col])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_error(2, "no data rows".into()));
    }
    Ok(CsvTable { header, rows })
}

fn expect_header(table: &CsvTable, prefix: char, path: &Path) -> Result<usize> {
    let width = table.header.len() - 1;
    let ok = table.header[0] == "t"
        && width > 0
        && table.header[1..]
            .iter()
            .enumerate()
            .all(|(i, h)| *h == format!("{prefix}{}", i + 1));
    if ok {
        Ok(width)
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header t,{prefix}1,..., found {}", table.header.join(",")),
        })
    }
}

/// Times and controls from a file written by [`controls_csv`].
pub fn read_controls(path: &Path) -> Result<(Vec<f64>, ControlTrajectory)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table = parse_csv(&text, path)?;
    let m = expect_header(&table, 'u', path)?;
    let times = table.rows.iter().map(|r| r[0]).collect();
    let u = ControlTrajectory::from_fn(m, table.rows.len(), |r, j| table.rows[j][r + 1])?;
    Ok((times, u))
}

/// Times and states from a file written by [`states_csv`].
pub fn read_states(path: &Path) -> Result<(Vec<f64>, StateTrajectory)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table = parse_csv(&text, path)?;
    let n = expect_header(&table, 'x', path)?;
    let times = table.rows.iter().map(|r| r[0]).collect();
    let nodes = table.rows.len();
    let values = (0..n).flat_map(|p| table.rows.iter().map(move |r| r[p + 1])).collect();
    Ok((times, StateTrajectory::from_flat(n, nodes, values)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub config_hash: String,
}

/// `manifest.json`: config echo, hashes of every emitted file, wall times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub files: Vec<ManifestEntry>,
    pub wall_seconds: f64,
    /// Per-run wall times of experiments (absent from the CSV reports).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub timings: serde_json::Value,
}

/// Output directory that records what it writes.
pub struct Output {
    dir: PathBuf,
    config_hash: String,
    files: Vec<ManifestEntry>,
}

impl Output {
    pub fn create(dir: PathBuf, config_hash: String) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            config_hash,
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(contents.as_bytes())),
            config_hash: self.config_hash.clone(),
        });
        Ok(())
    }

    pub fn finish(self, command: &str, cfg: &RunConfig, wall_seconds: f64, timings: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_hash: self.config_hash,
            config: serde_json::from_str(&cfg.canonical_json()?)?,
            files: self.files,
            wall_seconds,
            timings,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Scalar outcome of a solve, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub model: ProblemInstanceId,
    #[serde(rename = "N")]
    pub n: usize,
    pub step_rule: u8,
    pub status: crate::pdp::PdpStatus,
    pub exit_code: i32,
    pub iterations: usize,
    pub c: f64,
    pub q: f64,
    pub phi: f64,
    pub h_l1: f64,
    pub h_linf: f64,
    pub evaluations: usize,
    pub terminal_state: Vec<f64>,
}

impl SolveSummary {
    fn new(cfg: &RunConfig, r: &PdpResult) -> Self {
        let last = r.last();
        Self {
            model: cfg.model,
            n: cfg.n,
            step_rule: cfg.step_rule,
            status: r.status,
            exit_code: r.status.exit_code(),
            iterations: r.outer_iterations(),
            c: last.c,
            q: last.q,
            phi: last.phi,
            h_l1: last.h_l1,
            h_linf: last.h_linf,
            evaluations: r.evaluations,
            terminal_state: r.final_states.terminal(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pdp", version, about = "Primal-dual penalty solver for control-constrained optimal control")]
pub struct Cli {
    /// Cap on worker threads for experiments.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// double_integrator or free_flying_robot.
    #[arg(long)]
    pub model: Option<String>,
    /// Number of grid intervals.
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (otherwise $PDP_OUT_DIR, the config, or ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run PDP and write u.csv, x.csv, history.csv and summary.json.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        step_rule: Option<u8>,
        #[arg(long)]
        c0: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_outer: Option<usize>,
    },
    /// Dual function samples q(c); writes dual.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// start:stop:step or a comma list.
        #[arg(long)]
        c: Option<String>,
    },
    /// Experiment harness.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        kind: Option<ExperimentKind>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        step_rule: Option<u8>,
        /// Comma list of grid sizes.
        #[arg(long)]
        n_values: Option<String>,
        #[arg(long)]
        c: Option<String>,
    },
    /// Check a control file against the optimality conditions; writes certificate.json.
    Certify {
        #[command(flatten)]
        common: CommonArgs,
        /// Control file written by `solve`.
        #[arg(long)]
        u: PathBuf,
    },
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let Some(tag) = &common.model else {
                return Err(Error::Config("missing model tag: pass --model or --config".into()));
            };
            RunConfig::new(tag.parse()?)
        }
    };
    if let Some(tag) = &common.model {
        cfg.model = tag.parse()?;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Adds a flag value to the `pdp` override table.
fn override_pdp(cfg: &mut RunConfig, key: &str, value: toml::Value) {
    cfg.pdp.get_or_insert_with(toml::Table::new).insert(key.to_string(), value);
}

fn timings_of_baseline(records: &[BaselineRecord]) -> serde_json::Value {
    serde_json::json!(records.iter().map(|r| r.wall_seconds).collect::<Vec<_>>())
}

fn baseline_csv(records: &[BaselineRecord]) -> String {
    let mut out = String::from("run,converged,phi,dynamics_residual_inf,unknowns,evaluations\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{:.16e},{:.16e},{},{}",
            r.converged as u8, r.phi, r.dynamics_residual_inf, r.unknowns, r.evaluations
        );
    }
    out
}

fn run_solve(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<i32> {
    let clock = Instant::now();
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let pdp = cfg.pdp_config()?;
    let result = pdp_run(&model, &grid, &pdp, &ControlTrajectory::zeros(model.control_dim(), cfg.n))?;
    let mut out = Output::create(cfg.output_dir(out_flag), cfg.hash()?)?;
    out.write("u.csv", &controls_csv(&result.final_u, &grid))?;
    out.write("x.csv", &states_csv(&result.final_states, &grid))?;
    out.write("history.csv", &result.history_csv())?;
    let summary = SolveSummary::new(cfg, &result);
    out.write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    out.finish(
        "solve",
        cfg,
        clock.elapsed().as_secs_f64(),
        serde_json::json!({ "pdp_seconds": result.wall_seconds }),
    )?;
    Ok(result.status.exit_code())
}

fn run_dual_sweep(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<i32> {
    let clock = Instant::now();
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let pdp = cfg.pdp_config()?;
    let start = ControlTrajectory::zeros(model.control_dim(), cfg.n);
    let samples = dual_sweep(&model, &grid, &cfg.experiment.c_values, &pdp.inner, &start)?;
    let mut out = Output::create(cfg.output_dir(out_flag), cfg.hash()?)?;
    out.write("dual.csv", &dual_sweep_csv(&samples))?;
    out.finish("sweep", cfg, clock.elapsed().as_secs_f64(), serde_json::Value::Null)?;
    Ok(0)
}

fn run_experiment(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<i32> {
    let spec = &cfg.experiment;
    if spec.kind == ExperimentKind::DualSweep {
        return run_dual_sweep(cfg, out_flag);
    }
    let clock = Instant::now();
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let mut pdp = cfg.pdp_config()?;
    let mut out = Output::create(cfg.output_dir(out_flag), cfg.hash()?)?;
    let timings = match spec.kind {
        ExperimentKind::DualSweep => unreachable!("handled above"),
        ExperimentKind::NSweep => {
            let entries = n_sweep(&model, &spec.grid_ladder(cfg.model), &pdp)?;
            out.write("n_sweep.csv", &n_sweep_csv(&entries))?;
            serde_json::Value::Null
        }
        ExperimentKind::SuccessRate => {
            let report = success_rate_study(&model, &grid, spec.runs, cfg.seed, &spec.init, &pdp)?;
            out.write("success_rate.csv", &report.to_csv())?;
            serde_json::json!({
                "success_rate": report.success_rate,
                "mean_seconds_success": report.mean_seconds_success,
                "mean_seconds_all": report.mean_seconds_all,
                "run_seconds": report.runs.iter().map(|r| r.wall_seconds).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::IterateDump => {
            pdp.retain_history = true;
            let result = pdp_run(&model, &grid, &pdp, &ControlTrajectory::zeros(model.control_dim(), cfg.n))?;
            out.write("iterates.csv", &iterate_dump_csv(iterate_dump(&result)?, &grid))?;
            out.write("history.csv", &result.history_csv())?;
            serde_json::json!({ "pdp_seconds": result.wall_seconds })
        }
        ExperimentKind::Baseline => {
            let records = baseline_study(&model, &grid, spec.runs, cfg.seed, &spec.init, &spec.baseline)?;
            out.write("baseline.csv", &baseline_csv(&records))?;
            serde_json::json!({ "run_seconds": timings_of_baseline(&records) })
        }
        ExperimentKind::Comparison => {
            let ladder = spec.grid_ladder(cfg.model);
            let rows = comparison_table(&model, &ladder, spec.runs, cfg.seed, &spec.init, &pdp.inner, &spec.baseline)?;
            out.write("comparison.csv", &comparison_csv(&rows))?;
            serde_json::json!(rows
                .iter()
                .map(|r| serde_json::json!({
                    "N": r.n,
                    "pdp1_seconds": r.pdp1.runs.iter().map(|x| x.wall_seconds).collect::<Vec<_>>(),
                    "pdp2_seconds": r.pdp2.runs.iter().map(|x| x.wall_seconds).collect::<Vec<_>>(),
                    "baseline_seconds": timings_of_baseline(&r.baseline),
                }))
                .collect::<Vec<_>>())
        }
    };
    out.finish("experiment", cfg, clock.elapsed().as_secs_f64(), timings)?;
    Ok(0)
}

fn run_certify(cfg: &RunConfig, u_path: &Path, out_flag: Option<&Path>) -> Result<i32> {
    let clock = Instant::now();
    let model = cfg.build_model()?;
    let (times, u) = read_controls(u_path)?;
    if u.channels() != model.control_dim() {
        return Err(Error::Parse {
            path: u_path.to_path_buf(),
            line: 1,
            message: format!("{} control columns, model has {}", u.channels(), model.control_dim()),
        });
    }
    let grid = TimeGrid::new(model.t_final(), u.intervals())?;
    for (j, t) in times.iter().enumerate() {
        if (t - grid.time(j)).abs() > 1e-9 * model.t_final() {
            return Err(Error::Parse {
                path: u_path.to_path_buf(),
                line: j + 2,
                message: format!("time {t} is not node {j} of a uniform grid on [0, {}]", model.t_final()),
            });
        }
    }
    let cert = certify(&u, &grid, &model)?;
    let mut cfg = cfg.clone();
    cfg.n = u.intervals();
    let mut out = Output::create(cfg.output_dir(out_flag), cfg.hash()?)?;
    out.write("certificate.json", &cert.to_json()?)?;
    let mut switching = String::from("t");
    for r in 1..=cert.switching.len() {
        let _ = write!(switching, ",psi{r}");
    }
    switching.push('\n');
    for j in 0..u.intervals() {
        let _ = write!(switching, "{:.16e}", grid.time(j));
        for psi in &cert.switching {
            let _ = write!(switching, ",{:.16e}", psi[j]);
        }
        switching.push('\n');
    }
    out.write("switching.csv", &switching)?;
    out.finish("certify", &cfg, clock.elapsed().as_secs_f64(), serde_json::Value::Null)?;
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A pool already built by an earlier call in this process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Solve {
            common,
            step_rule,
            c0,
            eps,
            max_outer,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(r) = step_rule {
                cfg.step_rule = r;
            }
            if let Some(v) = c0 {
                override_pdp(&mut cfg, "c0", toml::Value::Float(v));
            }
            if let Some(v) = eps {
                override_pdp(&mut cfg, "eps", toml::Value::Float(v));
            }
            if let Some(v) = max_outer {
                let v = i64::try_from(v).map_err(|_| Error::Config("max_outer too large".into()))?;
                override_pdp(&mut cfg, "max_outer", toml::Value::Integer(v));
            }
            cfg.validate()?;
            run_solve(&cfg, common.out.as_deref())
        }
        Command::Sweep { common, c } => {
            let mut cfg = base_config(&common)?;
            if let Some(spec) = c {
                cfg.experiment.c_values = parse_c_grid(&spec)?;
            }
            cfg.experiment.kind = ExperimentKind::DualSweep;
            cfg.validate()?;
            run_dual_sweep(&cfg, common.out.as_deref())
        }
        Command::Experiment {
            common,
            kind,
            runs,
            step_rule,
            n_values,
            c,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = kind {
                cfg.experiment.kind = k;
            }
            if let Some(r) = runs {
                cfg.experiment.runs = r;
            }
            if let Some(r) = step_rule {
                cfg.step_rule = r;
            }
            if let Some(spec) = n_values {
                cfg.experiment.n_values = parse_list(&spec, "grid size")?;
            }
            if let Some(spec) = c {
                cfg.experiment.c_values = parse_c_grid(&spec)?;
            }
            cfg.validate()?;
            run_experiment(&cfg, common.out.as_deref())
        }
        Command::Certify { common, u } => {
            let cfg = base_config(&common)?;
            cfg.validate()?;
            run_certify(&cfg, &u, common.out.as_deref())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage/config/input error, 2 outer
/// iteration cap reached, 3 inner solve failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("{}", Cli::command().render_usage());
            }
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn c_grid_forms() {
        assert_eq!(parse_c_grid("0:20:1").unwrap().len(), 21);
        assert_eq!(parse_c_grid("0:1:0.1").unwrap().len(), 11);
        assert_eq!(parse_c_grid("1, 2.5,4").unwrap(), vec![1.0, 2.5, 4.0]);
        assert!(parse_c_grid("0:20").is_err());
        assert!(parse_c_grid("0:20:0").is_err());
        assert!(parse_c_grid("a,b").is_err());
    }

    #[test]
    fn controls_round_trip_bit_exact() {
        let g = grid(7);
        let u = ControlTrajectory::from_fn(2, 7, |r, j| (0.1 * j as f64 + r as f64).sin() / 3.0 + 1e-300).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        fs::write(&path, controls_csv(&u, &g)).unwrap();
        let (times, back) = read_controls(&path).unwrap();
        assert_eq!(back, u);
        assert_eq!(times, g.times()[..7].to_vec());
    }

    #[test]
    fn states_round_trip_bit_exact() {
        let g = grid(4);
        let x = StateTrajectory::from_flat(3, 5, (0..15).map(|i| (i as f64).sqrt() - 1.0 / 7.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, states_csv(&x, &g)).unwrap();
        assert_eq!(read_states(&path).unwrap().1, x);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let p = Path::new("u.csv");
        let err = parse_csv("t,u1\n0,1\n0.5,oops\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_csv("t,u1\n0,1\n0.5,1,2\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_csv("t,u1\n", p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn config_rejects_unknown_keys_with_line() {
        let text = "model = \"double_integrator\"\nN = 50\nbogus = 1\n";
        match RunConfig::from_toml(text, Path::new("run.toml")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let nested = "model = \"double_integrator\"\n[pdp]\nc0 = 2.0\nstep = 1\n";
        assert!(matches!(RunConfig::from_toml(nested, Path::new("r")), Err(Error::Config(_))));
    }

    #[test]
    fn config_revalidates_numbers() {
        let bad = "model = \"double_integrator\"\n[pdp]\nc0 = -1.0\n";
        assert!(RunConfig::from_toml(bad, Path::new("r")).is_err());
        let bad_mu = "model = \"free_flying_robot\"\n[pdp.inner]\nmu_schedule = [1e-3, 1e-2]\n";
        assert!(RunConfig::from_toml(bad_mu, Path::new("r")).is_err());
        let runs = "model = \"double_integrator\"\n[experiment]\nruns = 0\n";
        assert!(RunConfig::from_toml(runs, Path::new("r")).is_err());
        let params = "model = \"free_flying_robot\"\n[double_integrator]\ns0 = 0.0\nsf = 0.0\nv0 = 1.0\nvf = 0.0\na = 2.5\n";
        assert!(RunConfig::from_toml(params, Path::new("r")).is_err());
    }

    #[test]
    fn overrides_keep_reference_fields() {
        let text = "model = \"free_flying_robot\"\nstep_rule = 1\nseed = 9\n[pdp]\nc0 = 2.0\n[pdp.inner]\nrestarts = 2\n";
        let cfg = RunConfig::from_toml(text, Path::new("r")).unwrap();
        let pdp = cfg.pdp_config().unwrap();
        let reference = PdpConfig::reference(ProblemInstanceId::FreeFlyingRobot, 1).unwrap();
        assert_eq!(pdp.c0, 2.0);
        assert_eq!(pdp.inner.restarts, 2);
        assert_eq!(pdp.inner.seed, 9);
        assert_eq!(pdp.alpha_schedule, reference.alpha_schedule);
        assert_eq!(pdp.step_rule, reference.step_rule);

        let swap = "model = \"double_integrator\"\nstep_rule = 1\n[pdp.step_rule]\nvariant = \"type2\"\nbeta = 3.0\ntheta = [1.0]\n";
        let pdp = RunConfig::from_toml(swap, Path::new("r")).unwrap().pdp_config().unwrap();
        assert_eq!(pdp.step_rule.number(), 2);
    }

    #[test]
    fn hash_tracks_resolved_config() {
        let a = RunConfig::new(ProblemInstanceId::DoubleIntegrator);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["pdp", "solve"]), 1);
        assert_eq!(run(["pdp", "solve", "--model", "nope"]), 1);
        assert_eq!(run(["pdp", "frobnicate"]), 1);
        assert_eq!(run(["pdp", "--help"]), 0);
    }
}
