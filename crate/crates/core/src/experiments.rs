//! Reproduction harness: dual sweeps, grid refinement, random-start success
//! rates, iterate dumps and a full-transcription comparison solve.
//!
//! Reported "time" columns in CSV output count objective evaluations so that
//! repeated runs give identical bytes; wall-clock seconds are kept on the
//! in-memory records.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{project_box, ControlTrajectory, StateTrajectory, TimeGrid};
use crate::inner::{inner_solve, InnerConfig};
use crate::model::{OcpModel, ProblemInstanceId};
use crate::pdp::{pdp_run, PdpConfig, PdpResult, PdpStatus};
use crate::penalty::{minimize_penalized, ConstraintJacobian, CurvatureModel, LevelReport, PenaltyProblem, SparseRows};

/// Uniform ranges for random initial guesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitRanges {
    pub control: [f64; 2],
    pub state: [f64; 2],
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            control: [-0.4, 0.4],
            state: [-0.4, 0.4],
        }
    }
}

impl InitRanges {
    pub fn validate(&self) -> Result<()> {
        for r in [self.control, self.state] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::invalid(format!("init range [{}, {}] is not an interval", r[0], r[1])));
            }
        }
        Ok(())
    }
}

fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Random controls for run `run`, projected onto the box.
pub fn random_controls(model: &OcpModel, grid: &TimeGrid, range: [f64; 2], seed: u64, run: usize) -> Result<ControlTrajectory> {
    let mut rng = run_rng(seed, run);
    let u = ControlTrajectory::from_fn(model.control_dim(), grid.intervals(), |_, _| draw(&mut rng, range))?;
    project_box(&u, model.bounds())
}

/// Random states and controls for run `run` (baseline unknowns). Independent of
/// the stream used by [`random_controls`].
pub fn random_transcription_start(
    model: &OcpModel,
    grid: &TimeGrid,
    init: &InitRanges,
    seed: u64,
    run: usize,
) -> Result<(StateTrajectory, ControlTrajectory)> {
    let mut rng = run_rng(seed ^ 0x5eed_57a7e5, run);
    let n = model.state_dim();
    let x: Vec<f64> = (0..n * grid.nodes()).map(|_| draw(&mut rng, init.state)).collect();
    let u = ControlTrajectory::from_fn(model.control_dim(), grid.intervals(), |_, _| draw(&mut rng, init.control))?;
    Ok((StateTrajectory::from_flat(n, grid.nodes(), x)?, project_box(&u, model.bounds())?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSample {
    pub c: f64,
    pub q: f64,
    pub phi: f64,
    pub h_l1: f64,
    pub h_linf: f64,
    pub converged: bool,
    pub u: Option<ControlTrajectory>,
    /// Set when the inner solve raised an error; the sweep carries on.
    pub error: Option<String>,
}

/// `q(c)` along increasing `c_values`, each solve warm-started from the
/// previous minimizer.
pub fn dual_sweep(
    model: &OcpModel,
    grid: &TimeGrid,
    c_values: &[f64],
    cfg: &InnerConfig,
    start: &ControlTrajectory,
) -> Result<Vec<DualSample>> {
    if c_values.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(Error::invalid("penalty values must be nonnegative"));
    }
    if c_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("penalty values must be strictly increasing"));
    }
    let mut warm = start.clone();
    let mut out = Vec::with_capacity(c_values.len());
    for &c in c_values {
        match inner_solve(model, grid, c, &warm, cfg) {
            Ok(sol) => {
                out.push(DualSample {
                    c,
                    q: sol.lagrangian_value,
                    phi: sol.phi_value,
                    h_l1: sol.residual.l1(),
                    h_linf: sol.residual.linf(),
                    converged: sol.converged,
                    u: Some(sol.u_star.clone()),
                    error: None,
                });
                warm = sol.u_star;
            }
            Err(e) => out.push(DualSample {
                c,
                q: f64::NAN,
                phi: f64::NAN,
                h_l1: f64::NAN,
                h_linf: f64::NAN,
                converged: false,
                u: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(out)
}

pub fn dual_sweep_csv(samples: &[DualSample]) -> String {
    let mut out = String::from("c,q,phi,h_l1,h_linf,converged\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            s.c, s.q, s.phi, s.h_l1, s.h_linf, s.converged as u8
        );
    }
    out
}

/// Resample `coarse` onto the intervals of `fine` (interval containing each fine
/// midpoint) and return the sup-norm distance per channel.
pub fn resampled_distance(coarse: &ControlTrajectory, fine: &ControlTrajectory, t_final: f64) -> Result<Vec<f64>> {
    if coarse.channels() != fine.channels() {
        return Err(Error::Dimension {
            context: "resampled channels",
            expected: fine.channels(),
            actual: coarse.channels(),
        });
    }
    let (nc, nf) = (coarse.intervals(), fine.intervals());
    let (dc, df) = (t_final / nc as f64, t_final / nf as f64);
    Ok((0..fine.channels())
        .map(|r| {
            (0..nf)
                .map(|j| {
                    let t = (j as f64 + 0.5) * df;
                    let k = ((t / dc) as usize).min(nc - 1);
                    (coarse.get(r, k) - fine.get(r, j)).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NSweepEntry {
    pub n: usize,
    pub status: Option<PdpStatus>,
    pub outer_iterations: usize,
    /// Sup-norm distance per channel to the finest grid's control.
    pub distance: Vec<f64>,
    pub u: Option<ControlTrajectory>,
    pub error: Option<String>,
}

/// PDP on each grid from `u = 0`, compared with the finest grid.
pub fn n_sweep(model: &OcpModel, n_values: &[usize], cfg: &PdpConfig) -> Result<Vec<NSweepEntry>> {
    if n_values.iter().any(|&n| n < 2) {
        return Err(Error::Config("every N must be at least 2".into()));
    }
    if n_values.is_empty() || n_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("N values must be nonempty and strictly increasing".into()));
    }
    cfg.validate()?;
    let results: Vec<Result<PdpResult>> = n_values
        .par_iter()
        .map(|&n| {
            let grid = TimeGrid::new(model.t_final(), n)?;
            pdp_run(model, &grid, cfg, &ControlTrajectory::zeros(model.control_dim(), n))
        })
        .collect();
    let reference = results.last().and_then(|r| r.as_ref().ok()).map(|r| r.final_u.clone());
    n_values
        .iter()
        .zip(results)
        .map(|(&n, res)| {
            Ok(match res {
                Ok(r) => NSweepEntry {
                    n,
                    status: Some(r.status),
                    outer_iterations: r.outer_iterations(),
                    distance: match &reference {
                        Some(fine) => resampled_distance(&r.final_u, fine, model.t_final())?,
                        None => vec![f64::NAN; model.control_dim()],
                    },
                    u: Some(r.final_u),
                    error: None,
                },
                Err(e) => NSweepEntry {
                    n,
                    status: None,
                    outer_iterations: 0,
                    distance: vec![f64::NAN; model.control_dim()],
                    u: None,
                    error: Some(e.to_string()),
                },
            })
        })
        .collect()
}

pub fn n_sweep_csv(entries: &[NSweepEntry]) -> String {
    let m = entries.first().map_or(0, |e| e.distance.len());
    let mut out = String::from("N,status,outer_iterations");
    for r in 1..=m {
        let _ = write!(out, ",dist_u{r}");
    }
    out.push('\n');
    for e in entries {
        let status = e.status.map_or("error".to_string(), status_tag);
        let _ = write!(out, "{},{},{}", e.n, status, e.outer_iterations);
        for d in &e.distance {
            let _ = write!(out, ",{d:.16e}");
        }
        out.push('\n');
    }
    out
}

fn status_tag(s: PdpStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub converged: bool,
    pub status: Option<PdpStatus>,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub final_phi: f64,
    pub final_h_linf: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub success_rate: f64,
    pub mean_evaluations_success: f64,
    pub mean_evaluations_all: f64,
    pub mean_seconds_success: f64,
    pub mean_seconds_all: f64,
}

impl ExperimentReport {
    fn from_runs(runs: Vec<RunRecord>) -> Self {
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        };
        let ok = runs.iter().filter(|r| r.converged).count();
        Self {
            success_rate: 100.0 * ok as f64 / runs.len().max(1) as f64,
            mean_evaluations_success: mean(&mut runs.iter().filter(|r| r.converged).map(|r| r.evaluations as f64)),
            mean_evaluations_all: mean(&mut runs.iter().map(|r| r.evaluations as f64)),
            mean_seconds_success: mean(&mut runs.iter().filter(|r| r.converged).map(|r| r.wall_seconds)),
            mean_seconds_all: mean(&mut runs.iter().map(|r| r.wall_seconds)),
            runs,
        }
    }

    /// Per-run CSV without wall-clock columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,converged,status,outer_iterations,evaluations,final_phi,final_h_linf\n");
        for r in &self.runs {
            let status = r.status.map_or("error".to_string(), status_tag);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.16e},{:.16e}",
                r.run, r.converged as u8, status, r.outer_iterations, r.evaluations, r.final_phi, r.final_h_linf
            );
        }
        out
    }
}

/// PDP from `runs` random control guesses; run `i` draws from stream `i` of
/// `seed`, so records do not depend on scheduling.
pub fn success_rate_study(
    model: &OcpModel,
    grid: &TimeGrid,
    runs: usize,
    seed: u64,
    init: &InitRanges,
    cfg: &PdpConfig,
) -> Result<ExperimentReport> {
    if runs == 0 {
        return Err(Error::invalid("run count must be at least 1"));
    }
    init.validate()?;
    cfg.validate()?;
    let records: Vec<RunRecord> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let outcome = random_controls(model, grid, init.control, seed, run).and_then(|u0| pdp_run(model, grid, cfg, &u0));
            match outcome {
                Ok(r) => RunRecord {
                    run,
                    converged: r.converged(),
                    status: Some(r.status),
                    outer_iterations: r.outer_iterations(),
                    evaluations: r.evaluations,
                    wall_seconds: r.wall_seconds,
                    final_phi: r.last().phi,
                    final_h_linf: r.last().h_linf,
                    error: None,
                },
                Err(e) => RunRecord {
                    run,
                    converged: false,
                    status: None,
                    outer_iterations: 0,
                    evaluations: 0,
                    wall_seconds: 0.0,
                    final_phi: f64::NAN,
                    final_h_linf: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ExperimentReport::from_runs(records))
}

/// Controls of every PDP iterate, in order.
pub fn iterate_dump(result: &PdpResult) -> Result<&[ControlTrajectory]> {
    result
        .controls
        .as_deref()
        .ok_or_else(|| Error::Unavailable("iterate history was not retained (set retain_history)".into()))
}

/// Long-format CSV `k,t,u1..um` of the dumped iterates.
pub fn iterate_dump_csv(iterates: &[ControlTrajectory], grid: &TimeGrid) -> String {
    let m = iterates.first().map_or(0, |u| u.channels());
    let mut out = String::from("k,t");
    for r in 1..=m {
        let _ = write!(out, ",u{r}");
    }
    out.push('\n');
    for (k, u) in iterates.iter().enumerate() {
        for j in 0..u.intervals() {
            let _ = write!(out, "{k},{:.16e}", grid.time(j));
            for r in 0..m {
                let _ = write!(out, ",{:.16e}", u.get(r, j));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Fixed exact-penalty weight on the transcription constraints.
    pub penalty: f64,
    pub eps: f64,
    pub inner: InnerConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            penalty: 100.0,
            eps: 1e-6,
            inner: InnerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub converged: bool,
    pub phi: f64,
    /// Largest violation among boundary conditions and Euler defects.
    pub dynamics_residual_inf: f64,
    pub unknowns: usize,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub u: ControlTrajectory,
    pub levels: Vec<LevelReport>,
}

/// States and controls as unknowns with the Euler defects and both boundary
/// conditions as equality constraints.
struct TranscriptionProblem<'a> {
    model: &'a OcpModel,
    grid: &'a TimeGrid,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> TranscriptionProblem<'a> {
    fn new(model: &'a OcpModel, grid: &'a TimeGrid) -> Self {
        let nx = model.state_dim() * grid.nodes();
        let (ul, uu) = model.bounds().expand(grid.intervals());
        let mut lower = vec![f64::NEG_INFINITY; nx];
        let mut upper = vec![f64::INFINITY; nx];
        lower.extend(ul);
        upper.extend(uu);
        Self {
            model,
            grid,
            lower,
            upper,
        }
    }

    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64]) {
        z.split_at(self.model.state_dim() * self.grid.nodes())
    }

    fn control_at(&self, u: &[f64], j: usize, out: &mut [f64]) {
        let big_n = self.grid.intervals();
        for (r, v) in out.iter_mut().enumerate() {
            *v = u[r * big_n + j];
        }
    }
}

impl PenaltyProblem for TranscriptionProblem<'_> {
    type Cache = ();

    fn dim(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>, ())> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite transcription variable"));
        }
        let (n, m, big_n) = (self.model.state_dim(), self.model.control_dim(), self.grid.intervals());
        let dt = self.grid.dt();
        let (x, u) = self.split(z);
        let mut cons = Vec::with_capacity(n * (big_n + 2));
        cons.extend(x[..n].iter().zip(self.model.x0()).map(|(a, b)| a - b));
        let mut uj = vec![0.0; m];
        let mut f = vec![0.0; n];
        let mut cost = 0.0;
        for j in 0..big_n {
            self.control_at(u, j, &mut uj);
            let xi = &x[j * n..(j + 1) * n];
            self.model.system().dynamics(xi, &uj, &mut f);
            cons.extend((0..n).map(|p| x[(j + 1) * n + p] - xi[p] - dt * f[p]));
            cost += dt * self.model.cost_integrand(&uj);
        }
        cons.extend(x[big_n * n..].iter().zip(self.model.xf()).map(|(a, b)| a - b));
        Ok((cost, cons, ()))
    }

    fn gradient(&self, z: &[f64], _cache: &(), w: &[f64], grad: &mut [f64]) {
        let (n, m, big_n) = (self.model.state_dim(), self.model.control_dim(), self.grid.intervals());
        let dt = self.grid.dt();
        let (x, u) = self.split(z);
        let nx = x.len();
        grad.fill(0.0);
        grad[..n].copy_from_slice(&w[..n]);
        let mut uj = vec![0.0; m];
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * m];
        let mut cg = vec![0.0; m];
        for j in 0..big_n {
            self.control_at(u, j, &mut uj);
            let xi = &x[j * n..(j + 1) * n];
            let wj = &w[n * (j + 1)..n * (j + 2)];
            self.model.system().state_jacobian(xi, &uj, &mut a);
            self.model.system().control_jacobian(xi, &uj, &mut b);
            self.model.system().cost_gradient(&uj, &mut cg);
            for p in 0..n {
                grad[(j + 1) * n + p] += wj[p];
                let at_w: f64 = (0..n).map(|r| a[r * n + p] * wj[r]).sum();
                grad[j * n + p] -= wj[p] + dt * at_w;
            }
            for r in 0..m {
                let bt_w: f64 = (0..n).map(|p| b[p * m + r] * wj[p]).sum();
                grad[nx + r * big_n + j] += dt * cg[r] - dt * bt_w;
            }
        }
        let tail = &w[n * (big_n + 1)..];
        for p in 0..n {
            grad[big_n * n + p] += tail[p];
        }
    }

    /// Sparse Jacobian in time-interleaved ordering `(x_0, u_0, x_1, u_1, ...)`,
    /// which makes `J^T J` banded. States get the mean control curvature as
    /// their metric weight, since the cost does not involve them.
    fn curvature(&self, z: &[f64], _cache: &()) -> Option<CurvatureModel> {
        let (n, m, big_n) = (self.model.state_dim(), self.model.control_dim(), self.grid.intervals());
        let dt = self.grid.dt();
        let (x, u) = self.split(z);
        let nx = x.len();
        let xcol = |i: usize, p: usize| i * n + p;
        let ucol = |j: usize, r: usize| nx + r * big_n + j;
        let mut diag = vec![0.0; self.dim()];
        let mut uj = vec![0.0; m];
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * m];
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|p| vec![(xcol(0, p), 1.0)]).collect();
        for j in 0..big_n {
            self.control_at(u, j, &mut uj);
            let hd = self.model.system().cost_hessian_diag(&uj)?;
            for r in 0..m {
                diag[ucol(j, r)] = dt * hd[r];
            }
            let xi = &x[j * n..(j + 1) * n];
            self.model.system().state_jacobian(xi, &uj, &mut a);
            self.model.system().control_jacobian(xi, &uj, &mut b);
            for p in 0..n {
                let mut row = vec![(xcol(j + 1, p), 1.0)];
                for q in 0..n {
                    let v = -(if p == q { 1.0 } else { 0.0 }) - dt * a[p * n + q];
                    if v != 0.0 {
                        row.push((xcol(j, q), v));
                    }
                }
                for r in 0..m {
                    if b[p * m + r] != 0.0 {
                        row.push((ucol(j, r), -dt * b[p * m + r]));
                    }
                }
                rows.push(row);
            }
        }
        rows.extend((0..n).map(|p| vec![(xcol(big_n, p), 1.0)]));
        let mean = diag[nx..].iter().sum::<f64>() / (diag.len() - nx) as f64;
        diag[..nx].iter_mut().for_each(|d| *d = mean);
        let stride = n + m;
        let mut order = vec![0; self.dim()];
        for i in 0..=big_n {
            for p in 0..n {
                order[xcol(i, p)] = i * stride + p;
            }
        }
        for j in 0..big_n {
            for r in 0..m {
                order[ucol(j, r)] = j * stride + n + r;
            }
        }
        Some(CurvatureModel {
            diag,
            jacobian: ConstraintJacobian::Sparse(SparseRows {
                dim: self.dim(),
                rows,
                order,
            }),
        })
    }
}

/// One fixed-penalty solve of the full transcription from `(x_init, u_init)`.
pub fn baseline_full_transcription(
    model: &OcpModel,
    grid: &TimeGrid,
    cfg: &BaselineConfig,
    x_init: &StateTrajectory,
    u_init: &ControlTrajectory,
) -> Result<BaselineRecord> {
    if !(cfg.penalty > 0.0 && cfg.eps > 0.0) {
        return Err(Error::invalid("baseline penalty and eps must be positive"));
    }
    cfg.inner.validate()?;
    u_init.check_shape(model.control_dim(), grid.intervals())?;
    if x_init.dim() != model.state_dim() || x_init.nodes() != grid.nodes() {
        return Err(Error::Dimension {
            context: "baseline initial states",
            expected: model.state_dim() * grid.nodes(),
            actual: x_init.dim() * x_init.nodes(),
        });
    }
    let clock = Instant::now();
    let problem = TranscriptionProblem::new(model, grid);
    let mut start = x_init.as_slice().to_vec();
    start.extend_from_slice(u_init.as_slice());
    let opts = crate::penalty::SolverOptions {
        mu_schedule: cfg.inner.mu_schedule.clone(),
        grad_tol: cfg.inner.grad_tol,
        max_iter: cfg.inner.max_iter,
        memory: cfg.inner.memory,
        record_trace: false,
    };
    let out = minimize_penalized(&problem, cfg.penalty, &start, &opts)?;
    let residual = out.constraints.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let nx = model.state_dim() * grid.nodes();
    let u = ControlTrajectory::from_flat(model.control_dim(), grid.intervals(), out.z[nx..].to_vec())?;
    Ok(BaselineRecord {
        converged: residual < cfg.eps,
        phi: out.cost,
        dynamics_residual_inf: residual,
        unknowns: problem.dim(),
        evaluations: out.evaluations(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        u,
        levels: out.levels,
    })
}

/// Baseline from `runs` random state/control guesses.
pub fn baseline_study(
    model: &OcpModel,
    grid: &TimeGrid,
    runs: usize,
    seed: u64,
    init: &InitRanges,
    cfg: &BaselineConfig,
) -> Result<Vec<BaselineRecord>> {
    if runs == 0 {
        return Err(Error::invalid("run count must be at least 1"));
    }
    init.validate()?;
    (0..runs)
        .into_par_iter()
        .map(|run| {
            let (x0, u0) = random_transcription_start(model, grid, init, seed, run)?;
            baseline_full_transcription(model, grid, cfg, &x0, &u0)
        })
        .collect()
}

/// One row of the method-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    pub pdp1: ExperimentReport,
    pub pdp2: ExperimentReport,
    pub baseline: Vec<BaselineRecord>,
}

impl ComparisonRow {
    pub fn baseline_success_rate(&self) -> f64 {
        let ok = self.baseline.iter().filter(|r| r.converged).count();
        100.0 * ok as f64 / self.baseline.len().max(1) as f64
    }
}

/// Success rates of PDP-1, PDP-2 and the baseline over the same random-start
/// protocol for every grid in `n_values`.
pub fn comparison_table(
    model: &OcpModel,
    n_values: &[usize],
    runs: usize,
    seed: u64,
    init: &InitRanges,
    inner: &InnerConfig,
    baseline: &BaselineConfig,
) -> Result<Vec<ComparisonRow>> {
    let with_inner = |rule| -> Result<PdpConfig> {
        Ok(PdpConfig {
            inner: inner.clone(),
            ..PdpConfig::reference(model.id(), rule)?
        })
    };
    let (cfg1, cfg2) = (with_inner(1)?, with_inner(2)?);
    n_values
        .iter()
        .map(|&n| {
            let grid = TimeGrid::new(model.t_final(), n)?;
            Ok(ComparisonRow {
                n,
                pdp1: success_rate_study(model, &grid, runs, seed, init, &cfg1)?,
                pdp2: success_rate_study(model, &grid, runs, seed, init, &cfg2)?,
                baseline: baseline_study(model, &grid, runs, seed, init, baseline)?,
            })
        })
        .collect()
}

/// Table CSV; mean "times" are mean objective evaluations.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "N,success_rate_pdp1,success_rate_pdp2,success_rate_baseline,mean_time_pdp1,mean_time_pdp2,mean_time_baseline_all,mean_time_baseline_success\n",
    );
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    for r in rows {
        let all = mean(r.baseline.iter().map(|b| b.evaluations as f64).collect());
        let ok = mean(r.baseline.iter().filter(|b| b.converged).map(|b| b.evaluations as f64).collect());
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.n,
            r.pdp1.success_rate,
            r.pdp2.success_rate,
            r.baseline_success_rate(),
            r.pdp1.mean_evaluations_success,
            r.pdp2.mean_evaluations_success,
            all,
            ok
        );
    }
    out
}

/// Model instance for an experiment tag.
pub fn model_for(id: ProblemInstanceId) -> Result<OcpModel> {
    id.default_model()
}
