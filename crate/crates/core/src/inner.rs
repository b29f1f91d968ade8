//! Minimization of the penalty Lagrangian `l(u, c) = phi(u) + c ||h(u)||_1` over
//! the control box, with the states eliminated by single shooting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grid::{project_box, ControlTrajectory, TimeGrid};
use crate::model::OcpModel;
use crate::penalty::{
    huber, huber_derivative, minimize_penalized, ConstraintJacobian, CurvatureModel, LevelReport, PenaltyProblem, SolverOptions,
};
use crate::shooting::{
    add_cost_gradient, discrete_cost, residual_jacobian_backward, residual_of, residual_vjp, rollout, Residual, Rollout,
};

/// Settings of the inner box-constrained solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerConfig {
    /// Huber widths, strictly decreasing.
    pub mu_schedule: Vec<f64>,
    pub grad_tol: f64,
    /// Iteration cap per smoothing level.
    pub max_iter: usize,
    /// Quasi-Newton memory.
    pub memory: usize,
    /// Number of starts for nonconvex models (the first is the warm start itself).
    pub restarts: usize,
    /// Half-width of the restart perturbation as a fraction of each bound's half-width.
    pub perturbation: f64,
    pub seed: u64,
    /// Keep the exact and smoothed objective at every accepted iterate.
    pub record_trace: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            mu_schedule: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8],
            grad_tol: 1e-8,
            max_iter: 1000,
            memory: 10,
            restarts: 4,
            perturbation: 0.25,
            seed: 0,
            record_trace: false,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu_schedule.is_empty() {
            return Err(Error::invalid("mu_schedule must not be empty"));
        }
        if self.mu_schedule.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::invalid("mu_schedule entries must be positive"));
        }
        if self.mu_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("mu_schedule must be strictly decreasing"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::invalid("grad_tol must be positive"));
        }
        if self.max_iter == 0 || self.memory == 0 || self.restarts == 0 {
            return Err(Error::invalid("max_iter, memory and restarts must be at least 1"));
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return Err(Error::invalid("perturbation must be a nonnegative fraction"));
        }
        Ok(())
    }

    pub fn final_mu(&self) -> f64 {
        *self.mu_schedule.last().expect("validated schedule")
    }

    fn options(&self) -> SolverOptions {
        SolverOptions {
            mu_schedule: self.mu_schedule.clone(),
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            memory: self.memory,
            record_trace: self.record_trace,
        }
    }
}

/// A member of the approximate minimizer set at one penalty value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerResult {
    pub u_star: ControlTrajectory,
    /// Exact (unsmoothed) `phi + c ||h||_1` at `u_star`.
    pub lagrangian_value: f64,
    pub phi_value: f64,
    pub residual: Residual,
    pub converged: bool,
    pub inner_iterations: usize,
    pub evaluations: usize,
    /// Index of the start that produced `u_star`.
    pub best_start: usize,
    pub levels: Vec<LevelReport>,
}

pub(crate) struct ShootingProblem<'a> {
    pub model: &'a OcpModel,
    pub grid: &'a TimeGrid,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> ShootingProblem<'a> {
    pub fn new(model: &'a OcpModel, grid: &'a TimeGrid) -> Self {
        let (lower, upper) = model.bounds().expand(grid.intervals());
        Self {
            model,
            grid,
            lower,
            upper,
        }
    }

    fn controls(&self, z: &[f64]) -> ControlTrajectory {
        ControlTrajectory::from_flat(self.model.control_dim(), self.grid.intervals(), z.to_vec())
            .expect("decision vector has control shape")
    }
}

impl PenaltyProblem for ShootingProblem<'_> {
    type Cache = Rollout;

    fn dim(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>, Rollout)> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite control"));
        }
        let u = self.controls(z);
        let roll = rollout(self.model, self.grid, &u)?;
        let cost = discrete_cost(self.model, self.grid, &u)?;
        let h = residual_of(self.model, &roll).0;
        Ok((cost, h, roll))
    }

    fn gradient(&self, z: &[f64], roll: &Rollout, weights: &[f64], grad: &mut [f64]) {
        let u = self.controls(z);
        residual_vjp(self.model, self.grid, &u, roll, weights, grad);
        add_cost_gradient(self.model, self.grid, &u, grad);
    }

    fn curvature(&self, z: &[f64], roll: &Rollout) -> Option<CurvatureModel> {
        let (m, big_n) = (self.model.control_dim(), self.grid.intervals());
        let u = self.controls(z);
        let dt = self.grid.dt();
        let mut diag = vec![0.0; m * big_n];
        let mut uj = vec![0.0; m];
        for j in 0..big_n {
            u.at_into(j, &mut uj);
            let d = self.model.system().cost_hessian_diag(&uj)?;
            for r in 0..m {
                diag[r * big_n + j] = dt * d[r];
            }
        }
        let jacobian = ConstraintJacobian::Dense(residual_jacobian_backward(self.model, self.grid, &u, roll));
        Some(CurvatureModel { diag, jacobian })
    }
}

fn check_penalty(c: f64) -> Result<()> {
    if c.is_finite() && c >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("penalty parameter must be nonnegative, got {c}")))
    }
}

/// `phi(u) + c ||h(u)||_1`; `u` is expected inside the box.
pub fn lagrangian_value(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory, c: f64) -> Result<f64> {
    check_penalty(c)?;
    let roll = rollout(model, grid, u)?;
    let phi = discrete_cost(model, grid, u)?;
    Ok(phi + c * residual_of(model, &roll).l1())
}

/// Huber-smoothed Lagrangian and its gradient with respect to the flat controls.
pub fn smoothed_lagrangian_and_gradient(
    model: &OcpModel,
    grid: &TimeGrid,
    u: &ControlTrajectory,
    c: f64,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    check_penalty(c)?;
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("smoothing width must be positive, got {mu}")));
    }
    let problem = ShootingProblem::new(model, grid);
    let (cost, h, roll) = problem.evaluate(u.as_slice())?;
    let value = cost + c * h.iter().map(|&v| huber(v, mu)).sum::<f64>();
    let weights: Vec<f64> = h.iter().map(|&v| c * huber_derivative(v, mu)).collect();
    let mut grad = vec![0.0; problem.dim()];
    problem.gradient(u.as_slice(), &roll, &weights, &mut grad);
    Ok((value, grad))
}

fn perturbed_start(
    base: &ControlTrajectory,
    model: &OcpModel,
    cfg: &InnerConfig,
    index: usize,
) -> Result<ControlTrajectory> {
    if index == 0 {
        return Ok(base.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let b = model.bounds();
    let n = base.intervals();
    let values = base
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let r = k / n;
            let amp = cfg.perturbation * 0.5 * (b.upper()[r] - b.lower()[r]);
            v + amp * rng.random_range(-1.0..=1.0)
        })
        .collect();
    project_box(&ControlTrajectory::from_flat(base.channels(), n, values)?, b)
}

/// Approximate `argmin` over the box of `l(., c)` from a warm start.
///
/// Nonconvex models are solved from `cfg.restarts` starts (the warm start plus
/// seeded perturbations of it) and the lowest exact Lagrangian wins, ties going
/// to the lower cost and then the lower start index.
pub fn inner_solve(
    model: &OcpModel,
    grid: &TimeGrid,
    c: f64,
    warm_start: &ControlTrajectory,
    cfg: &InnerConfig,
) -> Result<InnerResult> {
    check_penalty(c)?;
    cfg.validate()?;
    check_dim("warm start channels", model.control_dim(), warm_start.channels())?;
    check_dim("warm start intervals", grid.intervals(), warm_start.intervals())?;
    let base = project_box(warm_start, model.bounds())?;
    let starts = if model.is_convex() { 1 } else { cfg.restarts };
    let problem = ShootingProblem::new(model, grid);
    let opts = cfg.options();

    let outcomes: Vec<Result<_>> = (0..starts)
        .into_par_iter()
        .map(|k| {
            let start = perturbed_start(&base, model, cfg, k)?;
            minimize_penalized(&problem, c, start.as_slice(), &opts)
        })
        .collect();

    let mut best: Option<(usize, crate::penalty::PenaltyOutcome)> = None;
    let mut first_err = None;
    let mut total_iters = 0;
    let mut total_evals = 0;
    for (k, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                total_iters += o.iterations();
                total_evals += o.evaluations();
                let better = match &best {
                    None => true,
                    Some((_, b)) => {
                        o.exact_value < b.exact_value || (o.exact_value == b.exact_value && o.cost < b.cost)
                    }
                };
                if better {
                    best = Some((k, o));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((best_start, out)) = best else {
        return Err(first_err.expect("at least one start ran"));
    };
    let converged = out.converged();
    let u_star = ControlTrajectory::from_flat(model.control_dim(), grid.intervals(), out.z)?;
    Ok(InnerResult {
        u_star,
        lagrangian_value: out.exact_value,
        phi_value: out.cost,
        residual: Residual(out.constraints),
        converged,
        inner_iterations: total_iters,
        evaluations: total_evals,
        best_start,
        levels: out.levels,
    })
}
