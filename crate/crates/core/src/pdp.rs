//! Outer primal-dual penalty loop.
//!
//! Each outer iteration minimizes `phi + c_k ||h||_1` over the box, stops once
//! `||h||_inf < eps`, and otherwise raises the penalty by
//! `(alpha_k + 1) s_k ||h(u_k)||_1`.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{project_box, ControlTrajectory, StateTrajectory, TimeGrid};
use crate::inner::{inner_solve, InnerConfig, InnerResult};
use crate::model::{OcpModel, ProblemInstanceId};
use crate::shooting::simulate;

/// Choice of `s_k` inside the admissible interval `[eta_k, beta_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    /// `eta_k = min(eta, ||h||_2)`, `beta_k = max(beta, ||h||_1 + ||h||_2)`.
    Type1 {
        eta: f64,
        beta: f64,
        #[serde(default = "midpoint")]
        pick: f64,
    },
    /// `eta_k = theta_k / ||h||_1`, `beta_k = beta / ||h||_1`. The last
    /// schedule entry repeats.
    Type2 {
        beta: f64,
        theta: Vec<f64>,
        #[serde(default = "midpoint")]
        pick: f64,
    },
}

fn midpoint() -> f64 {
    0.5
}

impl StepRule {
    pub fn type1(eta: f64, beta: f64) -> Self {
        Self::Type1 { eta, beta, pick: 0.5 }
    }

    /// Midpoint pick; with `theta = 1, beta = 3, alpha = 1` the penalty grows
    /// by 4 per outer step.
    pub fn type2(theta: f64, beta: f64) -> Self {
        Self::Type2 {
            beta,
            theta: vec![theta],
            pick: 0.5,
        }
    }

    pub fn number(&self) -> u8 {
        match self {
            Self::Type1 { .. } => 1,
            Self::Type2 { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pick = match self {
            Self::Type1 { eta, beta, pick } => {
                if !(*eta > 0.0 && beta > eta && beta.is_finite()) {
                    return Err(Error::invalid(format!("type 1 needs 0 < eta < beta, got eta={eta}, beta={beta}")));
                }
                *pick
            }
            Self::Type2 { beta, theta, pick } => {
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(Error::invalid(format!("type 2 needs beta > 0, got {beta}")));
                }
                if theta.is_empty() {
                    return Err(Error::invalid("type 2 theta schedule must not be empty"));
                }
                if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t <= *beta)) {
                    return Err(Error::invalid(format!("type 2 needs 0 < theta_k <= beta, got {t}")));
                }
                *pick
            }
        };
        if !(0.0..=1.0).contains(&pick) {
            return Err(Error::invalid(format!("pick fraction must lie in [0, 1], got {pick}")));
        }
        Ok(())
    }

    /// Interval `[eta_k, beta_k]` at outer iteration `k`.
    pub fn interval(&self, k: usize, h_l1: f64, h_l2: f64) -> Result<(f64, f64)> {
        match self {
            Self::Type1 { eta, beta, .. } => Ok((eta.min(h_l2), beta.max(h_l1 + h_l2))),
            Self::Type2 { beta, theta, .. } => {
                if !(h_l1 > 0.0) {
                    return Err(Error::DivisionGuard);
                }
                let th = theta[k.min(theta.len() - 1)];
                Ok((th / h_l1, beta / h_l1))
            }
        }
    }
}

/// `s_k = (1 - pick) eta_k + pick beta_k`.
pub fn step_size(rule: &StepRule, k: usize, h_l1: f64, h_l2: f64) -> Result<f64> {
    let (lo, hi) = rule.interval(k, h_l1, h_l2)?;
    let pick = match rule {
        StepRule::Type1 { pick, .. } | StepRule::Type2 { pick, .. } => *pick,
    };
    Ok((1.0 - pick) * lo + pick * hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdpConfig {
    pub c0: f64,
    /// `alpha_k`; the last entry repeats.
    pub alpha_schedule: Vec<f64>,
    pub eps: f64,
    pub max_outer: usize,
    pub step_rule: StepRule,
    /// Also multiply `s_k` by `(1 + alpha_k)` before forming `s_tilde`, the
    /// alternative composition of the robot step rules.
    pub prescale_step: bool,
    /// Keep every outer iterate's controls.
    pub retain_history: bool,
    pub inner: InnerConfig,
}

impl Default for PdpConfig {
    fn default() -> Self {
        Self {
            c0: 1.0,
            alpha_schedule: vec![1.0],
            eps: 1e-6,
            max_outer: 100,
            step_rule: StepRule::type2(1.0, 3.0),
            prescale_step: false,
            retain_history: false,
            inner: InnerConfig::default(),
        }
    }
}

impl PdpConfig {
    /// Published step parameters for the two reference problems.
    pub fn reference(id: ProblemInstanceId, rule: u8) -> Result<Self> {
        let (alpha, step_rule) = match (id, rule) {
            (ProblemInstanceId::DoubleIntegrator, 1) => (1.0, StepRule::type1(0.1, 1.0)),
            (ProblemInstanceId::DoubleIntegrator, 2) => (1.0, StepRule::type2(1.0, 3.0)),
            (ProblemInstanceId::FreeFlyingRobot, 1) => (0.4, StepRule::type1(0.1, 1.0)),
            (ProblemInstanceId::FreeFlyingRobot, 2) => (1.0, StepRule::type2(1.0, 2.0)),
            (ProblemInstanceId::Custom, 1) => (1.0, StepRule::type1(0.1, 1.0)),
            (ProblemInstanceId::Custom, 2) => (1.0, StepRule::type2(1.0, 3.0)),
            (_, r) => return Err(Error::invalid(format!("step rule must be 1 or 2, got {r}"))),
        };
        Ok(Self {
            alpha_schedule: vec![alpha],
            step_rule,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::invalid(format!("c0 must be positive, got {}", self.c0)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if self.alpha_schedule.is_empty() || self.alpha_schedule.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("alpha schedule must be nonempty and positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::invalid("max_outer must be at least 1"));
        }
        self.step_rule.validate()?;
        self.inner.validate()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha_schedule[k.min(self.alpha_schedule.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdpStatus {
    Converged,
    MaxOuterReached,
    InnerFailed,
}

impl PdpStatus {
    /// Process exit code of a solve ending in this status.
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Converged => 0,
            Self::MaxOuterReached => 2,
            Self::InnerFailed => 3,
        }
    }
}

/// One outer iteration. `s` and `s_tilde` are absent on the stopping iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub k: usize,
    pub c: f64,
    pub s: Option<f64>,
    pub s_tilde: Option<f64>,
    pub q: f64,
    pub phi: f64,
    pub h_l1: f64,
    pub h_l2: f64,
    pub h_linf: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdpResult {
    pub status: PdpStatus,
    pub iterates: Vec<Iterate>,
    pub final_u: ControlTrajectory,
    pub final_states: StateTrajectory,
    /// Controls of every iterate, kept only when requested.
    pub controls: Option<Vec<ControlTrajectory>>,
    /// Objective evaluations summed over all inner solves.
    pub evaluations: usize,
    pub wall_seconds: f64,
}

impl PdpResult {
    pub fn outer_iterations(&self) -> usize {
        self.iterates.len()
    }

    pub fn last(&self) -> &Iterate {
        self.iterates.last().expect("a run records at least one iterate")
    }

    pub fn converged(&self) -> bool {
        self.status == PdpStatus::Converged
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("k,c,s,s_tilde,q,phi,h_l1,h_l2,h_linf\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for it in &self.iterates {
            let _ = writeln!(
                out,
                "{},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                it.k,
                it.c,
                opt(it.s),
                opt(it.s_tilde),
                it.q,
                it.phi,
                it.h_l1,
                it.h_l2,
                it.h_linf
            );
        }
        out
    }
}

/// `(c_k, q_k)` in iteration order.
pub fn dual_value_history(result: &PdpResult) -> Vec<(f64, f64)> {
    result.iterates.iter().map(|it| (it.c, it.q)).collect()
}

fn solve_with_retry(
    model: &OcpModel,
    grid: &TimeGrid,
    c: f64,
    warm: &ControlTrajectory,
    cfg: &InnerConfig,
) -> Result<InnerResult> {
    let first = inner_solve(model, grid, c, warm, cfg)?;
    if first.converged || model.is_convex() {
        return Ok(first);
    }
    let retry_cfg = InnerConfig {
        restarts: 2 * cfg.restarts,
        ..cfg.clone()
    };
    let retry = inner_solve(model, grid, c, warm, &retry_cfg)?;
    let evaluations = first.evaluations + retry.evaluations;
    Ok(InnerResult { evaluations, ..retry })
}

/// Run the PDP loop from `u_init` (projected onto the box first).
pub fn pdp_run(model: &OcpModel, grid: &TimeGrid, cfg: &PdpConfig, u_init: &ControlTrajectory) -> Result<PdpResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let mut warm = project_box(u_init, model.bounds())?;
    let mut c = cfg.c0;
    let mut iterates = Vec::new();
    let mut controls = cfg.retain_history.then(Vec::new);
    let mut evaluations = 0;
    let mut status = PdpStatus::MaxOuterReached;

    for k in 0..cfg.max_outer {
        let inner_cfg = InnerConfig {
            seed: cfg.inner.seed.wrapping_add(k as u64),
            ..cfg.inner.clone()
        };
        let sol = solve_with_retry(model, grid, c, &warm, &inner_cfg)?;
        evaluations += sol.evaluations;
        let (h_l1, h_l2, h_linf) = (sol.residual.l1(), sol.residual.l2(), sol.residual.linf());
        let mut it = Iterate {
            k,
            c,
            s: None,
            s_tilde: None,
            q: sol.lagrangian_value,
            phi: sol.phi_value,
            h_l1,
            h_l2,
            h_linf,
            inner_iterations: sol.inner_iterations,
            inner_converged: sol.converged,
        };
        if let Some(list) = controls.as_mut() {
            list.push(sol.u_star.clone());
        }
        warm = sol.u_star;

        if !sol.converged {
            iterates.push(it);
            status = PdpStatus::InnerFailed;
            break;
        }
        if h_linf < cfg.eps {
            iterates.push(it);
            status = PdpStatus::Converged;
            break;
        }
        let alpha = cfg.alpha(k);
        let mut s = step_size(&cfg.step_rule, k, h_l1, h_l2)?;
        if cfg.prescale_step {
            s *= 1.0 + alpha;
        }
        let s_tilde = (alpha + 1.0) * s;
        it.s = Some(s);
        it.s_tilde = Some(s_tilde);
        iterates.push(it);
        c += s_tilde * h_l1;
    }

    let final_states = simulate(model, grid, &warm)?;
    Ok(PdpResult {
        status,
        iterates,
        final_u: warm,
        final_states,
        controls,
        evaluations,
        wall_seconds: clock.elapsed().as_secs_f64(),
    })
}
