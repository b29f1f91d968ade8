//! First-order optimality certificates.
//!
//! The maximum principle forces part of the adjoint to be affine in time, so
//! the remaining integration constants are fitted to a computed control on its
//! interior arcs. The certificate then reports how well `u = clip(-psi)` holds
//! on the whole grid.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grid::{ControlTrajectory, StateTrajectory, TimeGrid};
use crate::model::{OcpModel, ProblemInstanceId};
use crate::shooting::simulate;

/// Nodes with `|u| < (1 - ARC_TOL) a` count as interior.
pub const ARC_TOL: f64 = 1e-3;
/// Fits with RMS residual above this fraction of the smallest bound are
/// flagged inconclusive.
pub const FIT_TOL: f64 = 1e-2;

/// Minimizer of `H` in one control channel: `-psi` saturated at `+-bound`.
pub fn clip_law(psi: f64, bound: f64) -> f64 {
    (-psi).clamp(-bound, bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub model: ProblemInstanceId,
    pub adjoints: StateTrajectory,
    /// One row per control channel, one value per interval.
    pub switching: Vec<Vec<f64>>,
    pub max_clip_violation: f64,
    pub hamiltonian_range: (f64, f64),
    pub fitted_constants: BTreeMap<String, f64>,
    pub interior_nodes: usize,
    /// RMS of `u + psi` over the interior nodes used in the fit.
    pub fit_residual: f64,
    pub inconclusive: bool,
    /// Per channel, fraction of intervals where `u` and `-psi` have the same sign.
    pub sign_agreement: Vec<f64>,
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn interior(u: &[f64], bound: f64) -> Vec<usize> {
    (0..u.len()).filter(|&j| u[j].abs() < (1.0 - ARC_TOL) * bound).collect()
}

/// Fraction of entries where `u` and `-psi` agree in sign; entries where both
/// are within `tol` of zero agree.
pub fn sign_agreement(u: &[f64], psi: &[f64], tol: f64) -> f64 {
    if u.is_empty() {
        return 1.0;
    }
    let hits = u
        .iter()
        .zip(psi)
        .filter(|(&a, &p)| (a.abs() <= tol && p.abs() <= tol) || a * -p > 0.0)
        .count();
    hits as f64 / u.len() as f64
}

/// `H = f0(u) + lambda^T f(x, u)` at every node (lambda_0 = 1); the last node
/// reuses the last interval's control.
pub fn hamiltonian_profile(
    u: &ControlTrajectory,
    states: &StateTrajectory,
    adjoints: &StateTrajectory,
    model: &OcpModel,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let big_n = grid.intervals();
    u.check_shape(model.control_dim(), big_n)?;
    check_dim("state nodes", grid.nodes(), states.nodes())?;
    check_dim("adjoint nodes", grid.nodes(), adjoints.nodes())?;
    check_dim("state dimension", model.state_dim(), states.dim())?;
    check_dim("adjoint dimension", model.state_dim(), adjoints.dim())?;
    Ok((0..=big_n)
        .map(|i| {
            let ui = u.at(i.min(big_n - 1));
            let f = model.dynamics(&states.at(i), &ui);
            let lam = adjoints.at(i);
            model.cost_integrand(&ui) + lam.iter().zip(&f).map(|(l, v)| l * v).sum::<f64>()
        })
        .collect())
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

fn least_squares(rows: &[Vec<f64>], rhs: &[f64], cols: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]);
    let b = DVector::from_column_slice(rhs);
    let svd = a.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let x = svd.solve(&b, tol).map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
    Ok(x.iter().copied().collect())
}

/// Fit `u = c1 t + c2` on the interior arc, so `lambda_1 = c1`,
/// `lambda_2 = -c1 t - c2` and `psi = lambda_2`.
pub fn certify_double_integrator(u: &ControlTrajectory, grid: &TimeGrid, model: &OcpModel) -> Result<Certificate> {
    if model.id() != ProblemInstanceId::DoubleIntegrator {
        return Err(Error::invalid("double-integrator certificate needs a double-integrator model"));
    }
    let big_n = grid.intervals();
    u.check_shape(1, big_n)?;
    let a = model.bounds().upper()[0];
    let values = u.channel(0);
    let nodes = interior(values, a);
    if nodes.len() < 2 {
        return Err(Error::DegenerateArc { interior: nodes.len() });
    }
    let rows: Vec<Vec<f64>> = nodes.iter().map(|&j| vec![grid.time(j), 1.0]).collect();
    let rhs: Vec<f64> = nodes.iter().map(|&j| values[j]).collect();
    let coef = least_squares(&rows, &rhs, 2)?;
    let (c1, c2) = (coef[0], coef[1]);

    let lam2 = |t: f64| -c1 * t - c2;
    let mut adj = Vec::with_capacity(2 * grid.nodes());
    adj.extend(std::iter::repeat_n(c1, grid.nodes()));
    adj.extend((0..grid.nodes()).map(|i| lam2(grid.time(i))));
    let adjoints = StateTrajectory::from_flat(2, grid.nodes(), adj)?;
    let psi: Vec<f64> = (0..big_n).map(|j| lam2(grid.time(j))).collect();
    let violation = values
        .iter()
        .zip(&psi)
        .map(|(&v, &p)| (v - clip_law(p, a)).abs())
        .fold(0.0, f64::max);
    let fit_residual = rms(nodes.iter().map(|&j| values[j] + psi[j]));
    let states = simulate(model, grid, u)?;
    let h = hamiltonian_profile(u, &states, &adjoints, model, grid)?;
    Ok(Certificate {
        model: model.id(),
        adjoints,
        sign_agreement: vec![sign_agreement(values, &psi, ARC_TOL * a)],
        switching: vec![psi],
        max_clip_violation: violation,
        hamiltonian_range: range(&h),
        fitted_constants: BTreeMap::from([("c1".to_string(), c1), ("c2".to_string(), c2)]),
        interior_nodes: nodes.len(),
        fit_residual,
        inconclusive: fit_residual > FIT_TOL * a,
    })
}

/// Robot constants in fit order.
const FFR_NAMES: [&str; 6] = ["c1", "c2", "c4", "c5", "lambda3_0", "lambda6_0"];

/// Affine dependence of the robot adjoint on the six constants
/// `theta = (c1, c2, c4, c5, lambda3(0), lambda6(0))` along a fixed trajectory.
struct RobotAdjointMap {
    /// Coefficient rows of `lambda_p(t_i)`, indexed `[p][i]`.
    lambda: Vec<Vec<[f64; 6]>>,
    /// Coefficient rows of `psi_r` on interval `j`, indexed `[r][j]`.
    psi: Vec<Vec<[f64; 6]>>,
}

impl RobotAdjointMap {
    /// `lambda_1 = c1`, `lambda_2 = c2`, `lambda_4 = -c1 t + c4`, `lambda_5 = -c2 t + c5`;
    /// `lambda_3` and `lambda_6 = -int lambda_3` are integrated along `x`, `u`
    /// with the Euler scheme adjoint to the state recursion, so interval `j`
    /// pairs `x_j` with `lambda_{j+1}` exactly as in the discrete optimality
    /// conditions.
    fn new(u: &ControlTrajectory, states: &StateTrajectory, grid: &TimeGrid) -> Self {
        let big_n = grid.intervals();
        let dt = grid.dt();
        let l4 = |t: f64| [-t, 0.0, 1.0, 0.0, 0.0, 0.0];
        let l5 = |t: f64| [0.0, -t, 0.0, 1.0, 0.0, 0.0];
        let mut lambda = (0..6).map(|_| Vec::with_capacity(grid.nodes())).collect::<Vec<_>>();
        let mut l3 = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut l6 = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for i in 0..grid.nodes() {
            let t = grid.time(i);
            lambda[0].push([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            lambda[1].push([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
            lambda[2].push(l3);
            lambda[3].push(l4(t));
            lambda[4].push(l5(t));
            lambda[5].push(l6);
            if i == big_n {
                break;
            }
            let (s, c) = states.get(2, i).sin_cos();
            let thrust = u.get(0, i) + u.get(1, i);
            let (n4, n5) = (l4(grid.time(i + 1)), l5(grid.time(i + 1)));
            l3 = std::array::from_fn(|k| l3[k] + dt * thrust * (s * n4[k] - c * n5[k]));
            l6 = std::array::from_fn(|k| l6[k] - dt * l3[k]);
        }
        let mut psi = (0..2).map(|_| Vec::with_capacity(big_n)).collect::<Vec<_>>();
        for j in 0..big_n {
            let (s, c) = states.get(2, j).sin_cos();
            let (n4, n5, n6) = (lambda[3][j + 1], lambda[4][j + 1], lambda[5][j + 1]);
            psi[0].push(std::array::from_fn(|k| 0.5 * (c * n4[k] + s * n5[k]) + 0.1 * n6[k]));
            psi[1].push(std::array::from_fn(|k| 0.5 * (c * n4[k] + s * n5[k]) - 0.1 * n6[k]));
        }
        Self { lambda, psi }
    }

    fn psi_values(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.psi
            .iter()
            .map(|rows| rows.iter().map(|r| dot6(r, theta)).collect())
            .collect()
    }
}

fn dot6(row: &[f64; 6], theta: &[f64]) -> f64 {
    row.iter().zip(theta).map(|(a, b)| a * b).sum()
}

fn clip_misfit(u: &ControlTrajectory, psi: &[Vec<f64>], bounds: &[f64]) -> f64 {
    psi.iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &p)| (u.get(r, j) - clip_law(p, bounds[r])).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Compass search on `f`, halving the step on failure.
fn pattern_search(f: impl Fn(&[f64]) -> f64, x0: &[f64], step0: f64, min_step: f64, max_evals: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut step = step0;
    let mut evals = 1;
    while step > min_step && evals < max_evals {
        let mut improved = false;
        for k in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[k] += dir * step * x[k].abs().max(1.0);
                let fy = f(&y);
                evals += 1;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    x
}

/// Fit the six robot constants: linear least squares of `u = -psi` on the
/// interior nodes of both channels, then a pattern-search polish of the clip-law
/// misfit over all nodes. The better of the two is kept.
pub fn certify_free_flying_robot(u: &ControlTrajectory, grid: &TimeGrid, model: &OcpModel) -> Result<Certificate> {
    if model.id() != ProblemInstanceId::FreeFlyingRobot {
        return Err(Error::invalid("free-flying-robot certificate needs a free-flying-robot model"));
    }
    let big_n = grid.intervals();
    u.check_shape(2, big_n)?;
    let bounds = model.bounds().upper().to_vec();
    let states = simulate(model, grid, u)?;
    let map = RobotAdjointMap::new(u, &states, grid);

    let arcs: Vec<Vec<usize>> = (0..2).map(|r| interior(u.channel(r), bounds[r])).collect();
    let count = arcs[0].len() + arcs[1].len();
    if count < 2 {
        return Err(Error::DegenerateArc { interior: count });
    }
    let mut rows = Vec::with_capacity(count);
    let mut rhs = Vec::with_capacity(count);
    for (r, nodes) in arcs.iter().enumerate() {
        for &j in nodes {
            rows.push(map.psi[r][j].to_vec());
            rhs.push(-u.get(r, j));
        }
    }
    let ls = least_squares(&rows, &rhs, 6)?;
    let misfit = |theta: &[f64]| clip_misfit(u, &map.psi_values(theta), &bounds);
    let polished = pattern_search(misfit, &ls, 1e-2, 1e-10, 20_000);
    let theta = if misfit(&polished) < misfit(&ls) { polished } else { ls };

    let psi = map.psi_values(&theta);
    let violation = psi
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(j, &p)| (r, j, p)))
        .map(|(r, j, p)| (u.get(r, j) - clip_law(p, bounds[r])).abs())
        .fold(0.0, f64::max);
    let fit_residual = rms(arcs
        .iter()
        .enumerate()
        .flat_map(|(r, nodes)| nodes.iter().map(move |&j| (r, j)))
        .map(|(r, j)| u.get(r, j) + psi[r][j]));
    let mut adj = Vec::with_capacity(6 * grid.nodes());
    for p in 0..6 {
        adj.extend(map.lambda[p].iter().map(|row| dot6(row, &theta)));
    }
    let adjoints = StateTrajectory::from_flat(6, grid.nodes(), adj)?;
    let h = hamiltonian_profile(u, &states, &adjoints, model, grid)?;
    let min_bound = bounds.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Certificate {
        model: model.id(),
        adjoints,
        sign_agreement: (0..2)
            .map(|r| sign_agreement(u.channel(r), &psi[r], ARC_TOL * bounds[r]))
            .collect(),
        switching: psi,
        max_clip_violation: violation,
        hamiltonian_range: range(&h),
        fitted_constants: FFR_NAMES.iter().map(|n| n.to_string()).zip(theta.iter().copied()).collect(),
        interior_nodes: count,
        fit_residual,
        inconclusive: fit_residual > FIT_TOL * min_bound,
    })
}

/// Dispatch on the model tag.
pub fn certify(u: &ControlTrajectory, grid: &TimeGrid, model: &OcpModel) -> Result<Certificate> {
    match model.id() {
        ProblemInstanceId::DoubleIntegrator => certify_double_integrator(u, grid, model),
        ProblemInstanceId::FreeFlyingRobot => certify_free_flying_robot(u, grid, model),
        ProblemInstanceId::Custom => Err(Error::Unavailable("no certificate for custom models".into())),
    }
}

/// Continuous-time double-integrator optimum `u(t) = clip(p + q t, +-a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipAffineSolution {
    pub p: f64,
    pub q: f64,
    pub a: f64,
}

impl ClipAffineSolution {
    pub fn control(&self, t: f64) -> f64 {
        (self.p + self.q * t).clamp(-self.a, self.a)
    }

    /// Times in `(0, 1)` where the control enters or leaves a bound.
    pub fn junctions(&self) -> Vec<f64> {
        if self.q == 0.0 {
            return Vec::new();
        }
        let mut out: Vec<f64> = [(-self.a - self.p) / self.q, (self.a - self.p) / self.q]
            .into_iter()
            .filter(|t| *t > 0.0 && *t < 1.0)
            .collect();
        out.sort_by(f64::total_cmp);
        out
    }

    /// `(int_0^1 u, int_0^1 (1 - t) u)` and their derivatives in `(p, q)`.
    fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut cuts = vec![0.0];
        cuts.extend(self.junctions());
        cuts.push(1.0);
        let mut m = [0.0; 2];
        let mut jac = [[0.0; 2]; 2];
        for w in cuts.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let mid = self.p + self.q * 0.5 * (t0 + t1);
            // Integrals of 1, t, t^2 over the piece.
            let i0 = t1 - t0;
            let i1 = 0.5 * (t1 * t1 - t0 * t0);
            let i2 = (t1.powi(3) - t0.powi(3)) / 3.0;
            if mid.abs() < self.a {
                m[0] += self.p * i0 + self.q * i1;
                m[1] += self.p * (i0 - i1) + self.q * (i1 - i2);
                jac[0] = [jac[0][0] + i0, jac[0][1] + i1];
                jac[1] = [jac[1][0] + i0 - i1, jac[1][1] + i1 - i2];
            } else {
                let v = self.a.copysign(mid);
                m[0] += v * i0;
                m[1] += v * (i0 - i1);
            }
        }
        (m, jac)
    }
}

/// Solve the boundary conditions of the box-constrained double integrator for
/// the clipped-affine optimum by damped Newton on `(p, q)`.
pub fn double_integrator_oracle(model: &OcpModel) -> Result<ClipAffineSolution> {
    if model.id() != ProblemInstanceId::DoubleIntegrator || model.t_final() != 1.0 {
        return Err(Error::invalid("oracle needs a double-integrator model on [0, 1]"));
    }
    let (x0, xf) = (model.x0(), model.xf());
    let a = model.bounds().upper()[0];
    // x2(1) = v0 + int u,  x1(1) = s0 + v0 + int (1 - t) u.
    let target = [xf[1] - x0[1], xf[0] - x0[0] - x0[1]];
    // Unconstrained affine solution as the starting point.
    let q0 = 12.0 * (0.5 * target[0] - target[1]);
    let mut sol = ClipAffineSolution {
        p: target[0] - 0.5 * q0,
        q: q0,
        a,
    };
    let residual = |s: &ClipAffineSolution| {
        let (m, _) = s.moments();
        [m[0] - target[0], m[1] - target[1]]
    };
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    for _ in 0..200 {
        let r = residual(&sol);
        if norm(r) < 1e-14 {
            return Ok(sol);
        }
        let (_, j) = sol.moments();
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let dp = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dq = (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        let mut step = 1.0;
        loop {
            let trial = ClipAffineSolution {
                p: sol.p - step * dp,
                q: sol.q - step * dq,
                a,
            };
            if norm(residual(&trial)) < norm(r) || step < 1e-12 {
                sol = trial;
                break;
            }
            step *= 0.5;
        }
    }
    if norm(residual(&sol)) < 1e-10 {
        Ok(sol)
    } else {
        Err(Error::invalid("boundary data not reachable under the control bound"))
    }
}
