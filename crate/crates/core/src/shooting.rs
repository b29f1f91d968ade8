//! Single shooting: explicit-Euler rollout of the dynamics and the terminal
//! boundary residual `h(u) = x_N(u) - x_f` as a function of the controls alone.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm1, norm2, norm_inf, ControlTrajectory, StateTrajectory, TimeGrid};
use crate::model::OcpModel;

/// Terminal boundary mismatch, one entry per terminal condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual(pub Vec<f64>);

impl Residual {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn l1(&self) -> f64 {
        norm1(&self.0)
    }
    pub fn l2(&self) -> f64 {
        norm2(&self.0)
    }
    pub fn linf(&self) -> f64 {
        norm_inf(&self.0)
    }
}

/// Node-major rollout (`n` contiguous entries per node).
#[derive(Debug, Clone)]
pub(crate) struct Rollout {
    pub n: usize,
    pub states: Vec<f64>,
}

impl Rollout {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    pub fn terminal(&self) -> &[f64] {
        let nodes = self.states.len() / self.n;
        self.node(nodes - 1)
    }

    pub fn into_trajectory(self) -> StateTrajectory {
        let nodes = self.states.len() / self.n;
        let mut values = vec![0.0; self.states.len()];
        for i in 0..nodes {
            for p in 0..self.n {
                values[p * nodes + i] = self.states[i * self.n + p];
            }
        }
        StateTrajectory::from_flat(self.n, nodes, values).expect("rollout states are finite")
    }
}

fn check_inputs(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<()> {
    u.check_shape(model.control_dim(), grid.intervals())
}

pub(crate) fn rollout(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<Rollout> {
    check_inputs(model, grid, u)?;
    let (n, m, big_n) = (model.state_dim(), model.control_dim(), grid.intervals());
    let dt = grid.dt();
    let sys = model.system();
    let mut states = vec![0.0; n * (big_n + 1)];
    states[..n].copy_from_slice(model.x0());
    let mut f = vec![0.0; n];
    let mut uj = vec![0.0; m];
    for j in 0..big_n {
        u.at_into(j, &mut uj);
        let (head, tail) = states.split_at_mut((j + 1) * n);
        let xj = &head[j * n..];
        sys.dynamics(xj, &uj, &mut f);
        for p in 0..n {
            let next = xj[p] + dt * f[p];
            if !next.is_finite() {
                return Err(Error::SimulationDiverged { step: j + 1 });
            }
            tail[p] = next;
        }
    }
    Ok(Rollout { n, states })
}

/// Forward Euler: `x_{i+1} = x_i + dt * f(x_i, u_i)` from `x_0 = x0`.
pub fn simulate(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<StateTrajectory> {
    Ok(rollout(model, grid, u)?.into_trajectory())
}

pub(crate) fn residual_of(model: &OcpModel, roll: &Rollout) -> Residual {
    Residual(roll.terminal().iter().zip(model.xf()).map(|(x, t)| x - t).collect())
}

pub fn residual(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<Residual> {
    Ok(residual_of(model, &rollout(model, grid, u)?))
}

/// Exact Jacobian of the discrete residual, `n x (m N)`, columns ordered like the
/// flat control vector (channel-major). Propagates the forward sensitivity
/// `S_{i+1} = (I + dt A_i) S_i + dt B_i E_i`.
pub fn residual_jacobian(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<DMatrix<f64>> {
    let roll = rollout(model, grid, u)?;
    let (n, m, big_n) = (model.state_dim(), model.control_dim(), grid.intervals());
    let dt = grid.dt();
    let cols = m * big_n;
    let mut sens = DMatrix::<f64>::zeros(n, cols);
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    let mut uj = vec![0.0; m];
    for j in 0..big_n {
        u.at_into(j, &mut uj);
        let xj = roll.node(j);
        model.system().state_jacobian(xj, &uj, &mut a);
        model.system().control_jacobian(xj, &uj, &mut b);
        let step = DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } + dt * a[r * n + c]);
        // Only columns of earlier intervals are nonzero so far.
        let live: Vec<usize> = (0..m).flat_map(|r| (0..j).map(move |k| r * big_n + k)).collect();
        if !live.is_empty() {
            let block = sens.select_columns(&live);
            let advanced = &step * block;
            for (pos, &col) in live.iter().enumerate() {
                sens.set_column(col, &advanced.column(pos));
            }
        }
        for r in 0..m {
            for p in 0..n {
                sens[(p, r * big_n + j)] = dt * b[p * m + r];
            }
        }
    }
    Ok(sens)
}

/// Same matrix as [`residual_jacobian`], built backward from an existing rollout:
/// `P_N = I`, column block `j` is `dt P_{j+1} B_j`, `P_j = P_{j+1} (I + dt A_j)`.
pub(crate) fn residual_jacobian_backward(
    model: &OcpModel,
    grid: &TimeGrid,
    u: &ControlTrajectory,
    roll: &Rollout,
) -> DMatrix<f64> {
    let (n, m, big_n) = (model.state_dim(), model.control_dim(), grid.intervals());
    let dt = grid.dt();
    let sys = model.system();
    let mut jac = DMatrix::<f64>::zeros(n, m * big_n);
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    let mut uj = vec![0.0; m];
    for j in (0..big_n).rev() {
        u.at_into(j, &mut uj);
        let xj = roll.node(j);
        sys.state_jacobian(xj, &uj, &mut a);
        sys.control_jacobian(xj, &uj, &mut b);
        let bm = DMatrix::from_row_slice(n, m, &b);
        let block = &p * bm;
        for r in 0..m {
            for q in 0..n {
                jac[(q, r * big_n + j)] = dt * block[(q, r)];
            }
        }
        let step = DMatrix::from_row_slice(n, n, &a) * dt + DMatrix::identity(n, n);
        p = &p * step;
    }
    jac
}

/// `J(u)^T w` by a backward adjoint sweep, without forming `J`.
pub(crate) fn residual_vjp(
    model: &OcpModel,
    grid: &TimeGrid,
    u: &ControlTrajectory,
    roll: &Rollout,
    weights: &[f64],
    out: &mut [f64],
) {
    let (n, m, big_n) = (model.state_dim(), model.control_dim(), grid.intervals());
    let dt = grid.dt();
    let sys = model.system();
    let mut p = weights.to_vec();
    let mut next = vec![0.0; n];
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    let mut uj = vec![0.0; m];
    for j in (0..big_n).rev() {
        u.at_into(j, &mut uj);
        let xj = roll.node(j);
        sys.state_jacobian(xj, &uj, &mut a);
        sys.control_jacobian(xj, &uj, &mut b);
        for r in 0..m {
            let mut acc = 0.0;
            for q in 0..n {
                acc += b[q * m + r] * p[q];
            }
            out[r * big_n + j] = dt * acc;
        }
        for c in 0..n {
            let mut acc = 0.0;
            for q in 0..n {
                acc += a[q * n + c] * p[q];
            }
            next[c] = p[c] + dt * acc;
        }
        std::mem::swap(&mut p, &mut next);
    }
}

/// Discrete running cost `dt * sum_j f0(u_j)` (rectangle rule).
pub fn discrete_cost(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory) -> Result<f64> {
    check_inputs(model, grid, u)?;
    let mut uj = vec![0.0; model.control_dim()];
    let mut total = 0.0;
    for j in 0..grid.intervals() {
        u.at_into(j, &mut uj);
        total += model.cost_integrand(&uj);
    }
    Ok(grid.dt() * total)
}

/// Adds the gradient of [`discrete_cost`] to `out`.
pub(crate) fn add_cost_gradient(model: &OcpModel, grid: &TimeGrid, u: &ControlTrajectory, out: &mut [f64]) {
    let (m, big_n) = (model.control_dim(), grid.intervals());
    let dt = grid.dt();
    let mut uj = vec![0.0; m];
    let mut g = vec![0.0; m];
    for j in 0..big_n {
        u.at_into(j, &mut uj);
        model.system().cost_gradient(&uj, &mut g);
        for r in 0..m {
            out[r * big_n + j] += dt * g[r];
        }
    }
}
