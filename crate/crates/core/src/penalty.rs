//! Minimization of `cost(z) + c * ||g(z)||_1` over a box.
//!
//! The l1 term is replaced by a sum of Huber functions with width `mu`, driven
//! down a continuation schedule.
//!
//! Problems that expose a [`CurvatureModel`] are solved level by level with a
//! truncated-Newton trust region. The metric and CG preconditioner is
//! `D + J^T W J` with `W_j = c / mu` on constraints inside the Huber band, which
//! absorbs the `c / mu` stiffness of the smoothed penalty; the box is handled
//! inside CG by fixing variables as they reach it. Other problems fall back to a
//! two-metric projected L-BFGS with backtracking.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::norm1;

/// Constraint Jacobian, one row per constraint.
#[derive(Debug, Clone)]
pub enum ConstraintJacobian {
    Dense(DMatrix<f64>),
    Sparse(SparseRows),
}

/// Row-wise sparse Jacobian with a variable ordering that keeps `J^T J` banded.
#[derive(Debug, Clone)]
pub struct SparseRows {
    pub dim: usize,
    /// `(column, value)` pairs of each row.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Position of each variable in the banded ordering (a permutation).
    pub order: Vec<usize>,
}

impl ConstraintJacobian {
    pub fn nrows(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::Sparse(s) => s.rows.len(),
        }
    }

    /// `J v`.
    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense(m) => (m * DVector::from_column_slice(v)).iter().copied().collect(),
            Self::Sparse(s) => s.rows.iter().map(|row| row.iter().map(|&(c, a)| a * v[c]).sum()).collect(),
        }
    }

    /// `J^T w`.
    pub fn tr_mul(&self, w: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense(m) => m.tr_mul(&DVector::from_column_slice(w)).iter().copied().collect(),
            Self::Sparse(s) => {
                let mut out = vec![0.0; s.dim];
                for (row, &wr) in s.rows.iter().zip(w) {
                    if wr != 0.0 {
                        for &(c, a) in row {
                            out[c] += a * wr;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Cost Hessian diagonal and constraint Jacobian at a point.
#[derive(Debug, Clone)]
pub struct CurvatureModel {
    /// Positive diagonal approximation of the cost Hessian.
    pub diag: Vec<f64>,
    pub jacobian: ConstraintJacobian,
}

/// Smooth cost and constraint map of a penalized problem.
pub trait PenaltyProblem: Sync {
    /// Per-evaluation data reused by the gradient (e.g. a state rollout).
    type Cache;

    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];

    /// Returns `(cost, constraints, cache)`.
    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>, Self::Cache)>;

    /// Writes `grad cost(z) + J_g(z)^T weights` into `grad`.
    fn gradient(&self, z: &[f64], cache: &Self::Cache, weights: &[f64], grad: &mut [f64]);

    fn curvature(&self, _z: &[f64], _cache: &Self::Cache) -> Option<CurvatureModel> {
        None
    }
}

/// Huber function of width `mu`: quadratic inside `[-mu, mu]`, `|h| - mu/2` outside.
pub fn huber(h: f64, mu: f64) -> f64 {
    if h.abs() <= mu {
        h * h / (2.0 * mu)
    } else {
        h.abs() - 0.5 * mu
    }
}

pub fn huber_derivative(h: f64, mu: f64) -> f64 {
    if h.abs() <= mu {
        h / mu
    } else {
        h.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelStatus {
    /// Projected gradient below the level tolerance.
    Converged,
    /// No acceptable step even along the preconditioned projected gradient.
    Stalled,
    MaxIter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub mu: f64,
    pub tolerance: f64,
    pub status: LevelStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient: f64,
    pub smoothed_value: f64,
    pub exact_value: f64,
    /// Exact objective at every accepted iterate, when tracing was requested.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub exact_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub smoothed_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub mu_schedule: Vec<f64>,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub record_trace: bool,
}

#[derive(Debug, Clone)]
pub struct PenaltyOutcome {
    pub z: Vec<f64>,
    pub cost: f64,
    pub constraints: Vec<f64>,
    /// `cost + c * ||constraints||_1`.
    pub exact_value: f64,
    pub levels: Vec<LevelReport>,
}

impl PenaltyOutcome {
    pub fn iterations(&self) -> usize {
        self.levels.iter().map(|l| l.iterations).sum()
    }

    pub fn evaluations(&self) -> usize {
        self.levels.iter().map(|l| l.evaluations).sum()
    }

    /// Final level met its gradient tolerance or stalled at roundoff.
    pub fn converged(&self) -> bool {
        self.levels
            .last()
            .is_some_and(|l| matches!(l.status, LevelStatus::Converged | LevelStatus::Stalled))
    }
}

struct Point<C> {
    z: Vec<f64>,
    smooth: f64,
    exact: f64,
    cost: f64,
    cons: Vec<f64>,
    grad: Vec<f64>,
    cache: C,
}

fn evaluate_point<P: PenaltyProblem>(problem: &P, z: Vec<f64>, c: f64, mu: f64) -> Result<Point<P::Cache>> {
    let (cost, cons, cache) = problem.evaluate(&z)?;
    let smooth = cost + c * cons.iter().map(|&h| huber(h, mu)).sum::<f64>();
    let exact = cost + c * norm1(&cons);
    let weights: Vec<f64> = cons.iter().map(|&h| c * huber_derivative(h, mu)).collect();
    let mut grad = vec![0.0; z.len()];
    problem.gradient(&z, &cache, &weights, &mut grad);
    Ok(Point {
        z,
        smooth,
        exact,
        cost,
        cons,
        grad,
        cache,
    })
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .fold(0.0f64, |acc, ((&x, &gi), (&l, &u))| acc.max((x - (x - gi).clamp(l, u)).abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Relative slack on f for the approximate Wolfe acceptance.
const ROUNDOFF: f64 = 1e-14;

/// Forcing term cap and iteration cap of the inner conjugate gradient.
const CG_FORCING: f64 = 0.1;
const CG_MAX_ITER: usize = 200;

/// Symmetric positive definite band matrix and its Cholesky factor, both in
/// lower band storage: `band[i][k]` holds entry `(i, i - k)`.
struct BandCholesky {
    width: usize,
    matrix: Vec<Vec<f64>>,
    factor: Vec<Vec<f64>>,
}

impl BandCholesky {
    fn new(matrix: Vec<Vec<f64>>, width: usize) -> Option<Self> {
        let n = matrix.len();
        let mut l = matrix.clone();
        for i in 0..n {
            for k in (0..=width.min(i)).rev() {
                let j = i - k;
                let mut sum = l[i][k];
                let start = i.saturating_sub(width).max(j.saturating_sub(width));
                for p in start..j {
                    sum -= l[i][i - p] * l[j][j - p];
                }
                if k == 0 {
                    if !(sum > 0.0) {
                        return None;
                    }
                    l[i][0] = sum.sqrt();
                } else {
                    l[i][k] = sum / l[j][0];
                }
            }
        }
        Some(Self {
            width,
            matrix,
            factor: l,
        })
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] += self.matrix[i][0] * v[i];
            for k in 1..=self.width.min(i) {
                let a = self.matrix[i][k];
                out[i] += a * v[i - k];
                out[i - k] += a * v[i];
            }
        }
        out
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let l = &self.factor;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 1..=self.width.min(i) {
                y[i] -= l[i][k] * y[i - k];
            }
            y[i] /= l[i][0];
        }
        for i in (0..n).rev() {
            for k in 1..=self.width.min(n - 1 - i) {
                y[i] -= l[i + k][k] * y[i + k];
            }
            y[i] /= l[i][0];
        }
        y
    }
}

/// `M = D + J^T W J` restricted to the free variables, used both as the trust
/// region metric and as the CG preconditioner. Dense Jacobians apply `M^{-1}` by
/// Woodbury, `D^{-1} - U^T S^{-1} U` with `U = W^{1/2} J D^{-1}` and
/// `S = I + U J^T W^{1/2}`; sparse ones factor `M` in their banded ordering.
enum Preconditioner {
    Woodbury {
        inv_diag: Vec<f64>,
        diag: Vec<f64>,
        a: DMatrix<f64>,
        u: DMatrix<f64>,
        s_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
    Banded {
        order: Vec<usize>,
        free: Vec<bool>,
        chol: BandCholesky,
    },
}

impl Preconditioner {
    fn new(model: &CurvatureModel, band_weights: &[f64], free: &[bool]) -> Option<Self> {
        let dmax = max_abs(&model.diag);
        if !(dmax > 0.0) {
            return None;
        }
        let floor = 1e-10 * dmax;
        match &model.jacobian {
            ConstraintJacobian::Dense(jac) => {
                let inv_diag: Vec<f64> = model
                    .diag
                    .iter()
                    .zip(free)
                    .map(|(&d, &f)| if f { 1.0 / d.max(floor) } else { 0.0 })
                    .collect();
                let rows = jac.nrows();
                let mut a = jac.clone();
                for (r, w) in band_weights.iter().enumerate() {
                    a.row_mut(r).scale_mut(w.sqrt());
                }
                let mut u = a.clone();
                for (i, mut col) in u.column_iter_mut().enumerate() {
                    col.scale_mut(inv_diag[i]);
                }
                let s = DMatrix::identity(rows, rows) + &u * a.transpose();
                let s_chol = s.cholesky()?;
                let diag = model.diag.iter().map(|d| d.max(floor)).collect();
                Some(Self::Woodbury {
                    inv_diag,
                    diag,
                    a,
                    u,
                    s_chol,
                })
            }
            ConstraintJacobian::Sparse(sp) => {
                let n = sp.dim;
                let width = sp
                    .rows
                    .iter()
                    .filter_map(|row| {
                        let pos = row.iter().filter(|(c, _)| free[*c]).map(|(c, _)| sp.order[*c]);
                        let (lo, hi) = pos.fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p), hi.max(p)));
                        (lo <= hi).then(|| hi - lo)
                    })
                    .max()
                    .unwrap_or(0);
                let mut m = vec![vec![0.0; width + 1]; n];
                for i in 0..n {
                    m[sp.order[i]][0] = if free[i] { model.diag[i].max(floor) } else { 1.0 };
                }
                for (row, &w) in sp.rows.iter().zip(band_weights) {
                    if w == 0.0 {
                        continue;
                    }
                    for &(ca, va) in row.iter().filter(|(c, _)| free[*c]) {
                        for &(cb, vb) in row.iter().filter(|(c, _)| free[*c]) {
                            let (pa, pb) = (sp.order[ca], sp.order[cb]);
                            if pa >= pb {
                                m[pa][pa - pb] += w * va * vb;
                            }
                        }
                    }
                }
                Some(Self::Banded {
                    order: sp.order.clone(),
                    free: free.to_vec(),
                    chol: BandCholesky::new(m, width)?,
                })
            }
        }
    }

    /// `M v` on the free variables.
    fn metric(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Woodbury { inv_diag, diag, a, .. } => {
                let av = a * DVector::from_column_slice(v);
                let back = a.tr_mul(&av);
                v.iter()
                    .zip(diag)
                    .zip(back.iter())
                    .zip(inv_diag)
                    .map(|(((x, d), b), inv)| if *inv > 0.0 { d * x + b } else { 0.0 })
                    .collect()
            }
            Self::Banded { order, free, chol } => {
                let mut pv = vec![0.0; v.len()];
                for i in 0..v.len() {
                    pv[order[i]] = if free[i] { v[i] } else { 0.0 };
                }
                let mv = chol.mul(&pv);
                (0..v.len()).map(|i| if free[i] { mv[order[i]] } else { 0.0 }).collect()
            }
        }
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        match self {
            Self::Woodbury { inv_diag, u, s_chol, .. } => {
                let t = s_chol.solve(&(u * DVector::from_column_slice(q)));
                let corr = u.transpose() * t;
                q.iter()
                    .zip(inv_diag)
                    .zip(corr.iter())
                    .map(|((v, d), k)| d * v - k)
                    .collect()
            }
            Self::Banded { order, free, chol } => {
                let mut pq = vec![0.0; q.len()];
                for i in 0..q.len() {
                    pq[order[i]] = if free[i] { q[i] } else { 0.0 };
                }
                let x = chol.solve(&pq);
                (0..q.len()).map(|i| if free[i] { x[order[i]] } else { 0.0 }).collect()
            }
        }
    }
}

/// Quadratic model of the smoothed objective. Products with the Hessian combine
/// a finite difference of the gradient at frozen penalty weights (cost and
/// constraint curvature) with the exact Huber term `J^T diag(c/mu on the band) J`.
struct NewtonSystem<'a, P: PenaltyProblem> {
    problem: &'a P,
    point: &'a Point<P::Cache>,
    weights: Vec<f64>,
    band: Vec<f64>,
    model: CurvatureModel,
    products: usize,
}

/// Outcome of the bound-constrained Steihaug iteration.
struct TrustStep {
    step: Vec<f64>,
    /// `-(g.d + d.H.d / 2)`.
    predicted: f64,
    on_boundary: bool,
}

impl<P: PenaltyProblem> NewtonSystem<'_, P> {
    fn hessian_times(&mut self, v: &[f64]) -> Option<Vec<f64>> {
        let vnorm = dot(v, v).sqrt();
        if vnorm == 0.0 {
            return Some(vec![0.0; v.len()]);
        }
        let znorm = dot(&self.point.z, &self.point.z).sqrt();
        let eps = f64::EPSILON.sqrt() * (1.0 + znorm) / vnorm;
        let shifted: Vec<f64> = self.point.z.iter().zip(v).map(|(z, d)| z + eps * d).collect();
        self.products += 1;
        let (_, _, cache) = self.problem.evaluate(&shifted).ok()?;
        let mut g = vec![0.0; v.len()];
        self.problem.gradient(&shifted, &cache, &self.weights, &mut g);
        let jac = &self.model.jacobian;
        let scaled: Vec<f64> = jac.mul(v).iter().zip(&self.band).map(|(x, w)| x * w).collect();
        let huber_term = jac.tr_mul(&scaled);
        Some(
            g.iter()
                .zip(&self.point.grad)
                .zip(huber_term.iter())
                .map(|((gi, g0), hi)| (gi - g0) / eps + hi)
                .collect(),
        )
    }

    /// Steihaug CG on `min g.d + d.H.d/2` subject to `|d|_M <= radius` and the box.
    /// A CG step that would leave the box stops on it, the variables it reached
    /// are fixed and CG restarts on the remaining ones.
    fn steihaug(&mut self, lo: &[f64], hi: &[f64], free: &[bool], radius: f64) -> Option<TrustStep> {
        let z = &self.point.z;
        let grad = &self.point.grad;
        let dim = z.len();
        let mut free = free.to_vec();
        let metric = Preconditioner::new(&self.model, &self.band, &free)?;
        let masked = |v: &[f64], free: &[bool]| -> Vec<f64> {
            v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect()
        };
        let g_free = masked(grad, &free);
        let gnorm = dot(&g_free, &g_free).sqrt();
        let target = CG_FORCING.min(gnorm.sqrt()) * gnorm;
        let mut x = vec![0.0; dim];
        // Model gradient g + H x.
        let mut r = grad.clone();
        let mut iterations = 0;
        let finish = |x: Vec<f64>, r: &[f64], on_boundary: bool| {
            let predicted = -0.5 * x.iter().zip(grad.iter().zip(r)).map(|(xi, (gi, ri))| xi * (gi + ri)).sum::<f64>();
            TrustStep {
                step: x,
                predicted,
                on_boundary,
            }
        };

        'restart: loop {
            let precond = Preconditioner::new(&self.model, &self.band, &free)?;
            let mut rf = masked(&r, &free);
            if dot(&rf, &rf).sqrt() <= target {
                break;
            }
            let mut y = precond.apply(&rf);
            let mut p: Vec<f64> = y.iter().map(|v| -v).collect();
            let mut ry = dot(&rf, &y);
            loop {
                iterations += 1;
                if iterations > CG_MAX_ITER {
                    break 'restart;
                }
                let hp = self.hessian_times(&p)?;
                let curv = dot(&p, &hp);

                let mx = metric.metric(&x);
                let mp = metric.metric(&p);
                let (xx, xp, pp) = (dot(&x, &mx), dot(&x, &mp), dot(&p, &mp));
                let to_radius = if pp > 0.0 {
                    let disc = (xp * xp + pp * (radius * radius - xx)).max(0.0);
                    (-xp + disc.sqrt()) / pp
                } else {
                    f64::INFINITY
                };
                let mut to_box = f64::INFINITY;
                for i in 0..dim {
                    if free[i] && p[i] != 0.0 && (if p[i] > 0.0 { hi[i] } else { lo[i] }).is_finite() {
                        let room = if p[i] > 0.0 { hi[i] - z[i] - x[i] } else { lo[i] - z[i] - x[i] };
                        to_box = to_box.min((room / p[i]).max(0.0));
                    }
                }
                let alpha = if curv > 0.0 { dot(&rf, &y) / curv } else { f64::INFINITY };
                let alpha = alpha.min(to_radius).min(to_box);
                if !alpha.is_finite() {
                    return None;
                }
                for i in 0..dim {
                    x[i] += alpha * p[i];
                    r[i] += alpha * hp[i];
                }
                if alpha == to_radius && to_radius <= to_box {
                    return Some(finish(x, &r, true));
                }
                if alpha == to_box {
                    for i in 0..dim {
                        if !free[i] || p[i] == 0.0 {
                            continue;
                        }
                        let bound = if p[i] > 0.0 { hi[i] } else { lo[i] };
                        if bound.is_finite() && ((z[i] + x[i]) - bound).abs() <= 1e-12 * (1.0 + bound.abs()) {
                            x[i] = bound - z[i];
                            free[i] = false;
                        }
                    }
                    continue 'restart;
                }
                rf = masked(&r, &free);
                if dot(&rf, &rf).sqrt() <= target {
                    break 'restart;
                }
                y = precond.apply(&rf);
                let ry_next = dot(&rf, &y);
                let beta = ry_next / ry;
                ry = ry_next;
                for i in 0..dim {
                    p[i] = -y[i] + beta * p[i];
                }
            }
        }
        Some(finish(x, &r, false))
    }
}

/// Projected backtracking along `d` (free part) with pinned variables sent to
/// their bound. Returns the accepted point and the realized step.
fn line_search<P: PenaltyProblem>(
    problem: &P,
    cur: &Point<P::Cache>,
    d: &[f64],
    c: f64,
    mu: f64,
    evaluations: &mut usize,
) -> Option<(Point<P::Cache>, Vec<f64>)> {
    let (lo, hi) = (problem.lower(), problem.upper());
    let dim = d.len();
    let mut step = 1.0;
    for _ in 0..60 {
        let trial: Vec<f64> = (0..dim)
            .map(|i| (cur.z[i] + step * d[i]).clamp(lo[i], hi[i]))
            .collect();
        let moved: Vec<f64> = trial.iter().zip(&cur.z).map(|(a, b)| a - b).collect();
        if moved.iter().all(|v| *v == 0.0) {
            return None;
        }
        let slope = dot(&cur.grad, &moved);
        if slope < 0.0 {
            *evaluations += 1;
            if let Ok(next) = evaluate_point(problem, trial, c, mu) {
                let armijo = next.smooth <= cur.smooth + 1e-4 * slope;
                // Once the predicted decrease is below the resolution of f,
                // fall back on the slope at the trial point.
                let approx_wolfe = next.smooth <= cur.smooth + ROUNDOFF * cur.smooth.abs()
                    && dot(&next.grad, &moved) <= -0.8 * slope;
                if armijo || approx_wolfe {
                    return Some((next, moved));
                }
            }
        }
        step *= 0.5;
    }
    None
}

/// Sends pinned variables to their bound and negates nothing else.
fn full_direction(free_step: &[f64], cur_z: &[f64], grad: &[f64], free: &[bool], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..free_step.len())
        .map(|i| {
            if free[i] {
                free_step[i]
            } else if grad[i] > 0.0 {
                lo[i] - cur_z[i]
            } else {
                hi[i] - cur_z[i]
            }
        })
        .collect()
}

/// Two-loop recursion on the masked gradient; `None` if it is not a descent direction.
fn lbfgs_direction(pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, masked: &[f64], gamma: f64, free: &[bool]) -> Option<Vec<f64>> {
    let mut d = masked.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &d);
        for (di, yi) in d.iter_mut().zip(y) {
            *di -= a * yi;
        }
        alphas.push(a);
    }
    d.iter_mut().for_each(|v| *v *= gamma);
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &d);
        for (di, si) in d.iter_mut().zip(s) {
            *di += (a - b) * si;
        }
    }
    for (di, f) in d.iter_mut().zip(free) {
        *di = if *f { -*di } else { 0.0 };
    }
    (dot(&d, masked) < 0.0).then_some(d)
}

/// Two-metric split: variables within `width` of a bound whose gradient
/// pushes outward are pinned.
fn free_set(z: &[f64], grad: &[f64], lo: &[f64], hi: &[f64], scale: f64) -> Vec<bool> {
    let scaled: Vec<f64> = grad.iter().map(|g| scale * g).collect();
    let width = projected_gradient_norm(z, &scaled, lo, hi).min(1e-3);
    (0..z.len())
        .map(|i| {
            let (x, g) = (z[i], grad[i]);
            !((x - lo[i] <= width && g > 0.0) || (hi[i] - x <= width && g < 0.0))
        })
        .collect()
}

struct LevelLog {
    iterations: usize,
    evaluations: usize,
    exact_trace: Vec<f64>,
    smoothed_trace: Vec<f64>,
    record: bool,
}

impl LevelLog {
    fn new<C>(start: &Point<C>, record: bool) -> Self {
        let mut log = Self {
            iterations: 0,
            evaluations: 0,
            exact_trace: Vec::new(),
            smoothed_trace: Vec::new(),
            record,
        };
        log.push(start);
        log
    }

    fn push<C>(&mut self, p: &Point<C>) {
        if self.record {
            self.exact_trace.push(p.exact);
            self.smoothed_trace.push(p.smooth);
        }
    }

    fn report(self, mu: f64, tol: f64, mut status: LevelStatus, pg: f64, end: (f64, f64)) -> LevelReport {
        if status == LevelStatus::MaxIter && pg <= tol {
            status = LevelStatus::Converged;
        }
        LevelReport {
            mu,
            tolerance: tol,
            status,
            iterations: self.iterations,
            evaluations: self.evaluations,
            projected_gradient: pg,
            smoothed_value: end.0,
            exact_value: end.1,
            exact_trace: self.exact_trace,
            smoothed_trace: self.smoothed_trace,
        }
    }
}

fn solve_level<P: PenaltyProblem>(
    problem: &P,
    start: Point<P::Cache>,
    c: f64,
    mu: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(Point<P::Cache>, LevelReport)> {
    if problem.curvature(&start.z, &start.cache).is_some() {
        solve_level_trust(problem, start, c, mu, tol, opts)
    } else {
        solve_level_lbfgs(problem, start, c, mu, tol, opts)
    }
}

/// Projected L-BFGS with backtracking.
fn solve_level_lbfgs<P: PenaltyProblem>(
    problem: &P,
    start: Point<P::Cache>,
    c: f64,
    mu: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(Point<P::Cache>, LevelReport)> {
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut cur = start;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut log = LevelLog::new(&cur, opts.record_trace);
    let mut status = LevelStatus::MaxIter;
    let mut pg = projected_gradient_norm(&cur.z, &cur.grad, lo, hi);

    while log.iterations < opts.max_iter {
        if pg <= tol {
            status = LevelStatus::Converged;
            break;
        }
        let steepest = 1.0 / max_abs(&cur.grad).max(1e-300);
        let gamma = pairs.back().map_or(steepest, |(s, y, _)| dot(s, y) / dot(y, y));
        let free = free_set(&cur.z, &cur.grad, lo, hi, gamma);
        let masked: Vec<f64> = cur.grad.iter().zip(&free).map(|(g, &f)| if f { *g } else { 0.0 }).collect();

        let mut candidates = Vec::with_capacity(2);
        if let Some(d) = lbfgs_direction(&pairs, &masked, gamma, &free) {
            candidates.push(d);
        }
        candidates.push(masked.iter().map(|g| -steepest * g).collect::<Vec<_>>());

        let mut accepted = None;
        for step in &candidates {
            let d = full_direction(step, &cur.z, &cur.grad, &free, lo, hi);
            accepted = line_search(problem, &cur, &d, c, mu, &mut log.evaluations);
            if accepted.is_some() {
                break;
            }
            pairs.clear();
        }
        let Some((next, s)) = accepted else {
            status = LevelStatus::Stalled;
            break;
        };
        log.iterations += 1;
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        cur = next;
        log.push(&cur);
        pg = projected_gradient_norm(&cur.z, &cur.grad, lo, hi);
    }
    let end = (cur.smooth, cur.exact);
    Ok((cur, log.report(mu, tol, status, pg, end)))
}

/// Consecutive rejected trust-region steps before a level is declared stalled.
const MAX_REJECTIONS: usize = 60;
/// Accepted steps over which a decrease at roundoff level counts as a stall.
const STAGNATION_WINDOW: usize = 10;

/// Truncated-Newton trust region in the metric of the structured preconditioner,
/// with the box handled inside the CG iteration. Accepted steps decrease the
/// smoothed objective.
fn solve_level_trust<P: PenaltyProblem>(
    problem: &P,
    start: Point<P::Cache>,
    c: f64,
    mu: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(Point<P::Cache>, LevelReport)> {
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut cur = start;
    let mut log = LevelLog::new(&cur, opts.record_trace);
    let mut status = LevelStatus::MaxIter;
    let mut pg = projected_gradient_norm(&cur.z, &cur.grad, lo, hi);
    let mut radius = f64::NAN;
    let mut rejections = 0;
    let mut attempts = 0;
    let mut recent = VecDeque::with_capacity(STAGNATION_WINDOW + 1);
    recent.push_back(cur.smooth);

    while attempts < opts.max_iter {
        if pg <= tol {
            status = LevelStatus::Converged;
            break;
        }
        attempts += 1;
        // Variables on a bound with an outward gradient stay there.
        let free: Vec<bool> = (0..cur.z.len())
            .map(|i| !((cur.z[i] <= lo[i] && cur.grad[i] > 0.0) || (cur.z[i] >= hi[i] && cur.grad[i] < 0.0)))
            .collect();
        let Some(model) = problem.curvature(&cur.z, &cur.cache) else {
            break;
        };
        let band: Vec<f64> = cur.cons.iter().map(|h| if h.abs() <= mu { c / mu } else { 0.0 }).collect();
        if radius.is_nan() {
            let Some(precond) = Preconditioner::new(&model, &band, &free) else {
                break;
            };
            let masked: Vec<f64> = cur.grad.iter().zip(&free).map(|(g, &f)| if f { *g } else { 0.0 }).collect();
            radius = dot(&masked, &precond.apply(&masked)).sqrt();
        }
        let weights = cur.cons.iter().map(|&h| c * huber_derivative(h, mu)).collect();
        let mut system = NewtonSystem {
            problem,
            point: &cur,
            weights,
            band,
            model,
            products: 0,
        };
        let solved = system.steihaug(lo, hi, &free, radius);
        log.evaluations += system.products;
        let Some(TrustStep {
            step,
            predicted,
            on_boundary,
        }) = solved
        else {
            status = LevelStatus::Stalled;
            break;
        };
        let trial: Vec<f64> = (0..step.len()).map(|i| (cur.z[i] + step[i]).clamp(lo[i], hi[i])).collect();
        let moved: Vec<f64> = trial.iter().zip(&cur.z).map(|(a, b)| a - b).collect();
        let step_norm = {
            let metric = Preconditioner::new(&system.model, &system.band, &free);
            metric.map_or(radius, |m| dot(&moved, &m.metric(&moved)).sqrt())
        };

        log.evaluations += 1;
        let accepted = evaluate_point(problem, trial, c, mu).ok().filter(|n| {
            let actual = cur.smooth - n.smooth;
            if predicted > 0.0 && actual >= 1e-4 * predicted {
                return true;
            }
            // Decrease below the resolution of f: trust the directional slope.
            predicted > 0.0
                && n.smooth <= cur.smooth + ROUNDOFF * cur.smooth.abs()
                && predicted <= 1e3 * ROUNDOFF * cur.smooth.abs().max(1.0)
                && dot(&n.grad, &moved) <= 0.8 * dot(&cur.grad, &moved).abs()
        });
        match accepted {
            Some(n) => {
                let ratio = (cur.smooth - n.smooth) / predicted;
                if ratio > 0.75 && on_boundary {
                    radius *= 2.0;
                } else if ratio < 0.25 {
                    radius = 0.25 * step_norm.max(f64::MIN_POSITIVE);
                }
                rejections = 0;
                log.iterations += 1;
                cur = n;
                log.push(&cur);
                pg = projected_gradient_norm(&cur.z, &cur.grad, lo, hi);
                recent.push_back(cur.smooth);
                if recent.len() > STAGNATION_WINDOW {
                    let oldest = recent.pop_front().unwrap_or(cur.smooth);
                    if oldest - cur.smooth <= STAGNATION_WINDOW as f64 * ROUNDOFF * cur.smooth.abs().max(1.0) {
                        status = LevelStatus::Stalled;
                        break;
                    }
                }
            }
            None => {
                radius = 0.25 * step_norm.min(radius);
                rejections += 1;
                if rejections > MAX_REJECTIONS || !(radius > 0.0) {
                    status = LevelStatus::Stalled;
                    break;
                }
            }
        }
    }
    let end = (cur.smooth, cur.exact);
    Ok((cur, log.report(mu, tol, status, pg, end)))
}

/// Huber continuation from `start` (projected into the box first).
pub fn minimize_penalized<P: PenaltyProblem>(
    problem: &P,
    c: f64,
    start: &[f64],
    opts: &SolverOptions,
) -> Result<PenaltyOutcome> {
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut z: Vec<f64> = start.iter().zip(lo.iter().zip(hi)).map(|(&x, (&l, &u))| x.clamp(l, u)).collect();
    let mut levels = Vec::with_capacity(opts.mu_schedule.len());
    let mut last = None;
    for &mu in &opts.mu_schedule {
        let start = evaluate_point(problem, z, c, mu)?;
        let tol = opts.grad_tol.max(mu);
        let (p, report) = solve_level(problem, start, c, mu, tol, opts)?;
        levels.push(report);
        z = p.z.clone();
        last = Some(p);
    }
    let p = match last {
        Some(p) => p,
        None => evaluate_point(problem, z, c, 1.0)?,
    };
    Ok(PenaltyOutcome {
        exact_value: p.exact,
        cost: p.cost,
        constraints: p.cons,
        z: p.z,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_cholesky_solves_tridiagonal() {
        // [4 1 0; 1 4 1; 0 1 4]
        let m = vec![vec![4.0, 0.0], vec![4.0, 1.0], vec![4.0, 1.0]];
        let chol = BandCholesky::new(m, 1).unwrap();
        let b = chol.mul(&[1.0, -2.0, 3.0]);
        assert_eq!(b, vec![2.0, -4.0, 10.0]);
        let x = chol.solve(&b);
        for (a, e) in x.iter().zip([1.0, -2.0, 3.0]) {
            assert!((a - e).abs() < 1e-14);
        }
        assert!(BandCholesky::new(vec![vec![-1.0]], 0).is_none());
    }

    /// min 0.5 |z|^2 + c |sum(z) - 1| over [-1, 1]^n.
    struct SumConstraint {
        lo: Vec<f64>,
        hi: Vec<f64>,
    }

    /// Same problem, exposing curvature so levels use the trust region.
    struct CurvedSum(SumConstraint);

    impl PenaltyProblem for CurvedSum {
        type Cache = ();
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn lower(&self) -> &[f64] {
            self.0.lower()
        }
        fn upper(&self) -> &[f64] {
            self.0.upper()
        }
        fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>, ())> {
            self.0.evaluate(z)
        }
        fn gradient(&self, z: &[f64], cache: &(), w: &[f64], grad: &mut [f64]) {
            self.0.gradient(z, cache, w, grad)
        }
        fn curvature(&self, z: &[f64], _: &()) -> Option<CurvatureModel> {
            Some(CurvatureModel {
                diag: vec![1.0; z.len()],
                jacobian: ConstraintJacobian::Dense(DMatrix::from_element(1, z.len(), 1.0)),
            })
        }
    }

    impl PenaltyProblem for SumConstraint {
        type Cache = ();
        fn dim(&self) -> usize {
            self.lo.len()
        }
        fn lower(&self) -> &[f64] {
            &self.lo
        }
        fn upper(&self) -> &[f64] {
            &self.hi
        }
        fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>, ())> {
            Ok((0.5 * dot(z, z), vec![z.iter().sum::<f64>() - 1.0], ()))
        }
        fn gradient(&self, z: &[f64], _: &(), w: &[f64], grad: &mut [f64]) {
            for (g, x) in grad.iter_mut().zip(z) {
                *g = x + w[0];
            }
        }
    }

    fn opts() -> SolverOptions {
        SolverOptions {
            mu_schedule: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8],
            grad_tol: 1e-10,
            max_iter: 500,
            memory: 5,
            record_trace: true,
        }
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(3.0, 1.0), 2.5);
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(-0.5, 1.0), 0.125);
        assert_eq!(huber_derivative(-3.0, 1.0), -1.0);
        assert_eq!(huber_derivative(0.5, 1.0), 0.5);
    }

    #[test]
    fn exact_penalty_recovers_constrained_minimizer() {
        // Constrained optimum z_i = 1/n with multiplier 1/n; c = 1 exceeds it.
        let n = 8;
        let p = SumConstraint {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        };
        let out = minimize_penalized(&p, 1.0, &vec![0.9; n], &opts()).unwrap();
        assert!(out.constraints[0].abs() < 1e-7, "{:?}", out.constraints);
        for z in &out.z {
            assert!((z - 1.0 / n as f64).abs() < 1e-7);
        }
        assert!(out.converged());
    }

    #[test]
    fn trust_region_handles_unbounded_variables() {
        // One finite, active upper bound among unbounded variables.
        let n = 5;
        let mut hi = vec![f64::INFINITY; n];
        hi[0] = 0.1;
        let p = CurvedSum(SumConstraint {
            lo: vec![f64::NEG_INFINITY; n],
            hi,
        });
        let out = minimize_penalized(&p, 1.0, &[3.0, -2.0, 0.0, 7.0, 1.0], &opts()).unwrap();
        assert_eq!(out.z[0], 0.1);
        for z in &out.z[1..] {
            assert!((z - 0.225).abs() < 1e-7, "{:?}", out.z);
        }
    }

    #[test]
    fn small_penalty_stays_infeasible() {
        // Below the multiplier the penalized minimizer is z_i = c (interior).
        let n = 4;
        let p = SumConstraint {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        };
        let out = minimize_penalized(&p, 0.1, &vec![0.0; n], &opts()).unwrap();
        for z in &out.z {
            assert!((z - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn active_bounds_are_respected() {
        // Target sum 1 with box [-1, 0.1]: two variables cannot reach it.
        let p = SumConstraint {
            lo: vec![-1.0; 2],
            hi: vec![0.1; 2],
        };
        let out = minimize_penalized(&p, 10.0, &[0.0, 0.0], &opts()).unwrap();
        assert_eq!(out.z, vec![0.1, 0.1]);
    }

    #[test]
    fn smoothed_values_decrease_monotonically() {
        let p = SumConstraint {
            lo: vec![-1.0; 6],
            hi: vec![1.0; 6],
        };
        let out = minimize_penalized(&p, 2.0, &[1.0, -1.0, 0.5, 0.2, -0.3, 0.9], &opts()).unwrap();
        for level in &out.levels {
            for w in level.smoothed_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }
}
