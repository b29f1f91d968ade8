//! Control-constrained problems with dynamics affine in the control and a
//! control-only running cost.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grid::BoxBounds;

/// Right-hand side `f(x, u)` and running cost `f0(u)` of an optimal control problem.
///
/// Jacobians are written row-major into caller-provided buffers:
/// `df/dx` is `n x n`, `df/du` is `n x m`.
pub trait ControlSystem: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dynamics(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn state_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn control_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn cost_integrand(&self, u: &[f64]) -> f64;
    fn cost_gradient(&self, u: &[f64], out: &mut [f64]);
    /// Diagonal of the running-cost Hessian in `u`, if cheaply available.
    fn cost_hessian_diag(&self, _u: &[f64]) -> Option<Vec<f64>> {
        None
    }
    /// Whether the shooting penalty problem is convex (linear dynamics).
    fn is_linear(&self) -> bool {
        false
    }
}

/// `x1' = x2, x2' = u`, cost `u^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct DoubleIntegrator;

impl ControlSystem for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = u[0];
    }
    fn state_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    }
    fn control_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }
    fn cost_integrand(&self, u: &[f64]) -> f64 {
        0.5 * u[0] * u[0]
    }
    fn cost_gradient(&self, u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
    fn cost_hessian_diag(&self, _u: &[f64]) -> Option<Vec<f64>> {
        Some(vec![1.0])
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Planar free-flying robot with two jets; cost `u1^2 + u2^2` (no one-half factor).
#[derive(Debug, Clone, Copy)]
pub struct FreeFlyingRobot;

impl ControlSystem for FreeFlyingRobot {
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn dynamics(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let thrust = u[0] + u[1];
        let (s, c) = x[2].sin_cos();
        out[0] = x[3];
        out[1] = x[4];
        out[2] = x[5];
        out[3] = thrust * c;
        out[4] = thrust * s;
        out[5] = 0.2 * (u[0] - u[1]);
    }
    fn state_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let thrust = u[0] + u[1];
        let (s, c) = x[2].sin_cos();
        out.fill(0.0);
        out[3] = 1.0; // row 0, col 3
        out[6 + 4] = 1.0;
        out[12 + 5] = 1.0;
        out[18 + 2] = -thrust * s;
        out[24 + 2] = thrust * c;
    }
    fn control_jacobian(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.fill(0.0);
        out[6] = c;
        out[7] = c;
        out[8] = s;
        out[9] = s;
        out[10] = 0.2;
        out[11] = -0.2;
    }
    fn cost_integrand(&self, u: &[f64]) -> f64 {
        u[0] * u[0] + u[1] * u[1]
    }
    fn cost_gradient(&self, u: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * u[0];
        out[1] = 2.0 * u[1];
    }
    fn cost_hessian_diag(&self, _u: &[f64]) -> Option<Vec<f64>> {
        Some(vec![2.0, 2.0])
    }
}

/// Which built-in problem a model was made from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemInstanceId {
    DoubleIntegrator,
    FreeFlyingRobot,
    Custom,
}

impl ProblemInstanceId {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::DoubleIntegrator => "double_integrator",
            Self::FreeFlyingRobot => "free_flying_robot",
            Self::Custom => "custom",
        }
    }

    /// Default instance for a tag; `Custom` has none.
    pub fn default_model(&self) -> Result<OcpModel> {
        match self {
            Self::DoubleIntegrator => DoubleIntegratorParams::default().build(),
            Self::FreeFlyingRobot => Ok(make_free_flying_robot()),
            Self::Custom => Err(Error::invalid("custom models have no default instance")),
        }
    }
}

impl fmt::Display for ProblemInstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ProblemInstanceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_integrator" => Ok(Self::DoubleIntegrator),
            "free_flying_robot" => Ok(Self::FreeFlyingRobot),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!(
                "unknown model tag {other:?} (expected double_integrator or free_flying_robot)"
            ))),
        }
    }
}

/// A fixed-horizon problem: minimize the integral of `f0(u)` subject to
/// `x' = f(x, u)`, `x(0) = x0`, `x(t_f) = xf` and `u(t)` in a box.
#[derive(Debug, Clone)]
pub struct OcpModel {
    id: ProblemInstanceId,
    t_final: f64,
    x0: Vec<f64>,
    xf: Vec<f64>,
    bounds: BoxBounds,
    system: Arc<dyn ControlSystem>,
}

impl OcpModel {
    pub fn new(
        id: ProblemInstanceId,
        system: Arc<dyn ControlSystem>,
        t_final: f64,
        x0: Vec<f64>,
        xf: Vec<f64>,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let n = system.state_dim();
        check_dim("initial state", n, x0.len())?;
        check_dim("terminal state", n, xf.len())?;
        check_dim("control bounds", system.control_dim(), bounds.dim())?;
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {t_final}")));
        }
        if x0.iter().chain(&xf).any(|v| !v.is_finite()) {
            return Err(Error::invalid("boundary conditions must be finite"));
        }
        Ok(Self {
            id,
            t_final,
            x0,
            xf,
            bounds,
            system,
        })
    }

    /// Same dynamics and bounds with different boundary conditions.
    pub fn with_boundary(&self, x0: Vec<f64>, xf: Vec<f64>) -> Result<Self> {
        Self::new(self.id, self.system.clone(), self.t_final, x0, xf, self.bounds.clone())
    }

    pub fn with_bounds(&self, bounds: BoxBounds) -> Result<Self> {
        Self::new(self.id, self.system.clone(), self.t_final, self.x0.clone(), self.xf.clone(), bounds)
    }

    pub fn id(&self) -> ProblemInstanceId {
        self.id
    }
    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }
    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }
    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }
    pub fn xf(&self) -> &[f64] {
        &self.xf
    }
    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }
    pub fn system(&self) -> &dyn ControlSystem {
        self.system.as_ref()
    }
    pub fn is_convex(&self) -> bool {
        self.system.is_linear()
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.system.dynamics(x, u, &mut out);
        out
    }

    pub fn cost_integrand(&self, u: &[f64]) -> f64 {
        self.system.cost_integrand(u)
    }

    /// `(df/dx, df/du)` row-major.
    pub fn jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * m];
        self.system.state_jacobian(x, u, &mut a);
        self.system.control_jacobian(x, u, &mut b);
        (a, b)
    }
}

/// Boundary data and bound for the constrained double integrator on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleIntegratorParams {
    pub s0: f64,
    pub sf: f64,
    pub v0: f64,
    pub vf: f64,
    pub a: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        Self {
            s0: 0.0,
            sf: 0.0,
            v0: 1.0,
            vf: 0.0,
            a: 2.5,
        }
    }
}

impl DoubleIntegratorParams {
    pub fn build(&self) -> Result<OcpModel> {
        make_double_integrator(self.s0, self.sf, self.v0, self.vf, self.a)
    }
}

pub fn make_double_integrator(s0: f64, sf: f64, v0: f64, vf: f64, a: f64) -> Result<OcpModel> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::invalid(format!("control bound a must be positive, got {a}")));
    }
    OcpModel::new(
        ProblemInstanceId::DoubleIntegrator,
        Arc::new(DoubleIntegrator),
        1.0,
        vec![s0, v0],
        vec![sf, vf],
        BoxBounds::symmetric(&[a])?,
    )
}

pub fn make_free_flying_robot() -> OcpModel {
    OcpModel::new(
        ProblemInstanceId::FreeFlyingRobot,
        Arc::new(FreeFlyingRobot),
        12.0,
        vec![-10.0, -10.0, FRAC_PI_2, 0.0, 0.0, 0.0],
        vec![0.0; 6],
        BoxBounds::symmetric(&[0.8, 0.4]).expect("static bounds"),
    )
    .expect("static model data")
}

/// Max entry deviation between the analytic Jacobians and central differences of `f`.
pub fn dynamics_jacobian_check(model: &OcpModel, x: &[f64], u: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("difference step must be positive, got {h}")));
    }
    let (n, m) = (model.state_dim(), model.control_dim());
    check_dim("state", n, x.len())?;
    check_dim("control", m, u.len())?;
    let (a, b) = model.jacobians(x, u);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for col in 0..n {
        xp[col] = x[col] + h;
        let fp = model.dynamics(&xp, u);
        xp[col] = x[col] - h;
        let fm = model.dynamics(&xp, u);
        xp[col] = x[col];
        for row in 0..n {
            let fd = (fp[row] - fm[row]) / (2.0 * h);
            worst = worst.max((a[row * n + col] - fd).abs());
        }
    }
    let mut up = u.to_vec();
    for col in 0..m {
        up[col] = u[col] + h;
        let fp = model.dynamics(x, &up);
        up[col] = u[col] - h;
        let fm = model.dynamics(x, &up);
        up[col] = u[col];
        for row in 0..n {
            let fd = (fp[row] - fm[row]) / (2.0 * h);
            worst = worst.max((b[row * m + col] - fd).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_integrator_defaults() {
        let m = DoubleIntegratorParams::default().build().unwrap();
        assert_eq!(m.x0(), &[0.0, 1.0]);
        assert_eq!(m.xf(), &[0.0, 0.0]);
        assert_eq!(m.bounds().upper(), &[2.5]);
        assert_eq!(m.t_final(), 1.0);
        assert_eq!((m.state_dim(), m.control_dim()), (2, 1));
        assert_eq!(m.dynamics(&[1.0, 2.0], &[3.0]), vec![2.0, 3.0]);
        assert_eq!(m.cost_integrand(&[-1.0]), 0.5);
        assert_eq!(m.cost_integrand(&[0.0]), 0.0);
        assert!(m.is_convex());
    }

    #[test]
    fn double_integrator_rejects_nonpositive_bound() {
        assert!(matches!(make_double_integrator(0.0, 0.0, 1.0, 0.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(make_double_integrator(0.0, 0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn free_flying_robot_substitution() {
        let m = make_free_flying_robot();
        let x = [0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0];
        let f = m.dynamics(&x, &[0.8, 0.4]);
        assert!(f[3].abs() < 1e-15);
        assert!((f[4] - 1.2).abs() < 1e-15);
        assert!((f[5] - 0.08).abs() < 1e-15);
        let x = [1.0, 2.0, 0.7, 3.0, 4.0, 5.0];
        assert_eq!(m.dynamics(&x, &[0.0, 0.0]), vec![3.0, 4.0, 5.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.bounds().lower(), &[-0.8, -0.4]);
        assert_eq!(m.bounds().upper(), &[0.8, 0.4]);
        assert_eq!(m.t_final(), 12.0);
        assert_eq!(m.cost_integrand(&[1.0, 2.0]), 5.0);
        assert!(!m.is_convex());
    }

    #[test]
    fn jacobian_checks() {
        let di = DoubleIntegratorParams::default().build().unwrap();
        assert!(dynamics_jacobian_check(&di, &[0.3, -2.0], &[1.7], 1e-5).unwrap() < 1e-9);
        let ffr = make_free_flying_robot();
        let x = [1.0, -2.0, 0.3, 0.5, -0.1, 0.2];
        assert!(dynamics_jacobian_check(&ffr, &x, &[0.1, 0.2], 1e-5).unwrap() < 1e-7);
        let (a, _) = ffr.jacobians(&[0.0; 6], &[0.0, 0.0]);
        assert_eq!(a[3 * 6 + 2], 0.0);
        assert!(dynamics_jacobian_check(&ffr, &x, &[0.1], 1e-5).is_err());
        assert!(dynamics_jacobian_check(&ffr, &x, &[0.1, 0.2], 0.0).is_err());
    }

    #[test]
    fn dynamics_affine_in_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in [DoubleIntegratorParams::default().build().unwrap(), make_free_flying_robot()] {
            let (n, m) = (model.state_dim(), model.control_dim());
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
                let u1: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u2: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a: f64 = rng.random_range(0.0..1.0);
                let mix: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| a * p + (1.0 - a) * q).collect();
                let lhs = model.dynamics(&x, &mix);
                let (f1, f2) = (model.dynamics(&x, &u1), model.dynamics(&x, &u2));
                for k in 0..n {
                    let rhs = a * f1[k] + (1.0 - a) * f2[k];
                    assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
                }
            }
        }
    }

    #[test]
    fn free_flying_robot_rotational_identity() {
        let m = make_free_flying_robot();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-7.0..7.0)).collect();
            let u = [rng.random_range(-0.8..0.8), rng.random_range(-0.4..0.4)];
            let f = m.dynamics(&x, &u);
            let lhs = f[3] * f[3] + f[4] * f[4];
            let rhs = (u[0] + u[1]).powi(2);
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn tags_round_trip() {
        for id in [ProblemInstanceId::DoubleIntegrator, ProblemInstanceId::FreeFlyingRobot, ProblemInstanceId::Custom] {
            assert_eq!(id.tag().parse::<ProblemInstanceId>().unwrap(), id);
        }
        assert!("rocket".parse::<ProblemInstanceId>().is_err());
    }

    #[test]
    fn cost_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ffr = make_free_flying_robot();
        for _ in 0..50 {
            let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            assert!(ffr.cost_integrand(&u) >= 0.0);
        }
        assert_eq!(ffr.cost_integrand(&[0.0, 0.0]), 0.0);
    }
}
