//! Uniform time grids, dense trajectory containers, quadrature and vector norms.
//!
//! Controls are piecewise constant on the `N` subintervals `[t_j, t_{j+1})`, states
//! live on the `N + 1` nodes. All containers are row-major: one row per channel.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Uniform partition of `[0, t_f]` into `N` subintervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_final: f64,
    intervals: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, intervals: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::invalid(format!("final time must be positive, got {t_final}")));
        }
        if intervals < 2 {
            return Err(Error::invalid(format!("grid needs N >= 2 subintervals, got {intervals}")));
        }
        Ok(Self { t_final, intervals })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Number of subintervals `N`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.intervals as f64
    }

    /// Time of node `i`; the last node is pinned to `t_f` exactly.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.intervals {
            self.t_final
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.intervals).map(|i| self.time(i)).collect()
    }
}

/// Which samples a quadrature consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    /// `N` samples, one per control interval: `dt * sum(g_j)`.
    Rectangle,
    /// `N + 1` node samples: composite trapezoid.
    Trapezoid,
}

/// Integral over `[0, t_f]` of per-interval or per-node samples.
pub fn quadrature_integral(samples: &[f64], grid: &TimeGrid, rule: QuadratureRule) -> Result<f64> {
    let dt = grid.dt();
    match rule {
        QuadratureRule::Rectangle => {
            check_dim("rectangle quadrature samples", grid.intervals(), samples.len())?;
            Ok(dt * samples.iter().sum::<f64>())
        }
        QuadratureRule::Trapezoid => {
            check_dim("trapezoid quadrature samples", grid.nodes(), samples.len())?;
            let n = samples.len();
            let interior: f64 = samples[1..n - 1].iter().sum();
            Ok(dt * (0.5 * (samples[0] + samples[n - 1]) + interior))
        }
    }
}

pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Piecewise-constant controls, `m` channels by `N` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    channels: usize,
    intervals: usize,
    values: Vec<f64>,
}

impl ControlTrajectory {
    pub fn from_flat(channels: usize, intervals: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("control trajectory values", channels * intervals, values.len())?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("control entry {bad} is not finite")));
        }
        Ok(Self {
            channels,
            intervals,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.len();
        let intervals = rows.first().map_or(0, Vec::len);
        for row in rows {
            check_dim("control trajectory row", intervals, row.len())?;
        }
        Self::from_flat(channels, intervals, rows.concat())
    }

    pub fn constant(channels: usize, intervals: usize, value: f64) -> Self {
        Self {
            channels,
            intervals,
            values: vec![value; channels * intervals],
        }
    }

    pub fn zeros(channels: usize, intervals: usize) -> Self {
        Self::constant(channels, intervals, 0.0)
    }

    /// Builds channel values from a function of `(channel, interval index)`.
    pub fn from_fn(channels: usize, intervals: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * intervals);
        for r in 0..channels {
            for j in 0..intervals {
                values.push(f(r, j));
            }
        }
        Self::from_flat(channels, intervals, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn get(&self, channel: usize, interval: usize) -> f64 {
        self.values[channel * self.intervals + interval]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.intervals..(channel + 1) * self.intervals]
    }

    /// Control vector on interval `j`.
    pub fn at(&self, interval: usize) -> Vec<f64> {
        (0..self.channels).map(|r| self.get(r, interval)).collect()
    }

    pub(crate) fn at_into(&self, interval: usize, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.values[r * self.intervals + interval];
        }
    }

    /// Flat row-major view, the decision vector of the shooting formulation.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn check_shape(&self, channels: usize, intervals: usize) -> Result<()> {
        check_dim("control channels", channels, self.channels)?;
        check_dim("control intervals", intervals, self.intervals)
    }
}

/// Node states, `n` components by `N + 1` nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    dim: usize,
    nodes: usize,
    values: Vec<f64>,
}

impl StateTrajectory {
    pub fn from_flat(dim: usize, nodes: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("state trajectory values", dim * nodes, values.len())?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("state entry {bad} is not finite")));
        }
        Ok(Self { dim, nodes, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn get(&self, component: usize, node: usize) -> f64 {
        self.values[component * self.nodes + node]
    }

    pub fn component(&self, component: usize) -> &[f64] {
        &self.values[component * self.nodes..(component + 1) * self.nodes]
    }

    /// State vector at node `i`.
    pub fn at(&self, node: usize) -> Vec<f64> {
        (0..self.dim).map(|p| self.get(p, node)).collect()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.at(self.nodes - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Componentwise control bounds `lower <= u <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) {
                return Err(Error::invalid(format!("bound {i}: lower {l} must be below upper {u}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `|u_i| <= a_i`.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|a| -a).collect(), half_widths.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, u: &ControlTrajectory) -> bool {
        (0..u.channels()).all(|r| {
            u.channel(r)
                .iter()
                .all(|&v| v >= self.lower[r] && v <= self.upper[r])
        })
    }

    /// Per-unknown bounds for a flat control vector with `intervals` entries per channel.
    pub(crate) fn expand(&self, intervals: usize) -> (Vec<f64>, Vec<f64>) {
        let lo = self.lower.iter().flat_map(|&l| std::iter::repeat_n(l, intervals)).collect();
        let hi = self.upper.iter().flat_map(|&u| std::iter::repeat_n(u, intervals)).collect();
        (lo, hi)
    }
}

/// Componentwise clamp of `u` into the box.
pub fn project_box(u: &ControlTrajectory, bounds: &BoxBounds) -> Result<ControlTrajectory> {
    check_dim("project_box channels", bounds.dim(), u.channels())?;
    let n = u.intervals();
    let values = u
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &v)| v.clamp(bounds.lower[k / n], bounds.upper[k / n]))
        .collect();
    Ok(ControlTrajectory {
        channels: u.channels(),
        intervals: n,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_rejects_small_n_and_bad_horizon() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
        let g = TimeGrid::new(12.0, 7).unwrap();
        assert!((g.dt() * 7.0 - 12.0).abs() <= 4.0 * f64::EPSILON * 12.0);
        assert_eq!(g.time(7), 12.0);
    }

    #[test]
    fn quadrature_examples() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(quadrature_integral(&[0.0; 10], &g, QuadratureRule::Rectangle).unwrap(), 0.0);
        assert_eq!(quadrature_integral(&[0.0; 11], &g, QuadratureRule::Trapezoid).unwrap(), 0.0);
        let one = quadrature_integral(&[1.0; 10], &g, QuadratureRule::Rectangle).unwrap();
        assert!((one - 1.0).abs() < 1e-15);
        let u = [-1.0f64; 10];
        let sq: Vec<f64> = u.iter().map(|v| v * v).collect();
        let i = quadrature_integral(&sq, &g, QuadratureRule::Rectangle).unwrap();
        assert!((0.5 * i - 0.5).abs() < 1e-15);
        let t = quadrature_integral(&[1.0; 11], &g, QuadratureRule::Trapezoid).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_length_mismatch_is_dimension_error() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert!(matches!(
            quadrature_integral(&[1.0; 11], &g, QuadratureRule::Rectangle),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            quadrature_integral(&[1.0; 10], &g, QuadratureRule::Trapezoid),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm1(&[1.0, 1.0]), 2.0);
        assert!((norm2(&[1.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(norm_inf(&[1.0, 1.0]), 1.0);
        assert_eq!((norm1(&[0.0; 4]), norm2(&[0.0; 4]), norm_inf(&[0.0; 4])), (0.0, 0.0, 0.0));
        assert_eq!(norm1(&[3.0, -4.0]), 7.0);
        assert_eq!(norm2(&[3.0, -4.0]), 5.0);
        assert_eq!(norm_inf(&[3.0, -4.0]), 4.0);
    }

    #[test]
    fn projection_examples() {
        let b = BoxBounds::symmetric(&[2.5]).unwrap();
        let inside = ControlTrajectory::from_rows(&[vec![0.3, -1.0, 2.5]]).unwrap();
        assert_eq!(project_box(&inside, &b).unwrap(), inside);
        let out = ControlTrajectory::from_rows(&[vec![3.1, -7.0]]).unwrap();
        assert_eq!(project_box(&out, &b).unwrap().as_slice(), &[2.5, -2.5]);
        let b2 = BoxBounds::symmetric(&[0.8, 0.4]).unwrap();
        let u = ControlTrajectory::from_rows(&[vec![-0.9, 0.1], vec![-0.9, 0.1]]).unwrap();
        assert_eq!(project_box(&u, &b2).unwrap().as_slice(), &[-0.8, 0.1, -0.4, 0.1]);
    }

    #[test]
    fn bounds_must_be_ordered() {
        assert!(BoxBounds::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoxBounds::symmetric(&[0.0]).is_err());
    }

    #[test]
    fn containers_reject_non_finite() {
        assert!(ControlTrajectory::from_flat(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(StateTrajectory::from_flat(1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
            let b = BoxBounds::symmetric(&[0.8, 0.4]).unwrap();
            let u = ControlTrajectory::from_flat(2, 6, vals).unwrap();
            let p = project_box(&u, &b).unwrap();
            prop_assert!(b.contains(&p));
            prop_assert_eq!(project_box(&p, &b).unwrap(), p);
        }

        #[test]
        fn norms_are_ordered(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let (n1, n2, ni) = (norm1(&v), norm2(&v), norm_inf(&v));
            prop_assert!(ni <= n2 * (1.0 + 1e-15));
            prop_assert!(n2 <= n1 * (1.0 + 1e-15));
        }

        #[test]
        fn quadrature_is_linear(
            g1 in prop::collection::vec(-5.0f64..5.0, 16),
            g2 in prop::collection::vec(-5.0f64..5.0, 16),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let grid = TimeGrid::new(2.0, 16).unwrap();
            let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
            let lhs = quadrature_integral(&mix, &grid, QuadratureRule::Rectangle).unwrap();
            let rhs = a * quadrature_integral(&g1, &grid, QuadratureRule::Rectangle).unwrap()
                + b * quadrature_integral(&g2, &grid, QuadratureRule::Rectangle).unwrap();
            let scale = g1.iter().chain(&g2).map(|v| v.abs()).sum::<f64>() * (a.abs() + b.abs()) + 1.0;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }
}
