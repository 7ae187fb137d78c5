//! Approximate Bahadur slopes of the Stein-kernel tests on the circle by
//! periodic trapezoid quadrature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::kernel::{ManifoldKernel, MultiIndexDeriv};
use crate::manifold::{ChartPoint, Manifold};
use crate::model::Density;
use crate::stein::SteinOrder;

pub const DEFAULT_GRID: usize = 1024;
pub const MIN_GRID: usize = 256;
/// Largest relative slope change tolerated when the grid is doubled.
pub const DOUBLING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeResult {
    /// `E_p[h]`.
    pub numerator: f64,
    /// `sqrt(E_q[h²])`.
    pub denominator: f64,
    pub slope: f64,
    pub grid_size: usize,
}

// Everything on one grid that the three Stein kernels need.
struct CircleGrid {
    n: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    // ∂ₓᵃ∂ᵧᵇ k(xᵤ, 0) indexed [a][b][u]
    t: [[Vec<f64>; 3]; 3],
}

fn normalized_weights(d: &Density, xs: &[f64]) -> Result<Vec<f64>> {
    let logs = xs.iter().map(|&x| d.log_unnorm(&ChartPoint::circle(x))).collect::<Result<Vec<_>>>()?;
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

impl CircleGrid {
    fn new(p: &Density, q: &Density, k: &ManifoldKernel, n: usize) -> Result<Self> {
        let xs: Vec<f64> = (0..n).map(|i| std::f64::consts::TAU * i as f64 / n as f64).collect();
        let origin = ChartPoint::circle(0.0);
        let mut t: [[Vec<f64>; 3]; 3] = Default::default();
        for (a, row) in t.iter_mut().enumerate() {
            for (b, col) in row.iter_mut().enumerate() {
                let req = MultiIndexDeriv::new(&vec![0; a], &vec![0; b])?;
                *col = xs.iter().map(|&x| k.deriv(&req, &ChartPoint::circle(x), &origin)).collect::<Result<_>>()?;
            }
        }
        Ok(CircleGrid {
            n,
            p: normalized_weights(p, &xs)?,
            q: normalized_weights(q, &xs)?,
            s: xs.iter().map(|&x| Ok(q.stein_score(&ChartPoint::circle(x))?[0])).collect::<Result<_>>()?,
            t,
        })
    }

    /// Every other node of `self`, i.e. the grid of half the size.
    fn halved(&self) -> Self {
        let even = |v: &Vec<f64>| v.iter().step_by(2).cloned().collect::<Vec<_>>();
        let renorm = |v: Vec<f64>| {
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect()
        };
        CircleGrid {
            n: self.n / 2,
            p: renorm(even(&self.p)),
            q: renorm(even(&self.q)),
            s: even(&self.s),
            t: std::array::from_fn(|a| std::array::from_fn(|b| even(&self.t[a][b]))),
        }
    }

    fn slope(&self, order: SteinOrder) -> SlopeResult {
        let n = self.n;
        let t = &self.t;
        let xi: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.q[j] * t[0][0][(i + n - j) % n]).sum())
            .collect();
        let c: f64 = (0..n).map(|i| self.q[i] * xi[i]).sum();
        let h = |i: usize, j: usize| -> f64 {
            let u = (i + n - j) % n;
            let (si, sj) = (self.s[i], self.s[j]);
            match order {
                SteinOrder::Zeroth => t[0][0][u] - xi[i] - xi[j] + c,
                SteinOrder::First => si * sj * t[0][0][u] + si * t[0][1][u] + sj * t[1][0][u] + t[1][1][u],
                SteinOrder::Second => t[2][2][u] + sj * t[2][1][u] + si * t[1][2][u] + si * sj * t[1][1][u],
            }
        };
        let (num, sq): (f64, f64) = (0..n)
            .into_par_iter()
            .map(|i| {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..n {
                    let v = h(i, j);
                    a += self.p[j] * v;
                    b += self.q[j] * v * v;
                }
                (self.p[i] * a, self.q[i] * b)
            })
            .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
        let denominator = sq.sqrt();
        SlopeResult { numerator: num, denominator, slope: num / denominator, grid_size: n }
    }
}

fn check_inputs(p: &Density, q: &Density, k: &ManifoldKernel, grid_size: usize) -> Result<()> {
    for (what, m) in [("alternative", p.manifold()), ("null", q.manifold()), ("kernel", k.manifold())] {
        if m != Manifold::Circle {
            return Err(MksdError::ChartMismatch { what, expected: Manifold::Circle, found: m });
        }
    }
    if grid_size < MIN_GRID {
        return Err(MksdError::InvalidParameter(format!("grid size must be at least {MIN_GRID}, got {grid_size}")));
    }
    Ok(())
}

fn checked(coarse: SlopeResult, fine: SlopeResult) -> Result<SlopeResult> {
    let change = (coarse.slope - fine.slope).abs() / fine.slope.abs().max(1e-8);
    if change > DOUBLING_TOL {
        return Err(MksdError::QuadratureUnderResolved { grid_size: coarse.grid_size, rel_change: change });
    }
    Ok(coarse)
}

/// `E_p[h] / sqrt(E_q[h²])` on a `grid_size` grid, verified against the
/// doubled grid. The zeroth order uses exact kernel means under `q`.
pub fn bahadur_slope(
    order: SteinOrder,
    p: &Density,
    q: &Density,
    k: &ManifoldKernel,
    grid_size: usize,
) -> Result<SlopeResult> {
    check_inputs(p, q, k, grid_size)?;
    let fine = CircleGrid::new(p, q, k, 2 * grid_size)?;
    checked(fine.halved().slope(order), fine.slope(order))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub kappa: f64,
    pub efficiency: f64,
    pub slope1: SlopeResult,
    pub slope2: SlopeResult,
}

/// `E_{c1,c2}(κ) = slope_{c1} / slope_{c2}` for `p = vM(κ, 0)` against `q`.
pub fn relative_efficiency(
    c1: SteinOrder,
    c2: SteinOrder,
    kappas: &[f64],
    q: &Density,
    k: &ManifoldKernel,
    grid_size: usize,
) -> Result<Vec<EfficiencyPoint>> {
    if kappas.is_empty() {
        return Err(MksdError::EmptyGrid);
    }
    kappas
        .iter()
        .map(|&kappa| {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(MksdError::InvalidParameter(format!("kappa must be positive, got {kappa}")));
            }
            let p = Density::von_mises(kappa, 0.0)?;
            check_inputs(&p, q, k, grid_size)?;
            let fine = CircleGrid::new(&p, q, k, 2 * grid_size)?;
            let coarse = fine.halved();
            let slope1 = checked(coarse.slope(c1), fine.slope(c1))?;
            let slope2 = checked(coarse.slope(c2), fine.slope(c2))?;
            Ok(EfficiencyPoint { kappa, efficiency: slope1.slope / slope2.slope, slope1, slope2 })
        })
        .collect()
}

/// One row of the efficiency table against the uniform null with `η = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub kappa: f64,
    pub e12: f64,
    pub e01: f64,
    /// `E_p[h⁽¹⁾] / E_p[h⁽²⁾]`.
    pub numerator_ratio: f64,
    /// `sqrt(E_q[h⁽²⁾²]) / sqrt(E_q[h⁽¹⁾²])`.
    pub denominator_ratio: f64,
}

pub fn efficiency_table(kappas: &[f64], grid_size: usize) -> Result<Vec<EfficiencyRow>> {
    let q = Density::uniform(Manifold::Circle);
    let k = ManifoldKernel::von_mises(1.0)?;
    if kappas.is_empty() {
        return Err(MksdError::EmptyGrid);
    }
    kappas
        .iter()
        .map(|&kappa| {
            let e = relative_efficiency(SteinOrder::First, SteinOrder::Second, &[kappa], &q, &k, grid_size)?[0];
            let z = relative_efficiency(SteinOrder::Zeroth, SteinOrder::First, &[kappa], &q, &k, grid_size)?[0];
            Ok(EfficiencyRow {
                kappa,
                e12: e.efficiency,
                e01: z.efficiency,
                numerator_ratio: e.slope1.numerator / e.slope2.numerator,
                denominator_ratio: e.slope2.denominator / e.slope1.denominator,
            })
        })
        .collect()
}
