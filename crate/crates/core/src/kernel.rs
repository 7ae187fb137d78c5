//! Reproducing kernels with analytic mixed partials up to order (2, 2).
//!
//! Every supported kernel has the form `k(x, y) = exp(t(x, y))`:
//!
//! * von Mises on the circle: `t = η cos(x − y)`
//! * product von Mises on the torus: `t = η₁ cos(x₁ − y₁) + η₂ cos(x₂ − y₂)`
//! * exponential trace on SO(3): `t = η tr(X(x)ᵀ Y(y))`
//!
//! Mixed partials of `t` are cheap closed forms (shifted cosines, or Frobenius
//! products of Euler-map partials), and partials of `exp(t)` follow from Faà di
//! Bruno's formula over set partitions of the requested derivative slots.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::manifold::{self, ChartPoint, EulerJet, Manifold};

/// Kernel family and bandwidth-like parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKernel {
    /// `exp(η cos(x − y))` on the circle.
    VonMises { eta: f64 },
    /// `exp(η₁ cos(x₁ − y₁) + η₂ cos(x₂ − y₂))` on the torus.
    ProductVonMises { eta1: f64, eta2: f64 },
    /// `exp(η tr(XᵀY))` on SO(3).
    ExpTrace { eta: f64 },
}

/// A derivative request: coordinate indices differentiated in `x` and in `y`.
///
/// `MultiIndexDeriv::new(&[0], &[0, 2])` is `∂³k / ∂x⁰ ∂y⁰ ∂y²`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MultiIndexDeriv {
    x: Vec<usize>,
    y: Vec<usize>,
}

impl MultiIndexDeriv {
    pub fn new(x: &[usize], y: &[usize]) -> Result<Self> {
        if x.len() > 2 || y.len() > 2 {
            return Err(MksdError::InvalidParameter(format!(
                "derivative orders ({}, {}) exceed (2, 2)",
                x.len(),
                y.len()
            )));
        }
        let mut x = x.to_vec();
        let mut y = y.to_vec();
        x.sort_unstable();
        y.sort_unstable();
        Ok(MultiIndexDeriv { x, y })
    }

    pub fn x(&self) -> &[usize] {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    /// The same request with the roles of `x` and `y` exchanged.
    pub fn swapped(&self) -> Self {
        MultiIndexDeriv { x: self.y.clone(), y: self.x.clone() }
    }
}

// Multi-indices of order <= 2 over at most 3 coordinates map to ids 0..10:
// 0 for the empty index, 1 + i for a single i, 4 + PAIR[i][j] for (i, j).
const N_IDS: usize = 10;
const PAIR: [[usize; 3]; 3] = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];

#[inline]
fn multi_id(idx: &[usize]) -> usize {
    match idx {
        [] => 0,
        [i] => 1 + i,
        [i, j] => 4 + PAIR[*i][*j],
        _ => unreachable!("multi-index order above 2"),
    }
}

#[inline]
fn cos_deriv(u: f64, n: usize) -> f64 {
    match n % 4 {
        0 => u.cos(),
        1 => -u.sin(),
        2 => -u.cos(),
        _ => u.sin(),
    }
}

/// Per-point data reused across every pair a point takes part in.
#[derive(Debug, Clone)]
pub(crate) enum KernelPoint {
    Angles([f64; 3]),
    // Euler map and its partials indexed by multi-index id
    Euler(Box<[Matrix3<f64>; N_IDS]>),
}

/// Derivatives of `t(x, y)` for one pair, indexed by multi-index ids.
pub(crate) struct PairJet {
    t: [[f64; N_IDS]; N_IDS],
    pub k: f64,
}

/// One derivative slot: which argument and which coordinate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    y_side: bool,
    coord: usize,
}

impl Slot {
    pub(crate) const fn x(coord: usize) -> Self {
        Slot { y_side: false, coord }
    }
    pub(crate) const fn y(coord: usize) -> Self {
        Slot { y_side: true, coord }
    }
}

impl PairJet {
    /// `∂t` over the given slots.
    #[inline]
    fn t_of(&self, slots: &[Slot]) -> f64 {
        let mut xs = [0usize; 2];
        let mut ys = [0usize; 2];
        let (mut nx, mut ny) = (0, 0);
        for s in slots {
            if s.y_side {
                ys[ny] = s.coord;
                ny += 1;
            } else {
                xs[nx] = s.coord;
                nx += 1;
            }
        }
        let ia = multi_id(&xs[..nx]);
        let ib = multi_id(&ys[..ny]);
        self.t[ia][ib]
    }

    /// `∂ exp(t) / exp(t)` over up to four slots (Faà di Bruno).
    pub(crate) fn d_exp_ratio(&self, s: &[Slot]) -> f64 {
        let t = |idx: &[usize]| {
            let mut buf = [Slot::x(0); 4];
            for (b, &i) in buf.iter_mut().zip(idx) {
                *b = s[i];
            }
            self.t_of(&buf[..idx.len()])
        };
        match s.len() {
            0 => 1.0,
            1 => t(&[0]),
            2 => t(&[0, 1]) + t(&[0]) * t(&[1]),
            3 => {
                let (a, b, c) = (t(&[0]), t(&[1]), t(&[2]));
                t(&[0, 1, 2]) + t(&[0, 1]) * c + t(&[0, 2]) * b + t(&[1, 2]) * a + a * b * c
            }
            4 => {
                let (a, b, c, d) = (t(&[0]), t(&[1]), t(&[2]), t(&[3]));
                let (ab, ac, ad) = (t(&[0, 1]), t(&[0, 2]), t(&[0, 3]));
                let (bc, bd, cd) = (t(&[1, 2]), t(&[1, 3]), t(&[2, 3]));
                t(&[0, 1, 2, 3])
                    + t(&[0, 1, 2]) * d
                    + t(&[0, 1, 3]) * c
                    + t(&[0, 2, 3]) * b
                    + t(&[1, 2, 3]) * a
                    + ab * cd
                    + ac * bd
                    + ad * bc
                    + ab * c * d
                    + ac * b * d
                    + ad * b * c
                    + bc * a * d
                    + bd * a * c
                    + cd * a * b
                    + a * b * c * d
            }
            n => unreachable!("{n} derivative slots requested"),
        }
    }

    /// `∂k` over the given slots.
    #[inline]
    pub(crate) fn d(&self, s: &[Slot]) -> f64 {
        self.k * self.d_exp_ratio(s)
    }
}

impl ManifoldKernel {
    pub fn von_mises(eta: f64) -> Result<Self> {
        check_positive(&[eta])?;
        Ok(ManifoldKernel::VonMises { eta })
    }

    pub fn product_von_mises(eta1: f64, eta2: f64) -> Result<Self> {
        check_positive(&[eta1, eta2])?;
        Ok(ManifoldKernel::ProductVonMises { eta1, eta2 })
    }

    pub fn exp_trace(eta: f64) -> Result<Self> {
        check_positive(&[eta])?;
        Ok(ManifoldKernel::ExpTrace { eta })
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            ManifoldKernel::VonMises { .. } => Manifold::Circle,
            ManifoldKernel::ProductVonMises { .. } => Manifold::Torus2,
            ManifoldKernel::ExpTrace { .. } => Manifold::So3,
        }
    }

    /// Kernel parameters in a fixed order (η, or η₁ and η₂).
    pub fn params(&self) -> Vec<f64> {
        match *self {
            ManifoldKernel::VonMises { eta } | ManifoldKernel::ExpTrace { eta } => vec![eta],
            ManifoldKernel::ProductVonMises { eta1, eta2 } => vec![eta1, eta2],
        }
    }

    /// Same family with new parameters.
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        let want = self.params().len();
        if p.len() != want {
            return Err(MksdError::DimensionMismatch { expected: want, got: p.len() });
        }
        match self {
            ManifoldKernel::VonMises { .. } => Self::von_mises(p[0]),
            ManifoldKernel::ProductVonMises { .. } => Self::product_von_mises(p[0], p[1]),
            ManifoldKernel::ExpTrace { .. } => Self::exp_trace(p[0]),
        }
    }

    /// Median-heuristic parameters: `η = 1 / median(max_sim − sim)` over distinct
    /// pairs, per axis on the torus. Falls back to 1 when the median vanishes.
    pub fn median_heuristic(manifold: Manifold, pts: &[ChartPoint]) -> Result<Self> {
        for p in pts {
            manifold::check_chart(manifold, p)?;
        }
        let median_eta = |mut v: Vec<f64>| -> f64 {
            if v.is_empty() {
                return 1.0;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            if med > 1e-12 {
                1.0 / med
            } else {
                1.0
            }
        };
        let pairs = |f: &dyn Fn(&ChartPoint, &ChartPoint) -> f64| -> Vec<f64> {
            let mut v = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    v.push(f(&pts[i], &pts[j]));
                }
            }
            v
        };
        match manifold {
            Manifold::Circle => {
                let eta = median_eta(pairs(&|a, b| 1.0 - (a.coords()[0] - b.coords()[0]).cos()));
                Self::von_mises(eta)
            }
            Manifold::Torus2 => {
                let e1 = median_eta(pairs(&|a, b| 1.0 - (a.coords()[0] - b.coords()[0]).cos()));
                let e2 = median_eta(pairs(&|a, b| 1.0 - (a.coords()[1] - b.coords()[1]).cos()));
                Self::product_von_mises(e1, e2)
            }
            Manifold::So3 => {
                let mats: Vec<Matrix3<f64>> =
                    pts.iter().map(|p| manifold::euler_to_matrix(p).into_inner()).collect();
                let mut v = Vec::new();
                for i in 0..mats.len() {
                    for j in i + 1..mats.len() {
                        v.push(3.0 - mats[i].dot(&mats[j]));
                    }
                }
                Self::exp_trace(median_eta(v))
            }
        }
    }

    fn check_point(&self, x: &ChartPoint) -> Result<()> {
        manifold::check_chart(self.manifold(), x)
    }

    pub(crate) fn prepare(&self, x: &ChartPoint) -> KernelPoint {
        match self {
            ManifoldKernel::ExpTrace { .. } => {
                let jet = EulerJet::new(x);
                let mut m = [Matrix3::zeros(); N_IDS];
                m[0] = jet.x;
                for i in 0..3 {
                    m[1 + i] = jet.d1[i];
                    for j in i..3 {
                        m[4 + PAIR[i][j]] = jet.d2[i][j];
                    }
                }
                KernelPoint::Euler(Box::new(m))
            }
            _ => KernelPoint::Angles(*x.raw()),
        }
    }

    /// Builds the table of `t` partials up to the given orders in each argument.
    pub(crate) fn pair_jet(&self, a: &KernelPoint, b: &KernelPoint, ox: usize, oy: usize) -> PairJet {
        let d = self.manifold().dim();
        let ids = |order: usize| -> Vec<(usize, Vec<usize>)> {
            let mut v = vec![(0, vec![])];
            if order >= 1 {
                v.extend((0..d).map(|i| (1 + i, vec![i])));
            }
            if order >= 2 {
                for i in 0..d {
                    for j in i..d {
                        v.push((4 + PAIR[i][j], vec![i, j]));
                    }
                }
            }
            v
        };
        let mut t = [[0.0; N_IDS]; N_IDS];
        match (self, a, b) {
            (ManifoldKernel::ExpTrace { eta }, KernelPoint::Euler(ma), KernelPoint::Euler(mb)) => {
                for (ia, _) in ids(ox) {
                    for (ib, _) in ids(oy) {
                        t[ia][ib] = eta * ma[ia].dot(&mb[ib]);
                    }
                }
            }
            (_, KernelPoint::Angles(xa), KernelPoint::Angles(yb)) => {
                let etas = self.params();
                let u: [f64; 2] = std::array::from_fn(|ax| xa[ax] - yb[ax]);
                for (ia, sa) in ids(ox) {
                    for (ib, sb) in ids(oy) {
                        let n = sa.len() + sb.len();
                        t[ia][ib] = if n == 0 {
                            (0..d).map(|ax| etas[ax] * u[ax].cos()).sum()
                        } else {
                            let ax = sa.first().or(sb.first()).copied().unwrap();
                            if sa.iter().chain(&sb).all(|&c| c == ax) {
                                let sign = if sb.len() % 2 == 1 { -1.0 } else { 1.0 };
                                sign * etas[ax] * cos_deriv(u[ax], n)
                            } else {
                                0.0
                            }
                        };
                    }
                }
            }
            _ => unreachable!("kernel point prepared by a different kernel family"),
        }
        let k = t[0][0].exp();
        PairJet { t, k }
    }

    /// `k(x, y)`.
    pub fn eval(&self, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self.eval_prepared(&self.prepare(x), &self.prepare(y)))
    }

    pub(crate) fn eval_prepared(&self, a: &KernelPoint, b: &KernelPoint) -> f64 {
        match (self, a, b) {
            (ManifoldKernel::ExpTrace { eta }, KernelPoint::Euler(ma), KernelPoint::Euler(mb)) => {
                (eta * ma[0].dot(&mb[0])).exp()
            }
            (ManifoldKernel::VonMises { eta }, KernelPoint::Angles(x), KernelPoint::Angles(y)) => {
                (eta * (x[0] - y[0]).cos()).exp()
            }
            (ManifoldKernel::ProductVonMises { eta1, eta2 }, KernelPoint::Angles(x), KernelPoint::Angles(y)) => {
                (eta1 * (x[0] - y[0]).cos() + eta2 * (x[1] - y[1]).cos()).exp()
            }
            _ => unreachable!("kernel point prepared by a different kernel family"),
        }
    }

    /// Analytic mixed partial `∂ᵃ_x ∂ᵇ_y k(x, y)`.
    pub fn deriv(&self, d: &MultiIndexDeriv, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        let dim = self.manifold().dim();
        if d.x.iter().chain(&d.y).any(|&c| c >= dim) {
            return Err(MksdError::InvalidParameter(format!(
                "derivative coordinate out of range for a {dim}-dimensional chart"
            )));
        }
        if self.manifold() == Manifold::So3 && (!d.x.is_empty() || !d.y.is_empty()) {
            // Euler partials are well defined everywhere, but derivative requests
            // are only meaningful off the singular set
            if !d.x.is_empty() {
                x.check_regular()?;
            }
            if !d.y.is_empty() {
                y.check_regular()?;
            }
        }
        if !manifold::precedes(x, y) {
            return self.deriv_ordered(&d.swapped(), y, x);
        }
        self.deriv_ordered(d, x, y)
    }

    fn deriv_ordered(&self, d: &MultiIndexDeriv, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
        let jet = self.pair_jet(&self.prepare(x), &self.prepare(y), d.x.len(), d.y.len());
        let slots: Vec<Slot> =
            d.x.iter().map(|&c| Slot::x(c)).chain(d.y.iter().map(|&c| Slot::y(c))).collect();
        Ok(jet.d(&slots))
    }

    /// Gram matrix `K_ij = k(x_i, x_j)`.
    pub fn gram(&self, pts: &[ChartPoint]) -> Result<DMatrix<f64>> {
        for p in pts {
            self.check_point(p)?;
        }
        let prep: Vec<KernelPoint> = pts.iter().map(|p| self.prepare(p)).collect();
        let n = pts.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval_prepared(&prep[i], &prep[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }
}

fn check_positive(p: &[f64]) -> Result<()> {
    if p.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(MksdError::InvalidParameter(format!("kernel parameters must be positive, got {p:?}")))
    }
}

/// `count` log-spaced values spanning `[center / 8, center * 8]`.
pub fn log_grid(center: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![center];
    }
    (0..count)
        .map(|k| center * 8f64.powf(-1.0 + 2.0 * k as f64 / (count - 1) as f64))
        .collect()
}

/// Cartesian product of per-parameter log grids around `base`.
pub fn default_param_grid(base: &ManifoldKernel, per_param: usize) -> Vec<ManifoldKernel> {
    let axes: Vec<Vec<f64>> = base.params().iter().map(|&c| log_grid(c, per_param)).collect();
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(|p| base.with_params(&p).expect("grid values are positive")).collect()
}
