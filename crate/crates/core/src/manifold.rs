//! Coordinate charts on the circle, the flat 2-torus and SO(3).
//!
//! Circle and torus use angle coordinates with the flat metric. SO(3) uses ZYZ
//! Euler angles `(phi, theta, psi)` with `X = Rz(phi) Ry(theta) Rz(psi)` and the
//! metric pulled back from the Frobenius inner product on 3x3 matrices,
//! `g_ij = tr(dX/dθ^iᵀ dX/dθ^j)`. The chart covers SO(3) except the measure-zero
//! set `theta ∈ {0, π}`, where every metric quantity raises
//! [`MksdError::SingularChartPoint`].

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};

/// Distance from `theta = 0` or `theta = π` below which an SO(3) chart point is singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Tolerance on `|X33|` used by [`matrix_to_euler`] to detect gimbal lock.
pub const GIMBAL_TOL: f64 = 1e-10;

/// The supported manifolds, each with a single almost-everywhere chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Circle,
    Torus2,
    So3,
}

impl Manifold {
    pub const fn dim(self) -> usize {
        match self {
            Manifold::Circle => 1,
            Manifold::Torus2 => 2,
            Manifold::So3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Manifold::Circle => "circle",
            Manifold::Torus2 => "torus2",
            Manifold::So3 => "so3",
        }
    }
}

impl std::str::FromStr for Manifold {
    type Err = MksdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "circle" | "s1" => Ok(Manifold::Circle),
            "torus" | "torus2" | "t2" => Ok(Manifold::Torus2),
            "so3" | "so(3)" => Ok(Manifold::So3),
            other => Err(MksdError::InvalidParameter(format!("unknown manifold `{other}`"))),
        }
    }
}

/// Coordinates of a point in a chart, always stored in wrapped canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChartPointRepr", into = "ChartPointRepr")]
pub struct ChartPoint {
    coords: [f64; 3],
    manifold: Manifold,
}

#[derive(Serialize, Deserialize)]
struct ChartPointRepr {
    manifold: Manifold,
    coords: Vec<f64>,
}

impl From<ChartPoint> for ChartPointRepr {
    fn from(p: ChartPoint) -> Self {
        ChartPointRepr { manifold: p.manifold, coords: p.coords().to_vec() }
    }
}

impl TryFrom<ChartPointRepr> for ChartPoint {
    type Error = MksdError;

    fn try_from(r: ChartPointRepr) -> Result<Self> {
        ChartPoint::new(r.manifold, &r.coords)
    }
}

impl ChartPoint {
    /// Wraps `raw` into canonical coordinates. Fails only on a length mismatch.
    pub fn new(manifold: Manifold, raw: &[f64]) -> Result<Self> {
        wrap(manifold, raw)
    }

    pub fn circle(x: f64) -> Self {
        wrap_array(Manifold::Circle, [x, 0.0, 0.0])
    }

    pub fn torus(x1: f64, x2: f64) -> Self {
        wrap_array(Manifold::Torus2, [x1, x2, 0.0])
    }

    pub fn so3(phi: f64, theta: f64, psi: f64) -> Self {
        wrap_array(Manifold::So3, [phi, theta, psi])
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.manifold.dim()]
    }

    #[inline]
    pub fn manifold(&self) -> Manifold {
        self.manifold
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    #[inline]
    pub(crate) fn raw(&self) -> &[f64; 3] {
        &self.coords
    }

    /// True when the point lies on the chart's singular set.
    pub fn is_singular(&self) -> bool {
        self.manifold == Manifold::So3 && {
            let theta = self.coords[1];
            theta < SINGULAR_TOL || (PI - theta) < SINGULAR_TOL
        }
    }

    pub(crate) fn check_regular(&self) -> Result<()> {
        if self.is_singular() {
            Err(MksdError::SingularChartPoint { theta: self.coords[1] })
        } else {
            Ok(())
        }
    }
}

/// Reduces an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn wrap_array(manifold: Manifold, raw: [f64; 3]) -> ChartPoint {
    let mut c = [0.0; 3];
    match manifold {
        Manifold::Circle => c[0] = wrap_angle(raw[0]),
        Manifold::Torus2 => {
            c[0] = wrap_angle(raw[0]);
            c[1] = wrap_angle(raw[1]);
        }
        Manifold::So3 => {
            let mut phi = raw[0];
            let mut theta = wrap_angle(raw[1]);
            let mut psi = raw[2];
            if theta > PI {
                // (phi, -theta, psi) and (phi + π, theta, psi + π) are the same rotation
                theta = TAU - theta;
                phi += PI;
                psi += PI;
            }
            c = [wrap_angle(phi), theta, wrap_angle(psi)];
        }
    }
    ChartPoint { coords: c, manifold }
}

/// Wraps raw coordinates into canonical chart form.
pub fn wrap(manifold: Manifold, raw: &[f64]) -> Result<ChartPoint> {
    let d = manifold.dim();
    if raw.len() != d {
        return Err(MksdError::DimensionMismatch { expected: d, got: raw.len() });
    }
    let mut a = [0.0; 3];
    a[..d].copy_from_slice(raw);
    Ok(wrap_array(manifold, a))
}

/// A 3x3 rotation matrix (`XᵀX = I`, `det X = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub const TOL: f64 = 1e-10;

    /// Validates the rotation invariants within [`Self::TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let defect = rotation_defect(&m);
        if defect > Self::TOL {
            return Err(MksdError::InvalidParameter(format!(
                "not a rotation matrix (defect {defect:e})"
            )));
        }
        Ok(RotationMatrix(m))
    }

    /// Closest rotation to `m` in Frobenius norm (polar projection).
    pub fn nearest(m: &Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(MksdError::InvalidParameter("SVD of a 3x3 matrix failed".into())),
        };
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Ok(RotationMatrix(u * d * vt))
    }

    /// Wraps `m` without checking; used where `m` is a product of rotations.
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }
}

/// Largest of `‖XᵀX − I‖_F` and `|det X − 1|`.
pub fn rotation_defect(m: &Matrix3<f64>) -> f64 {
    let orth = (m.transpose() * m - Matrix3::identity()).norm();
    let det = (m.determinant() - 1.0).abs();
    orth.max(det)
}

// (cos, sin) of `a` differentiated `n` times
#[inline]
fn cos_sin_deriv(c: f64, s: f64, n: usize) -> (f64, f64) {
    match n % 4 {
        0 => (c, s),
        1 => (-s, c),
        2 => (-c, -s),
        _ => (s, -c),
    }
}

fn rz_deriv(a: f64, n: usize) -> Matrix3<f64> {
    let (c, s) = cos_sin_deriv(a.cos(), a.sin(), n);
    let one = if n == 0 { 1.0 } else { 0.0 };
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, one)
}

fn ry_deriv(a: f64, n: usize) -> Matrix3<f64> {
    let (c, s) = cos_sin_deriv(a.cos(), a.sin(), n);
    let one = if n == 0 { 1.0 } else { 0.0 };
    Matrix3::new(c, 0.0, s, 0.0, one, 0.0, -s, 0.0, c)
}

/// `∂^(n_phi, n_theta, n_psi) X` of the ZYZ Euler map.
pub fn euler_partial(x: &ChartPoint, orders: [usize; 3]) -> Matrix3<f64> {
    let [phi, theta, psi] = *x.raw();
    rz_deriv(phi, orders[0]) * ry_deriv(theta, orders[1]) * rz_deriv(psi, orders[2])
}

/// `X = Rz(phi) Ry(theta) Rz(psi)`.
pub fn euler_to_matrix(x: &ChartPoint) -> RotationMatrix {
    RotationMatrix::new_unchecked(euler_partial(x, [0, 0, 0]))
}

/// Inverse of [`euler_to_matrix`] away from gimbal lock.
pub fn matrix_to_euler(m: &RotationMatrix) -> Result<ChartPoint> {
    let x = m.matrix();
    let x33 = x[(2, 2)];
    if x33.abs() > 1.0 - GIMBAL_TOL {
        return Err(MksdError::GimbalLock { x33: x33.abs() });
    }
    // X13 = cos φ sin θ, X23 = sin φ sin θ, X31 = -sin θ cos ψ, X32 = sin θ sin ψ
    let theta = x33.clamp(-1.0, 1.0).acos();
    let phi = x[(1, 2)].atan2(x[(0, 2)]);
    let psi = x[(2, 1)].atan2(-x[(2, 0)]);
    Ok(ChartPoint::so3(phi, theta, psi))
}

/// Euler map and its first and second coordinate partials at one point.
#[derive(Debug, Clone)]
pub struct EulerJet {
    pub x: Matrix3<f64>,
    pub d1: [Matrix3<f64>; 3],
    pub d2: [[Matrix3<f64>; 3]; 3],
}

impl EulerJet {
    pub fn new(p: &ChartPoint) -> Self {
        let [phi, theta, psi] = *p.raw();
        let rz1: [Matrix3<f64>; 3] = std::array::from_fn(|n| rz_deriv(phi, n));
        let ry: [Matrix3<f64>; 3] = std::array::from_fn(|n| ry_deriv(theta, n));
        let rz3: [Matrix3<f64>; 3] = std::array::from_fn(|n| rz_deriv(psi, n));
        let at = |o: [usize; 3]| rz1[o[0]] * ry[o[1]] * rz3[o[2]];
        let unit = |i: usize| {
            let mut o = [0; 3];
            o[i] = 1;
            o
        };
        let d1 = std::array::from_fn(|i| at(unit(i)));
        let d2 = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let mut o = unit(i);
                o[j] += 1;
                at(o)
            })
        });
        EulerJet { x: at([0, 0, 0]), d1, d2 }
    }
}

/// Riemannian metric `g(x)` in chart coordinates.
pub fn metric_tensor(manifold: Manifold, x: &ChartPoint) -> Result<DMatrix<f64>> {
    check_chart(manifold, x)?;
    let d = manifold.dim();
    match manifold {
        Manifold::Circle | Manifold::Torus2 => Ok(DMatrix::identity(d, d)),
        Manifold::So3 => {
            x.check_regular()?;
            let jet = EulerJet::new(x);
            Ok(DMatrix::from_fn(3, 3, |i, j| jet.d1[i].dot(&jet.d1[j])))
        }
    }
}

/// Inverse metric `g^{ij}(x)`, closed form.
pub fn inverse_metric(manifold: Manifold, x: &ChartPoint) -> Result<DMatrix<f64>> {
    check_chart(manifold, x)?;
    let d = manifold.dim();
    match manifold {
        Manifold::Circle | Manifold::Torus2 => Ok(DMatrix::identity(d, d)),
        Manifold::So3 => {
            x.check_regular()?;
            let theta = x.raw()[1];
            let (s, c) = theta.sin_cos();
            let a = 1.0 / (2.0 * s * s);
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[a, 0.0, -c * a, 0.0, 0.5, 0.0, -c * a, 0.0, a],
            ))
        }
    }
}

/// Volume element `J(x) = sqrt(det g(x))`.
pub fn volume_element(manifold: Manifold, x: &ChartPoint) -> Result<f64> {
    Ok(metric_tensor(manifold, x)?.determinant().sqrt())
}

/// Coordinate gradient of `log J`: zero on the flat charts, `(0, cot θ, 0)` on SO(3).
pub fn grad_log_volume(manifold: Manifold, x: &ChartPoint) -> Result<Vec<f64>> {
    check_chart(manifold, x)?;
    match manifold {
        Manifold::Circle | Manifold::Torus2 => Ok(vec![0.0; manifold.dim()]),
        Manifold::So3 => {
            x.check_regular()?;
            let theta = x.raw()[1];
            Ok(vec![0.0, theta.cos() / theta.sin(), 0.0])
        }
    }
}

/// Lexicographic order on chart coordinates. Symmetric two-point functions
/// evaluate with the earlier point first so swapping arguments is bit-exact.
pub(crate) fn precedes(x: &ChartPoint, y: &ChartPoint) -> bool {
    x.raw() <= y.raw()
}

pub(crate) fn check_chart(manifold: Manifold, x: &ChartPoint) -> Result<()> {
    if x.manifold() != manifold {
        return Err(MksdError::ChartMismatch {
            what: "chart point",
            expected: manifold,
            found: x.manifold(),
        });
    }
    Ok(())
}
