//! Unnormalized density models and their Stein scores.
//!
//! Only `log q̃` and its coordinate gradient are ever needed; normalizing
//! constants never enter the first- and second-order Stein kernels.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::manifold::{self, euler_partial, euler_to_matrix, ChartPoint, Manifold};

/// Parameters `(κ₁, κ₂, μ₁, μ₂, λ₁₂)` of the bivariate von Mises (sine) model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateVonMises {
    pub kappa1: f64,
    pub kappa2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub lambda12: f64,
}

impl BivariateVonMises {
    pub fn new(kappa1: f64, kappa2: f64, mu1: f64, mu2: f64, lambda12: f64) -> Result<Self> {
        if !(kappa1 >= 0.0 && kappa2 >= 0.0) {
            return Err(MksdError::InvalidParameter(format!(
                "bivariate von Mises concentrations must be nonnegative, got ({kappa1}, {kappa2})"
            )));
        }
        if ![mu1, mu2, lambda12].iter().all(|v| v.is_finite()) {
            return Err(MksdError::InvalidParameter("non-finite bivariate von Mises parameter".into()));
        }
        Ok(BivariateVonMises {
            kappa1,
            kappa2,
            mu1: manifold::wrap_angle(mu1),
            mu2: manifold::wrap_angle(mu2),
            lambda12,
        })
    }

    /// The interaction-free model with the same marginal parameters.
    pub fn factorized(&self) -> Self {
        BivariateVonMises { lambda12: 0.0, ..*self }
    }
}

/// An unnormalized density on one of the supported manifolds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    /// `log q̃ ≡ 0`.
    Uniform { manifold: Manifold },
    /// `κ cos(x − μ)` on the circle.
    VonMises { kappa: f64, mu: f64 },
    /// `κ₁cos(x₁−μ₁) + κ₂cos(x₂−μ₂) + λ₁₂ sin(x₁−μ₁) sin(x₂−μ₂)` on the torus.
    BivariateVonMises(BivariateVonMises),
    /// `tr(Fᵀ X)` on SO(3).
    Fisher { f: [[f64; 3]; 3] },
}

impl Density {
    pub fn uniform(manifold: Manifold) -> Self {
        Density::Uniform { manifold }
    }

    pub fn von_mises(kappa: f64, mu: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !mu.is_finite() {
            return Err(MksdError::InvalidParameter(format!(
                "von Mises needs kappa >= 0 and finite mu, got ({kappa}, {mu})"
            )));
        }
        Ok(Density::VonMises { kappa, mu: manifold::wrap_angle(mu) })
    }

    pub fn bivariate_von_mises(p: BivariateVonMises) -> Self {
        Density::BivariateVonMises(p)
    }

    pub fn fisher(f: Matrix3<f64>) -> Result<Self> {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(MksdError::InvalidParameter("Fisher parameter matrix must be finite".into()));
        }
        let rows = std::array::from_fn(|i| std::array::from_fn(|j| f[(i, j)]));
        Ok(Density::Fisher { f: rows })
    }

    /// Exponential-trace model `exp(κ tr X)`, i.e. Fisher with `F = κ I`.
    pub fn exp_trace(kappa: f64) -> Result<Self> {
        Self::fisher(Matrix3::identity() * kappa)
    }

    /// `F_b = [[1, b, 0], [b, 1, 0], [0, 0, 1]]`.
    pub fn fisher_b(b: f64) -> Result<Self> {
        Self::fisher(fisher_b_matrix(b))
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            Density::Uniform { manifold } => *manifold,
            Density::VonMises { .. } => Manifold::Circle,
            Density::BivariateVonMises(_) => Manifold::Torus2,
            Density::Fisher { .. } => Manifold::So3,
        }
    }

    /// The Fisher parameter matrix, when this is a Fisher model.
    pub fn fisher_matrix(&self) -> Option<Matrix3<f64>> {
        match self {
            Density::Fisher { f } => Some(Matrix3::from_fn(|i, j| f[i][j])),
            _ => None,
        }
    }

    /// Log of the unnormalized density.
    pub fn log_unnorm(&self, x: &ChartPoint) -> Result<f64> {
        manifold::check_chart(self.manifold(), x)?;
        let c = x.coords();
        Ok(match self {
            Density::Uniform { .. } => 0.0,
            Density::VonMises { kappa, mu } => kappa * (c[0] - mu).cos(),
            Density::BivariateVonMises(p) => {
                let (a, b) = (c[0] - p.mu1, c[1] - p.mu2);
                p.kappa1 * a.cos() + p.kappa2 * b.cos() + p.lambda12 * a.sin() * b.sin()
            }
            Density::Fisher { .. } => {
                let f = self.fisher_matrix().unwrap();
                f.dot(euler_to_matrix(x).matrix())
            }
        })
    }

    /// Coordinate gradient of [`Self::log_unnorm`].
    pub fn score(&self, x: &ChartPoint) -> Result<Vec<f64>> {
        let s = self.score_array(x)?;
        Ok(s[..x.dim()].to_vec())
    }

    pub(crate) fn score_array(&self, x: &ChartPoint) -> Result<[f64; 3]> {
        manifold::check_chart(self.manifold(), x)?;
        let c = x.coords();
        let mut out = [0.0; 3];
        match self {
            Density::Uniform { .. } => {}
            Density::VonMises { kappa, mu } => out[0] = -kappa * (c[0] - mu).sin(),
            Density::BivariateVonMises(p) => {
                let (a, b) = (c[0] - p.mu1, c[1] - p.mu2);
                let (sa, ca) = a.sin_cos();
                let (sb, cb) = b.sin_cos();
                out[0] = -p.kappa1 * sa + p.lambda12 * ca * sb;
                out[1] = -p.kappa2 * sb + p.lambda12 * sa * cb;
            }
            Density::Fisher { .. } => {
                let f = self.fisher_matrix().unwrap();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut ord = [0; 3];
                    ord[i] = 1;
                    *o = f.dot(&euler_partial(x, ord));
                }
            }
        }
        Ok(out)
    }

    /// `∂ log(q̃ J)`: the density score plus the log-volume gradient.
    pub fn stein_score(&self, x: &ChartPoint) -> Result<Vec<f64>> {
        let s = self.stein_score_array(x)?;
        Ok(s[..x.dim()].to_vec())
    }

    pub(crate) fn stein_score_array(&self, x: &ChartPoint) -> Result<[f64; 3]> {
        let mut s = self.score_array(x)?;
        let v = manifold::grad_log_volume(self.manifold(), x)?;
        for (si, vi) in s.iter_mut().zip(v) {
            *si += vi;
        }
        Ok(s)
    }
}

pub fn fisher_b_matrix(b: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, b, 0.0, b, 1.0, 0.0, 0.0, 0.0, 1.0)
}

/// Fitted parameters of the bivariate von Mises model for the Tokyo wind data.
pub const WIND_XI_HAT: [f64; 5] = [0.7170, 0.3954, 1.1499, 1.1499, -1.1274];

/// Fisher fit for the vectorcardiogram data: 5.63 times this matrix.
pub const VCG_F_HAT_UNIT: [[f64; 3]; 3] = [
    [0.583, 0.629, 0.514],
    [0.660, -0.736, 0.151],
    [0.473, 0.252, -0.844],
];
pub const VCG_F_HAT_SCALE: f64 = 5.63;

pub fn vcg_f_hat() -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| VCG_F_HAT_SCALE * VCG_F_HAT_UNIT[i][j])
}

pub fn wind_bvm() -> BivariateVonMises {
    let [k1, k2, m1, m2, l] = WIND_XI_HAT;
    BivariateVonMises::new(k1, k2, m1, m2, l).expect("fitted wind parameters are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn random_point(m: Manifold, rng: &mut ChaCha8Rng) -> ChartPoint {
        match m {
            Manifold::Circle => ChartPoint::circle(rng.random_range(0.0..TAU)),
            Manifold::Torus2 => ChartPoint::torus(rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)),
            Manifold::So3 => ChartPoint::so3(
                rng.random_range(0.0..TAU),
                rng.random_range(0.05..PI - 0.05),
                rng.random_range(0.0..TAU),
            ),
        }
    }

    fn shifted(x: &ChartPoint, i: usize, h: f64) -> ChartPoint {
        let mut c = x.coords().to_vec();
        c[i] += h;
        ChartPoint::new(x.manifold(), &c).unwrap()
    }

    fn fd_grad(f: impl Fn(&ChartPoint) -> f64, x: &ChartPoint, h: f64) -> Vec<f64> {
        (0..x.dim())
            .map(|i| (f(&shifted(x, i, h)) - f(&shifted(x, i, -h))) / (2.0 * h))
            .collect()
    }

    fn models() -> Vec<Density> {
        vec![
            Density::uniform(Manifold::Circle),
            Density::uniform(Manifold::So3),
            Density::von_mises(2.0, 1.0).unwrap(),
            Density::bivariate_von_mises(wind_bvm()),
            Density::bivariate_von_mises(wind_bvm().factorized()),
            Density::exp_trace(0.35).unwrap(),
            Density::fisher_b(0.2).unwrap(),
            Density::fisher(vcg_f_hat()).unwrap(),
        ]
    }

    #[test]
    fn log_unnorm_examples() {
        let u = Density::uniform(Manifold::So3);
        assert_eq!(u.log_unnorm(&ChartPoint::so3(0.1, 0.2, 0.3)).unwrap(), 0.0);

        let kappa = 0.35;
        let theta = 0.9;
        let q = Density::exp_trace(kappa).unwrap();
        let v = q.log_unnorm(&ChartPoint::so3(0.0, theta, 0.0)).unwrap();
        assert_abs_diff_eq!(v, kappa * (1.0 + 2.0 * theta.cos()), epsilon = 1e-14);

        let q = Density::bivariate_von_mises(wind_bvm());
        let v = q.log_unnorm(&ChartPoint::torus(1.1499, 1.1499)).unwrap();
        assert_abs_diff_eq!(v, 0.7170 + 0.3954, epsilon = 1e-12);
    }

    #[test]
    fn score_examples() {
        assert_eq!(Density::uniform(Manifold::Torus2).score(&ChartPoint::torus(1.0, 2.0)).unwrap(), vec![0.0, 0.0]);
        let q = Density::von_mises(3.0, 1.2).unwrap();
        assert_abs_diff_eq!(q.score(&ChartPoint::circle(1.2)).unwrap()[0], 0.0, epsilon = 1e-14);

        let q = Density::bivariate_von_mises(wind_bvm());
        let x = ChartPoint::torus(0.5, 2.0);
        let s = q.score(&x).unwrap();
        let fd = fd_grad(|p| q.log_unnorm(p).unwrap(), &x, 1e-6);
        for i in 0..2 {
            assert_abs_diff_eq!(s[i], fd[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for q in models() {
            for _ in 0..100 {
                let x = random_point(q.manifold(), &mut rng);
                let s = q.score(&x).unwrap();
                let fd = fd_grad(|p| q.log_unnorm(p).unwrap(), &x, 1e-6);
                for (a, b) in s.iter().zip(&fd) {
                    assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{q:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn stein_score_adds_log_volume_gradient() {
        let s = Density::uniform(Manifold::Torus2).stein_score(&ChartPoint::torus(0.3, 0.4)).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);

        let s = Density::uniform(Manifold::So3).stein_score(&ChartPoint::so3(0.2, 1.0, 0.3)).unwrap();
        assert_eq!(s[0], 0.0);
        assert_abs_diff_eq!(s[1], 1.0 / 1.0f64.tan(), epsilon = 1e-14);
        assert_eq!(s[2], 0.0);

        // ExpTrace(0.35): compare to finite differences of log(q̃ J)
        let q = Density::exp_trace(0.35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = random_point(Manifold::So3, &mut rng);
            let s = q.stein_score(&x).unwrap();
            let f = |p: &ChartPoint| q.log_unnorm(p).unwrap() + manifold::volume_element(Manifold::So3, p).unwrap().ln();
            let fd = fd_grad(f, &x, 1e-6);
            for i in 0..3 {
                assert!((s[i] - fd[i]).abs() < 1e-6 * (1.0 + fd[i].abs()));
            }
        }
    }

    #[test]
    fn chart_mismatch_is_an_error() {
        let q = Density::von_mises(1.0, 0.0).unwrap();
        assert!(matches!(q.score(&ChartPoint::torus(0.0, 0.0)), Err(MksdError::ChartMismatch { .. })));
        assert!(Density::von_mises(-1.0, 0.0).is_err());
        assert!(BivariateVonMises::new(-0.1, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn singular_point_propagates() {
        let q = Density::exp_trace(1.0).unwrap();
        assert!(matches!(
            q.stein_score(&ChartPoint::so3(0.0, 0.0, 0.0)),
            Err(MksdError::SingularChartPoint { .. })
        ));
    }

    #[test]
    fn vcg_fit_evaluates_everywhere() {
        let q = Density::fisher(vcg_f_hat()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x = random_point(Manifold::So3, &mut rng);
            assert!(q.log_unnorm(&x).unwrap().is_finite());
            assert!(q.stein_score(&x).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    proptest::proptest! {
        #[test]
        fn bvm_score_matches_finite_differences(
            x1 in 0.0..TAU, x2 in 0.0..TAU, k1 in 0.0..5.0f64, k2 in 0.0..5.0f64, l in -3.0..3.0f64,
        ) {
            let q = Density::bivariate_von_mises(BivariateVonMises::new(k1, k2, 0.3, 2.0, l).unwrap());
            let x = ChartPoint::torus(x1, x2);
            let s = q.score(&x).unwrap();
            let fd = fd_grad(|p| q.log_unnorm(p).unwrap(), &x, 1e-6);
            for i in 0..2 {
                proptest::prop_assert!((s[i] - fd[i]).abs() < 1e-6 * (1.0 + fd[i].abs()));
            }
        }
    }
}
