//! Random generation from the supported models.

use std::f64::consts::{PI, TAU};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{MksdError, Result};
use crate::manifold::{self, ChartPoint, Manifold, RotationMatrix};
use crate::model::{BivariateVonMises, Density};

/// Acceptance rate below which rejection samplers log a warning.
pub const LOW_ACCEPTANCE: f64 = 1e-4;

/// A seed plus a derivation path. Equal seed and path give equal streams;
/// distinct paths give independent ChaCha streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream at `self.path ++ [index]`.
    pub fn derive(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        RngStream { seed: self.seed, path }
    }

    /// Child stream keyed by a label; labels hash with FNV-1a so they are
    /// stable across builds.
    pub fn derive_named(&self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut stream = 0u64;
        for (depth, p) in self.path.iter().enumerate() {
            stream = splitmix(stream ^ splitmix(p.wrapping_add(depth as u64)));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Output of a rejection sampler.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub points: Vec<ChartPoint>,
    /// Accepted proposals over total proposals.
    pub acceptance: f64,
}

fn haar_matrix<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let g = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..3 {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

// Haar rotation together with its chart point, redrawing in gimbal lock.
fn haar_point<R: Rng + ?Sized>(rng: &mut R) -> (Matrix3<f64>, ChartPoint) {
    loop {
        let m = haar_matrix(rng);
        if let Ok(p) = manifold::matrix_to_euler(&RotationMatrix::new_unchecked(m)) {
            return (m, p);
        }
    }
}

pub fn sample_uniform_so3<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ChartPoint> {
    (0..n).map(|_| haar_point(rng).1).collect()
}

/// Rejection sampler for `exp(tr(FᵀX))` from Haar proposals.
pub fn sample_fisher_so3<R: Rng + ?Sized>(rng: &mut R, f: &Matrix3<f64>, n: usize) -> Result<Sampled> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(MksdError::InvalidParameter("Fisher matrix must be finite".into()));
    }
    let bound: f64 = f.singular_values().iter().sum();
    let mut points = Vec::with_capacity(n);
    let mut proposals = 0usize;
    let mut warned = false;
    while points.len() < n {
        let (m, p) = haar_point(rng);
        proposals += 1;
        let log_acc = f.dot(&m) - bound;
        let u: f64 = rng.random();
        if u.ln() < log_acc {
            points.push(p);
        }
        if !warned && proposals == 10_000 && (points.len() as f64) < LOW_ACCEPTANCE * proposals as f64 {
            log::warn!("Fisher rejection sampler acceptance below {LOW_ACCEPTANCE} after {proposals} proposals");
            warned = true;
        }
    }
    let acceptance = if n == 0 { 1.0 } else { n as f64 / proposals as f64 };
    if acceptance < LOW_ACCEPTANCE && !warned {
        log::warn!("Fisher rejection sampler acceptance {acceptance:.2e}");
    }
    Ok(Sampled { points, acceptance })
}

pub fn sample_exp_trace_so3<R: Rng + ?Sized>(rng: &mut R, kappa: f64, n: usize) -> Result<Sampled> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(MksdError::InvalidParameter(format!("kappa must be nonnegative, got {kappa}")));
    }
    sample_fisher_so3(rng, &(Matrix3::identity() * kappa), n)
}

/// One von Mises draw in `[0, 2π)` (Best and Fisher's wrapped-Cauchy envelope).
pub fn draw_von_mises<R: Rng + ?Sized>(rng: &mut R, kappa: f64, mu: f64) -> f64 {
    if kappa < 1e-12 {
        return rng.random_range(0.0..TAU);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            let x = if u3 > 0.5 { mu + theta } else { mu - theta };
            return manifold::wrap_angle(x);
        }
    }
}

pub fn sample_von_mises<R: Rng + ?Sized>(rng: &mut R, kappa: f64, mu: f64, n: usize) -> Result<Vec<f64>> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(MksdError::InvalidParameter(format!("kappa must be nonnegative, got {kappa}")));
    }
    Ok((0..n).map(|_| draw_von_mises(rng, kappa, mu)).collect())
}

/// Gibbs sampler; each full conditional is von Mises after writing
/// `a cos u + b sin u` as `√(a²+b²) cos(u − atan2(b, a))`.
pub fn sample_bivariate_vm<R: Rng + ?Sized>(
    rng: &mut R,
    p: &BivariateVonMises,
    n: usize,
    burn_in: usize,
    thin: usize,
) -> Vec<ChartPoint> {
    let thin = thin.max(1);
    let mut x1;
    let mut x2 = p.mu2;
    let mut out = Vec::with_capacity(n);
    let mut step = 0usize;
    while out.len() < n {
        let b = p.lambda12 * (x2 - p.mu2).sin();
        x1 = draw_von_mises(rng, p.kappa1.hypot(b), p.mu1 + b.atan2(p.kappa1));
        let b = p.lambda12 * (x1 - p.mu1).sin();
        x2 = draw_von_mises(rng, p.kappa2.hypot(b), p.mu2 + b.atan2(p.kappa2));
        step += 1;
        if step > burn_in && (step - burn_in) % thin == 0 {
            out.push(ChartPoint::torus(x1, x2));
        }
    }
    out
}

pub const GIBBS_BURN_IN: usize = 500;
pub const GIBBS_THIN: usize = 5;

/// `n` draws from any supported density.
pub fn sample_density<R: Rng + ?Sized>(rng: &mut R, q: &Density, n: usize) -> Result<Vec<ChartPoint>> {
    Ok(match q {
        Density::Uniform { manifold: Manifold::Circle } => {
            (0..n).map(|_| ChartPoint::circle(rng.random_range(0.0..TAU))).collect()
        }
        Density::Uniform { manifold: Manifold::Torus2 } => {
            (0..n).map(|_| ChartPoint::torus(rng.random_range(0.0..TAU), rng.random_range(0.0..TAU))).collect()
        }
        Density::Uniform { manifold: Manifold::So3 } => sample_uniform_so3(rng, n),
        Density::VonMises { kappa, mu } => {
            sample_von_mises(rng, *kappa, *mu, n)?.into_iter().map(ChartPoint::circle).collect()
        }
        Density::BivariateVonMises(p) => sample_bivariate_vm(rng, p, n, GIBBS_BURN_IN, GIBBS_THIN),
        Density::Fisher { .. } => sample_fisher_so3(rng, &q.fisher_matrix().unwrap(), n)?.points,
    })
}
