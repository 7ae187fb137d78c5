//! Zeroth-, first- and second-order Stein kernels.
//!
//! With `s = ∂ log(q̃ J)` the Stein score and `k` a kernel:
//!
//! * `h⁽¹⁾(x, y) = Σᵢ sᵢ(x)sᵢ(y)k + sᵢ(x)∂_{yᵢ}k + sᵢ(y)∂_{xᵢ}k + ∂_{xᵢ}∂_{yᵢ}k`
//! * `h⁽²⁾(x, y) = T_x T_y k` with `T f = Σᵢⱼ gⁱʲ(∂ᵢ∂ⱼf + sᵢ ∂ⱼf)`
//! * `h⁽⁰⁾(x, y) = k(x, y) − ξ̂(x) − ξ̂(y) + Ĉ`, where `ξ̂` and `Ĉ` are kernel
//!   means over a reference sample drawn from `q`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::kernel::{KernelPoint, ManifoldKernel, PairJet, Slot};
use crate::manifold::{self, ChartPoint, Manifold};
use crate::model::Density;

/// Order of the Stein operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SteinOrder {
    Zeroth,
    First,
    Second,
}

impl SteinOrder {
    pub fn as_u8(self) -> u8 {
        match self {
            SteinOrder::Zeroth => 0,
            SteinOrder::First => 1,
            SteinOrder::Second => 2,
        }
    }

    pub fn from_u8(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SteinOrder::Zeroth),
            1 => Ok(SteinOrder::First),
            2 => Ok(SteinOrder::Second),
            _ => Err(MksdError::InvalidParameter(format!("Stein order must be 0, 1 or 2, got {c}"))),
        }
    }
}

/// A Stein kernel `h_q^{(c)}` for a fixed density and base kernel.
#[derive(Debug, Clone)]
pub struct SteinKernel {
    order: SteinOrder,
    density: Density,
    kernel: ManifoldKernel,
    reference: Vec<ChartPoint>,
    metric_scale: f64,
}

/// Symmetric matrix `M_ij = h(x_i, x_j)` over a point list.
#[derive(Debug, Clone)]
pub struct SteinGram {
    pub matrix: DMatrix<f64>,
    pub points: Vec<ChartPoint>,
}

impl SteinGram {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

// Everything about a single point that the pair formulas need.
struct PointCache {
    kp: KernelPoint,
    score: [f64; 3],
    ginv: [[f64; 3]; 3],
    // gⁱʲ sᵢ summed over i
    drift: [f64; 3],
    // ξ̂(x) for the zeroth order
    xi: f64,
}

impl SteinKernel {
    /// First- or second-order Stein kernel.
    pub fn new(order: SteinOrder, density: Density, kernel: ManifoldKernel) -> Result<Self> {
        if order == SteinOrder::Zeroth {
            return Err(MksdError::EmptyReferenceSample);
        }
        Self::build(order, density, kernel, Vec::new())
    }

    /// Zeroth-order Stein kernel estimated from reference samples of `q`.
    pub fn zeroth(density: Density, kernel: ManifoldKernel, reference: Vec<ChartPoint>) -> Result<Self> {
        if reference.is_empty() {
            return Err(MksdError::EmptyReferenceSample);
        }
        Self::build(SteinOrder::Zeroth, density, kernel, reference)
    }

    /// Any order; `reference` is used only when `order` is zeroth.
    pub fn with_order(
        order: SteinOrder,
        density: Density,
        kernel: ManifoldKernel,
        reference: Vec<ChartPoint>,
    ) -> Result<Self> {
        match order {
            SteinOrder::Zeroth => Self::zeroth(density, kernel, reference),
            _ => Self::new(order, density, kernel),
        }
    }

    fn build(order: SteinOrder, density: Density, kernel: ManifoldKernel, reference: Vec<ChartPoint>) -> Result<Self> {
        if density.manifold() != kernel.manifold() {
            return Err(MksdError::ChartMismatch {
                what: "kernel",
                expected: density.manifold(),
                found: kernel.manifold(),
            });
        }
        for r in &reference {
            manifold::check_chart(density.manifold(), r)?;
        }
        Ok(SteinKernel { order, density, kernel, reference, metric_scale: 1.0 })
    }

    /// Uses `c · g` as the metric in the second-order kernel.
    pub fn with_metric_scale(mut self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(MksdError::InvalidParameter(format!("metric scale must be positive, got {c}")));
        }
        self.metric_scale = c;
        Ok(self)
    }

    pub fn order(&self) -> SteinOrder {
        self.order
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn kernel(&self) -> &ManifoldKernel {
        &self.kernel
    }

    pub fn manifold(&self) -> Manifold {
        self.density.manifold()
    }

    pub fn reference(&self) -> &[ChartPoint] {
        &self.reference
    }

    fn prepare_reference(&self) -> Vec<KernelPoint> {
        self.reference.iter().map(|r| self.kernel.prepare(r)).collect()
    }

    /// `Ĉ`: mean of `k` over all ordered pairs of reference points.
    fn reference_mean(&self, refs: &[KernelPoint]) -> f64 {
        let m = refs.len();
        let total: f64 = (0..m)
            .into_par_iter()
            .map(|i| refs.iter().map(|r| self.kernel.eval_prepared(&refs[i], r)).sum::<f64>())
            .sum();
        total / (m * m) as f64
    }

    fn cache(&self, x: &ChartPoint, refs: &[KernelPoint]) -> Result<PointCache> {
        manifold::check_chart(self.manifold(), x)?;
        let kp = self.kernel.prepare(x);
        let d = x.dim();
        let mut score = [0.0; 3];
        let mut ginv = [[0.0; 3]; 3];
        let mut drift = [0.0; 3];
        let mut xi = 0.0;
        match self.order {
            SteinOrder::Zeroth => {
                xi = refs.iter().map(|r| self.kernel.eval_prepared(&kp, r)).sum::<f64>() / refs.len() as f64;
            }
            SteinOrder::First => {
                score = self.density.stein_score_array(x)?;
            }
            SteinOrder::Second => {
                score = self.density.stein_score_array(x)?;
                let g = manifold::inverse_metric(self.manifold(), x)?;
                for i in 0..d {
                    for j in 0..d {
                        ginv[i][j] = g[(i, j)] / self.metric_scale;
                    }
                }
                for j in 0..d {
                    drift[j] = (0..d).map(|i| ginv[i][j] * score[i]).sum();
                }
            }
        }
        Ok(PointCache { kp, score, ginv, drift, xi })
    }

    fn pair(&self, a: &PointCache, b: &PointCache, c_ref: f64) -> f64 {
        let d = self.manifold().dim();
        match self.order {
            SteinOrder::Zeroth => self.kernel.eval_prepared(&a.kp, &b.kp) - a.xi - b.xi + c_ref,
            SteinOrder::First => {
                let jet = self.kernel.pair_jet(&a.kp, &b.kp, 1, 1);
                first_order_pair(&jet, &a.score, &b.score, d)
            }
            SteinOrder::Second => {
                let jet = self.kernel.pair_jet(&a.kp, &b.kp, 2, 2);
                second_order_pair(&jet, a, b, d)
            }
        }
    }

    /// `h(x, y)`.
    pub fn eval(&self, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
        let refs = self.prepare_reference();
        let c_ref = if self.order == SteinOrder::Zeroth { self.reference_mean(&refs) } else { 0.0 };
        let a = self.cache(x, &refs)?;
        let b = self.cache(y, &refs)?;
        if manifold::precedes(x, y) {
            Ok(self.pair(&a, &b, c_ref))
        } else {
            Ok(self.pair(&b, &a, c_ref))
        }
    }

    /// Stein Gram matrix over `pts`; the upper triangle is filled in parallel.
    pub fn gram(&self, pts: &[ChartPoint]) -> Result<SteinGram> {
        let refs = self.prepare_reference();
        let c_ref = if self.order == SteinOrder::Zeroth { self.reference_mean(&refs) } else { 0.0 };
        let caches: Vec<PointCache> =
            pts.par_iter().map(|p| self.cache(p, &refs)).collect::<Result<_>>()?;
        let n = pts.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        if manifold::precedes(&pts[i], &pts[j]) {
                            self.pair(&caches[i], &caches[j], c_ref)
                        } else {
                            self.pair(&caches[j], &caches[i], c_ref)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                m[(i, i + off)] = v;
                m[(i + off, i)] = v;
            }
        }
        Ok(SteinGram { matrix: m, points: pts.to_vec() })
    }
}

fn first_order_pair(jet: &PairJet, sx: &[f64; 3], sy: &[f64; 3], d: usize) -> f64 {
    let mut h = 0.0;
    for i in 0..d {
        h += sx[i] * sy[i] * jet.k
            + sx[i] * jet.d(&[Slot::y(i)])
            + sy[i] * jet.d(&[Slot::x(i)])
            + jet.d(&[Slot::x(i), Slot::y(i)]);
    }
    h
}

fn second_order_pair(jet: &PairJet, a: &PointCache, b: &PointCache, d: usize) -> f64 {
    // T_x T_y k = Σ G^x_ij G^y_kl ∂ij,kl + G^x_ij b^y_l ∂ij,l + b^x_j G^y_kl ∂j,kl + b^x_j b^y_l ∂j,l
    let mut h = 0.0;
    for i in 0..d {
        for j in 0..d {
            let gx = a.ginv[i][j];
            if gx == 0.0 {
                continue;
            }
            for k in 0..d {
                for l in 0..d {
                    let gy = b.ginv[k][l];
                    if gy == 0.0 {
                        continue;
                    }
                    h += gx * gy * jet.d(&[Slot::x(i), Slot::x(j), Slot::y(k), Slot::y(l)]);
                }
                if b.drift[k] != 0.0 {
                    h += gx * b.drift[k] * jet.d(&[Slot::x(i), Slot::x(j), Slot::y(k)]);
                }
            }
        }
    }
    for j in 0..d {
        if a.drift[j] == 0.0 {
            continue;
        }
        for k in 0..d {
            for l in 0..d {
                let gy = b.ginv[k][l];
                if gy != 0.0 {
                    h += a.drift[j] * gy * jet.d(&[Slot::x(j), Slot::y(k), Slot::y(l)]);
                }
            }
            if b.drift[k] != 0.0 {
                h += a.drift[j] * b.drift[k] * jet.d(&[Slot::x(j), Slot::y(k)]);
            }
        }
    }
    h
}

pub fn stein_kernel_1(q: &Density, k: &ManifoldKernel, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
    SteinKernel::new(SteinOrder::First, q.clone(), *k)?.eval(x, y)
}

pub fn stein_kernel_2(q: &Density, k: &ManifoldKernel, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
    SteinKernel::new(SteinOrder::Second, q.clone(), *k)?.eval(x, y)
}

/// Sample-estimated zeroth-order Stein kernel; `q` only fixes the chart.
pub fn stein_kernel_0(q_samples: &[ChartPoint], k: &ManifoldKernel, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
    SteinKernel::zeroth(Density::uniform(k.manifold()), *k, q_samples.to_vec())?.eval(x, y)
}

/// First-order Stein operator applied to `k(x, ·)` as a function of `x`,
/// evaluated against a fixed location `v`: component `i` is
/// `sᵢ(x) k(x, v) + ∂_{xᵢ} k(x, v)`.
pub(crate) fn stein_feature(k: &ManifoldKernel, kx: &KernelPoint, score: &[f64; 3], v: &KernelPoint, out: &mut [f64]) {
    let jet = k.pair_jet(kx, v, 1, 0);
    for (i, o) in out.iter_mut().enumerate() {
        *o = score[i] * jet.k + jet.d(&[Slot::x(i)]);
    }
}

/// Empirical Stein witness `ŝ_p(v) = mean_x [s(x) k(x, v) + ∇ₓ k(x, v)]`.
pub fn witness_at(q: &Density, k: &ManifoldKernel, data: &[ChartPoint], v: &ChartPoint) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(MksdError::TooFewSamples { needed: 1, got: 0 });
    }
    manifold::check_chart(q.manifold(), v)?;
    let d = q.manifold().dim();
    let kv = k.prepare(v);
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for x in data {
        manifold::check_chart(q.manifold(), x)?;
        let s = q.stein_score_array(x)?;
        stein_feature(k, &k.prepare(x), &s, &kv, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let n = data.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Applies the second-order Stein operator in its second argument to
/// `f̃(·) = k(z, ·)` and returns the value at `x`.
pub fn second_order_operator_on_kernel(q: &Density, k: &ManifoldKernel, z: &ChartPoint, x: &ChartPoint) -> Result<f64> {
    manifold::check_chart(q.manifold(), x)?;
    manifold::check_chart(q.manifold(), z)?;
    let d = q.manifold().dim();
    let s = q.stein_score_array(x)?;
    let g = manifold::inverse_metric(q.manifold(), x)?;
    let jet = k.pair_jet(&k.prepare(z), &k.prepare(x), 0, 2);
    let mut v = 0.0;
    for i in 0..d {
        for j in 0..d {
            v += g[(i, j)] * (jet.d(&[Slot::y(i), Slot::y(j)]) + s[i] * jet.d(&[Slot::y(j)]));
        }
    }
    Ok(v)
}

/// First-order Stein operator applied to the vector field `f` with `∂ᵢfⁱ`
/// supplied by the caller: `Σᵢ ∂ᵢfⁱ + fⁱ sᵢ`.
pub fn first_order_operator(q: &Density, x: &ChartPoint, f: &[f64], div_f: f64) -> Result<f64> {
    let s = q.stein_score_array(x)?;
    Ok(div_f + f.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::MultiIndexDeriv;
    use crate::model::wind_bvm;
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
                rng.random_range(0.1..PI - 0.1),
                rng.random_range(0.0..TAU),
            ),
        }
    }

    // ⟨A⁽¹⁾k(x,·), A⁽¹⁾k(y,·)⟩ expanded term by term through the public
    // derivative API rather than the cached pair jet.
    fn h1_brute(q: &Density, k: &ManifoldKernel, x: &ChartPoint, y: &ChartPoint) -> f64 {
        let sx = q.stein_score(x).unwrap();
        let sy = q.stein_score(y).unwrap();
        let mut h = 0.0;
        for i in 0..x.dim() {
            let kxy = k.eval(x, y).unwrap();
            let dy = k.deriv(&MultiIndexDeriv::new(&[], &[i]).unwrap(), x, y).unwrap();
            let dx = k.deriv(&MultiIndexDeriv::new(&[i], &[]).unwrap(), x, y).unwrap();
            let dxy = k.deriv(&MultiIndexDeriv::new(&[i], &[i]).unwrap(), x, y).unwrap();
            h += sx[i] * sy[i] * kxy + sx[i] * dy + sy[i] * dx + dxy;
        }
        h
    }

    fn h2_brute(q: &Density, k: &ManifoldKernel, x: &ChartPoint, y: &ChartPoint) -> f64 {
        let d = x.dim();
        let sx = q.stein_score(x).unwrap();
        let sy = q.stein_score(y).unwrap();
        let gx = manifold::inverse_metric(q.manifold(), x).unwrap();
        let gy = manifold::inverse_metric(q.manifold(), y).unwrap();
        let kd = |a: &[usize], b: &[usize]| k.deriv(&MultiIndexDeriv::new(a, b).unwrap(), x, y).unwrap();
        let mut h = 0.0;
        for i in 0..d {
            for j in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        let w = gx[(i, j)] * gy[(a, b)];
                        h += w * (kd(&[i, j], &[a, b]) + sy[a] * kd(&[i, j], &[b]) + sx[i] * kd(&[j], &[a, b])
                            + sx[i] * sy[a] * kd(&[j], &[b]));
                    }
                }
            }
        }
        h
    }

    #[test]
    fn first_order_examples() {
        let eta = 1.4;
        let k = ManifoldKernel::von_mises(eta).unwrap();
        let q = Density::uniform(Manifold::Circle);
        let x = ChartPoint::circle(0.9);
        assert_abs_diff_eq!(stein_kernel_1(&q, &k, &x, &x).unwrap(), eta * eta.exp(), epsilon = 1e-12);

        let (e1, e2) = (0.6, 1.9);
        let k = ManifoldKernel::product_von_mises(e1, e2).unwrap();
        let q = Density::uniform(Manifold::Torus2);
        let x = ChartPoint::torus(0.0, 0.0);
        // k(x,x) = exp(η₁ + η₂); the mixed partial per axis is η_a k
        let v = stein_kernel_1(&q, &k, &x, &x).unwrap();
        assert_abs_diff_eq!(v, (e1 + e2) * (e1 + e2).exp(), epsilon = 1e-12);
    }

    #[test]
    fn first_and_second_order_match_brute_force_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cases = [
            (Density::von_mises(1.5, 0.4).unwrap(), ManifoldKernel::von_mises(0.9).unwrap()),
            (Density::bivariate_von_mises(wind_bvm()), ManifoldKernel::product_von_mises(0.7, 1.3).unwrap()),
            (Density::exp_trace(0.35).unwrap(), ManifoldKernel::exp_trace(0.5).unwrap()),
            (Density::fisher_b(0.2).unwrap(), ManifoldKernel::exp_trace(1.1).unwrap()),
        ];
        for (q, k) in cases {
            for _ in 0..20 {
                let x = random_point(q.manifold(), &mut rng);
                let y = random_point(q.manifold(), &mut rng);
                let a = stein_kernel_1(&q, &k, &x, &y).unwrap();
                let b = h1_brute(&q, &k, &x, &y);
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
                let a = stein_kernel_2(&q, &k, &x, &y).unwrap();
                let b = h2_brute(&q, &k, &x, &y);
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn second_order_on_circle_is_fourth_derivative() {
        // h⁽²⁾ for uniform q on the circle is f''''(0) for f(u) = exp(η cos u):
        // f''''(0) = η e^η (3η + η² + 1) ... evaluated numerically below.
        let eta = 0.8;
        let k = ManifoldKernel::von_mises(eta).unwrap();
        let q = Density::uniform(Manifold::Circle);
        let x = ChartPoint::circle(2.0);
        let v = stein_kernel_2(&q, &k, &x, &x).unwrap();
        // derivatives of exp(η cos u) at u = 0 via the Taylor series of
        // exp(η(1 − u²/2 + u⁴/24)): coefficient of u⁴ times 4!
        let expect = eta.exp() * (eta * eta / 8.0 + eta / 24.0) * 24.0;
        assert_abs_diff_eq!(v, expect, epsilon = 1e-10);
    }

    #[test]
    fn metric_rescale_scales_second_order_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Density::exp_trace(0.5).unwrap();
        let k = ManifoldKernel::exp_trace(0.7).unwrap();
        let base = SteinKernel::new(SteinOrder::Second, q.clone(), k).unwrap();
        let scaled = base.clone().with_metric_scale(3.0).unwrap();
        for _ in 0..10 {
            let x = random_point(Manifold::So3, &mut rng);
            let y = random_point(Manifold::So3, &mut rng);
            let a = base.eval(&x, &y).unwrap();
            let b = scaled.eval(&x, &y).unwrap();
            assert!((b - a / 9.0).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zeroth_order_examples() {
        let k = ManifoldKernel::product_von_mises(1.0, 0.5).unwrap();
        let z = ChartPoint::torus(0.3, 1.2);
        assert_abs_diff_eq!(stein_kernel_0(&[z], &k, &z, &z).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(stein_kernel_0(&[], &k, &z, &z), Err(MksdError::EmptyReferenceSample)));
        assert!(matches!(
            SteinKernel::new(SteinOrder::Zeroth, Density::uniform(Manifold::Torus2), k),
            Err(MksdError::EmptyReferenceSample)
        ));
    }

    #[test]
    fn gram_is_symmetric_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Density::exp_trace(0.35).unwrap();
        let k = ManifoldKernel::exp_trace(0.4).unwrap();
        let pts: Vec<_> = (0..8).map(|_| random_point(Manifold::So3, &mut rng)).collect();
        for order in [SteinOrder::First, SteinOrder::Second] {
            let sk = SteinKernel::new(order, q.clone(), k).unwrap();
            let g = sk.gram(&pts).unwrap();
            assert_eq!(g.matrix, g.matrix.transpose());
            for i in 0..8 {
                for j in 0..8 {
                    let e = sk.eval(&pts[i], &pts[j]).unwrap();
                    assert!((g.matrix[(i, j)] - e).abs() <= 1e-12 * e.abs().max(1.0));
                }
            }
            let perm = [3, 1, 7, 0, 2, 6, 5, 4];
            let p: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
            let gp = sk.gram(&p).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let e = g.matrix[(perm[i], perm[j])];
                    assert!((gp.matrix[(i, j)] - e).abs() <= 1e-12 * e.abs().max(1.0));
                }
            }
            let one = sk.gram(&pts[..1]).unwrap();
            assert_eq!(one.matrix[(0, 0)], sk.eval(&pts[0], &pts[0]).unwrap());
        }
    }

    #[test]
    fn witness_of_single_point() {
        let q = Density::von_mises(1.0, 0.5).unwrap();
        let k = ManifoldKernel::von_mises(2.0).unwrap();
        let x = ChartPoint::circle(1.3);
        let v = ChartPoint::circle(0.2);
        let w = witness_at(&q, &k, &[x], &v).unwrap();
        let s = q.stein_score(&x).unwrap()[0];
        let expect = s * k.eval(&x, &v).unwrap() + k.deriv(&MultiIndexDeriv::new(&[0], &[]).unwrap(), &x, &v).unwrap();
        assert_abs_diff_eq!(w[0], expect, epsilon = 1e-14);
        assert!(witness_at(&q, &k, &[], &v).is_err());
    }
}
