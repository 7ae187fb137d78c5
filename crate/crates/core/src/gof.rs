//! U/V statistics, bootstrap and spectral null approximations, and the
//! goodness-of-fit test built on them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::kernel::ManifoldKernel;
use crate::manifold::ChartPoint;
use crate::model::Density;
use crate::sampling::{self, RngStream};
use crate::stein::{SteinGram, SteinKernel, SteinOrder};

/// Floor applied to `σ̂` in the power proxy.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMethod {
    WildBootstrap,
    Spectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub order: SteinOrder,
    pub alpha: f64,
    pub bootstrap: usize,
    pub method: NullMethod,
    pub seed: u64,
    /// Number of draws from `q` used by the zeroth-order kernel.
    pub reference_size: usize,
    /// Metric scale `c` in `c · g` for the second-order kernel.
    pub metric_scale: f64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            order: SteinOrder::First,
            alpha: 0.01,
            bootstrap: 1000,
            method: NullMethod::WildBootstrap,
            seed: 0,
            reference_size: 1000,
            metric_scale: 1.0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MksdError::InvalidParameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.bootstrap == 0 {
            return Err(MksdError::InvalidParameter("bootstrap size must be positive".into()));
        }
        if self.order == SteinOrder::Zeroth && self.reference_size == 0 {
            return Err(MksdError::EmptyReferenceSample);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// V-statistic for the wild bootstrap, `n·U` for the spectrum method.
    pub statistic: f64,
    pub null_samples: Vec<f64>,
    pub quantile: f64,
    pub p_value: f64,
    pub reject: bool,
    pub kernel: ManifoldKernel,
    pub n: usize,
}

pub fn u_statistic(g: &SteinGram) -> Result<f64> {
    u_statistic_matrix(&g.matrix)
}

pub fn v_statistic(g: &SteinGram) -> f64 {
    v_statistic_matrix(&g.matrix)
}

pub(crate) fn u_statistic_matrix(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n < 2 {
        return Err(MksdError::TooFewSamples { needed: 2, got: n });
    }
    let off = m.sum() - m.trace();
    Ok(off / (n * (n - 1)) as f64)
}

pub(crate) fn v_statistic_matrix(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    m.sum() / (n * n) as f64
}

/// `S_t = WᵀGW / n²` with Rademacher `W`; replicate `t` draws from stream `(seed, t)`.
pub fn wild_bootstrap(g: &SteinGram, b: usize, seed: u64) -> Vec<f64> {
    wild_bootstrap_matrix(&g.matrix, b, &RngStream::new(seed))
}

pub(crate) fn wild_bootstrap_matrix(m: &DMatrix<f64>, b: usize, stream: &RngStream) -> Vec<f64> {
    let n = m.nrows();
    let nn = (n * n) as f64;
    (0..b)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.derive(t as u64).rng();
            let w: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut s = 0.0;
            for i in 0..n {
                let col = m.column(i);
                let mut r = 0.0;
                for j in 0..n {
                    r += col[j] * w[j];
                }
                s += w[i] * r;
            }
            s / nn
        })
        .collect()
}

/// `S_t = (1/n) Σⱼ w̃ⱼ (Z²ⱼₜ − 1)` with `w̃` the eigenvalues of `G`.
pub fn spectrum_null(g: &SteinGram, b: usize, seed: u64) -> Result<Vec<f64>> {
    spectrum_null_matrix(&g.matrix, b, &RngStream::new(seed))
}

pub(crate) fn spectrum_null_matrix(m: &DMatrix<f64>, b: usize, stream: &RngStream) -> Result<Vec<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(vec![0.0; b]);
    }
    let scaled = m / n as f64;
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(MksdError::EigendecompositionFailure);
    }
    let eig = SymmetricEigen::try_new(scaled, f64::EPSILON, 10_000).ok_or(MksdError::EigendecompositionFailure)?;
    let w = eig.eigenvalues;
    Ok((0..b)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.derive(t as u64).rng();
            w.iter()
                .map(|wj| {
                    let z: f64 = rng.sample(StandardNormal);
                    wj * (z * z - 1.0)
                })
                .sum()
        })
        .collect())
}

/// `(1 + #{S_t ≥ stat}) / (B + 1)`.
pub fn p_value(statistic: f64, null: &[f64]) -> f64 {
    let count = null.iter().filter(|&&s| s >= statistic).count();
    (1 + count) as f64 / (null.len() + 1) as f64
}

/// The `⌈(1 − α)B⌉`-th order statistic of the null sample.
pub fn null_quantile(null: &[f64], alpha: f64) -> f64 {
    let mut v = null.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((1.0 - alpha) * v.len() as f64).ceil() as usize;
    v[k.clamp(1, v.len()) - 1]
}

/// Square root of the empirical variance of the off-diagonal row means of `G`.
pub fn sigma_hat(g: &SteinGram) -> Result<f64> {
    sigma_hat_matrix(&g.matrix)
}

pub(crate) fn sigma_hat_matrix(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n < 2 {
        return Err(MksdError::TooFewSamples { needed: 2, got: n });
    }
    let means: Vec<f64> = (0..n).map(|i| (m.row(i).sum() - m[(i, i)]) / (n - 1) as f64).collect();
    let mu = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}

/// Stein kernel for `cfg`; zeroth-order reference samples come from `q`
/// on the `(seed, "reference")` stream.
pub fn build_stein_kernel(q: &Density, k: ManifoldKernel, cfg: &TestConfig) -> Result<SteinKernel> {
    let reference = if cfg.order == SteinOrder::Zeroth {
        let mut rng = RngStream::new(cfg.seed).derive_named("reference").rng();
        sampling::sample_density(&mut rng, q, cfg.reference_size)?
    } else {
        Vec::new()
    };
    SteinKernel::with_order(cfg.order, q.clone(), k, reference)?.with_metric_scale(cfg.metric_scale)
}

pub fn run_test(data: &[ChartPoint], q: &Density, k: &ManifoldKernel, cfg: &TestConfig) -> Result<TestResult> {
    cfg.validate()?;
    let sk = build_stein_kernel(q, *k, cfg)?;
    run_test_with(data, &sk, cfg)
}

/// Runs the test with a prebuilt Stein kernel.
pub fn run_test_with(data: &[ChartPoint], sk: &SteinKernel, cfg: &TestConfig) -> Result<TestResult> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(MksdError::TooFewSamples { needed: 2, got: data.len() });
    }
    let g = sk.gram(data)?;
    let stream = RngStream::new(cfg.seed).derive_named("null");
    let (statistic, null_samples) = match cfg.method {
        NullMethod::WildBootstrap => {
            (v_statistic(&g), wild_bootstrap_matrix(&g.matrix, cfg.bootstrap, &stream))
        }
        NullMethod::Spectrum => (
            data.len() as f64 * u_statistic(&g)?,
            spectrum_null_matrix(&g.matrix, cfg.bootstrap, &stream)?,
        ),
    };
    let quantile = null_quantile(&null_samples, cfg.alpha);
    Ok(TestResult {
        statistic,
        p_value: p_value(statistic, &null_samples),
        reject: statistic > quantile,
        quantile,
        null_samples,
        kernel: *sk.kernel(),
        n: data.len(),
    })
}

/// Seeded 50/50 split into (train, test); the train half gets `⌊n/2⌋` points.
pub fn split_halves(data: &[ChartPoint], stream: &RngStream) -> (Vec<ChartPoint>, Vec<ChartPoint>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream.rng());
    let half = data.len() / 2;
    let train = idx[..half].iter().map(|&i| data[i]).collect();
    let test = idx[half..].iter().map(|&i| data[i]).collect();
    (train, test)
}

/// Outcome of power-proxy kernel selection.
#[derive(Debug, Clone)]
pub struct KernelSelection {
    pub kernel: ManifoldKernel,
    /// `û / max(σ̂, floor)` at the chosen kernel on the train half.
    pub ratio: f64,
    /// Held-out half, the only data the selected kernel may be tested on.
    pub test: Vec<ChartPoint>,
}

/// Power-proxy `û / max(σ̂, 1e-12)` on `data`.
pub fn power_proxy(data: &[ChartPoint], q: &Density, k: &ManifoldKernel, cfg: &TestConfig) -> Result<f64> {
    let sk = build_stein_kernel(q, *k, cfg)?;
    let g = sk.gram(data)?;
    Ok(u_statistic(&g)? / sigma_hat(&g)?.max(SIGMA_FLOOR))
}

/// Picks the grid kernel maximizing the power proxy on a seeded train half.
pub fn select_kernel_params(
    data: &[ChartPoint],
    q: &Density,
    cfg: &TestConfig,
    grid: &[ManifoldKernel],
) -> Result<KernelSelection> {
    if grid.is_empty() {
        return Err(MksdError::EmptyGrid);
    }
    let (train, test) = split_halves(data, &RngStream::new(cfg.seed).derive_named("split"));
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in grid.iter().enumerate() {
        let r = power_proxy(&train, q, k, cfg)?;
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((i, r));
        }
    }
    let (i, ratio) = best.unwrap();
    Ok(KernelSelection { kernel: grid[i], ratio, test })
}
