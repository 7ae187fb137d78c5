//! Finite-set Stein discrepancy (mFSSD) and test-location optimization.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MksdError, Result};
use crate::gof;
use crate::kernel::{default_param_grid, KernelPoint, ManifoldKernel};
use crate::manifold::{self, ChartPoint, Manifold};
use crate::model::Density;
use crate::optimize::{nelder_mead, NelderMeadConfig};
use crate::sampling::RngStream;
use crate::stein::stein_feature;

/// Added to `σ̃` in the location objective.
pub const OBJECTIVE_REGULARIZER: f64 = 1e-6;
/// Locations closer than this in wrapped coordinates count as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestLocations {
    pub locations: Vec<ChartPoint>,
}

impl TestLocations {
    pub fn new(locations: Vec<ChartPoint>) -> Result<Self> {
        if locations.is_empty() {
            return Err(MksdError::InvalidParameter("at least one test location is required".into()));
        }
        let m = locations[0].manifold();
        for v in &locations {
            manifold::check_chart(m, v)?;
            v.check_regular()?;
        }
        Ok(TestLocations { locations })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Data with Stein scores and kernel caches computed once, so features at
/// many candidate location sets cost `O(n·d·J)` each.
pub struct FeatureData {
    q: Density,
    k: ManifoldKernel,
    points: Vec<ChartPoint>,
    kps: Vec<KernelPoint>,
    scores: Vec<[f64; 3]>,
}

impl FeatureData {
    pub fn new(data: &[ChartPoint], q: &Density, k: &ManifoldKernel) -> Result<Self> {
        if data.is_empty() {
            return Err(MksdError::TooFewSamples { needed: 1, got: 0 });
        }
        if q.manifold() != k.manifold() {
            return Err(MksdError::ChartMismatch { what: "kernel", expected: q.manifold(), found: k.manifold() });
        }
        let scores = data.iter().map(|x| q.stein_score_array(x)).collect::<Result<Vec<_>>>()?;
        Ok(FeatureData {
            q: q.clone(),
            k: *k,
            points: data.to_vec(),
            kps: data.iter().map(|x| k.prepare(x)).collect(),
            scores,
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.q.manifold().dim()
    }

    /// Calls `visit(i, τ(xᵢ))` for every data point; `τ` has length `d·J`
    /// with location-major layout.
    fn for_each_feature(&self, v: &[ChartPoint], mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let d = self.dim();
        for p in v {
            manifold::check_chart(self.q.manifold(), p)?;
        }
        let mut tau = vec![0.0; d * v.len()];
        match self.k {
            ManifoldKernel::VonMises { .. } | ManifoldKernel::ProductVonMises { .. } => {
                let eta = self.k.params();
                for (i, x) in self.points.iter().enumerate() {
                    let c = x.coords();
                    for (j, vj) in v.iter().enumerate() {
                        let vc = vj.coords();
                        let mut t = 0.0;
                        for a in 0..d {
                            t += eta[a] * (c[a] - vc[a]).cos();
                        }
                        let kv = t.exp();
                        for a in 0..d {
                            tau[j * d + a] = (self.scores[i][a] - eta[a] * (c[a] - vc[a]).sin()) * kv;
                        }
                    }
                    visit(i, &tau);
                }
            }
            ManifoldKernel::ExpTrace { .. } => {
                let kv: Vec<KernelPoint> = v.iter().map(|p| self.k.prepare(p)).collect();
                for i in 0..self.n() {
                    for (j, vj) in kv.iter().enumerate() {
                        stein_feature(&self.k, &self.kps[i], &self.scores[i], vj, &mut tau[j * d..(j + 1) * d]);
                    }
                    visit(i, &tau);
                }
            }
        }
        Ok(())
    }

    /// All feature vectors as rows.
    pub fn features(&self, v: &[ChartPoint]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.n());
        self.for_each_feature(v, |_, t| out.push(t.to_vec()))?;
        Ok(out)
    }

    /// Mean feature vector `μ̂`.
    pub fn mean_feature(&self, v: &[ChartPoint]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim() * v.len()];
        self.for_each_feature(v, |_, t| acc.iter_mut().zip(t).for_each(|(a, b)| *a += b))?;
        let n = self.n() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// `‖μ̂‖² / (dJ)`.
    pub fn mfssd(&self, v: &[ChartPoint]) -> Result<f64> {
        let mu = self.mean_feature(v)?;
        Ok(mu.iter().map(|m| m * m).sum::<f64>() / mu.len() as f64)
    }

    /// `(mfssd, σ̃²)` with `σ̃² = 4/(dJ)² · μ̂ᵀΣ̂μ̂`.
    pub fn mfssd_with_variance(&self, v: &[ChartPoint]) -> Result<(f64, f64)> {
        if self.n() < 2 {
            return Err(MksdError::TooFewSamples { needed: 2, got: self.n() });
        }
        let mu = self.mean_feature(v)?;
        let dj = mu.len() as f64;
        let mfssd = mu.iter().map(|m| m * m).sum::<f64>() / dj;
        let mm: f64 = mu.iter().map(|m| m * m).sum();
        // μ̂ᵀΣ̂μ̂ = mean over i of (μ̂ᵀτᵢ − ‖μ̂‖²)²
        let mut quad = 0.0;
        self.for_each_feature(v, |_, t| {
            let p: f64 = t.iter().zip(&mu).map(|(a, b)| a * b).sum();
            quad += (p - mm).powi(2);
        })?;
        quad /= self.n() as f64;
        Ok((mfssd, 4.0 / (dj * dj) * quad))
    }

    /// `mfssd / (σ̃ + 1e-6)`.
    pub fn objective(&self, v: &[ChartPoint]) -> Result<f64> {
        let (m, var) = self.mfssd_with_variance(v)?;
        Ok(m / (var.sqrt() + OBJECTIVE_REGULARIZER))
    }

    /// Wild-bootstrap null draws `‖(1/n)Σ Wᵢτᵢ‖²/(dJ)` for replicates `0..b`.
    pub fn wild_bootstrap(&self, v: &[ChartPoint], b: usize, stream: &RngStream) -> Result<Vec<f64>> {
        let feats = self.features(v)?;
        let n = feats.len() as f64;
        let dj = feats.first().map_or(1, |f| f.len());
        Ok((0..b)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream.derive(t as u64).rng();
                let mut acc = vec![0.0; dj];
                for f in &feats {
                    let w = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    acc.iter_mut().zip(f).for_each(|(a, b)| *a += w * b);
                }
                acc.iter().map(|a| (a / n).powi(2)).sum::<f64>() / dj as f64
            })
            .collect())
    }
}

pub fn mfssd(data: &[ChartPoint], q: &Density, k: &ManifoldKernel, v: &TestLocations) -> Result<f64> {
    FeatureData::new(data, q, k)?.mfssd(&v.locations)
}

pub fn mfssd_variance(data: &[ChartPoint], q: &Density, k: &ManifoldKernel, v: &TestLocations) -> Result<f64> {
    Ok(FeatureData::new(data, q, k)?.mfssd_with_variance(&v.locations)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationOptConfig {
    pub starts: usize,
    /// Random candidate location sets scored per start; the best seeds Nelder–Mead.
    pub candidates: usize,
    /// Standard deviation of the jitter applied to data points drawn as candidates.
    pub jitter: f64,
    pub nelder_mead: NelderMeadConfig,
}

impl Default for LocationOptConfig {
    fn default() -> Self {
        LocationOptConfig { starts: 5, candidates: 16, jitter: 0.05, nelder_mead: NelderMeadConfig::default() }
    }
}

fn to_points(m: Manifold, flat: &[f64]) -> Result<Vec<ChartPoint>> {
    flat.chunks(m.dim()).map(|c| manifold::wrap(m, c)).collect()
}

fn objective_or_neg_inf(fd: &FeatureData, flat: &[f64]) -> f64 {
    match to_points(fd.q.manifold(), flat).and_then(|v| {
        for p in &v {
            p.check_regular()?;
        }
        fd.objective(&v)
    }) {
        Ok(o) if o.is_finite() => o,
        _ => f64::NEG_INFINITY,
    }
}

fn jittered_draw<R: Rng + ?Sized>(rng: &mut R, data: &[ChartPoint], j: usize, jitter: f64) -> Vec<f64> {
    let mut flat = Vec::new();
    for _ in 0..j {
        let x = data[rng.random_range(0..data.len())];
        for c in x.coords() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            flat.push(c + jitter * z);
        }
    }
    flat
}

/// Maximizes the objective over `J` locations by multi-start Nelder–Mead in
/// wrapped chart coordinates. Start `s` uses stream `rng.derive(s)`.
pub fn optimize_locations(
    train: &[ChartPoint],
    q: &Density,
    k: &ManifoldKernel,
    j: usize,
    rng: &RngStream,
    cfg: &LocationOptConfig,
) -> Result<TestLocations> {
    if j == 0 {
        return Err(MksdError::InvalidParameter("J must be at least 1".into()));
    }
    let fd = FeatureData::new(train, q, k)?;
    optimize_with(&fd, j, rng, cfg).map(|(v, _)| v)
}

// Best of `cfg.candidates` jittered draws from the data; the draws depend only
// on `stream`, not on the kernel.
fn best_candidate(fd: &FeatureData, j: usize, stream: &RngStream, cfg: &LocationOptConfig) -> (Vec<f64>, f64) {
    let mut r = stream.rng();
    let mut best = jittered_draw(&mut r, &fd.points, j, cfg.jitter);
    let mut best_val = objective_or_neg_inf(fd, &best);
    for _ in 1..cfg.candidates.max(1) {
        let c = jittered_draw(&mut r, &fd.points, j, cfg.jitter);
        let v = objective_or_neg_inf(fd, &c);
        if v > best_val {
            best = c;
            best_val = v;
        }
    }
    (best, best_val)
}

/// Picks the kernel in `grid` with the best out-of-sample objective: `train` is
/// split in two, the optimizer's starting candidates are searched on one part
/// and the winning locations are scored on the other. Scoring on the search
/// data instead favours kernels that overfit. All kernels see the same draws.
pub fn select_criticism_kernel(
    train: &[ChartPoint],
    q: &Density,
    grid: &[ManifoldKernel],
    j: usize,
    rng: &RngStream,
    cfg: &LocationOptConfig,
) -> Result<(ManifoldKernel, f64)> {
    if grid.is_empty() {
        return Err(MksdError::EmptyGrid);
    }
    if j == 0 {
        return Err(MksdError::InvalidParameter("J must be at least 1".into()));
    }
    if train.len() < 4 {
        return Err(MksdError::TooFewSamples { needed: 4, got: train.len() });
    }
    let (fit, score_on) = gof::split_halves(train, &rng.derive_named("inner"));
    let mut best: Option<(ManifoldKernel, f64)> = None;
    for k in grid {
        let fd = FeatureData::new(&fit, q, k)?;
        let (locs, _) = (0..cfg.starts.max(1))
            .map(|s| best_candidate(&fd, j, &rng.derive(s as u64), cfg))
            .fold((Vec::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let score = if locs.is_empty() {
            f64::NEG_INFINITY
        } else {
            objective_or_neg_inf(&FeatureData::new(&score_on, q, k)?, &locs)
        };
        if best.is_none_or(|b| score > b.1) {
            best = Some((*k, score));
        }
    }
    Ok(best.expect("grid is nonempty"))
}

fn optimize_with(fd: &FeatureData, j: usize, rng: &RngStream, cfg: &LocationOptConfig) -> Result<(TestLocations, f64)> {
    let m = fd.q.manifold();
    let runs: Vec<(Vec<f64>, f64)> = (0..cfg.starts.max(1))
        .into_par_iter()
        .map(|s| {
            let (best, best_val) = best_candidate(fd, j, &rng.derive(s as u64), cfg);
            let res = nelder_mead(|x| -objective_or_neg_inf(fd, x), &best, &cfg.nelder_mead);
            if -res.value >= best_val {
                (res.x, -res.value)
            } else {
                (best, best_val)
            }
        })
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.1 > runs[best].1 {
            best = i;
        }
    }
    let mut locs = to_points(m, &runs[best].0)?;
    separate_duplicates(&mut locs, &mut rng.derive_named("dedup").rng());
    let value = fd.objective(&locs).unwrap_or(f64::NEG_INFINITY);
    Ok((TestLocations::new(locs)?, value))
}

fn wrapped_distance(a: &ChartPoint, b: &ChartPoint) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| {
            let d = (x - y).abs() % std::f64::consts::TAU;
            d.min(std::f64::consts::TAU - d)
        })
        .fold(0.0, f64::max)
}

fn separate_duplicates<R: Rng + ?Sized>(locs: &mut [ChartPoint], rng: &mut R) {
    for i in 1..locs.len() {
        while locs[..i].iter().any(|p| wrapped_distance(p, &locs[i]) < DUPLICATE_TOL) {
            let raw: Vec<f64> = locs[i].coords().iter().map(|c| c + rng.random_range(-0.01..0.01)).collect();
            if let Ok(p) = manifold::wrap(locs[i].manifold(), &raw) {
                if p.check_regular().is_ok() {
                    locs[i] = p;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticismConfig {
    pub alpha: f64,
    pub bootstrap: usize,
    pub seed: u64,
    #[serde(skip)]
    pub opt: LocationOptConfig,
}

impl Default for CriticismConfig {
    fn default() -> Self {
        CriticismConfig { alpha: 0.05, bootstrap: 1000, seed: 0, opt: LocationOptConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticismResult {
    /// Locations sorted by decreasing single-location objective.
    pub locations: Vec<ChartPoint>,
    /// Single-location objective on the train half, aligned with `locations`.
    pub objectives: Vec<f64>,
    /// Objective of the full location set on the train half.
    pub train_objective: f64,
    /// mFSSD on the held-out half.
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// The (train, test) split [`criticize`] uses for `seed`.
pub fn criticism_split(data: &[ChartPoint], seed: u64) -> (Vec<ChartPoint>, Vec<ChartPoint>) {
    gof::split_halves(data, &RngStream::new(seed).derive_named("split"))
}

/// Optimizes `J` locations on a seeded train half and tests on the other half.
pub fn criticize(
    data: &[ChartPoint],
    q: &Density,
    k: &ManifoldKernel,
    j: usize,
    cfg: &CriticismConfig,
) -> Result<CriticismResult> {
    if data.len() < 4 {
        return Err(MksdError::TooFewSamples { needed: 4, got: data.len() });
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || cfg.bootstrap == 0 {
        return Err(MksdError::InvalidParameter("alpha must lie in (0, 1) and bootstrap be positive".into()));
    }
    if j == 0 {
        return Err(MksdError::InvalidParameter("J must be at least 1".into()));
    }
    let root = RngStream::new(cfg.seed);
    let (train, test) = criticism_split(data, cfg.seed);
    let fd_train = FeatureData::new(&train, q, k)?;
    let (v, train_objective) = optimize_with(&fd_train, j, &root.derive_named("locations"), &cfg.opt)?;

    let mut ranked: Vec<(ChartPoint, f64)> = v
        .locations
        .iter()
        .map(|p| Ok((*p, fd_train.objective(std::slice::from_ref(p))?)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));

    let fd_test = FeatureData::new(&test, q, k)?;
    let statistic = fd_test.mfssd(&v.locations)?;
    let null = fd_test.wild_bootstrap(&v.locations, cfg.bootstrap, &root.derive_named("null"))?;
    let quantile = gof::null_quantile(&null, cfg.alpha);
    Ok(CriticismResult {
        locations: ranked.iter().map(|r| r.0).collect(),
        objectives: ranked.iter().map(|r| r.1).collect(),
        train_objective,
        statistic,
        p_value: gof::p_value(statistic, &null),
        reject: statistic > quantile,
    })
}

/// Kernel grid per parameter used by [`criticize_auto`].
pub const AUTO_GRID_PER_PARAM: usize = 7;

/// [`criticize`] with the kernel chosen on the train half by
/// [`select_criticism_kernel`] over a log grid around the median heuristic.
pub fn criticize_auto(
    data: &[ChartPoint],
    q: &Density,
    j: usize,
    cfg: &CriticismConfig,
) -> Result<(ManifoldKernel, CriticismResult)> {
    if data.len() < 4 {
        return Err(MksdError::TooFewSamples { needed: 4, got: data.len() });
    }
    let (train, _) = criticism_split(data, cfg.seed);
    let base = ManifoldKernel::median_heuristic(q.manifold(), &train)?;
    let grid = default_param_grid(&base, AUTO_GRID_PER_PARAM);
    let stream = RngStream::new(cfg.seed).derive_named("kernel");
    let (k, _) = select_criticism_kernel(&train, q, &grid, j, &stream, &cfg.opt)?;
    Ok((k, criticize(data, q, &k, j, cfg)?))
}

/// Single-location objective on a `res × res` lattice `(2πa/res, 2πb/res)`.
pub fn objective_grid(data: &[ChartPoint], q: &Density, k: &ManifoldKernel, res: usize) -> Result<Vec<(f64, f64, f64)>> {
    if q.manifold() != Manifold::Torus2 {
        return Err(MksdError::ChartMismatch { what: "objective grid", expected: Manifold::Torus2, found: q.manifold() });
    }
    let fd = FeatureData::new(data, q, k)?;
    let h = std::f64::consts::TAU / res as f64;
    (0..res * res)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = ((idx / res) as f64 * h, (idx % res) as f64 * h);
            Ok((a, b, fd.objective(&[ChartPoint::torus(a, b)])?))
        })
        .collect()
}
