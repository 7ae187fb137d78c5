//! Subcommand implementations. Each returns its result object; `main` handles
//! printing and exit codes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mksd::criticism::{self, CriticismConfig};
use mksd::efficiency;
use mksd::gof::{self, NullMethod, TestConfig};
use mksd::kernel::default_param_grid;
use mksd::sampling::{self, RngStream};
use mksd::{ChartPoint, Density, Manifold, ManifoldKernel, SteinOrder};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::ingest::{self, IngestOptions, DEFAULT_ROTATION_TOL};
use crate::spec::{parse_kernel, parse_model, KernelSpec};

/// Grid values per kernel parameter for `kernel=auto`.
pub const GRID_PER_PARAM: usize = 9;

#[derive(Debug, Parser)]
#[command(name = "mksd", version, about = "Kernel Stein discrepancy tests on the circle, torus and SO(3)")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Goodness-of-fit test of data against a model.
    Test(TestArgs),
    /// Optimize interpretable test locations (mFSSD) and test on held-out data.
    Criticize(CriticizeArgs),
    /// Rejection rates over a parameter sweep of simulated data.
    PowerSim(PowerSimArgs),
    /// Relative Bahadur efficiencies on the circle.
    Efficiency(EfficiencyArgs),
    /// Draw samples from a model.
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Wild,
    Spectrum,
}

impl From<MethodArg> for NullMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Wild => NullMethod::WildBootstrap,
            MethodArg::Spectrum => NullMethod::Spectrum,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV input file.
    #[arg(long)]
    pub input: PathBuf,
    /// Angles are in degrees.
    #[arg(long)]
    pub degrees: bool,
    /// Angles are integer directions m out of N, mapped to 2πm/N.
    #[arg(long, value_name = "N")]
    pub directions: Option<u32>,
    /// Largest rotation defect accepted for SO(3) rows.
    #[arg(long, default_value_t = DEFAULT_ROTATION_TOL)]
    pub rotation_tol: f64,
}

impl DataArgs {
    fn load(&self, manifold: Manifold) -> Result<Vec<ChartPoint>> {
        let opts = IngestOptions { degrees: self.degrees, directions: self.directions, rotation_tol: self.rotation_tol };
        ingest::ingest(&self.input, manifold, &opts)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestOptions {
    /// Stein operator order.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub order: u8,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Bootstrap (null) sample size B.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Wild)]
    pub method: MethodArg,
    /// Draws from the model used by the zeroth-order kernel.
    #[arg(long, default_value_t = 1000)]
    pub reference_size: usize,
}

impl TestOptions {
    fn config(&self, seed: u64) -> Result<TestConfig> {
        let cfg = TestConfig {
            order: SteinOrder::from_u8(self.order)?,
            alpha: self.alpha,
            bootstrap: self.bootstrap,
            method: self.method.into(),
            seed,
            reference_size: self.reference_size,
            metric_scale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[arg(long)]
    pub manifold: Manifold,
    /// Null model, e.g. `exptrace:0.35` or `bvm:k1,k2,mu1,mu2,l12`.
    #[arg(long)]
    pub model: String,
    /// `vm:eta`, `pvm:eta1,eta2`, `exptrace:eta`, `median` or `auto`.
    #[arg(long, default_value = "auto")]
    pub kernel: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub test: TestOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include the null samples in the output.
    #[arg(long)]
    pub dump_null: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CriticizeArgs {
    #[arg(long, default_value = "torus2")]
    pub manifold: Manifold,
    #[arg(long)]
    pub model: String,
    /// Fixed kernel or `median`.
    #[arg(long, default_value = "median")]
    pub kernel: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of test locations.
    #[arg(long = "J", default_value_t = 10)]
    pub j: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side length of the objective lattice written for heatmaps.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    /// Prefix for `_locations.csv`, `_objectives.csv` and `_grid.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PowerSimArgs {
    #[arg(long)]
    pub manifold: Manifold,
    /// Null model; `{}` is replaced by the sweep value.
    #[arg(long)]
    pub model: String,
    /// Data-generating model; `{}` is replaced by the sweep value.
    #[arg(long)]
    pub alt: String,
    #[arg(long, default_value = "median")]
    pub kernel: String,
    /// `NAME=v1,v2,...`; `n` sweeps the sample size, any other name fills `{}`.
    #[arg(long)]
    pub sweep: String,
    /// Sample size when not swept.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[command(flatten)]
    pub test: TestOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EfficiencyArgs {
    /// Comma-separated concentrations.
    #[arg(long, conflicts_with = "kappa_range")]
    pub kappas: Option<String>,
    /// `start:end:count`, evenly spaced and inclusive.
    #[arg(long)]
    pub kappa_range: Option<String>,
    #[arg(long, default_value_t = efficiency::DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub manifold: Manifold,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Provenance header: the command name and every argument.
pub fn run_spec<T: Serialize>(command: &str, args: &T) -> Value {
    json!({ "command": command, "args": args })
}

fn resolve_kernel(spec: &KernelSpec, manifold: Manifold, data: &[ChartPoint]) -> Result<ManifoldKernel> {
    match spec {
        KernelSpec::Fixed(k) => Ok(*k),
        KernelSpec::Median | KernelSpec::Auto => Ok(ManifoldKernel::median_heuristic(manifold, data)?),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TestOutput {
    pub run_spec: Value,
    pub statistic: f64,
    pub p_value: f64,
    pub quantile: f64,
    pub reject: bool,
    pub bootstrap: usize,
    pub alpha: f64,
    pub order: u8,
    pub method: MethodArg,
    pub kernel: ManifoldKernel,
    /// Power proxy of the selected kernel on the train half (`kernel=auto`).
    pub selection_ratio: Option<f64>,
    /// Points the test statistic was computed on.
    pub n_tested: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_samples: Option<Vec<f64>>,
}

/// Runs one test; `kernel=auto` selects on a train half and tests on the rest.
pub fn test_data(
    data: &[ChartPoint],
    q: &Density,
    kernel: &KernelSpec,
    cfg: &TestConfig,
) -> Result<(gof::TestResult, Option<f64>)> {
    match kernel {
        KernelSpec::Auto => {
            let (train, _) = gof::split_halves(data, &RngStream::new(cfg.seed).derive_named("split"));
            let base = ManifoldKernel::median_heuristic(q.manifold(), &train)?;
            let grid = default_param_grid(&base, GRID_PER_PARAM);
            let sel = gof::select_kernel_params(data, q, cfg, &grid)?;
            Ok((gof::run_test(&sel.test, q, &sel.kernel, cfg)?, Some(sel.ratio)))
        }
        spec => {
            let k = resolve_kernel(spec, q.manifold(), data)?;
            Ok((gof::run_test(data, q, &k, cfg)?, None))
        }
    }
}

pub fn cmd_test(args: &TestArgs) -> Result<TestOutput> {
    let q = parse_model(&args.model, args.manifold)?;
    let kernel = parse_kernel(&args.kernel, args.manifold)?;
    let cfg = args.test.config(args.seed)?;
    let data = args.data.load(args.manifold)?;
    let (r, selection_ratio) = test_data(&data, &q, &kernel, &cfg)?;
    Ok(TestOutput {
        run_spec: run_spec("test", args),
        statistic: r.statistic,
        p_value: r.p_value,
        quantile: r.quantile,
        reject: r.reject,
        bootstrap: cfg.bootstrap,
        alpha: cfg.alpha,
        order: args.test.order,
        method: args.test.method,
        kernel: r.kernel,
        selection_ratio,
        n_tested: r.n,
        seed: args.seed,
        null_samples: args.dump_null.then_some(r.null_samples),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticizeOutput {
    pub run_spec: Value,
    pub kernel: ManifoldKernel,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub train_objective: f64,
    pub locations: Vec<Vec<f64>>,
    pub objectives: Vec<f64>,
    #[serde(skip)]
    pub grid: Vec<(f64, f64, f64)>,
}

pub fn cmd_criticize(args: &CriticizeArgs) -> Result<CriticizeOutput> {
    let q = parse_model(&args.model, args.manifold)?;
    let spec = parse_kernel(&args.kernel, args.manifold)?;
    if args.j == 0 {
        return Err(CliError::Usage("--J must be at least 1".into()));
    }
    let data = args.data.load(args.manifold)?;
    let (train, _) = criticism::criticism_split(&data, args.seed);
    let cfg = CriticismConfig { alpha: args.alpha, bootstrap: args.bootstrap, seed: args.seed, ..Default::default() };
    let (k, r) = if spec == KernelSpec::Auto {
        criticism::criticize_auto(&data, &q, args.j, &cfg)?
    } else {
        let k = resolve_kernel(&spec, args.manifold, &train)?;
        (k, criticism::criticize(&data, &q, &k, args.j, &cfg)?)
    };
    let grid = if args.manifold == Manifold::Torus2 && args.grid > 0 {
        criticism::objective_grid(&train, &q, &k, args.grid)?
    } else {
        Vec::new()
    };
    Ok(CriticizeOutput {
        run_spec: run_spec("criticize", args),
        kernel: k,
        statistic: r.statistic,
        p_value: r.p_value,
        reject: r.reject,
        train_objective: r.train_objective,
        locations: r.locations.iter().map(|p| p.coords().to_vec()).collect(),
        objectives: r.objectives,
        grid,
    })
}

/// Writes the three criticism tables next to `prefix`.
pub fn write_criticism_files(out: &CriticizeOutput, prefix: &Path) -> Result<Vec<PathBuf>> {
    let header = format!("# run_spec: {}", out.run_spec);
    let path = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let (loc, obj, grid) = (path("_locations.csv"), path("_objectives.csv"), path("_grid.csv"));

    let mut w = BufWriter::new(File::create(&loc)?);
    writeln!(w, "{header}")?;
    let d = out.locations.first().map_or(0, Vec::len);
    writeln!(w, "{}", (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","))?;
    for l in &out.locations {
        writeln!(w, "{}", l.iter().map(|c| format!("{c:.17e}")).collect::<Vec<_>>().join(","))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&obj)?);
    writeln!(w, "{header}")?;
    writeln!(w, "rank,objective")?;
    for (i, o) in out.objectives.iter().enumerate() {
        writeln!(w, "{},{o:.17e}", i + 1)?;
    }
    w.flush()?;

    let mut written = vec![loc, obj];
    if !out.grid.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x1", "x2", "objective"]).map_err(csv_err)?;
        for (a, b, o) in &out.grid {
            w.write_record([a.to_string(), b.to_string(), o.to_string()]).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
        let mut f = BufWriter::new(File::create(&grid)?);
        writeln!(f, "{header}")?;
        f.write_all(&body)?;
        f.flush()?;
        written.push(grid);
    }
    Ok(written)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerRow {
    pub parameter: String,
    pub value: f64,
    pub rejection_rate: f64,
    pub mc_stderr: f64,
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("{what}: cannot parse `{x}`"))))
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(CliError::Usage(format!("{what}: empty list")));
    }
    Ok(v)
}

/// Rejection rate of `reps` simulated tests; repetition `r` uses stream `stream.derive(r)`.
pub fn rejection_rate(
    q: &Density,
    alt: &Density,
    n: usize,
    kernel: &KernelSpec,
    cfg: &TestConfig,
    reps: usize,
    stream: &RngStream,
) -> Result<f64> {
    let mut rejections = 0usize;
    for r in 0..reps {
        let s = stream.derive(r as u64);
        let data = sampling::sample_density(&mut s.derive_named("data").rng(), alt, n)?;
        let rep_cfg = TestConfig { seed: s.derive_named("test").rng().random(), ..cfg.clone() };
        if test_data(&data, q, kernel, &rep_cfg)?.0.reject {
            rejections += 1;
        }
    }
    Ok(rejections as f64 / reps as f64)
}

pub fn cmd_power_sim(args: &PowerSimArgs) -> Result<(Value, Vec<PowerRow>)> {
    let (name, values) = args
        .sweep
        .split_once('=')
        .ok_or_else(|| CliError::Usage("--sweep must look like NAME=v1,v2,...".into()))?;
    let name = name.trim();
    let values = parse_list(values, "--sweep")?;
    if name != "n" && !args.model.contains("{}") && !args.alt.contains("{}") {
        return Err(CliError::Usage(format!("sweep `{name}` needs a `{{}}` placeholder in --model or --alt")));
    }
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let kernel = parse_kernel(&args.kernel, args.manifold)?;
    let cfg = args.test.config(args.seed)?;
    let root = RngStream::new(args.seed);
    let mut rows = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let fill = |s: &str| s.replace("{}", &v.to_string());
        let (model, alt) = if name == "n" { (args.model.clone(), args.alt.clone()) } else { (fill(&args.model), fill(&args.alt)) };
        let n = if name == "n" {
            if v < 2.0 || v.fract() != 0.0 {
                return Err(CliError::Usage(format!("sample size must be an integer ≥ 2, got {v}")));
            }
            v as usize
        } else {
            args.n
        };
        let q = parse_model(&model, args.manifold)?;
        let p = parse_model(&alt, args.manifold)?;
        let rate = rejection_rate(&q, &p, n, &kernel, &cfg, args.reps, &root.derive(i as u64))?;
        rows.push(PowerRow {
            parameter: name.to_string(),
            value: v,
            rejection_rate: rate,
            mc_stderr: (rate * (1.0 - rate) / args.reps as f64).sqrt(),
        });
    }
    Ok((run_spec("power-sim", args), rows))
}

fn kappa_grid(args: &EfficiencyArgs) -> Result<Vec<f64>> {
    match (&args.kappas, &args.kappa_range) {
        (Some(list), None) => parse_list(list, "--kappas"),
        (None, Some(range)) => {
            let parts: Vec<&str> = range.split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::Usage("--kappa-range must be start:end:count".into()));
            }
            let a: f64 = parts[0].trim().parse().map_err(|_| CliError::Usage("bad range start".into()))?;
            let b: f64 = parts[1].trim().parse().map_err(|_| CliError::Usage("bad range end".into()))?;
            let c: usize = parts[2].trim().parse().map_err(|_| CliError::Usage("bad range count".into()))?;
            match c {
                0 => Err(CliError::Usage("empty kappa grid".into())),
                1 => Ok(vec![a]),
                _ => Ok((0..c).map(|i| a + (b - a) * i as f64 / (c - 1) as f64).collect()),
            }
        }
        _ => Err(CliError::Usage("give exactly one of --kappas or --kappa-range".into())),
    }
}

pub fn cmd_efficiency(args: &EfficiencyArgs) -> Result<(Value, Vec<efficiency::EfficiencyRow>)> {
    let kappas = kappa_grid(args)?;
    if kappas.iter().any(|k| !(*k > 0.0)) {
        return Err(CliError::Usage("kappa values must be positive".into()));
    }
    Ok((run_spec("efficiency", args), efficiency::efficiency_table(&kappas, args.grid)?))
}

pub fn cmd_sample(args: &SampleArgs) -> Result<(Value, Vec<ChartPoint>)> {
    let q = parse_model(&args.model, args.manifold)?;
    let pts = sampling::sample_density(&mut RngStream::new(args.seed).rng(), &q, args.n)?;
    Ok((run_spec("sample", args), pts))
}

/// Writes `rows` as CSV with a `# run_spec:` comment line first.
pub fn write_csv<W: Write, T: Serialize>(mut w: W, spec: &Value, rows: &[T]) -> Result<()> {
    writeln!(w, "# run_spec: {spec}")?;
    let mut cw = csv::Writer::from_writer(w);
    for r in rows {
        cw.serialize(r).map_err(csv_err)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}
