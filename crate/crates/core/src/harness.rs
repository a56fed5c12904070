//! Experiment orchestration: TOML experiment specs, seeded batch execution
//! over a fixed worker layout, and result records written as JSON plus a
//! long-format per-sample CSV.
//!
//! Sample `i` of every experiment draws its configuration from
//! `substream(seed, i)` and samples are split into contiguous chunks, one per
//! worker, so aggregates do not depend on the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Instant, SystemTime};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::circuits::{kappa_rho, scale_m, verify_cuts, CircuitError};
use crate::config::{rng_for, substream, ConfigError, Field};
use crate::critical::{estimate_pc_with, rsw_check, CriticalError, PcEstimate, PcOptions};
use crate::invariants::{circuit_checks, passage_checks, split_check, InvariantError, Tally};
use crate::lattice::{LatticeError, SlabLattice};
use crate::martingale::{increment_moments, max_scale, MartingaleError, NestedSetup};
use crate::passage::{a0n, b0n, nearest_vertex, s_n, t0nu, PassageError, PassageResult, Scratch};
use crate::stats::{
    clt_check, linear_fit, mean, survival_fit, tail_fit, variance_jackknife, wlln_check, NormalityReport, Query,
    RegressionResult, SampleSet, StatsError, TailFit, TailModel, VarianceEstimate, WllnReport, CLT_MIN_COUNT,
};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SLABFPP_OUT";
pub const DEFAULT_OUT: &str = "results";
/// Runs whose censored fraction exceeds this abort after a partial flush.
pub const MAX_CENSOR_RATE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("spec error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("censor rate {rate:.4} exceeds {limit}; partial results kept")]
    CensorRate { rate: f64, limit: f64, record: Box<ResultRecord> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Passage(#[from] PassageError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Martingale(#[from] MartingaleError),
    #[error(transparent)]
    Critical(#[from] CriticalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn schema(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Schema { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PcEstimate,
    VarianceScan,
    CltCheck,
    CircuitStats,
    MartingaleScan,
    KappaRhoAudit,
    RswCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::PcEstimate,
        ExperimentKind::VarianceScan,
        ExperimentKind::CltCheck,
        ExperimentKind::CircuitStats,
        ExperimentKind::MartingaleScan,
        ExperimentKind::KappaRhoAudit,
        ExperimentKind::RswCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PcEstimate => "pc-estimate",
            ExperimentKind::VarianceScan => "variance-scan",
            ExperimentKind::CltCheck => "clt-check",
            ExperimentKind::CircuitStats => "circuit-stats",
            ExperimentKind::MartingaleScan => "martingale-scan",
            ExperimentKind::KappaRhoAudit => "kappa-rho-audit",
            ExperimentKind::RswCheck => "rsw-check",
        }
    }
}

/// Passage-time observable sampled by `variance-scan` and `clt-check`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    A0n,
    #[default]
    B0n,
    T0nu,
    SN,
}

impl QueryKind {
    fn label(self) -> &'static str {
        match self {
            QueryKind::A0n => "a0n",
            QueryKind::B0n => "b0n",
            QueryKind::T0nu => "t0nu",
            QueryKind::SN => "sn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub k: u32,
    /// Window half width; defaults to four times the largest query scale.
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<(f64, f64)>,
}

/// `p = 0.38` or `p = "critical:artifacts/pc-k1.json"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PSetting {
    Value(f64),
    Reference(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub geometry: Geometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PSetting>,
    /// Outer sample count `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Inner resample count `R` for nested estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryKind>,
    /// Circuit scale `p` whose excess `m(p) - p` is recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    /// Number of leading samples that also run the geometric checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariants: Option<usize>,
    #[serde(default = "yes")]
    pub per_sample_csv: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_s: Option<f64>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ExperimentSpec {
    /// Parses and validates a TOML spec. Relative artifact paths resolve
    /// against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<ResolvedSpec> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| schema("", e.to_string()))?;
        let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(if path == "." { "" } else { &path }, e.into_inner().to_string())
        })?;
        spec.resolve(base)
    }

    pub fn load(path: &Path) -> Result<ResolvedSpec> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Artifact { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text, path.parent())
    }

    fn n_values(&self) -> Vec<u32> {
        let mut v = self.geometry.n_list.clone().unwrap_or_default();
        v.extend(self.geometry.n);
        v
    }

    /// Largest radius a query reaches, used for the window rule `L >= 4 r`.
    fn query_scale(&self) -> Option<u32> {
        let n = self.n_values().into_iter().max()?;
        match (self.query.unwrap_or_default(), self.geometry.u) {
            (QueryKind::T0nu, Some(u)) => nearest_vertex(n, u).ok().map(|v| v.radius().max(1) as u32),
            _ => Some(n),
        }
    }

    /// Checks every field and resolves `p` against its artifact.
    pub fn resolve(self, base: Option<&Path>) -> Result<ResolvedSpec> {
        use ExperimentKind::*;
        let g = &self.geometry;
        if g.k > 16 {
            return Err(schema("geometry.k", "thickness above 16 is not supported"));
        }
        if self.workers == 0 {
            return Err(schema("workers", "must be at least 1"));
        }
        if self.samples == Some(0) {
            return Err(schema("samples", "must be at least 1"));
        }
        if let Some(list) = &g.n_list {
            if list.is_empty() {
                return Err(schema("geometry.n_list", "must not be empty"));
            }
        }
        if self.n_values().contains(&0) {
            return Err(schema(if g.n == Some(0) { "geometry.n" } else { "geometry.n_list" }, "scales must be positive"));
        }
        if let Some(u) = g.u {
            if nearest_vertex(1, u).is_err() {
                return Err(schema("geometry.u", "must be a unit vector"));
            }
        }
        if let Some(t) = self.time_limit_s {
            if !(t > 0.0) {
                return Err(schema("time_limit_s", "must be positive"));
            }
        }
        let need = |field: &str, ok: bool| if ok { Ok(()) } else { Err(schema(field, format!("required by {}", self.kind.name()))) };
        match self.kind {
            PcEstimate => {}
            VarianceScan | MartingaleScan | RswCheck => need("geometry.n_list", !self.n_values().is_empty())?,
            CltCheck => {
                need("geometry.n", g.n.is_some())?;
                need("samples", self.samples.is_some())?;
                if self.samples.unwrap() < CLT_MIN_COUNT {
                    return Err(schema("samples", format!("clt-check needs at least {CLT_MIN_COUNT}")));
                }
                if self.query == Some(QueryKind::T0nu) {
                    need("geometry.u", g.u.is_some())?;
                }
            }
            CircuitStats => need("geometry.L", g.half_width.is_some() || g.n.is_some())?,
            KappaRhoAudit => {}
        }
        if let Some(inner) = self.inner {
            if inner < 2 {
                return Err(schema("inner", "must be at least 2"));
            }
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0) {
                return Err(schema("rho", "must be positive"));
            }
        }

        let scale = self.query_scale();
        let half_width = match (g.half_width, scale) {
            (Some(l), Some(s)) if (l as u64) < 4 * s as u64 => {
                return Err(schema("geometry.L", format!("window {l} is below 4 x query scale {s}")));
            }
            (Some(l), _) => l,
            (None, Some(s)) => 4 * s,
            (None, None) => 64,
        };
        if half_width == 0 {
            return Err(schema("geometry.L", "must be positive"));
        }
        if self.kind == KappaRhoAudit && half_width < 2 {
            return Err(schema("geometry.L", "kappa-rho-audit needs L >= 2"));
        }
        if self.kind == CircuitStats {
            let lat = SlabLattice::new(half_width, g.k)?;
            let p_max = max_scale(&lat).ok_or_else(|| schema("geometry.L", "window too small for any annulus"))?;
            if self.scale.unwrap_or(0) > p_max {
                return Err(schema("scale", format!("above the largest scale {p_max} of the window")));
            }
        }

        let (p, p_source) = match (&self.p, self.kind) {
            (None, PcEstimate) => (f64::NAN, None),
            (None, _) => return Err(schema("p", format!("required by {}", self.kind.name()))),
            (Some(PSetting::Value(v)), _) => {
                if !(0.0..=1.0).contains(v) {
                    return Err(schema("p", "must lie in [0, 1]"));
                }
                (*v, None)
            }
            (Some(PSetting::Reference(r)), _) => {
                let Some(rel) = r.strip_prefix("critical:") else {
                    return Err(schema("p", "expected a number or \"critical:<path>\""));
                };
                let path = match base {
                    Some(b) if Path::new(rel).is_relative() => b.join(rel),
                    _ => PathBuf::from(rel),
                };
                let pc = load_pc(&path)?;
                if pc.k != g.k {
                    return Err(schema("p", format!("artifact is for k = {}, spec has k = {}", pc.k, g.k)));
                }
                (pc.p_c_hat, Some(path.display().to_string()))
            }
        };
        if self.kind == PcEstimate {
            if let Some(t) = self.tolerance {
                if !(t >= 1e-3) {
                    return Err(schema("tolerance", "must be at least 1e-3"));
                }
            }
        }
        Ok(ResolvedSpec { spec: self, p, p_source, half_width })
    }
}

/// Reads and validates a persisted critical-point estimate.
pub fn load_pc(path: &Path) -> Result<PcEstimate> {
    let artifact = |message: String| HarnessError::Artifact { path: path.display().to_string(), message };
    let text = fs::read_to_string(path).map_err(|e| artifact(e.to_string()))?;
    PcEstimate::from_json(&text).map_err(|e| artifact(e.to_string()))
}

/// A validated spec with its edge-open probability and window fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSpec {
    pub spec: ExperimentSpec,
    /// `NaN` for `pc-estimate`.
    pub p: f64,
    pub p_source: Option<String>,
    pub half_width: u32,
}

impl ResolvedSpec {
    /// SHA-256 over everything that determines the aggregates: the spec
    /// without worker count and output path, plus the resolved `p` and window.
    pub fn hash(&self) -> String {
        let mut s = self.spec.clone();
        s.workers = 1;
        s.output = None;
        let body = serde_json::json!({ "spec": s, "p": self.p.to_bits(), "L": self.half_width });
        hex::encode(Sha256::digest(body.to_string()))
    }

    fn lattice(&self) -> Result<SlabLattice> {
        Ok(SlabLattice::new(self.half_width, self.spec.geometry.k)?)
    }

    fn n_list(&self) -> Vec<u32> {
        let mut v = self.spec.n_values();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// One per-sample CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub worker: usize,
    pub sample: usize,
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub kind: ExperimentKind,
    pub spec_hash: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub p: Option<f64>,
    pub p_source: Option<String>,
    pub partial: bool,
    pub samples_requested: usize,
    pub samples_done: usize,
    pub censored: usize,
    pub wall_time_s: f64,
    pub date: String,
    pub aggregate: Value,
    pub aggregate_hash: String,
    #[serde(skip)]
    pub rows: Vec<SampleRow>,
}

impl ResultRecord {
    /// Values of one per-sample label in sample order.
    pub fn column(&self, label: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.label == label).map(|r| r.value).collect()
    }

    /// Writes `<dir>/<kind>-<hash12>.json` and, when rows exist and are
    /// enabled, the matching `.csv`. Returns the JSON path.
    pub fn write(&self, dir: &Path, per_sample_csv: bool) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let stem = format!("{}-{}", self.kind.name(), &self.spec_hash[..12]);
        let json = dir.join(format!("{stem}.json"));
        let mut f = fs::File::create(&json)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        if per_sample_csv && !self.rows.is_empty() {
            self.write_rows(fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        }
        Ok(json)
    }

    pub fn write_rows<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["spec_hash", "seed", "worker", "sample", "label", "value"])?;
        for r in &self.rows {
            w.write_record([
                self.spec_hash.as_str(),
                &self.seed.to_string(),
                &r.worker.to_string(),
                &r.sample.to_string(),
                &r.label,
                &r.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output directory: explicit argument, then the spec, then [`OUT_ENV`],
/// then [`DEFAULT_OUT`].
pub fn output_dir(explicit: Option<&Path>, spec: &ExperimentSpec) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| spec.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Executes the experiment and writes its record to `dir`. A censor-rate
/// abort still writes the partial record before returning the error.
pub fn run(spec: &ResolvedSpec, dir: &Path) -> Result<(ResultRecord, PathBuf)> {
    match execute(spec) {
        Ok(record) => {
            let path = record.write(dir, spec.spec.per_sample_csv)?;
            Ok((record, path))
        }
        Err(HarnessError::CensorRate { rate, limit, record }) => {
            record.write(dir, spec.spec.per_sample_csv)?;
            Err(HarnessError::CensorRate { rate, limit, record })
        }
        Err(e) => Err(e),
    }
}

/// Intermediate result of one experiment kind.
struct Outcome {
    aggregate: Value,
    rows: Vec<SampleRow>,
    requested: usize,
    done: usize,
    censored: usize,
    partial: bool,
    /// Censored fraction checked against [`MAX_CENSOR_RATE`].
    censor_rate: Option<f64>,
}

/// Runs the experiment in memory.
pub fn execute(spec: &ResolvedSpec) -> Result<ResultRecord> {
    let start = Instant::now();
    let s = &spec.spec;
    let ctx = Ctx {
        workers: s.workers,
        deadline: s.time_limit_s.map(|t| start + std::time::Duration::from_secs_f64(t)),
    };
    let out = match s.kind {
        ExperimentKind::PcEstimate => run_pc(spec, &ctx)?,
        ExperimentKind::VarianceScan => run_variance(spec, &ctx)?,
        ExperimentKind::CltCheck => run_clt(spec, &ctx)?,
        ExperimentKind::CircuitStats => run_circuits(spec, &ctx)?,
        ExperimentKind::MartingaleScan => run_martingale(spec, &ctx)?,
        ExperimentKind::KappaRhoAudit => run_kappa_rho(spec, &ctx)?,
        ExperimentKind::RswCheck => run_rsw(spec, &ctx)?,
    };
    let aggregate_hash = hex::encode(Sha256::digest(out.aggregate.to_string()));
    let record = ResultRecord {
        kind: s.kind,
        spec_hash: spec.hash(),
        version: VERSION.to_string(),
        seed: s.seed,
        workers: s.workers,
        p: spec.p.is_finite().then_some(spec.p),
        p_source: spec.p_source.clone(),
        partial: out.partial,
        samples_requested: out.requested,
        samples_done: out.done,
        censored: out.censored,
        wall_time_s: start.elapsed().as_secs_f64(),
        date: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
        aggregate: out.aggregate,
        aggregate_hash,
        rows: out.rows,
    };
    match out.censor_rate {
        Some(rate) if rate > MAX_CENSOR_RATE => {
            let mut record = record;
            record.partial = true;
            Err(HarnessError::CensorRate { rate, limit: MAX_CENSOR_RATE, record: Box::new(record) })
        }
        _ => Ok(record),
    }
}

struct Ctx {
    workers: usize,
    deadline: Option<Instant>,
}

impl Ctx {
    /// Worker owning sample `i` of `count` under contiguous chunking.
    fn worker_of(&self, i: usize, count: usize) -> usize {
        (i * self.workers).checked_div(count).unwrap_or(0).min(self.workers - 1)
    }

    /// Evaluates `f` on samples `0..count`, worker `w` taking the contiguous
    /// chunk `[w count / W, (w + 1) count / W)` with its own state. Samples not
    /// started before the deadline are `None`.
    fn chunks<S, T: Send>(
        &self,
        count: usize,
        init: impl Fn() -> Result<S> + Sync,
        f: impl Fn(&mut S, usize) -> Result<T> + Sync,
    ) -> Result<(Vec<Option<T>>, bool)> {
        let late = AtomicBool::new(false);
        let work = |w: usize| -> Result<Vec<Option<T>>> {
            let (lo, hi) = (w * count / self.workers, (w + 1) * count / self.workers);
            if lo == hi {
                return Ok(Vec::new());
            }
            let mut state = init()?;
            let mut out = Vec::with_capacity(hi - lo);
            for i in lo..hi {
                if self.deadline.is_some_and(|d| Instant::now() >= d) {
                    late.store(true, Ordering::Relaxed);
                    out.push(None);
                } else {
                    out.push(Some(f(&mut state, i)?));
                }
            }
            Ok(out)
        };
        let parts: Vec<Result<Vec<Option<T>>>> = if self.workers == 1 {
            vec![work(0)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..self.workers).map(|w| scope.spawn(move || work(w))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Pool("worker panicked".into()))))
                    .collect()
            })
        };
        let mut all = Vec::with_capacity(count);
        for p in parts {
            all.extend(p?);
        }
        Ok((all, late.load(Ordering::Relaxed)))
    }

    /// Runs library code that parallelizes internally on a pool of this size.
    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?;
        Ok(pool.install(f))
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn sample_observable(
    field: &Field,
    scratch: &mut Scratch,
    query: QueryKind,
    n: u32,
    u: Option<(f64, f64)>,
) -> Result<PassageResult> {
    Ok(match query {
        QueryKind::A0n => a0n(field, scratch, n)?,
        QueryKind::B0n => b0n(field, scratch, n)?,
        QueryKind::T0nu => t0nu(field, scratch, n, u.unwrap_or((1.0, 0.0)))?,
        QueryKind::SN => s_n(field, scratch, n)?,
    })
}

fn run_pc(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let mut opts = PcOptions::default();
    if let Some(sizes) = &s.sizes {
        opts.sizes = sizes.clone();
    }
    if let Some(n) = s.samples {
        opts.samples = n;
    }
    let tol = s.tolerance.unwrap_or(0.005);
    let est = ctx.install(|| estimate_pc_with(s.geometry.k, tol, s.seed, &opts))??;
    Ok(Outcome {
        aggregate: to_value(&est)?,
        rows: Vec::new(),
        requested: opts.samples,
        done: opts.samples,
        censored: 0,
        partial: false,
        censor_rate: None,
    })
}

/// Per-scale row of a variance scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: u32,
    pub count: usize,
    pub censored: usize,
    pub mean: f64,
    pub variance: VarianceEstimate,
    /// `Var / ln n`.
    pub var_over_log: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScan {
    pub query: QueryKind,
    pub k: u32,
    pub p: f64,
    pub half_width: u32,
    pub rows: Vec<VarianceRow>,
    /// Regression of the variance on `ln n`.
    pub regression: Option<RegressionResult>,
    /// `max_n (Var / ln n) / min_n (Var / ln n)`.
    pub log_ratio: Option<f64>,
    /// Positive slope, `r^2 >= 0.8` and ratio at most 3.
    pub log_fit_passed: bool,
}

/// Variance-versus-`ln n` verdict used by `variance-scan`.
pub fn log_fit_verdict(reg: Option<&RegressionResult>, ratio: Option<f64>) -> bool {
    matches!(reg, Some(r) if r.slope > 0.0 && r.r2 >= 0.8) && ratio.is_some_and(|x| x <= 3.0)
}

fn run_variance(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let lat = spec.lattice()?;
    let ns = spec.n_list();
    let query = s.query.unwrap_or_default();
    let count = s.samples.unwrap_or(1000);
    let (samples, partial) = ctx.chunks(
        count,
        || Ok(Scratch::new(&lat)),
        |scratch, i| {
            let field = Field::new(&lat, spec.p, substream(s.seed, i as u64))?;
            ns.iter()
                .map(|&n| {
                    let r = sample_observable(&field, scratch, query, n, s.geometry.u)?;
                    Ok((!r.touched_boundary).then_some(r.value))
                })
                .collect::<Result<Vec<Option<u32>>>>()
        },
    )?;

    let mut rows = Vec::new();
    let mut table = Vec::new();
    let mut censored = 0;
    let mut attempted = 0;
    for (j, &n) in ns.iter().enumerate() {
        let mut vals = Vec::new();
        let mut cens = 0;
        for (i, smp) in samples.iter().enumerate() {
            let Some(smp) = smp else { continue };
            attempted += 1;
            match smp[j] {
                Some(v) => {
                    vals.push(v as f64);
                    rows.push(SampleRow {
                        worker: ctx.worker_of(i, count),
                        sample: i,
                        label: format!("{}:n={n}", query.label()),
                        value: v as f64,
                    });
                }
                None => cens += 1,
            }
        }
        censored += cens;
        if vals.len() >= 3 {
            let var = variance_jackknife(&vals)?;
            let ln = (n as f64).ln();
            table.push(VarianceRow {
                n,
                count: vals.len(),
                censored: cens,
                mean: mean(&vals),
                variance: var,
                var_over_log: if ln > 0.0 { var.variance / ln } else { f64::NAN },
            });
        }
    }
    let logs: Vec<(f64, f64)> =
        table.iter().filter(|r| r.n >= 2).map(|r| ((r.n as f64).ln(), r.variance.variance)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = logs.iter().copied().unzip();
    let regression = linear_fit(&x, &y).ok();
    let ratios: Vec<f64> = table.iter().filter(|r| r.n >= 2).map(|r| r.var_over_log).collect();
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let log_ratio = (!ratios.is_empty() && min > 0.0).then(|| max / min);
    let scan = VarianceScan {
        query,
        k: s.geometry.k,
        p: spec.p,
        half_width: spec.half_width,
        log_fit_passed: log_fit_verdict(regression.as_ref(), log_ratio),
        rows: table,
        regression,
        log_ratio,
    };
    let done = samples.iter().flatten().count();
    Ok(Outcome {
        aggregate: to_value(&scan)?,
        rows,
        requested: count,
        done,
        censored,
        partial,
        censor_rate: (attempted > 0).then(|| censored as f64 / attempted as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltSummary {
    pub query: Query,
    pub half_width: u32,
    pub censored: usize,
    pub report: NormalityReport,
}

fn run_clt(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let lat = spec.lattice()?;
    let n = s.geometry.n.expect("validated");
    let query = s.query.unwrap_or_default();
    let count = s.samples.expect("validated");
    let (samples, partial) = ctx.chunks(
        count,
        || Ok(Scratch::new(&lat)),
        |scratch, i| {
            let field = Field::new(&lat, spec.p, substream(s.seed, i as u64))?;
            let r = sample_observable(&field, scratch, query, n, s.geometry.u)?;
            Ok((!r.touched_boundary).then_some(r.value))
        },
    )?;
    let label = format!("{}:n={n}", query.label());
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut censored = 0;
    for (i, v) in samples.iter().enumerate() {
        match v {
            Some(Some(v)) => {
                values.push(*v);
                rows.push(SampleRow { worker: ctx.worker_of(i, count), sample: i, label: label.clone(), value: *v as f64 });
            }
            Some(None) => censored += 1,
            None => {}
        }
    }
    let done = samples.iter().flatten().count();
    let set = SampleSet {
        query: Query {
            kind: query.label().into(),
            n,
            u: (query == QueryKind::T0nu).then(|| s.geometry.u.unwrap_or((1.0, 0.0))),
            k: s.geometry.k,
            p: spec.p,
        },
        values,
        seed: s.seed,
        censored,
    };
    let report = clt_check(&set)?;
    let summary = CltSummary { query: set.query, half_width: spec.half_width, censored, report };
    Ok(Outcome {
        aggregate: to_value(&summary)?,
        rows,
        requested: count,
        done,
        censored,
        partial,
        censor_rate: (done > 0).then(|| censored as f64 / done as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitStats {
    pub scale: u32,
    pub p_max: u32,
    pub half_width: u32,
    pub samples: usize,
    /// Samples with no circuit up to `p_max`; their excess is at least
    /// `p_max - scale + 1` and they count as such in the survival curve.
    pub censored: usize,
    /// `histogram[t]`: samples with `m(p) - p = t`.
    pub histogram: Vec<usize>,
    /// `(t, P[m(p) - p >= t])` for `t = 0..=p_max - scale`.
    pub survival: Vec<(u32, f64)>,
    pub tail_fit: Option<TailFit>,
    pub tail_error: Option<String>,
    pub invariant_samples: usize,
    pub invariants: Tally,
}

fn run_circuits(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let lat = spec.lattice()?;
    let p_max = max_scale(&lat).expect("validated");
    let scale = s.scale.unwrap_or(0);
    let count = s.samples.unwrap_or(1000);
    let checks = s.invariants.unwrap_or(0).min(count);
    let n = s.geometry.n;
    let u = s.geometry.u.unwrap_or((0.6, 0.8));
    let (samples, partial) = ctx.chunks(
        count,
        || Ok(Scratch::new(&lat)),
        |scratch, i| {
            let field = Field::new(&lat, spec.p, substream(s.seed, i as u64))?;
            let m = scale_m(&field, scale, p_max)?;
            let mut tally = Tally::default();
            if i < checks {
                tally.merge(circuit_checks(&field, scratch, p_max)?);
                if let Some(n) = n {
                    tally.merge(passage_checks(&field, scratch, n, p_max)?);
                    tally.merge(split_check(&field, scratch, n, u)?);
                }
            }
            Ok((m, tally))
        },
    )?;
    let cap = p_max - scale + 1;
    let mut histogram = vec![0usize; cap as usize];
    let mut excess = Vec::new();
    let mut rows = Vec::new();
    let mut invariants = Tally::default();
    let mut censored = 0;
    for (i, smp) in samples.into_iter().enumerate() {
        let Some((m, tally)) = smp else { continue };
        invariants.merge(tally);
        let t = match m {
            Some(m) => {
                histogram[(m - scale) as usize] += 1;
                m - scale
            }
            None => {
                censored += 1;
                cap
            }
        };
        excess.push(t as f64);
        rows.push(SampleRow { worker: ctx.worker_of(i, count), sample: i, label: format!("excess:p={scale}"), value: t as f64 });
    }
    let done = excess.len();
    let survival: Vec<(u32, f64)> = (0..cap)
        .map(|t| (t, excess.iter().filter(|&&x| x >= t as f64).count() as f64 / done.max(1) as f64))
        .collect();
    let grid: Vec<f64> = (0..cap.min(7)).map(f64::from).collect();
    let (tail_fit, tail_error) = match survival_fit(&excess, &grid, TailModel::Exponential) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let stats = CircuitStats {
        scale,
        p_max,
        half_width: spec.half_width,
        samples: done,
        censored,
        histogram,
        survival,
        tail_fit,
        tail_error,
        invariant_samples: checks,
        invariants,
    };
    Ok(Outcome {
        aggregate: to_value(&stats)?,
        rows,
        requested: count,
        done,
        censored,
        partial,
        censor_rate: None,
    })
}

/// Summary of one scale of a martingale scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleScale {
    pub n: u32,
    pub q: u32,
    pub outer: usize,
    pub used: usize,
    pub censored: usize,
    pub rows: Vec<crate::martingale::IncrementRow>,
    pub c5: Option<f64>,
    pub window: Option<f64>,
    pub telescoping_within: usize,
    pub remainder_within: usize,
    pub remainder_total: usize,
    /// `sum_p E[Delta_p^2]`.
    pub sum_mean_sq: f64,
    pub censor_reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleScan {
    pub k: u32,
    pub p: f64,
    pub half_width: u32,
    pub inner: usize,
    pub scales: Vec<MartingaleScale>,
    /// Regression of `sum_p E[Delta_p^2]` on `q` across scales with data.
    pub growth: Option<RegressionResult>,
    pub wlln: WllnReport,
    /// Stretched-exponential fit of the `|Delta_p|` survival.
    pub delta_tail: Option<TailFit>,
    pub delta_tail_error: Option<String>,
}

fn run_martingale(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let lat = spec.lattice()?;
    let inner = s.inner.unwrap_or(64);
    let setup = NestedSetup::new(&lat, spec.p, inner)?;
    let outer = s.samples.unwrap_or(200);
    let mut scales = Vec::new();
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    let mut abs_deltas = Vec::new();
    let mut censored = 0;
    for n in spec.n_list() {
        let report = ctx.install(|| increment_moments(&setup, n, outer, substream(s.seed, n as u64)))??;
        censored += report.censored;
        for smp in &report.samples {
            let worker = ctx.worker_of(smp.index, outer);
            for d in &smp.deltas {
                rows.push(SampleRow { worker, sample: smp.index, label: format!("delta:n={n}:p={}", d.p), value: d.delta_hat });
            }
            rows.push(SampleRow { worker, sample: smp.index, label: format!("target:n={n}"), value: smp.target });
        }
        if !report.samples.is_empty() {
            tables.push(report.delta_table());
        }
        abs_deltas.extend(report.abs_deltas());
        scales.push(MartingaleScale {
            n,
            q: report.q,
            outer,
            used: report.samples.len(),
            censored: report.censored,
            sum_mean_sq: report.sum_mean_sq(),
            rows: report.rows,
            c5: report.c5,
            window: report.window,
            telescoping_within: report.telescoping_within,
            remainder_within: report.remainder_within,
            remainder_total: report.remainder_total,
            censor_reasons: report.censor_reasons,
        });
    }
    let with_data: Vec<&MartingaleScale> = scales.iter().filter(|m| m.used > 0).collect();
    let growth = linear_fit(
        &with_data.iter().map(|m| m.q as f64).collect::<Vec<_>>(),
        &with_data.iter().map(|m| m.sum_mean_sq).collect::<Vec<_>>(),
    )
    .ok();
    let wlln = wlln_check(&tables, |q| {
        let c5 = scales.iter().find(|m| m.q == q).and_then(|m| m.window).unwrap_or(1.0);
        c5.ceil() as u32
    });
    let (delta_tail, delta_tail_error) = match tail_fit(&abs_deltas, TailModel::StretchedSqrt) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let attempted = outer * scales.len();
    let scan = MartingaleScan {
        k: s.geometry.k,
        p: spec.p,
        half_width: spec.half_width,
        inner,
        scales,
        growth,
        wlln,
        delta_tail,
        delta_tail_error,
    };
    Ok(Outcome {
        aggregate: to_value(&scan)?,
        rows,
        requested: attempted,
        done: attempted,
        censored,
        partial: false,
        censor_rate: (attempted > 0).then(|| censored as f64 / attempted as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRhoAudit {
    pub k: u32,
    pub p: f64,
    pub half_width: u32,
    pub instances: usize,
    pub equal: usize,
    pub verified: usize,
    /// `(sample, inner scale, outer scale, kappa, rho, verified)` for the
    /// first failures.
    pub failures: Vec<(usize, u32, u32, u32, u32, bool)>,
}

fn run_kappa_rho(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let lat = spec.lattice()?;
    let top = spec.half_width.ilog2().min(6);
    let count = s.samples.unwrap_or(1000);
    let (samples, partial) = ctx.chunks(
        count,
        || Ok(()),
        |_, i| {
            let seed = substream(s.seed, i as u64);
            let mut rng = rng_for(substream(seed, 1));
            let outer = rng.random_range(1..=top);
            let inner = rng.random_range(0..outer);
            let field = Field::new(&lat, spec.p, seed)?;
            let c = kappa_rho(&field, inner, outer)?;
            let ok = verify_cuts(&field, 1 << inner, 1 << outer, &c);
            Ok((inner, outer, c.kappa, c.rho, ok))
        },
    )?;
    let mut audit = KappaRhoAudit {
        k: s.geometry.k,
        p: spec.p,
        half_width: spec.half_width,
        instances: 0,
        equal: 0,
        verified: 0,
        failures: Vec::new(),
    };
    let mut rows = Vec::new();
    for (i, smp) in samples.iter().enumerate() {
        let Some((inner, outer, kappa, rho, ok)) = *smp else { continue };
        audit.instances += 1;
        audit.equal += usize::from(kappa == rho);
        audit.verified += usize::from(ok);
        if (kappa != rho || !ok) && audit.failures.len() < 20 {
            audit.failures.push((i, inner, outer, kappa, rho, ok));
        }
        let worker = ctx.worker_of(i, count);
        rows.push(SampleRow { worker, sample: i, label: "kappa".into(), value: kappa as f64 });
        rows.push(SampleRow { worker, sample: i, label: "rho".into(), value: rho as f64 });
    }
    Ok(Outcome {
        aggregate: to_value(&audit)?,
        rows,
        requested: count,
        done: audit.instances,
        censored: 0,
        partial,
        censor_rate: None,
    })
}

fn run_rsw(spec: &ResolvedSpec, ctx: &Ctx) -> Result<Outcome> {
    let s = &spec.spec;
    let samples = s.samples.unwrap_or(1000);
    let ns = spec.n_list();
    let report = ctx.install(|| rsw_check(s.geometry.k, spec.p, s.rho.unwrap_or(1.0), &ns, samples, s.seed))??;
    Ok(Outcome {
        aggregate: to_value(&report)?,
        rows: Vec::new(),
        requested: samples,
        done: samples,
        censored: 0,
        partial: false,
        censor_rate: None,
    })
}
