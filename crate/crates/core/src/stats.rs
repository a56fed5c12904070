//! Estimators and checks: moments with compensated sums, jackknife intervals,
//! least-squares fits, normality reports, tail fits and the weak-law check on
//! martingale increments.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::config::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("insufficient tail mass: {0} usable tail points")]
    TailMass(usize),
    #[error("x values are constant")]
    DegenerateX,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

/// Neumaier-compensated sum of a sequence, in order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1) as f64
}

/// Standard error of the mean.
pub fn stderr(values: &[f64]) -> f64 {
    (variance(values) / values.len() as f64).sqrt()
}

/// Mean with its standard error and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let stderr = if values.len() < 2 { 0.0 } else { stderr(values) };
        Estimate { mean: mean(values), stderr, count: values.len() }
    }
}

/// Variance with a delete-one jackknife 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub variance: f64,
    pub jackknife_se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub count: usize,
}

pub fn variance_jackknife(values: &[f64]) -> Result<VarianceEstimate, StatsError> {
    let n = values.len();
    if n < 3 {
        return Err(StatsError::TooFew { need: 3, got: n });
    }
    let s1 = compensated_sum(values.iter().copied());
    let s2 = compensated_sum(values.iter().map(|v| v * v));
    let full = variance(values);
    // Leave-one-out variances from running sums.
    let loo: Vec<f64> = values
        .iter()
        .map(|&v| {
            let m = (n - 1) as f64;
            let a = s1 - v;
            let b = s2 - v * v;
            ((b - a * a / m) / (m - 1.0)).max(0.0)
        })
        .collect();
    let loo_mean = mean(&loo);
    let se = ((n - 1) as f64 / n as f64 * compensated_sum(loo.iter().map(|x| (x - loo_mean) * (x - loo_mean)))).sqrt();
    Ok(VarianceEstimate { variance: full, jackknife_se: se, ci_lo: full - 1.96 * se, ci_hi: full + 1.96 * se, count: n })
}

/// Least-squares line with residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub residuals: Vec<f64>,
    pub slope_se: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<RegressionResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFew { need: 2, got: n });
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    if sxx == 0.0 {
        return Err(StatsError::DegenerateX);
    }
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - (intercept + slope * a)).collect();
    let sse = compensated_sum(residuals.iter().map(|r| r * r));
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    let slope_se = if n > 2 { (sse / (n - 2) as f64 / sxx).sqrt() } else { f64::NAN };
    Ok(RegressionResult { slope, intercept, r2, residuals, slope_se })
}

/// What a sample set measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    /// `"a0n"`, `"b0n"`, `"t0nu"`, `"sn"`, ...
    pub kind: String,
    pub n: u32,
    pub u: Option<(f64, f64)>,
    pub k: u32,
    pub p: f64,
}

/// Integer passage-time samples with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub query: Query,
    pub values: Vec<u32>,
    pub seed: u64,
    pub censored: usize,
}

impl SampleSet {
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Two-sided 1% critical value of the one-sample Kolmogorov-Smirnov distance.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Kolmogorov-Smirnov distance of `values` to the standard normal.
pub fn ks_normal(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub ks: f64,
    pub ks_critical: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub degenerate: bool,
    pub passed: bool,
    pub note: String,
}

/// Minimum sample count for [`clt_check`].
pub const CLT_MIN_COUNT: usize = 500;

/// Normality of continuous values standardized by their sample moments.
pub fn normality(values: &[f64]) -> Result<NormalityReport, StatsError> {
    let n = values.len();
    if n < 3 {
        return Err(StatsError::TooFew { need: 3, got: n });
    }
    let m = mean(values);
    let sd = variance(values).sqrt();
    let crit = ks_critical_1pct(n);
    if sd == 0.0 || !sd.is_finite() {
        return Ok(NormalityReport {
            count: n,
            mean: m,
            sd: 0.0,
            ks: f64::NAN,
            ks_critical: crit,
            skewness: f64::NAN,
            excess_kurtosis: f64::NAN,
            degenerate: true,
            passed: false,
            note: "zero variance".into(),
        });
    }
    let z: Vec<f64> = values.iter().map(|v| (v - m) / sd).collect();
    let nf = n as f64;
    let m3 = compensated_sum(z.iter().map(|x| x * x * x)) / nf;
    let m4 = compensated_sum(z.iter().map(|x| x * x * x * x)) / nf;
    let scale = (nf - 1.0) / nf;
    let skewness = m3 / scale.powf(1.5);
    let excess_kurtosis = m4 / (scale * scale) - 3.0;
    let ks = ks_normal(&z);
    Ok(NormalityReport {
        count: n,
        mean: m,
        sd,
        ks,
        ks_critical: crit,
        skewness,
        excess_kurtosis,
        degenerate: false,
        passed: ks < crit,
        note: "standardized by sample mean and sd".into(),
    })
}

/// Normality report for integer samples. Each value is spread uniformly over
/// its unit bin (`v + U(-1/2, 1/2)`, seeded from the sample set) before the
/// KS comparison, since a lattice distribution is never within KS distance
/// `O(N^-1/2)` of a continuous one.
pub fn clt_check(samples: &SampleSet) -> Result<NormalityReport, StatsError> {
    let n = samples.values.len();
    if n < CLT_MIN_COUNT {
        return Err(StatsError::TooFew { need: CLT_MIN_COUNT, got: n });
    }
    let raw = samples.as_f64();
    let plain = normality(&raw)?;
    if plain.degenerate {
        return Ok(plain);
    }
    let mut rng = rng_for(samples.seed ^ 0x6A09_E667_F3BC_C908);
    let spread: Vec<f64> = raw.iter().map(|v| v + rng.random::<f64>() - 0.5).collect();
    let mut rep = normality(&spread)?;
    rep.skewness = plain.skewness;
    rep.excess_kurtosis = plain.excess_kurtosis;
    rep.mean = plain.mean;
    rep.sd = plain.sd;
    rep.note = format!(
        "standardized by sample mean and sd; KS after uniform spreading of integer values (unspread KS {:.4})",
        plain.ks
    );
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailModel {
    /// `P[X >= t] ~ exp(-c t)`
    Exponential,
    /// `P[X >= x] ~ exp(-c sqrt(x))`
    StretchedSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub model: TailModel,
    /// `c` in the model; positive for a decaying tail.
    pub rate: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(x, survival)` points used.
    pub points: Vec<(f64, f64)>,
}

/// Minimum number of tail points for [`tail_fit`].
pub const MIN_TAIL_POINTS: usize = 10;

fn survival_at(sorted: &[f64], x: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < x);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

/// Fits the empirical survival function on an explicit grid of thresholds.
/// Points with zero survival are dropped.
pub fn survival_fit(values: &[f64], grid: &[f64], model: TailModel) -> Result<TailFit, StatsError> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let points: Vec<(f64, f64)> =
        grid.iter().map(|&x| (x, survival_at(&sorted, x))).filter(|&(_, s)| s > 0.0).collect();
    if points.len() < 3 {
        return Err(StatsError::TailMass(points.len()));
    }
    let xs: Vec<f64> = points
        .iter()
        .map(|&(x, _)| match model {
            TailModel::Exponential => x,
            TailModel::StretchedSqrt => x.sqrt(),
        })
        .collect();
    let ys: Vec<f64> = points.iter().map(|&(_, s)| s.ln()).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok(TailFit { model, rate: -fit.slope, intercept: fit.intercept, r2: fit.r2, points })
}

/// Tail fit on the observed range: thresholds at the distinct values for
/// integer-like data (up to the level where fewer than 5 samples remain),
/// otherwise at 20 evenly spaced quantile levels of the upper half.
pub fn tail_fit(values: &[f64], model: TailModel) -> Result<TailFit, StatsError> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let integer = sorted.iter().all(|v| v.fract() == 0.0);
    let mut grid: Vec<f64> = if integer {
        let mut g = sorted.clone();
        g.dedup();
        g
    } else {
        (0..20).map(|i| sorted[((n - 1) as f64 * (0.5 + 0.5 * i as f64 / 20.0)) as usize]).collect()
    };
    grid.retain(|&x| sorted.len() - sorted.partition_point(|&v| v < x) >= 5);
    grid.dedup();
    if grid.len() < MIN_TAIL_POINTS {
        return Err(StatsError::TailMass(grid.len()));
    }
    survival_fit(values, &grid, model)
}

/// Per-outer-sample increments of one run at scale count `q`:
/// `increments[i][p]` is `Delta_p` for outer sample `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub q: u32,
    pub increments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WllnRow {
    pub q: u32,
    pub samples: usize,
    /// Sample sd of `(1/q) sum_p (D_p^2 - mean_i D_p^2)` across outer samples.
    pub spread: f64,
    /// Largest |correlation| of `D_p^2` and `D_r^2` over pairs with `|p - r| > window`.
    pub max_lag_corr: f64,
    pub window: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WllnReport {
    pub rows: Vec<WllnRow>,
    /// Spread strictly decreases from the smallest to the largest q.
    pub shrinking: bool,
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = compensated_sum(a.iter().map(|x| (x - ma) * (x - ma)));
    let vb = compensated_sum(b.iter().map(|y| (y - mb) * (y - mb)));
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Weak-law concentration of squared increments; `window(q)` is the lag
/// beyond which squared increments should decorrelate.
pub fn wlln_check(tables: &[DeltaTable], window: impl Fn(u32) -> u32) -> WllnReport {
    let mut rows = Vec::new();
    for t in tables {
        let n = t.increments.len();
        let q = t.q.max(1);
        let width = t.increments.first().map_or(0, |r| r.len());
        let sq: Vec<Vec<f64>> = (0..width).map(|p| t.increments.iter().map(|r| r[p] * r[p]).collect()).collect();
        let means: Vec<f64> = sq.iter().map(|c| mean(c)).collect();
        let norm: Vec<f64> = (0..n)
            .map(|i| compensated_sum((0..width).map(|p| sq[p][i] - means[p])) / q as f64)
            .collect();
        let win = window(t.q);
        let mut max_lag_corr: f64 = 0.0;
        for p in 0..width {
            for r in p + 1..width {
                if (r - p) as u32 > win {
                    max_lag_corr = max_lag_corr.max(correlation(&sq[p], &sq[r]).abs());
                }
            }
        }
        rows.push(WllnRow { q: t.q, samples: n, spread: variance(&norm).sqrt(), max_lag_corr, window: win });
    }
    rows.sort_by_key(|r| r.q);
    let shrinking = rows.len() >= 2 && rows.first().unwrap().spread > rows.last().unwrap().spread;
    WllnReport { rows, shrinking }
}

/// One plot row: `x, y, ci_lo, ci_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn write_plot_csv<W: Write>(out: W, points: &[PlotPoint]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()
}
