//! Crossing probabilities of boxes `[0,m] x [0,n] x {0..k}` and location of
//! the critical point of the slab.
//!
//! Each sample draws its edges from a counter stream keyed by the local edge
//! slot, so estimates at different `p` (and different thickness, which shares
//! the lower layers) are coupled: a sample's crossing indicator is monotone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{has_blocking_surface, has_surrounding_circuit, CircuitError};
use crate::config::{open_threshold, stream_value, substream, ConfigError, Field};
use crate::lattice::{LatticeError, Region, SlabLattice};

#[derive(Debug, Error)]
pub enum CriticalError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("bisection did not converge: {reason}\n{trace}")]
    NoConvergence { reason: String, trace: String },
    #[error("pc artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

pub type Result<T> = std::result::Result<T, CriticalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Crossing {
    /// From `{x = 0}` to `{x = m}`.
    Horizontal,
    /// From `{y = 0}` to `{y = n}`.
    Vertical,
}

/// Box `[0,m] x [0,n] x {0..k}` with edges drawn from one sample stream.
#[derive(Debug, Clone, Copy)]
pub struct BoxSample {
    pub k: u32,
    pub m: u32,
    pub n: u32,
    pub seed: u64,
}

impl BoxSample {
    #[inline]
    fn index(&self, x: u32, y: u32, z: u32) -> usize {
        ((z as usize * (self.n as usize + 1) + y as usize) * (self.m as usize + 1)) + x as usize
    }

    /// Open test for the edge from `v` in direction `dir` (0 = x, 1 = y, 2 = z).
    #[inline]
    fn open(&self, v: usize, dir: u64, threshold: u64) -> bool {
        (stream_value(self.seed, 3 * v as u64 + dir) >> 11) < threshold
    }

    /// Whether an open path joins the two sides of the box.
    pub fn crosses(&self, p_zero: f64, dir: Crossing) -> Result<bool> {
        let threshold = open_threshold(p_zero)?;
        let (m, n, k) = (self.m, self.n, self.k);
        let total = (m as usize + 1) * (n as usize + 1) * (k as usize + 1);
        let mut seen = vec![false; total];
        let mut stack = Vec::new();
        for z in 0..=k {
            match dir {
                Crossing::Horizontal => (0..=n).for_each(|y| stack.push((0, y, z))),
                Crossing::Vertical => (0..=m).for_each(|x| stack.push((x, 0, z))),
            }
        }
        for &(x, y, z) in &stack {
            seen[self.index(x, y, z)] = true;
        }
        while let Some((x, y, z)) = stack.pop() {
            let done = match dir {
                Crossing::Horizontal => x == m,
                Crossing::Vertical => y == n,
            };
            if done {
                return Ok(true);
            }
            let v = self.index(x, y, z);
            let mut visit = |to: (u32, u32, u32), from: usize, d: u64, stack: &mut Vec<(u32, u32, u32)>| {
                let u = self.index(to.0, to.1, to.2);
                if !seen[u] && self.open(from, d, threshold) {
                    seen[u] = true;
                    stack.push(to);
                }
            };
            if x < m {
                visit((x + 1, y, z), v, 0, &mut stack);
            }
            if x > 0 {
                visit((x - 1, y, z), self.index(x - 1, y, z), 0, &mut stack);
            }
            if y < n {
                visit((x, y + 1, z), v, 1, &mut stack);
            }
            if y > 0 {
                visit((x, y - 1, z), self.index(x, y - 1, z), 1, &mut stack);
            }
            if z < k {
                visit((x, y, z + 1), v, 2, &mut stack);
            }
            if z > 0 {
                visit((x, y, z - 1), self.index(x, y, z - 1), 2, &mut stack);
            }
        }
        Ok(false)
    }
}

/// Monte Carlo estimate of `f(m, n) = P[H([0,m] x [0,n])]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub p: f64,
    pub m: u32,
    pub n: u32,
    pub k: u32,
    pub f_hat: f64,
    /// 95% Wilson interval.
    pub ci: (f64, f64),
    pub samples: usize,
    pub hits: usize,
}

fn wilson(hits: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054f64;
    let nf = total as f64;
    let f = hits as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (f + z * z / (2.0 * nf)) / denom;
    let half = z * (f * (1.0 - f) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Horizontal crossing frequency over `samples` boxes; box `i` uses
/// `substream(seed, i)`.
pub fn crossing_prob(k: u32, m: u32, n: u32, p: f64, samples: usize, seed: u64) -> Result<CrossingEstimate> {
    crossing_prob_dir(k, m, n, p, samples, seed, Crossing::Horizontal)
}

pub fn crossing_prob_dir(
    k: u32,
    m: u32,
    n: u32,
    p: f64,
    samples: usize,
    seed: u64,
    dir: Crossing,
) -> Result<CrossingEstimate> {
    if m == 0 || n == 0 {
        return Err(CriticalError::Invalid(format!("box sides must be positive, got {m} x {n}")));
    }
    open_threshold(p)?;
    let hits: Result<Vec<bool>> = (0..samples)
        .into_par_iter()
        .map(|i| BoxSample { k, m, n, seed: substream(seed, i as u64) }.crosses(p, dir))
        .collect();
    let hits = hits?.into_iter().filter(|&h| h).count();
    let f_hat = if samples == 0 { 0.0 } else { hits as f64 / samples as f64 };
    Ok(CrossingEstimate { p, m, n, k, f_hat, ci: wilson(hits, samples), samples, hits })
}

/// Persisted critical-point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcEstimate {
    pub k: u32,
    pub p_c_hat: f64,
    /// 95% interval combining sampling error and the final bracket.
    pub ci: (f64, f64),
    /// Sampling part of the interval half width.
    pub stat_half_width: f64,
    /// Box heights `n`; each box is `[0, n+1] x [0, n]`.
    pub sizes: Vec<u32>,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub iterations: u32,
    /// Final bisection bracket.
    pub bracket: (f64, f64),
    /// `(n, f_hat)` at `p_c_hat`.
    pub crossing: Vec<(u32, f64)>,
    pub method: String,
    #[serde(default)]
    pub date: Option<String>,
}

impl PcEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let est: PcEstimate = serde_json::from_str(s).map_err(|e| CriticalError::Artifact(e.to_string()))?;
        let p_ok = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !p_ok(est.p_c_hat) || !p_ok(est.ci.0) || !p_ok(est.ci.1) || est.ci.0 > est.ci.1 {
            return Err(CriticalError::Artifact(format!("inconsistent estimate {} with ci {:?}", est.p_c_hat, est.ci)));
        }
        if est.sizes.is_empty() || est.sizes.contains(&0) {
            return Err(CriticalError::Artifact("sizes must be positive and non-empty".into()));
        }
        Ok(est)
    }

    pub fn ci_width(&self) -> f64 {
        self.ci.1 - self.ci.0
    }
}

/// Settings of [`estimate_pc_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcOptions {
    pub sizes: Vec<u32>,
    pub samples: usize,
    pub max_iterations: u32,
    pub bracket: (f64, f64),
    /// Band every `f_hat` at the estimate must fall in.
    pub band: (f64, f64),
}

impl Default for PcOptions {
    fn default() -> Self {
        PcOptions { sizes: vec![32, 64, 128], samples: 2000, max_iterations: 40, bracket: (0.05, 0.95), band: (0.35, 0.65) }
    }
}

/// Mean crossing frequency over the ladder at `p`, with its standard error
/// and per-size values. Every size keeps its own stream for every `p`.
fn ladder(k: u32, p: f64, opts: &PcOptions, seed: u64) -> Result<(f64, f64, Vec<(u32, f64)>)> {
    let mut fs = Vec::new();
    let mut var = 0.0;
    for &n in &opts.sizes {
        let e = crossing_prob(k, n + 1, n, p, opts.samples, substream(seed, n as u64))?;
        var += e.f_hat * (1.0 - e.f_hat) / opts.samples as f64;
        fs.push((n, e.f_hat));
    }
    let count = fs.len() as f64;
    let mean = fs.iter().map(|x| x.1).sum::<f64>() / count;
    Ok((mean, var.sqrt() / count, fs))
}

/// `p_c` of the slab of thickness `k` by bisection on the ladder-averaged
/// crossing frequency of `[0, n+1] x [0, n]` boxes against 1/2.
pub fn estimate_pc(k: u32, tolerance: f64, seed: u64) -> Result<PcEstimate> {
    estimate_pc_with(k, tolerance, seed, &PcOptions::default())
}

pub fn estimate_pc_with(k: u32, tolerance: f64, seed: u64, opts: &PcOptions) -> Result<PcEstimate> {
    if !(tolerance >= 1e-3) {
        return Err(CriticalError::Invalid(format!("tolerance {tolerance} below 1e-3")));
    }
    if opts.sizes.is_empty() || opts.samples == 0 {
        return Err(CriticalError::Invalid("need at least one size and one sample".into()));
    }
    let (mut lo, mut hi) = opts.bracket;
    let mut trace = String::new();
    let mut iterations = 0;
    while hi - lo > tolerance {
        if iterations == opts.max_iterations {
            return Err(CriticalError::NoConvergence { reason: "iteration cap".into(), trace });
        }
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let (f, se, _) = ladder(k, mid, opts, seed)?;
        trace.push_str(&format!("p={mid:.6} f={f:.4} se={se:.4}\n"));
        if f < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p_hat = 0.5 * (lo + hi);
    let (f, se, crossing) = ladder(k, p_hat, opts, seed)?;
    trace.push_str(&format!("final p={p_hat:.6} f={f:.4}\n"));
    if let Some(&(n, bad)) = crossing.iter().find(|(_, x)| *x < opts.band.0 || *x > opts.band.1) {
        return Err(CriticalError::NoConvergence {
            reason: format!("f({}, {n}) = {bad:.4} outside {:?} at p = {p_hat:.6}", n + 1, opts.band),
            trace,
        });
    }
    let h = tolerance.max(0.01);
    let (f_up, _, _) = ladder(k, (p_hat + h).min(1.0), opts, seed)?;
    let (f_dn, _, _) = ladder(k, (p_hat - h).max(0.0), opts, seed)?;
    let slope = (f_up - f_dn) / (2.0 * h);
    if slope <= 0.0 {
        return Err(CriticalError::NoConvergence { reason: format!("flat crossing curve near {p_hat:.6}"), trace });
    }
    let stat = 1.96 * se / slope;
    let half = stat.hypot(0.5 * (hi - lo));
    Ok(PcEstimate {
        k,
        p_c_hat: p_hat,
        ci: ((p_hat - half).max(0.0), (p_hat + half).min(1.0)),
        stat_half_width: stat,
        sizes: opts.sizes.clone(),
        samples: opts.samples,
        seed,
        tolerance,
        iterations,
        bracket: (lo, hi),
        crossing,
        method: "bisection of mean f(n+1, n) over the size ladder against 1/2; ci from local slope and bracket".into(),
        date: None,
    })
}

/// One size of [`rsw_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RswRow {
    pub n: u32,
    /// `f(n, floor(rho n))`.
    pub box_crossing: CrossingEstimate,
    /// Frequency of an open circuit surrounding the origin in `S(2n) \ S(n)`.
    pub circuit_frequency: f64,
    /// Frequency of an open path from `S(n)` to `boundary S(2n)`.
    pub arm_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RswReport {
    pub k: u32,
    pub p: f64,
    pub rho: f64,
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<RswRow>,
}

impl RswReport {
    /// Every frequency lies in `[c, 1 - c]`.
    pub fn bounded_by(&self, c: f64) -> bool {
        self.rows.iter().all(|r| {
            [r.box_crossing.f_hat, r.circuit_frequency, r.arm_frequency].iter().all(|&f| f >= c && f <= 1.0 - c)
        })
    }
}

/// Box crossings of `[0,n] x [0, floor(rho n)]` and annulus circuit and arm
/// frequencies at each `n`.
pub fn rsw_check(k: u32, p: f64, rho: f64, n_list: &[u32], samples: usize, seed: u64) -> Result<RswReport> {
    if !(rho > 0.0) {
        return Err(CriticalError::Invalid(format!("rho must be positive, got {rho}")));
    }
    let mut rows = Vec::new();
    for &n in n_list {
        let h = (rho * n as f64).floor() as u32;
        let box_crossing = crossing_prob(k, n, h.max(1), p, samples, substream(seed, 2 * n as u64))?;
        let lat = SlabLattice::new(2 * n, k)?;
        let ring_seed = substream(seed, 2 * n as u64 + 1);
        let counts: Result<Vec<(bool, bool)>> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let f = Field::new(&lat, p, substream(ring_seed, i as u64))?.materialize();
                let circuit = has_surrounding_circuit(&f, &Region::Ring { inner: n, outer: 2 * n })?;
                let arm = !has_blocking_surface(&f, n)?;
                Ok((circuit, arm))
            })
            .collect();
        let counts = counts?;
        let frac = |sel: fn(&(bool, bool)) -> bool| counts.iter().filter(|c| sel(c)).count() as f64 / samples.max(1) as f64;
        rows.push(RswRow { n, box_crossing, circuit_frequency: frac(|c| c.0), arm_frequency: frac(|c| c.1) });
    }
    Ok(RswReport { k, p, rho, samples, seed, rows })
}
