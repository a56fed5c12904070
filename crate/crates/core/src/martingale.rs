//! Nested Monte Carlo for the martingale increments
//! `Delta_p = E[T(0, C_l) | F_p] - E[T(0, C_l) | F_{p-1}]`.
//!
//! `F_p` is generated by the innermost circuit `C_p` and the edges of its
//! closed interior. Conditioning is realized by freezing exactly the edges
//! [`Interior::holds_edge`] accepts and redrawing everything else from an
//! independent stream; `F_{-1}` is the trivial field. The two conditional
//! expectations of one increment share their inner streams.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{circuit_at_scale, innermost_circuit, scale_m, Circuit, CircuitError, Interior};
use crate::config::{substream, ConfigError, EdgeConfig, Field, FrozenMask, Resampled, Weights};
use crate::lattice::{Region, SlabLattice};
use crate::passage::{first_hit, geodesic_lex_min, passage_time, PassageError, Scratch, VertexSet};
use crate::stats::{compensated_sum, mean, survival_fit, variance, TailModel};

#[derive(Debug, Error)]
pub enum MartingaleError {
    #[error("censored: {0}")]
    Censored(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Passage(#[from] PassageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, MartingaleError>;

/// Largest number of free edges [`conditional_expectation_exact`] enumerates.
pub const EXACT_FREE_LIMIT: usize = 22;

/// Quantity averaged under conditional resampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `T(0, C_l x {0..k})` for the innermost circuit `C_l` of the evaluated
    /// configuration, scanning annuli up to `p_max`.
    CircuitTime { ell: u32, p_max: u32 },
    /// `T(v, C_l x {0..k})`.
    CircuitTimeFrom { vertex: usize, ell: u32, p_max: u32 },
    /// `T(src, dst)`.
    Passage { src: VertexSet, dst: VertexSet },
}

/// `C_l` of `w` at scale `ell`, or a censoring error.
fn scale_circuit<W: Weights>(w: &W, ell: u32, p_max: u32) -> Result<Circuit> {
    match circuit_at_scale(w, ell, p_max)? {
        Some((_, c)) => Ok(c),
        None => Err(MartingaleError::Censored(format!("no circuit at scales {ell}..={p_max}"))),
    }
}

fn time_to<W: Weights>(w: &W, scratch: &mut Scratch, from: usize, set: &VertexSet) -> Result<f64> {
    Ok(passage_time(w, scratch, &VertexSet::Point(from), set)?.value as f64)
}

pub fn evaluate<W: Weights>(w: &W, scratch: &mut Scratch, target: &Target) -> Result<f64> {
    let lat = w.lattice();
    match target {
        Target::CircuitTime { ell, p_max } => {
            let c = scale_circuit(w, *ell, *p_max)?;
            time_to(w, scratch, lat.origin(), &VertexSet::points(c.thickened(lat)))
        }
        Target::CircuitTimeFrom { vertex, ell, p_max } => {
            let c = scale_circuit(w, *ell, *p_max)?;
            time_to(w, scratch, *vertex, &VertexSet::points(c.thickened(lat)))
        }
        Target::Passage { src, dst } => Ok(passage_time(w, scratch, src, dst)?.value as f64),
    }
}

/// Edges of the closed region `C` together with `int(C)`.
pub fn freeze_mask(lat: &SlabLattice, interior: &Interior) -> FrozenMask {
    let mut mask = FrozenMask::none(lat);
    for (i, e) in lat.edges().enumerate() {
        if interior.holds_edge(lat, e) {
            mask.freeze(i);
        }
    }
    mask
}

/// Average of a target over conditional resamples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

fn summarize(values: &[f64]) -> ConditionalEstimate {
    let stderr = if values.len() < 2 { 0.0 } else { (variance(values) / values.len() as f64).sqrt() };
    ConditionalEstimate { mean: mean(values), stderr, samples: values.len() }
}

/// `E[target | frozen edges]` from `r` resamples of the unfrozen edges with
/// law `p_zero`; resample `i` uses the stream `substream(seed, i)`. Any
/// censored resample censors the whole estimate.
pub fn conditional_expectation<W: Weights>(
    cfg: &W,
    freeze: &FrozenMask,
    target: &Target,
    p_zero: f64,
    r: usize,
    seed: u64,
) -> Result<ConditionalEstimate> {
    if r == 0 {
        return Err(MartingaleError::Invalid("need at least one inner sample".into()));
    }
    let mut scratch = Scratch::new(cfg.lattice());
    let mut values = Vec::with_capacity(r);
    for i in 0..r {
        let w = Resampled::new(cfg, freeze, p_zero, substream(seed, i as u64))?;
        values.push(evaluate(&w, &mut scratch, target)?);
    }
    Ok(summarize(&values))
}

/// Exact `E[target | frozen edges]` by enumerating every completion of the
/// free edges, weighting each by its Bernoulli(`p_zero`) probability.
pub fn conditional_expectation_exact<W: Weights>(
    cfg: &W,
    freeze: &FrozenMask,
    target: &Target,
    p_zero: f64,
) -> Result<f64> {
    let lat = cfg.lattice();
    if freeze.len() != lat.edge_count() {
        return Err(ConfigError::MaskMismatch { mask: freeze.len(), lattice: lat.edge_count() }.into());
    }
    if !(0.0..=1.0).contains(&p_zero) {
        return Err(ConfigError::BadProbability(p_zero).into());
    }
    let free: Vec<usize> = (0..lat.edge_count()).filter(|&i| !freeze.is_frozen(i)).collect();
    if free.len() > EXACT_FREE_LIMIT {
        return Err(MartingaleError::Invalid(format!("{} free edges exceed {EXACT_FREE_LIMIT}", free.len())));
    }
    let mut current = EdgeConfig::constant(lat, false);
    for (i, e) in lat.edges().enumerate() {
        current.set_closed(i, !cfg.is_open(e));
    }
    let mut scratch = Scratch::new(lat);
    let mut terms = Vec::with_capacity(1 << free.len());
    for bits in 0u64..(1u64 << free.len()) {
        let mut prob = 1.0;
        for (j, &idx) in free.iter().enumerate() {
            let open = bits >> j & 1 == 1;
            current.set_closed(idx, !open);
            prob *= if open { p_zero } else { 1.0 - p_zero };
        }
        if prob == 0.0 {
            continue;
        }
        terms.push(prob * evaluate(&current, &mut scratch, target)?);
    }
    Ok(compensated_sum(terms))
}

/// Monte Carlo estimate of one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleEstimate {
    pub p: u32,
    pub delta_hat: f64,
    pub stderr: f64,
    pub inner_samples: usize,
    /// `8k`, the almost-sure bound on the Lemma 1 remainder.
    pub remainder_bound: f64,
}

/// Lemma 1 remainder estimate for one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderEstimate {
    pub p: u32,
    pub remainder: f64,
    pub stderr: f64,
    pub bound: f64,
    pub within: bool,
}

/// How the two conditional expectations of an increment draw their resamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    /// Both use `substream(seed, i)` for resample `i`.
    Common,
    /// The `F_{p-1}` side uses an unrelated stream.
    Independent,
}

/// Parameters of the nested estimation shared by every outer sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedSetup {
    pub lattice: SlabLattice,
    pub p_zero: f64,
    /// Largest annulus scanned for `m(p)`.
    pub p_max: u32,
    /// Inner resamples per conditional expectation.
    pub inner: usize,
}

impl NestedSetup {
    pub fn new(lattice: &SlabLattice, p_zero: f64, inner: usize) -> Result<Self> {
        if inner == 0 {
            return Err(MartingaleError::Invalid("need at least one inner sample".into()));
        }
        let p_max = max_scale(lattice)
            .ok_or_else(|| MartingaleError::Invalid(format!("window half width {} too small", lattice.half_width())))?;
        Ok(NestedSetup { lattice: lattice.clone(), p_zero, p_max, inner })
    }

    fn remainder_bound(&self) -> f64 {
        8.0 * self.lattice.thickness() as f64
    }
}

/// Largest `p` with `A(p)` inside the window.
pub fn max_scale(lat: &SlabLattice) -> Option<u32> {
    let l = lat.half_width();
    (l >= 2).then(|| l.ilog2() - 1)
}

/// `l` with `2^(l-1) < n <= 2^l`.
pub fn scale_of(n: u32) -> u32 {
    n.max(1).next_power_of_two().trailing_zeros()
}

/// Circuits of one outer configuration at scales `0..=ell`.
struct Skeleton {
    circuits: Vec<Circuit>,
    masks: Vec<FrozenMask>,
    /// `m(p)` per scale.
    m: Vec<u32>,
    /// First vertex of the lex-min geodesic from the origin to `C_l` on each `C_p`.
    tau: Vec<usize>,
    target: f64,
}

impl Skeleton {
    fn build<W: Weights>(w: &W, scratch: &mut Scratch, ell: u32, p_max: u32) -> Result<Self> {
        let lat = w.lattice();
        let mut circuits: Vec<Circuit> = Vec::new();
        let mut m = Vec::new();
        for p in 0..=ell {
            let mp = scale_m(w, p, p_max)?.ok_or_else(|| MartingaleError::Censored(format!("m({p}) beyond {p_max}")))?;
            let c = match (m.last(), circuits.last()) {
                (Some(&prev), Some(c)) if prev == mp => c.clone(),
                _ => innermost_circuit(w, &Region::Annulus(mp))?,
            };
            m.push(mp);
            circuits.push(c);
        }
        let outer = VertexSet::points(circuits[ell as usize].thickened(lat));
        let geo = geodesic_lex_min(w, scratch, &VertexSet::Point(lat.origin()), &outer)?;
        let path = geo.geodesic.expect("lex-min search returns its path");
        let mut tau = Vec::with_capacity(circuits.len());
        for c in &circuits {
            tau.push(first_hit(lat, &path, &VertexSet::points(c.thickened(lat)))?.vertex);
        }
        let masks = circuits.iter().map(|c| freeze_mask(lat, &c.interior(lat))).collect();
        Ok(Skeleton { circuits, masks, m, tau, target: geo.value as f64 })
    }

    fn time_to_circuit<W: Weights>(&self, w: &W, scratch: &mut Scratch, p: usize) -> Result<f64> {
        let lat = w.lattice();
        time_to(w, scratch, lat.origin(), &VertexSet::points(self.circuits[p].thickened(lat)))
    }
}

/// `(T(0, C_l), T(from, C_l))` on one configuration.
fn pair_values<W: Weights>(w: &W, scratch: &mut Scratch, ell: u32, p_max: u32, from: Option<usize>) -> Result<(f64, f64)> {
    let lat = w.lattice();
    let c = scale_circuit(w, ell, p_max)?;
    let set = VertexSet::points(c.thickened(lat));
    let a = time_to(w, scratch, lat.origin(), &set)?;
    let b = match from {
        Some(v) => time_to(w, scratch, v, &set)?,
        None => 0.0,
    };
    Ok((a, b))
}

/// Per-resample values of one increment: `a` under `F_p`, `b` under `F_{p-1}`,
/// and for the remainder the times from `tau_p` and `tau_{p-1}`.
struct IncrementDraws {
    diff: Vec<f64>,
    remainder: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn draw_increment<W: Weights>(
    w: &W,
    scratch: &mut Scratch,
    setup: &NestedSetup,
    sk: &Skeleton,
    p: u32,
    ell: u32,
    seed: u64,
    pairing: Pairing,
) -> Result<IncrementDraws> {
    let pi = p as usize;
    let with_remainder = p >= 1;
    let base = if with_remainder {
        sk.time_to_circuit(w, scratch, pi)? - sk.time_to_circuit(w, scratch, pi - 1)?
    } else {
        0.0
    };
    let same = p >= 1 && sk.masks[pi] == sk.masks[pi - 1];
    let mut diff = Vec::with_capacity(setup.inner);
    let mut remainder = Vec::with_capacity(setup.inner);
    for i in 0..setup.inner {
        let s_hi = substream(seed, i as u64);
        let s_lo = match pairing {
            Pairing::Common => s_hi,
            Pairing::Independent => substream(seed ^ 0x5851_F42D_4C95_7F2D, i as u64),
        };
        let hi = Resampled::new(w, &sk.masks[pi], setup.p_zero, s_hi)?;
        let (a, c) = pair_values(&hi, scratch, ell, setup.p_max, with_remainder.then(|| sk.tau[pi]))?;
        let (b, d) = if same && s_lo == s_hi {
            (a, pair_values(&hi, scratch, ell, setup.p_max, Some(sk.tau[pi - 1]))?.1)
        } else if p == 0 {
            let fresh = Field::new(w.lattice(), setup.p_zero, s_lo)?;
            pair_values(&fresh, scratch, ell, setup.p_max, None)?
        } else {
            let lo = Resampled::new(w, &sk.masks[pi - 1], setup.p_zero, s_lo)?;
            pair_values(&lo, scratch, ell, setup.p_max, Some(sk.tau[pi - 1]))?
        };
        diff.push(a - b);
        if with_remainder {
            remainder.push((a - b) - (base + c - d));
        }
    }
    Ok(IncrementDraws { diff, remainder })
}

fn check_scales(setup: &NestedSetup, p: u32, ell: u32) -> Result<()> {
    if ell > setup.p_max {
        return Err(MartingaleError::Invalid(format!("scale {ell} exceeds window scale {}", setup.p_max)));
    }
    if p > ell + 1 {
        return Err(MartingaleError::Invalid(format!("p = {p} beyond l + 1 = {}", ell + 1)));
    }
    Ok(())
}

fn increment_estimate(setup: &NestedSetup, p: u32, draws: &IncrementDraws) -> MartingaleEstimate {
    let s = summarize(&draws.diff);
    MartingaleEstimate {
        p,
        delta_hat: s.mean,
        stderr: s.stderr,
        inner_samples: s.samples,
        remainder_bound: setup.remainder_bound(),
    }
}

fn remainder_estimate(setup: &NestedSetup, p: u32, draws: &IncrementDraws) -> RemainderEstimate {
    let s = summarize(&draws.remainder);
    let bound = setup.remainder_bound();
    RemainderEstimate { p, remainder: s.mean, stderr: s.stderr, bound, within: s.mean.abs() <= bound + 3.0 * s.stderr }
}

/// `Delta_p` for `p <= l + 1`; scales past `l` freeze all of `C_l` and give 0.
pub fn delta_p<W: Weights>(w: &W, setup: &NestedSetup, p: u32, ell: u32, seed: u64) -> Result<MartingaleEstimate> {
    delta_p_with(w, setup, p, ell, seed, Pairing::Common)
}

pub fn delta_p_with<W: Weights>(
    w: &W,
    setup: &NestedSetup,
    p: u32,
    ell: u32,
    seed: u64,
    pairing: Pairing,
) -> Result<MartingaleEstimate> {
    check_scales(setup, p, ell)?;
    if p > ell {
        return Ok(MartingaleEstimate {
            p,
            delta_hat: 0.0,
            stderr: 0.0,
            inner_samples: 0,
            remainder_bound: setup.remainder_bound(),
        });
    }
    let mut scratch = Scratch::new(w.lattice());
    let sk = Skeleton::build(w, &mut scratch, ell, setup.p_max)?;
    let draws = draw_increment(w, &mut scratch, setup, &sk, p, ell, seed, pairing)?;
    Ok(increment_estimate(setup, p, &draws))
}

/// Remainder of the Lemma 1 decomposition
/// `Delta_p - [T(0,C_p) - T(0,C_{p-1}) + E'T(tau_p, C_l) - E'T(tau_{p-1}, C_l)]`
/// with `tau_p` the entry point of the lex-min geodesic from 0 to `C_l` on
/// `C_p x {0..k}`. Defined for `1 <= p <= l`.
pub fn lemma1_decomposition_check<W: Weights>(
    w: &W,
    setup: &NestedSetup,
    p: u32,
    ell: u32,
    seed: u64,
) -> Result<RemainderEstimate> {
    check_scales(setup, p, ell)?;
    if p == 0 || p > ell {
        return Err(MartingaleError::Invalid(format!("remainder needs 1 <= p <= l, got p = {p}, l = {ell}")));
    }
    let mut scratch = Scratch::new(w.lattice());
    let sk = Skeleton::build(w, &mut scratch, ell, setup.p_max)?;
    let draws = draw_increment(w, &mut scratch, setup, &sk, p, ell, seed, Pairing::Common)?;
    Ok(remainder_estimate(setup, p, &draws))
}

/// `n(p, w, w') = m(m(p, w) + 1, w')` and whether `C_p(w)` lies strictly
/// inside `C_n(w')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxScale {
    pub n_value: u32,
    pub m_p: u32,
    pub contained: bool,
}

pub fn aux_scale<W: Weights, V: Weights>(w: &W, w_prime: &V, p: u32, p_max: u32) -> Result<AuxScale> {
    let lat = w.lattice();
    let (m_p, c_p) =
        circuit_at_scale(w, p, p_max)?.ok_or_else(|| MartingaleError::Censored(format!("m({p}) beyond {p_max}")))?;
    if m_p + 1 > p_max {
        return Err(MartingaleError::Censored(format!("m({p}) + 1 beyond {p_max}")));
    }
    let (n_value, c_n) = circuit_at_scale(w_prime, m_p + 1, p_max)?
        .ok_or_else(|| MartingaleError::Censored(format!("m({}) beyond {p_max} in the second sample", m_p + 1)))?;
    let int = c_n.interior(lat);
    let contained = c_p.vertices.iter().all(|&v| {
        let x = lat.vertex(v);
        int.strictly_inside(x.x, x.y)
    });
    Ok(AuxScale { n_value, m_p, contained })
}

/// Average of `Delta_p` over `outer` redraws of the edges outside the closed
/// interior of `C_{p-1}(w)` (of everything when `p = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub p: u32,
    pub mean: f64,
    pub stderr: f64,
    pub used: usize,
    pub censored: usize,
    pub passed: bool,
}

pub fn martingale_property_check(
    cfg: &EdgeConfig,
    setup: &NestedSetup,
    p: u32,
    ell: u32,
    outer: usize,
    seed: u64,
) -> Result<PropertyCheck> {
    check_scales(setup, p, ell)?;
    let lat = cfg.lattice();
    let mask = if p == 0 {
        FrozenMask::none(lat)
    } else {
        let (_, c) = circuit_at_scale(cfg, p - 1, setup.p_max)?
            .ok_or_else(|| MartingaleError::Censored(format!("m({}) beyond {}", p - 1, setup.p_max)))?;
        freeze_mask(lat, &c.interior(lat))
    };
    let results: Vec<Result<f64>> = (0..outer)
        .into_par_iter()
        .map(|j| {
            let s = substream(seed, j as u64);
            let redraw = Resampled::new(cfg, &mask, setup.p_zero, s)?;
            Ok(delta_p(&redraw, setup, p, ell, substream(s, 1))?.delta_hat)
        })
        .collect();
    let mut values = Vec::new();
    let mut censored = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(MartingaleError::Censored(_)) => censored += 1,
            Err(e) => return Err(e),
        }
    }
    let s = summarize(&values);
    let passed = !values.is_empty() && s.mean.abs() <= 3.0 * s.stderr + 1e-12;
    Ok(PropertyCheck { p, mean: s.mean, stderr: s.stderr, used: values.len(), censored, passed })
}

/// Everything measured on one outer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedSample {
    pub index: usize,
    /// `T(0, C_l)` on the outer configuration.
    pub target: f64,
    /// `m(p) - p` for `p = 0..=l`.
    pub excess: Vec<u32>,
    /// `Delta_p` for `p = 0..=l`.
    pub deltas: Vec<MartingaleEstimate>,
    /// Remainders for `p = 1..=l`.
    pub remainders: Vec<RemainderEstimate>,
}

/// Outcome of one outer sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outer {
    Done(NestedSample),
    Censored { index: usize, reason: String },
}

/// Runs every increment of scale `ell` on one configuration; inner streams for
/// scale `p` derive from `substream(seed, p)`.
pub fn nested_sample<W: Weights>(w: &W, setup: &NestedSetup, ell: u32, index: usize, seed: u64) -> Result<NestedSample> {
    check_scales(setup, 0, ell)?;
    let mut scratch = Scratch::new(w.lattice());
    let sk = Skeleton::build(w, &mut scratch, ell, setup.p_max)?;
    let mut deltas = Vec::new();
    let mut remainders = Vec::new();
    for p in 0..=ell {
        let draws = draw_increment(w, &mut scratch, setup, &sk, p, ell, substream(seed, p as u64), Pairing::Common)?;
        deltas.push(increment_estimate(setup, p, &draws));
        if p >= 1 {
            remainders.push(remainder_estimate(setup, p, &draws));
        }
    }
    let excess = sk.m.iter().zip(0..).map(|(&m, p)| m - p).collect();
    Ok(NestedSample { index, target: sk.target, excess, deltas, remainders })
}

/// Per-scale aggregate of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub q: u32,
    pub p: u32,
    pub count: usize,
    pub censored: usize,
    pub mean_delta: f64,
    pub stderr: f64,
    pub mean_sq: f64,
    pub mean_sq_stderr: f64,
    /// Fraction of samples whose truncated increment equals the increment.
    pub untruncated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    pub n: u32,
    pub q: u32,
    pub p_zero: f64,
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    pub censored: usize,
    pub rows: Vec<IncrementRow>,
    /// Estimated `C5` from the `m(p) - p` survival over `t = 0..=6`.
    pub c5: Option<f64>,
    /// Truncation window `(3 / C5) log q`.
    pub window: Option<f64>,
    /// Outer samples whose summed increments match `T(0, C_l) - E T(0, C_l)`
    /// within three combined standard errors.
    pub telescoping_within: usize,
    /// Remainder estimates inside `8k + 3 stderr`, and their total.
    pub remainder_within: usize,
    pub remainder_total: usize,
    pub samples: Vec<NestedSample>,
    pub censor_reasons: Vec<String>,
}

impl IncrementReport {
    pub fn censor_rate(&self) -> f64 {
        if self.outer == 0 {
            0.0
        } else {
            self.censored as f64 / self.outer as f64
        }
    }

    /// `sum_p E Delta_p^2`.
    pub fn sum_mean_sq(&self) -> f64 {
        compensated_sum(self.rows.iter().map(|r| r.mean_sq))
    }

    pub fn max_abs_delta(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.deltas.iter().map(|d| d.delta_hat.abs()).fold(0.0, f64::max)).collect()
    }

    pub fn abs_deltas(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.deltas.iter().map(|d| d.delta_hat.abs())).collect()
    }

    pub fn excess_samples(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.excess.iter().map(|&e| e as f64)).collect()
    }

    /// `increments[i][p]` for the uncensored samples.
    pub fn delta_table(&self) -> crate::stats::DeltaTable {
        crate::stats::DeltaTable {
            q: self.q,
            increments: self.samples.iter().map(|s| s.deltas.iter().map(|d| d.delta_hat).collect()).collect(),
        }
    }

    /// Per-(p, q) rows as CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()
    }
}

/// Nested estimation at `n` over `outer` configurations drawn from
/// `substream(seed, i)`; outer samples run in parallel and are combined in
/// index order.
pub fn increment_moments(setup: &NestedSetup, n: u32, outer: usize, seed: u64) -> Result<IncrementReport> {
    let q = scale_of(n);
    check_scales(setup, 0, q)?;
    let outcomes: Vec<Result<Outer>> = (0..outer)
        .into_par_iter()
        .map(|i| {
            let s = substream(seed, i as u64);
            let cfg = Field::new(&setup.lattice, setup.p_zero, s)?.materialize();
            match nested_sample(&cfg, setup, q, i, substream(s, u64::MAX)) {
                Ok(sample) => Ok(Outer::Done(sample)),
                Err(MartingaleError::Censored(reason)) => Ok(Outer::Censored { index: i, reason }),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut censor_reasons = Vec::new();
    for o in outcomes {
        match o? {
            Outer::Done(s) => samples.push(s),
            Outer::Censored { index, reason } => censor_reasons.push(format!("sample {index}: {reason}")),
        }
    }
    Ok(summarize_run(setup, n, q, outer, seed, samples, censor_reasons))
}

fn summarize_run(
    setup: &NestedSetup,
    n: u32,
    q: u32,
    outer: usize,
    seed: u64,
    samples: Vec<NestedSample>,
    censor_reasons: Vec<String>,
) -> IncrementReport {
    let censored = censor_reasons.len();
    let excess: Vec<f64> = samples.iter().flat_map(|s| s.excess.iter().map(|&e| e as f64)).collect();
    let grid: Vec<f64> = (0..=6).map(f64::from).collect();
    let c5 = survival_fit(&excess, &grid, TailModel::Exponential).ok().map(|f| f.rate).filter(|c| *c > 0.0);
    let window = c5.map(|c| 3.0 / c * (q.max(2) as f64).ln());

    let mut rows = Vec::new();
    for p in 0..=q {
        let pi = p as usize;
        let d: Vec<f64> = samples.iter().map(|s| s.deltas[pi].delta_hat).collect();
        let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
        let kept = samples.iter().filter(|s| window.is_none_or(|w| s.excess[pi] as f64 <= w)).count();
        let se = |v: &[f64]| if v.len() < 2 { 0.0 } else { (variance(v) / v.len() as f64).sqrt() };
        rows.push(IncrementRow {
            q,
            p,
            count: d.len(),
            censored,
            mean_delta: if d.is_empty() { 0.0 } else { mean(&d) },
            stderr: se(&d),
            mean_sq: if sq.is_empty() { 0.0 } else { mean(&sq) },
            mean_sq_stderr: se(&sq),
            untruncated_fraction: if d.is_empty() { 1.0 } else { kept as f64 / d.len() as f64 },
        });
    }

    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let mean_target = if targets.is_empty() { 0.0 } else { mean(&targets) };
    let target_se = if targets.len() < 2 { 0.0 } else { (variance(&targets) / targets.len() as f64).sqrt() };
    let telescoping_within = samples
        .iter()
        .filter(|s| {
            let sum = compensated_sum(s.deltas.iter().map(|d| d.delta_hat));
            let var = compensated_sum(s.deltas.iter().map(|d| d.stderr * d.stderr)) + target_se * target_se;
            (sum - (s.target - mean_target)).abs() <= 3.0 * var.sqrt() + 1e-9
        })
        .count();
    let remainder_total = samples.iter().map(|s| s.remainders.len()).sum();
    let remainder_within = samples.iter().flat_map(|s| &s.remainders).filter(|r| r.within).count();

    IncrementReport {
        n,
        q,
        p_zero: setup.p_zero,
        outer,
        inner: setup.inner,
        seed,
        censored,
        rows,
        c5,
        window,
        telescoping_within,
        remainder_within,
        remainder_total,
        samples,
        censor_reasons,
    }
}
