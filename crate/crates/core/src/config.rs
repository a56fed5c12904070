//! Bernoulli edge weights.
//!
//! `t(e) = 0` means the edge is *open* (free passage) and `t(e) = 1` means it
//! is *closed* (unit cost). Every configuration is defined by a counter-based
//! generator: the weight of the edge stored at slot `3v + dir` is a pure
//! function of `(seed, slot)`. A [`Field`] evaluates that function lazily, so
//! searches only pay for the edges they touch, and [`EdgeConfig`] is the same
//! field materialized into one bit per edge.

use std::io::{self, Read, Write};

use bitvec::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lattice::{Dir, EdgeRef, SlabLattice};

/// Identifier recorded in snapshots and result metadata.
pub const GENERATOR_ID: &str = "splitmix64-counter/v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("mask covers {mask} edges but the lattice has {lattice}")]
    MaskMismatch { mask: usize, lattice: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output `slot` of the SplitMix64 stream started at `seed`.
#[inline]
pub fn stream_value(seed: u64, slot: u64) -> u64 {
    mix64(seed.wrapping_add(slot.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seed of an independent stream for `worker` derived from `seed`.
pub fn substream(seed: u64, worker: u64) -> u64 {
    mix64(mix64(seed ^ 0xA076_1D64_78BD_642F).wrapping_add(mix64(worker.wrapping_add(GOLDEN))))
}

/// General-purpose generator for everything that is not an edge weight.
pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cut-off on the top 53 bits of a stream value below which an edge is open.
pub fn open_threshold(p_zero: f64) -> Result<u64, ConfigError> {
    if !(0.0..=1.0).contains(&p_zero) {
        return Err(ConfigError::BadProbability(p_zero));
    }
    Ok((p_zero * (1u64 << 53) as f64) as u64)
}

/// Anything that assigns a {0,1} weight to every edge of a lattice.
pub trait Weights: Sync {
    fn lattice(&self) -> &SlabLattice;

    fn is_open(&self, e: EdgeRef) -> bool;

    #[inline]
    fn weight(&self, e: EdgeRef) -> u32 {
        u32::from(!self.is_open(e))
    }
}

impl<W: Weights + ?Sized> Weights for &W {
    fn lattice(&self) -> &SlabLattice {
        (**self).lattice()
    }

    #[inline]
    fn is_open(&self, e: EdgeRef) -> bool {
        (**self).is_open(e)
    }
}

/// Lazily evaluated i.i.d. Bernoulli field.
#[derive(Debug, Clone)]
pub struct Field {
    lattice: SlabLattice,
    p_zero: f64,
    seed: u64,
    threshold: u64,
}

impl Field {
    pub fn new(lattice: &SlabLattice, p_zero: f64, seed: u64) -> Result<Self, ConfigError> {
        Ok(Field { lattice: lattice.clone(), p_zero, seed, threshold: open_threshold(p_zero)? })
    }

    pub fn p_zero(&self) -> f64 {
        self.p_zero
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)` attached to the edge; the edge is open iff it is below `p_zero`.
    pub fn uniform(&self, e: EdgeRef) -> f64 {
        (stream_value(self.seed, slot(e)) >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn materialize(&self) -> EdgeConfig {
        let mut bits = bitvec![u64, Lsb0; 0; self.lattice.edge_count()];
        for (i, e) in self.lattice.edges().enumerate() {
            if !self.is_open(e) {
                bits.set(i, true);
            }
        }
        EdgeConfig { lattice: self.lattice.clone(), bits, p_zero: self.p_zero, seed: self.seed }
    }
}

#[inline]
fn slot(e: EdgeRef) -> u64 {
    3 * e.base as u64 + e.dir as u64
}

impl Weights for Field {
    fn lattice(&self) -> &SlabLattice {
        &self.lattice
    }

    #[inline]
    fn is_open(&self, e: EdgeRef) -> bool {
        (stream_value(self.seed, slot(e)) >> 11) < self.threshold
    }
}

/// One sample: a closed-bit per edge in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConfig {
    lattice: SlabLattice,
    bits: BitVec<u64, Lsb0>,
    p_zero: f64,
    seed: u64,
}

impl EdgeConfig {
    /// All edges open (`closed = false`) or all closed.
    pub fn constant(lattice: &SlabLattice, closed: bool) -> Self {
        EdgeConfig {
            lattice: lattice.clone(),
            bits: BitVec::repeat(closed, lattice.edge_count()),
            p_zero: if closed { 0.0 } else { 1.0 },
            seed: 0,
        }
    }

    /// Builds a configuration from explicit closed bits (canonical edge order).
    pub fn from_closed_bits(lattice: &SlabLattice, closed: &[bool]) -> Result<Self, ConfigError> {
        if closed.len() != lattice.edge_count() {
            return Err(ConfigError::MaskMismatch { mask: closed.len(), lattice: lattice.edge_count() });
        }
        Ok(EdgeConfig { lattice: lattice.clone(), bits: closed.iter().copied().collect(), p_zero: f64::NAN, seed: 0 })
    }

    pub fn p_zero(&self) -> f64 {
        self.p_zero
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn closed_bits(&self) -> &BitSlice<u64, Lsb0> {
        &self.bits
    }

    pub fn is_closed_index(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set_closed(&mut self, idx: usize, closed: bool) {
        self.bits.set(idx, closed);
    }

    pub fn closed_fraction(&self) -> f64 {
        self.bits.count_ones() as f64 / self.bits.len().max(1) as f64
    }

    /// Snapshot: magic, `L`, `k`, `p`, seed, generator id, edge count, packed bits.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<(), ConfigError> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&self.lattice.half_width().to_le_bytes())?;
        out.write_all(&self.lattice.thickness().to_le_bytes())?;
        out.write_all(&self.p_zero.to_bits().to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&(GENERATOR_ID.len() as u16).to_le_bytes())?;
        out.write_all(GENERATOR_ID.as_bytes())?;
        out.write_all(&(self.bits.len() as u64).to_le_bytes())?;
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for i in self.bits.iter_ones() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self, ConfigError> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::parse_snapshot(&buf)
    }

    /// Parses a snapshot, rejecting anything that does not round-trip exactly.
    pub fn parse_snapshot(data: &[u8]) -> Result<Self, ConfigError> {
        let bad = |m: &str| ConfigError::Snapshot(m.to_string());
        let mut cur = Cursor { data, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated magic"))? != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let half_width = cur.u32().ok_or_else(|| bad("truncated header"))?;
        let thickness = cur.u32().ok_or_else(|| bad("truncated header"))?;
        let p_zero = f64::from_bits(cur.u64().ok_or_else(|| bad("truncated header"))?);
        let seed = cur.u64().ok_or_else(|| bad("truncated header"))?;
        let id_len = cur.u16().ok_or_else(|| bad("truncated header"))? as usize;
        let id = cur.take(id_len).ok_or_else(|| bad("truncated generator id"))?;
        if std::str::from_utf8(id).is_err() {
            return Err(bad("generator id is not utf-8"));
        }
        let count = cur.u64().ok_or_else(|| bad("truncated header"))?;
        if !(p_zero.is_nan() || (0.0..=1.0).contains(&p_zero)) {
            return Err(ConfigError::BadProbability(p_zero));
        }
        let lattice = SlabLattice::new(half_width, thickness).map_err(|e| ConfigError::Snapshot(e.to_string()))?;
        if count != lattice.edge_count() as u64 {
            return Err(bad("edge count does not match lattice"));
        }
        let count = count as usize;
        let body = cur.take(count.div_ceil(8)).ok_or_else(|| bad("truncated bit block"))?;
        if cur.pos != data.len() {
            return Err(bad("trailing bytes"));
        }
        if !count.is_multiple_of(8) && body[body.len() - 1] >> (count % 8) != 0 {
            return Err(bad("nonzero padding bits"));
        }
        let mut bits = bitvec![u64, Lsb0; 0; count];
        for (i, byte) in body.iter().enumerate() {
            for b in 0..8 {
                if byte >> b & 1 == 1 {
                    bits.set(i * 8 + b, true);
                }
            }
        }
        Ok(EdgeConfig { lattice, bits, p_zero, seed })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SFPPCFG1";

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Weights for EdgeConfig {
    fn lattice(&self) -> &SlabLattice {
        &self.lattice
    }

    #[inline]
    fn is_open(&self, e: EdgeRef) -> bool {
        !self.bits[self.lattice.edge_index(e)]
    }
}

/// i.i.d. sample with `P(t(e) = 0) = p_zero`, reproducible from `(lattice, p_zero, seed)`.
pub fn sample(lattice: &SlabLattice, p_zero: f64, seed: u64) -> Result<EdgeConfig, ConfigError> {
    Ok(Field::new(lattice, p_zero, seed)?.materialize())
}

/// Edges whose weights are held fixed during conditional resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMask {
    frozen: BitVec<u64, Lsb0>,
}

impl FrozenMask {
    pub fn none(lattice: &SlabLattice) -> Self {
        FrozenMask { frozen: BitVec::repeat(false, lattice.edge_count()) }
    }

    pub fn all(lattice: &SlabLattice) -> Self {
        FrozenMask { frozen: BitVec::repeat(true, lattice.edge_count()) }
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn freeze(&mut self, idx: usize) {
        self.frozen.set(idx, true);
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen[idx]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.count_ones()
    }

    pub fn frozen_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter_ones()
    }

    /// Freezes every edge whose endpoints both satisfy `inside`.
    pub fn freeze_where(&mut self, lattice: &SlabLattice, mut inside: impl FnMut(usize) -> bool) {
        for (i, e) in lattice.edges().enumerate() {
            let (a, b) = lattice.endpoints(e);
            if inside(a) && inside(b) {
                self.frozen.set(i, true);
            }
        }
    }

    fn check(&self, lattice: &SlabLattice) -> Result<(), ConfigError> {
        if self.frozen.len() != lattice.edge_count() {
            return Err(ConfigError::MaskMismatch { mask: self.frozen.len(), lattice: lattice.edge_count() });
        }
        Ok(())
    }
}

/// `base` on frozen edges, the fresh field everywhere else.
pub struct Resampled<'a, B: Weights> {
    base: &'a B,
    mask: &'a FrozenMask,
    fresh: Field,
}

impl<'a, B: Weights> Resampled<'a, B> {
    pub fn new(base: &'a B, mask: &'a FrozenMask, p_zero: f64, seed: u64) -> Result<Self, ConfigError> {
        mask.check(base.lattice())?;
        Ok(Resampled { base, mask, fresh: Field::new(base.lattice(), p_zero, seed)? })
    }
}

impl<B: Weights> Weights for Resampled<'_, B> {
    fn lattice(&self) -> &SlabLattice {
        self.fresh.lattice()
    }

    #[inline]
    fn is_open(&self, e: EdgeRef) -> bool {
        if self.mask.is_frozen(self.fresh.lattice().edge_index(e)) {
            self.base.is_open(e)
        } else {
            self.fresh.is_open(e)
        }
    }
}

/// Keeps the frozen edges of `cfg` and draws every other edge afresh.
pub fn resample_outside(cfg: &EdgeConfig, mask: &FrozenMask, seed: u64) -> Result<EdgeConfig, ConfigError> {
    mask.check(&cfg.lattice)?;
    let fresh = Field::new(&cfg.lattice, cfg.p_zero, seed)?;
    let mut bits = cfg.bits.clone();
    for (i, e) in cfg.lattice.edges().enumerate() {
        if !mask.is_frozen(i) {
            bits.set(i, !fresh.is_open(e));
        }
    }
    Ok(EdgeConfig { lattice: cfg.lattice.clone(), bits, p_zero: cfg.p_zero, seed })
}

/// Explicit weights over a lattice, used to pin individual edges in tests and oracles.
#[derive(Debug, Clone)]
pub struct Pinned {
    lattice: SlabLattice,
    open: Vec<bool>,
}

impl Pinned {
    pub fn from_fn(lattice: &SlabLattice, mut open: impl FnMut(EdgeRef) -> bool) -> Self {
        Pinned { lattice: lattice.clone(), open: lattice.edges().map(&mut open).collect() }
    }

    pub fn set_open(&mut self, e: EdgeRef, open: bool) {
        let i = self.lattice.edge_index(e);
        self.open[i] = open;
    }

    pub fn to_config(&self) -> EdgeConfig {
        let closed: Vec<bool> = self.open.iter().map(|o| !o).collect();
        EdgeConfig::from_closed_bits(&self.lattice, &closed).expect("lengths match")
    }
}

impl Weights for Pinned {
    fn lattice(&self) -> &SlabLattice {
        &self.lattice
    }

    #[inline]
    fn is_open(&self, e: EdgeRef) -> bool {
        self.open[self.lattice.edge_index(e)]
    }
}

/// Convenience: edge between two adjacent vertex indices, if any.
pub fn edge_between(lattice: &SlabLattice, a: usize, b: usize) -> Option<EdgeRef> {
    let (lo, hi) = (a.min(b), a.max(b));
    Dir::ALL.into_iter().find_map(|d| lattice.edge_from(lo, d).filter(|e| lattice.endpoints(*e).1 == hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Vertex;

    #[test]
    fn extreme_probabilities() {
        let lat = SlabLattice::new(4, 1).unwrap();
        assert_eq!(sample(&lat, 1.0, 7).unwrap().closed_fraction(), 0.0);
        assert_eq!(sample(&lat, 0.0, 7).unwrap().closed_fraction(), 1.0);
        assert!(matches!(sample(&lat, 1.5, 7), Err(ConfigError::BadProbability(_))));
    }

    #[test]
    fn half_probability_fraction() {
        // 10^6 edges: binomial 3-sigma band is +-0.0015.
        let lat = SlabLattice::new(288, 1).unwrap();
        assert!(lat.edge_count() >= 1_000_000);
        let cfg = sample(&lat, 0.5, 20_240_601).unwrap();
        let zero = 1.0 - cfg.closed_fraction();
        assert!((0.4985..=0.5015).contains(&zero), "{zero}");
    }

    #[test]
    fn reproducible_and_lazy_agrees() {
        let lat = SlabLattice::new(6, 2).unwrap();
        let a = sample(&lat, 0.4, 99).unwrap();
        let b = sample(&lat, 0.4, 99).unwrap();
        assert_eq!(a, b);
        let f = Field::new(&lat, 0.4, 99).unwrap();
        for (i, e) in lat.edges().enumerate() {
            assert_eq!(f.is_open(e), a.is_open(e));
            assert_eq!(a.is_closed_index(i), !f.is_open(e));
        }
        assert_ne!(a, sample(&lat, 0.4, 100).unwrap());
    }

    #[test]
    fn coupled_in_probability() {
        let lat = SlabLattice::new(5, 1).unwrap();
        let lo = Field::new(&lat, 0.3, 5).unwrap();
        let hi = Field::new(&lat, 0.6, 5).unwrap();
        for e in lat.edges() {
            assert!(!lo.is_open(e) || hi.is_open(e));
        }
    }

    #[test]
    fn all_frozen_is_identity() {
        let lat = SlabLattice::new(4, 1).unwrap();
        let cfg = sample(&lat, 0.5, 1).unwrap();
        let out = resample_outside(&cfg, &FrozenMask::all(&lat), 2).unwrap();
        assert_eq!(out.closed_bits(), cfg.closed_bits());
    }

    #[test]
    fn mask_mismatch_rejected() {
        let a = SlabLattice::new(4, 1).unwrap();
        let b = SlabLattice::new(3, 1).unwrap();
        let cfg = sample(&a, 0.5, 1).unwrap();
        assert!(matches!(resample_outside(&cfg, &FrozenMask::none(&b), 2), Err(ConfigError::MaskMismatch { .. })));
    }

    #[test]
    fn unfrozen_resample_is_uncorrelated() {
        let lat = SlabLattice::new(35, 1).unwrap();
        let cfg = sample(&lat, 0.5, 11).unwrap();
        let out = resample_outside(&cfg, &FrozenMask::none(&lat), 12).unwrap();
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|i| f64::from(u8::from(cfg.is_closed_index(i)))).collect();
        let ys: Vec<f64> = (0..n).map(|i| f64::from(u8::from(out.is_closed_index(i)))).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n as f64).sqrt();
        let corr = cov / (sx * sy);
        // 4 / sqrt(n) = 0.04
        assert!(corr.abs() < 0.04, "{corr}");
    }

    #[test]
    fn frozen_edges_survive_and_law_is_preserved() {
        let lat = SlabLattice::new(6, 1).unwrap();
        let cfg = sample(&lat, 0.5, 3).unwrap();
        let mut mask = FrozenMask::none(&lat);
        mask.freeze_where(&lat, |v| lat.vertex(v).radius() <= 2);
        let frozen: Vec<usize> = mask.frozen_indices().collect();
        assert!(!frozen.is_empty());
        // Event depending only on frozen edges: at least half of them closed.
        let event = |c: &EdgeConfig| frozen.iter().filter(|&&i| c.is_closed_index(i)).count() * 2 >= frozen.len();
        let reference = event(&cfg);
        for s in 0..50 {
            let out = resample_outside(&cfg, &mask, 1000 + s).unwrap();
            for &i in &frozen {
                assert_eq!(out.is_closed_index(i), cfg.is_closed_index(i));
            }
            assert_eq!(event(&out), reference);
        }
        let view = Resampled::new(&cfg, &mask, 0.5, 1000).unwrap();
        let eager = resample_outside(&cfg, &mask, 1000).unwrap();
        for e in lat.edges() {
            assert_eq!(view.is_open(e), eager.is_open(e));
        }
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let s = 0xDEAD_BEEF;
        let a: Vec<u64> = (0..1000).map(|i| stream_value(substream(s, 0), i)).collect();
        let b: Vec<u64> = (0..1000).map(|i| stream_value(substream(s, 1), i)).collect();
        let a2: Vec<u64> = (0..1000).map(|i| stream_value(substream(s, 0), i)).collect();
        assert_eq!(a, a2);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn pooled_substreams_chi_square() {
        // 16 bins, 15 degrees of freedom; 1% critical value 30.578.
        let mut bins = [0u64; 16];
        let workers = 16;
        let per = 1000;
        for w in 0..workers {
            let s = substream(42, w);
            for i in 0..per {
                bins[(stream_value(s, i) >> 60) as usize] += 1;
            }
        }
        let expected = (workers * per) as f64 / 16.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 30.578, "{chi2}");
    }

    #[test]
    fn snapshot_round_trip_and_rejections() {
        let lat = SlabLattice::new(3, 2).unwrap();
        let cfg = sample(&lat, 0.37, 123).unwrap();
        let bytes = cfg.to_snapshot();
        let back = EdgeConfig::parse_snapshot(&bytes).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_snapshot(), bytes);
        assert!(EdgeConfig::parse_snapshot(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EdgeConfig::parse_snapshot(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(EdgeConfig::parse_snapshot(&magic).is_err());
        if !lat.edge_count().is_multiple_of(8) {
            let mut pad = bytes;
            *pad.last_mut().unwrap() |= 0x80;
            assert!(EdgeConfig::parse_snapshot(&pad).is_err());
        }
    }

    #[test]
    fn edge_between_finds_vertical() {
        let lat = SlabLattice::new(2, 1).unwrap();
        let a = lat.vertex_index(&Vertex::new(1, 1, 0)).unwrap();
        let b = lat.vertex_index(&Vertex::new(1, 1, 1)).unwrap();
        assert_eq!(edge_between(&lat, b, a), Some(EdgeRef { base: a, dir: Dir::Z }));
        assert_eq!(edge_between(&lat, a, a + 2), None);
    }
}
