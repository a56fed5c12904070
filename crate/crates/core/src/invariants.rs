//! Per-sample geometric checks: circuit nesting across scales, passage-time
//! spread along a circuit, and the sandwich, monotonicity and splitting
//! inequalities between passage times.

use serde::{Deserialize, Serialize};

use crate::circuits::{circuit_at_scale, Circuit, CircuitError};
use crate::config::Weights;
use crate::lattice::{SlabLattice, Vertex};
use crate::martingale::scale_of;
use crate::passage::{b0n, nearest_vertex, passage_time, s_n, settle_from, PassageError, Scratch, VertexSet};

#[derive(Debug, thiserror::Error)]
pub enum InvariantError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Passage(#[from] PassageError),
}

/// Counts of checks performed and descriptions of the failed ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl Tally {
    pub fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations.push(what());
        }
    }

    pub fn merge(&mut self, other: Tally) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }

    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// For `p1 < p2`: the same circuit when `m(p1) = m(p2)`, otherwise `C_{p1}`
/// strictly inside `C_{p2}`.
pub fn nested(lat: &SlabLattice, lower: (u32, &Circuit), upper: (u32, &Circuit)) -> bool {
    if lower.0 > upper.0 {
        return false;
    }
    if lower.0 == upper.0 {
        return lower.1.vertices == upper.1.vertices;
    }
    let int = upper.1.interior(lat);
    lower.1.vertices.iter().all(|&v| {
        let x = lat.vertex(v);
        int.strictly_inside(x.x, x.y)
    })
}

/// `max_{x in C x {0..k}} T(0, x) - T(0, C x {0..k})`.
pub fn circuit_spread<W: Weights>(w: &W, scratch: &mut Scratch, c: &Circuit) -> Result<u32, PassageError> {
    let lat = w.lattice();
    let thick = c.thickened(lat);
    let base = passage_time(w, scratch, &VertexSet::Point(lat.origin()), &VertexSet::points(thick.clone()))?.value;
    let limit = base + lat.thickness() + 1;
    settle_from(w, scratch, &VertexSet::Point(lat.origin()), limit)?;
    Ok(thick.iter().map(|&v| scratch.distance(v).unwrap_or(limit + 1)).max().unwrap_or(base) - base)
}

/// Circuit checks on one configuration over scales `0..=p_max`: nesting of
/// every pair of scales and the spread bound `k` on every circuit.
pub fn circuit_checks<W: Weights>(w: &W, scratch: &mut Scratch, p_max: u32) -> Result<Tally, InvariantError> {
    let lat = w.lattice();
    let mut tally = Tally::default();
    let mut found: Vec<(u32, u32, Circuit)> = Vec::new();
    for p in 0..=p_max {
        let reuse = found.iter().find(|(q, m, _)| *q < p && *m >= p).map(|(_, m, c)| (*m, c.clone()));
        let at = match reuse {
            Some(x) => Some(x),
            None => circuit_at_scale(w, p, p_max)?,
        };
        if let Some((m, c)) = at {
            found.push((p, m, c));
        }
    }
    let k = lat.thickness();
    for (p, _, c) in &found {
        if found.iter().any(|(q, _, _)| q < p) && found.iter().any(|(q, _, d)| q < p && d == c) {
            continue;
        }
        let spread = circuit_spread(w, scratch, c)?;
        tally.record(spread <= k, || format!("circuit at scale {p}: spread {spread} > {k}"));
    }
    for (i, (p1, m1, c1)) in found.iter().enumerate() {
        for (p2, m2, c2) in &found[i + 1..] {
            tally.record(nested(lat, (*m1, c1), (*m2, c2)), || {
                format!("scales {p1} < {p2}: circuits at m = {m1}, {m2} not nested")
            });
        }
    }
    Ok(tally)
}

/// `s_n <= b(0, n) <= T(0, C_{m(q)})` with `2^(q-1) < n <= 2^q`, and
/// `s_m <= s_n` for `m <= n`.
pub fn passage_checks<W: Weights>(w: &W, scratch: &mut Scratch, n: u32, p_max: u32) -> Result<Tally, InvariantError> {
    let lat = w.lattice();
    let mut tally = Tally::default();
    let b = b0n(w, scratch, n)?.value;
    let s = s_n(w, scratch, n)?.value;
    tally.record(s <= b, || format!("s_{n} = {s} > b(0,{n}) = {b}"));
    let half = (n / 2).max(1);
    let sm = s_n(w, scratch, half)?.value;
    tally.record(sm <= s, || format!("s_{half} = {sm} > s_{n} = {s}"));
    let q = scale_of(n);
    if q <= p_max {
        if let Some((m, c)) = circuit_at_scale(w, q, p_max)? {
            let t = passage_time(w, scratch, &VertexSet::Point(lat.origin()), &VertexSet::points(c.thickened(lat)))?.value;
            tally.record(b <= t, || format!("b(0,{n}) = {b} > T(0, C_m({q})) = {t} at m = {m}"));
        }
    }
    Ok(tally)
}

/// `T(0, v) >= T(0, boundary S(r)) + T(v, boundary (v + S(r)))` for the vertex
/// `v` nearest `n u` and the largest `r` with disjoint boxes.
pub fn split_check<W: Weights>(w: &W, scratch: &mut Scratch, n: u32, u: (f64, f64)) -> Result<Tally, InvariantError> {
    let lat = w.lattice();
    let mut tally = Tally::default();
    let v = nearest_vertex(n, u)?;
    let d = v.radius();
    if d < 2 {
        return Ok(tally);
    }
    let r = (d - 1) / 2;
    let target = lat.vertex_index(&v).ok_or(PassageError::WindowTooSmall { half_width: lat.half_width(), scale: n })?;
    let origin = lat.origin();
    let whole = passage_time(w, scratch, &VertexSet::Point(origin), &VertexSet::Point(target))?.value;
    let first = passage_time(w, scratch, &VertexSet::Point(origin), &VertexSet::BoxBoundary(r as u32))?.value;
    let ring: Vec<usize> = (0..=lat.thickness() as i32)
        .flat_map(|z| {
            (-r..=r).flat_map(move |a| {
                (-r..=r).filter_map(move |b| (a.abs() == r || b.abs() == r).then_some(Vertex::new(v.x + a, v.y + b, z)))
            })
        })
        .filter_map(|x| lat.vertex_index(&x))
        .collect();
    let second = passage_time(w, scratch, &VertexSet::Point(target), &VertexSet::points(ring))?.value;
    tally.record(whole >= first + second, || format!("T(0,{v}) = {whole} < {first} + {second} with r = {r}"));
    Ok(tally)
}
