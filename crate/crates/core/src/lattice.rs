//! Geometry of a finite window `[-L, L]^2 x {0, ..., k}` of the slab.
//!
//! Vertices are indexed layer-major: `v = (z * side + (y + L)) * side + (x + L)`
//! with `side = 2L + 1`. Every edge is stored under its smaller endpoint
//! together with the positive direction that reaches the larger endpoint, and
//! the dense edge index enumerates edges lexicographically by
//! `(min endpoint, max endpoint)`. That order is the global tie-break order
//! used by every deterministic selection in the crate.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("half width must be at least 1")]
    ZeroWidth,
    #[error("lattice with half width {half_width} and thickness {thickness} exceeds index capacity")]
    Capacity { half_width: u32, thickness: u32 },
    #[error("region {0} does not fit inside the window of half width {1}")]
    OutOfWindow(String, u32),
    #[error("vertex index {0} out of range")]
    BadVertex(usize),
}

/// Positive lattice direction; an edge is `(v, dir)` with `v` its smaller endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Dir {
    pub const ALL: [Dir; 3] = [Dir::X, Dir::Y, Dir::Z];

    pub fn from_index(i: usize) -> Dir {
        match i {
            0 => Dir::X,
            1 => Dir::Y,
            _ => Dir::Z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vertex {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Vertex {
    pub const ORIGIN: Vertex = Vertex { x: 0, y: 0, z: 0 };

    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Vertex { x, y, z }
    }

    /// Sup-norm of the projection to the plane.
    pub fn radius(&self) -> i32 {
        self.x.abs().max(self.y.abs())
    }

    pub fn project(&self) -> (i32, i32) {
        (self.x, self.y)
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// Nearest-neighbour edge, identified by its smaller endpoint and direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeRef {
    pub base: usize,
    pub dir: Dir,
}

/// Sets of slab vertices used as query sources, targets and frozen regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `S(r)`: `max(|x|, |y|) <= r`, all layers.
    Box(u32),
    /// `A(p) = S(2^{p+1}) \ S(2^p)`.
    Annulus(u32),
    /// `S(outer) \ S(inner)`.
    Ring { inner: u32, outer: u32 },
    /// `{x >= n}` intersected with the window.
    HalfSlab(i32),
    /// Explicit vertex indices.
    Explicit(Vec<usize>),
}

impl Region {
    /// Radii `(inner, outer)` of an annular region, if it is one.
    pub fn ring_radii(&self) -> Option<(u32, u32)> {
        match *self {
            Region::Annulus(p) => Some((1u32 << p, 1u32 << (p + 1))),
            Region::Ring { inner, outer } => Some((inner, outer)),
            _ => None,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Box(r) => write!(f, "Box({r})"),
            Region::Annulus(p) => write!(f, "Annulus({p})"),
            Region::Ring { inner, outer } => write!(f, "Ring({inner},{outer})"),
            Region::HalfSlab(n) => write!(f, "HalfSlab({n})"),
            Region::Explicit(v) => write!(f, "Explicit[{}]", v.len()),
        }
    }
}

/// Immutable finite window of the slab `Z^2 x {0..k}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabLattice {
    half_width: u32,
    thickness: u32,
    side: usize,
    layer: usize,
    vertex_count: usize,
    edge_count: usize,
}

impl SlabLattice {
    pub fn new(half_width: u32, thickness: u32) -> Result<Self, LatticeError> {
        if half_width == 0 {
            return Err(LatticeError::ZeroWidth);
        }
        let cap = LatticeError::Capacity { half_width, thickness };
        let side = (half_width as usize).checked_mul(2).and_then(|s| s.checked_add(1)).ok_or(cap.clone())?;
        let layer = side.checked_mul(side).ok_or(cap.clone())?;
        let layers = (thickness as usize).checked_add(1).ok_or(cap.clone())?;
        let vertex_count = layer.checked_mul(layers).ok_or(cap.clone())?;
        // Vertex ids are stored as u32 in search frontiers; slot keys are 3v + dir.
        if vertex_count > u32::MAX as usize / 3 {
            return Err(cap);
        }
        let in_plane = 2 * side * (side - 1);
        let edge_count = layers * in_plane + thickness as usize * layer;
        Ok(SlabLattice { half_width, thickness, side, layer, vertex_count, edge_count })
    }

    pub fn half_width(&self) -> u32 {
        self.half_width
    }

    /// Number of layers above the base plane, `k`.
    pub fn thickness(&self) -> u32 {
        self.thickness
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn layer_size(&self) -> usize {
        self.layer
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        let l = self.half_width as i32;
        v.x.abs() <= l && v.y.abs() <= l && v.z >= 0 && v.z <= self.thickness as i32
    }

    pub fn vertex_index(&self, v: &Vertex) -> Option<usize> {
        if !self.contains(v) {
            return None;
        }
        let l = self.half_width as i32;
        Some((v.z as usize * self.side + (v.y + l) as usize) * self.side + (v.x + l) as usize)
    }

    pub fn vertex(&self, idx: usize) -> Vertex {
        debug_assert!(idx < self.vertex_count);
        let (ix, iy, z) = self.grid_coords(idx);
        let l = self.half_width as i32;
        Vertex { x: ix as i32 - l, y: iy as i32 - l, z: z as i32 }
    }

    /// Unshifted coordinates `(x + L, y + L, z)`.
    #[inline]
    pub fn grid_coords(&self, idx: usize) -> (usize, usize, usize) {
        let z = idx / self.layer;
        let rem = idx - z * self.layer;
        let iy = rem / self.side;
        (rem - iy * self.side, iy, z)
    }

    pub fn origin(&self) -> usize {
        self.vertex_index(&Vertex::ORIGIN).expect("origin is always inside the window")
    }

    /// Plane column `(x + L) + (y + L) * side` of a vertex.
    #[inline]
    pub fn column_of(&self, idx: usize) -> usize {
        idx % self.layer
    }

    /// Whether the vertex lies on the lateral boundary of the window.
    pub fn on_window_boundary(&self, idx: usize) -> bool {
        let (ix, iy, _) = self.grid_coords(idx);
        ix == 0 || iy == 0 || ix + 1 == self.side || iy + 1 == self.side
    }

    /// Edge in direction `dir` out of `v`, if the neighbour lies in the window.
    #[inline]
    pub fn edge_from(&self, v: usize, dir: Dir) -> Option<EdgeRef> {
        let (ix, iy, z) = self.grid_coords(v);
        let ok = match dir {
            Dir::X => ix + 1 < self.side,
            Dir::Y => iy + 1 < self.side,
            Dir::Z => z < self.thickness as usize,
        };
        ok.then_some(EdgeRef { base: v, dir })
    }

    #[inline]
    pub fn step(&self, dir: Dir) -> usize {
        match dir {
            Dir::X => 1,
            Dir::Y => self.side,
            Dir::Z => self.layer,
        }
    }

    pub fn endpoints(&self, e: EdgeRef) -> (usize, usize) {
        (e.base, e.base + self.step(e.dir))
    }

    /// Dense canonical index of an edge, in `(min endpoint, max endpoint)` order.
    pub fn edge_index(&self, e: EdgeRef) -> usize {
        let s = self.side;
        let k = self.thickness as usize;
        let (ix, iy, z) = self.grid_coords(e.base);
        let vz = usize::from(z < k);
        let vy = usize::from(iy + 1 < s);
        let vx = usize::from(ix + 1 < s);
        let full_layer = 2 * s * (s - 1) + self.layer;
        let row = (s - 1) + s + vz * s;
        let mut idx = z * full_layer + iy * row + ix * (1 + vy + vz);
        if e.dir as usize > 0 {
            idx += vx;
        }
        if e.dir as usize > 1 {
            idx += vy;
        }
        idx
    }

    /// Inverse of [`SlabLattice::edge_index`].
    pub fn edge_at(&self, idx: usize) -> Option<EdgeRef> {
        if idx >= self.edge_count {
            return None;
        }
        let s = self.side;
        let k = self.thickness as usize;
        let full_layer = 2 * s * (s - 1) + self.layer;
        let z = (idx / full_layer).min(k);
        let rem = idx - z * full_layer;
        let vz = usize::from(z < k);
        let row = (s - 1) + s + vz * s;
        let (iy, rem) = if rem >= (s - 1) * row { (s - 1, rem - (s - 1) * row) } else { (rem / row, rem % row) };
        let vy = usize::from(iy + 1 < s);
        let per = 1 + vy + vz;
        let (ix, mut slot) = if rem >= (s - 1) * per { (s - 1, rem - (s - 1) * per) } else { (rem / per, rem % per) };
        let valid = [ix + 1 < s, vy == 1, vz == 1];
        let base = (z * s + iy) * s + ix;
        for (d, ok) in valid.iter().enumerate() {
            if *ok {
                if slot == 0 {
                    return Some(EdgeRef { base, dir: Dir::from_index(d) });
                }
                slot -= 1;
            }
        }
        None
    }

    /// Neighbours of `v` with the connecting edge, in increasing edge-index order
    /// (which coincides with increasing neighbour index).
    #[inline]
    pub fn neighbors(&self, v: usize) -> Neighbors {
        let (ix, iy, z) = self.grid_coords(v);
        let mut out = Neighbors { items: [(0, EdgeRef { base: 0, dir: Dir::X }); 6], len: 0 };
        let mut push = |w: usize, e: EdgeRef| {
            out.items[out.len] = (w, e);
            out.len += 1;
        };
        if z > 0 {
            let w = v - self.layer;
            push(w, EdgeRef { base: w, dir: Dir::Z });
        }
        if iy > 0 {
            let w = v - self.side;
            push(w, EdgeRef { base: w, dir: Dir::Y });
        }
        if ix > 0 {
            let w = v - 1;
            push(w, EdgeRef { base: w, dir: Dir::X });
        }
        if ix + 1 < self.side {
            push(v + 1, EdgeRef { base: v, dir: Dir::X });
        }
        if iy + 1 < self.side {
            push(v + self.side, EdgeRef { base: v, dir: Dir::Y });
        }
        if z < self.thickness as usize {
            push(v + self.layer, EdgeRef { base: v, dir: Dir::Z });
        }
        out
    }

    pub fn edges(&self) -> impl Iterator<Item = EdgeRef> + '_ {
        (0..self.vertex_count).flat_map(move |v| Dir::ALL.into_iter().filter_map(move |d| self.edge_from(v, d)))
    }

    /// The `k + 1` slab vertices over a plane point, if it lies in the window.
    pub fn fiber(&self, x: i32, y: i32) -> Vec<Vertex> {
        (0..=self.thickness as i32).map(|z| Vertex { x, y, z }).filter(|v| self.contains(v)).collect()
    }

    pub fn region_contains(&self, r: &Region, idx: usize) -> bool {
        let v = self.vertex(idx);
        match r {
            Region::Box(rad) => v.radius() <= *rad as i32,
            Region::Annulus(_) | Region::Ring { .. } => {
                let (inner, outer) = r.ring_radii().unwrap_or((0, 0));
                let rad = v.radius();
                rad > inner as i32 && rad <= outer as i32
            }
            Region::HalfSlab(n) => v.x >= *n,
            Region::Explicit(list) => list.contains(&idx),
        }
    }

    fn check_region(&self, r: &Region) -> Result<(), LatticeError> {
        let l = self.half_width;
        let fits = match r {
            Region::Box(rad) => *rad <= l,
            Region::Annulus(p) => *p < 31 && (1u64 << (p + 1)) <= l as u64,
            Region::Ring { inner, outer } => inner < outer && *outer <= l,
            Region::HalfSlab(n) => *n <= l as i32,
            Region::Explicit(list) => list.iter().all(|&v| v < self.vertex_count),
        };
        if fits {
            Ok(())
        } else {
            Err(LatticeError::OutOfWindow(r.to_string(), l))
        }
    }

    /// Sorted vertex indices of a region.
    pub fn region_vertices(&self, r: &Region) -> Result<Vec<usize>, LatticeError> {
        self.check_region(r)?;
        if let Region::Explicit(list) = r {
            let mut out = list.clone();
            out.sort_unstable();
            out.dedup();
            return Ok(out);
        }
        Ok((0..self.vertex_count).filter(|&v| self.region_contains(r, v)).collect())
    }
}

/// Fixed-capacity neighbour list returned by [`SlabLattice::neighbors`].
#[derive(Clone, Copy)]
pub struct Neighbors {
    items: [(usize, EdgeRef); 6],
    len: usize,
}

impl Neighbors {
    pub fn as_slice(&self) -> &[(usize, EdgeRef)] {
        &self.items[..self.len]
    }
}

impl IntoIterator for Neighbors {
    type Item = (usize, EdgeRef);
    type IntoIter = std::iter::Take<std::array::IntoIter<(usize, EdgeRef), 6>>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.into_iter().take(self.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    // Counts edges by scanning every ordered vertex pair at L1 distance one.
    fn brute_edge_count(l: i32, k: i32) -> usize {
        let mut pts = Vec::new();
        for z in 0..=k {
            for y in -l..=l {
                for x in -l..=l {
                    pts.push((x, y, z));
                }
            }
        }
        let set: HashSet<_> = pts.iter().copied().collect();
        let mut n = 0;
        for &(x, y, z) in &pts {
            for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                if set.contains(&(x + dx, y + dy, z + dz)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn small_counts() {
        let a = SlabLattice::new(1, 0).unwrap();
        assert_eq!((a.vertex_count(), a.edge_count()), (9, 12));
        let b = SlabLattice::new(1, 1).unwrap();
        assert_eq!((b.vertex_count(), b.edge_count()), (18, 33));
    }

    #[test]
    fn edge_count_matches_enumeration() {
        let lat = SlabLattice::new(64, 2).unwrap();
        assert_eq!(lat.edge_count(), brute_edge_count(64, 2));
        assert_eq!(lat.edge_count(), 132_354);
        for (l, k) in [(1, 0), (2, 3), (5, 1)] {
            assert_eq!(SlabLattice::new(l, k).unwrap().edge_count(), brute_edge_count(l as i32, k as i32));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(SlabLattice::new(0, 1), Err(LatticeError::ZeroWidth));
        assert!(matches!(SlabLattice::new(u32::MAX / 2, 4), Err(LatticeError::Capacity { .. })));
    }

    #[test]
    fn edge_index_is_lexicographic_and_dense() {
        let lat = SlabLattice::new(3, 2).unwrap();
        let edges: Vec<_> = lat.edges().collect();
        assert_eq!(edges.len(), lat.edge_count());
        let mut prev = None;
        for (i, e) in edges.iter().enumerate() {
            assert_eq!(lat.edge_index(*e), i);
            assert_eq!(lat.edge_at(i), Some(*e));
            let key = lat.endpoints(*e);
            if let Some(p) = prev {
                assert!(p < key);
            }
            prev = Some(key);
        }
        assert_eq!(lat.edge_at(lat.edge_count()), None);
    }

    #[test]
    fn neighbors_sorted_by_edge_index() {
        let lat = SlabLattice::new(2, 2).unwrap();
        for v in 0..lat.vertex_count() {
            let idx: Vec<_> = lat.neighbors(v).into_iter().map(|(_, e)| lat.edge_index(e)).collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (w, e) in lat.neighbors(v) {
                let (a, b) = lat.endpoints(e);
                assert!((a, b) == (v.min(w), v.max(w)));
            }
        }
    }

    #[test]
    fn annulus_zero_on_small_window() {
        let lat = SlabLattice::new(2, 0).unwrap();
        let a = lat.region_vertices(&Region::Annulus(0)).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|&v| lat.vertex(v).radius() == 2));
        assert!(lat.region_vertices(&Region::Annulus(1)).is_err());
    }

    #[test]
    fn half_slab_at_edge_is_one_plane() {
        let lat = SlabLattice::new(3, 1).unwrap();
        let h = lat.region_vertices(&Region::HalfSlab(3)).unwrap();
        assert_eq!(h.len(), 7 * 2);
        assert!(h.iter().all(|&v| lat.vertex(v).x == 3));
    }

    #[test]
    fn annulus_two_matches_scan() {
        let lat = SlabLattice::new(8, 1).unwrap();
        let a = lat.region_vertices(&Region::Annulus(2)).unwrap();
        let mut n = 0;
        for z in 0..=1 {
            for y in -8i32..=8 {
                for x in -8i32..=8 {
                    let r = x.abs().max(y.abs());
                    if r > 4 && r <= 8 {
                        n += 1;
                        assert!(a.binary_search(&lat.vertex_index(&Vertex::new(x, y, z)).unwrap()).is_ok());
                    }
                }
            }
        }
        assert_eq!(a.len(), n);
        let cols: HashSet<_> = a.iter().map(|&v| lat.vertex(v).project()).collect();
        assert_eq!(cols.len() * 2, a.len());
    }

    #[test]
    fn region_algebra() {
        let lat = SlabLattice::new(8, 1).unwrap();
        for p in 0..3 {
            let inner: HashSet<_> = lat.region_vertices(&Region::Box(1 << p)).unwrap().into_iter().collect();
            let outer: HashSet<_> = lat.region_vertices(&Region::Box(1 << (p + 1))).unwrap().into_iter().collect();
            let ann: HashSet<_> = lat.region_vertices(&Region::Annulus(p)).unwrap().into_iter().collect();
            assert!(inner.is_subset(&outer));
            assert!(ann.is_disjoint(&inner));
            assert_eq!(ann.union(&inner).copied().collect::<HashSet<_>>(), outer);
        }
        let a0: HashSet<_> = lat.region_vertices(&Region::Annulus(0)).unwrap().into_iter().collect();
        let a2: HashSet<_> = lat.region_vertices(&Region::Annulus(2)).unwrap().into_iter().collect();
        assert!(a0.is_disjoint(&a2));
    }

    #[test]
    fn projection_fibers() {
        let lat = SlabLattice::new(4, 2).unwrap();
        assert_eq!(Vertex::new(3, -2, 0).project(), (3, -2));
        assert_eq!(lat.fiber(0, 0), vec![Vertex::new(0, 0, 0), Vertex::new(0, 0, 1), Vertex::new(0, 0, 2)]);
        let mut counts = std::collections::HashMap::new();
        for v in 0..lat.vertex_count() {
            *counts.entry(lat.vertex(v).project()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 81);
        assert!(counts.values().all(|&c| c == 3));
    }

    proptest::proptest! {
        #[test]
        fn vertex_round_trip(l in 1u32..12, k in 0u32..4, seed in 0usize..10_000) {
            let lat = SlabLattice::new(l, k).unwrap();
            let v = seed % lat.vertex_count();
            proptest::prop_assert_eq!(lat.vertex_index(&lat.vertex(v)), Some(v));
            let e = seed % lat.edge_count();
            proptest::prop_assert_eq!(lat.edge_at(e).map(|r| lat.edge_index(r)), Some(e));
        }
    }
}
