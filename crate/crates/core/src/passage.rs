//! Passage times `T(A, B)` with {0,1} edge weights.
//!
//! All queries run a level-synchronous 0-1 breadth-first search, FIFO within
//! each level so parent chains are short-hop geodesics, and are `O(V + E)` in
//! the explored part of the window. Search buffers live in a
//! reusable [`Scratch`] whose entries are invalidated by a generation stamp,
//! so repeated queries on a large window never clear memory.

use std::collections::VecDeque;

use thiserror::Error;

use crate::config::Weights;
use crate::lattice::{EdgeRef, SlabLattice, Vertex};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PassageError {
    #[error("source set is empty")]
    EmptySource,
    #[error("target set is empty")]
    EmptyTarget,
    #[error("target unreachable inside the window")]
    Disconnected,
    #[error("window half width {half_width} too small for scale {scale}")]
    WindowTooSmall { half_width: u32, scale: u32 },
    #[error("direction must be a unit vector")]
    NotUnit,
    #[error("geodesic does not meet the target set")]
    NoIntersection,
}

/// Query endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VertexSet {
    Point(usize),
    /// Sorted, deduplicated vertex indices.
    Points(Vec<usize>),
    /// `H_n = {x >= n}`.
    HalfSlab(i32),
    /// `boundary S(r)`: vertices with `max(|x|, |y|) = r`.
    BoxBoundary(u32),
}

impl VertexSet {
    pub fn points(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        v.dedup();
        VertexSet::Points(v)
    }

    #[inline]
    pub fn contains(&self, lat: &SlabLattice, v: usize) -> bool {
        match self {
            VertexSet::Point(p) => *p == v,
            VertexSet::Points(list) => list.binary_search(&v).is_ok(),
            VertexSet::HalfSlab(n) => {
                let (ix, _, _) = lat.grid_coords(v);
                ix as i64 - lat.half_width() as i64 >= *n as i64
            }
            VertexSet::BoxBoundary(r) => lat.vertex(v).radius() == *r as i32,
        }
    }

    pub fn members(&self, lat: &SlabLattice) -> Vec<usize> {
        match self {
            VertexSet::Point(p) => vec![*p],
            VertexSet::Points(list) => list.clone(),
            _ => (0..lat.vertex_count()).filter(|&v| self.contains(lat, v)).collect(),
        }
    }

    fn size_hint(&self, lat: &SlabLattice) -> usize {
        let layers = lat.thickness() as usize + 1;
        match self {
            VertexSet::Point(_) => 1,
            VertexSet::Points(list) => list.len(),
            VertexSet::HalfSlab(n) => {
                let cols = (lat.half_width() as i64 - *n as i64 + 1).max(0) as usize;
                cols * lat.side() * layers
            }
            VertexSet::BoxBoundary(r) => 8 * (*r as usize).max(1) * layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageResult {
    pub value: u32,
    /// Vertex sequence of the geodesic, source first.
    pub geodesic: Option<Vec<usize>>,
    pub touched_boundary: bool,
}

impl PassageResult {
    /// Edges of the geodesic in path order.
    pub fn geodesic_edges(&self, lat: &SlabLattice) -> Option<Vec<EdgeRef>> {
        self.geodesic.as_ref().map(|path| path_edges(lat, path))
    }
}

pub fn path_edges(lat: &SlabLattice, path: &[usize]) -> Vec<EdgeRef> {
    path.windows(2)
        .map(|w| crate::config::edge_between(lat, w[0], w[1]).expect("consecutive path vertices are adjacent"))
        .collect()
}

/// Sum of edge weights along a vertex path.
pub fn path_weight<W: Weights>(w: &W, path: &[usize]) -> u32 {
    path_edges(w.lattice(), path).into_iter().map(|e| w.weight(e)).sum()
}

/// First vertex of a geodesic that lies in a target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeodesicEntry {
    pub index: usize,
    pub vertex: usize,
}

/// Reusable search buffers sized to one lattice.
#[derive(Debug, Clone)]
pub struct Scratch {
    stamp: Vec<u32>,
    dist: Vec<u32>,
    parent: Vec<u32>,
    mark: Vec<u32>,
    dist_b: Vec<u32>,
    parent_b: Vec<u32>,
    generation: u32,
    deque: VecDeque<(u32, u32)>,
}

const NO_PARENT: u32 = u32::MAX;

impl Scratch {
    pub fn new(lat: &SlabLattice) -> Self {
        let n = lat.vertex_count();
        Scratch {
            stamp: vec![0; n],
            dist: vec![0; n],
            parent: vec![NO_PARENT; n],
            mark: vec![0; n],
            dist_b: vec![0; n],
            parent_b: vec![NO_PARENT; n],
            generation: 0,
            deque: VecDeque::new(),
        }
    }

    pub fn fits(&self, lat: &SlabLattice) -> bool {
        self.stamp.len() == lat.vertex_count()
    }

    fn begin(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.fill(0);
            self.mark.fill(0);
            self.generation = 1;
        }
        self.deque.clear();
    }

    #[inline]
    fn seen(&self, v: usize) -> bool {
        self.stamp[v] == self.generation
    }

    /// Distance recorded by the most recent search, if `v` was reached.
    pub fn distance(&self, v: usize) -> Option<u32> {
        self.seen(v).then(|| self.dist[v])
    }
}

/// Outcome of a raw search: value and the target vertex where it stopped.
struct Hit {
    value: u32,
    at: usize,
}

/// 0-1 BFS from `src`. Stops at the first settled vertex of `dst`, or, when
/// `dst` is `None`, once every vertex within `limit` is settled.
fn search<W: Weights>(
    w: &W,
    scratch: &mut Scratch,
    src: &[usize],
    dst: Option<&VertexSet>,
    limit: u32,
) -> Option<Hit> {
    let lat = w.lattice();
    scratch.begin();
    for &s in src {
        scratch.stamp[s] = scratch.generation;
        scratch.dist[s] = 0;
        scratch.parent[s] = NO_PARENT;
        scratch.deque.push_back((s as u32, 0));
    }
    // Levels are processed FIFO so the parent tree holds short-hop geodesics.
    let mut level = 0u32;
    let mut next: Vec<usize> = Vec::new();
    loop {
        if level > limit {
            break;
        }
        while let Some((u, d)) = scratch.deque.pop_front() {
            let u = u as usize;
            if d != scratch.dist[u] {
                continue;
            }
            if let Some(t) = dst {
                if t.contains(lat, u) {
                    scratch.deque.clear();
                    return Some(Hit { value: d, at: u });
                }
            }
            for (v, e) in lat.neighbors(u) {
                let nd = d + w.weight(e);
                if !scratch.seen(v) || nd < scratch.dist[v] {
                    scratch.stamp[v] = scratch.generation;
                    scratch.dist[v] = nd;
                    scratch.parent[v] = u as u32;
                    if nd == d {
                        scratch.deque.push_back((v as u32, nd));
                    } else {
                        next.push(v);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        level += 1;
        for v in next.drain(..) {
            if scratch.dist[v] == level {
                scratch.deque.push_back((v as u32, level));
            }
        }
    }
    scratch.deque.clear();
    None
}

/// One side of [`bidirectional`]: side A uses `stamp`/`dist`/`parent` and
/// side B `mark`/`dist_b`/`parent_b`, so both share one [`Scratch`].
#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    A,
    B,
}

impl Scratch {
    #[inline]
    fn side_dist(&self, side: Side, v: usize) -> Option<u32> {
        match side {
            Side::A => (self.stamp[v] == self.generation).then(|| self.dist[v]),
            Side::B => (self.mark[v] == self.generation).then(|| self.dist_b[v]),
        }
    }

    #[inline]
    fn side_set(&mut self, side: Side, v: usize, d: u32, from: u32) {
        match side {
            Side::A => {
                self.stamp[v] = self.generation;
                self.dist[v] = d;
                self.parent[v] = from;
            }
            Side::B => {
                self.mark[v] = self.generation;
                self.dist_b[v] = d;
                self.parent_b[v] = from;
            }
        }
    }

    fn side_chain(&self, side: Side, end: usize) -> impl Iterator<Item = usize> + '_ {
        let parents = if side == Side::A { &self.parent } else { &self.parent_b };
        std::iter::successors(Some(end), move |&v| (parents[v] != NO_PARENT).then(|| parents[v] as usize))
    }
}

/// Level-synchronous 0-1 search from both ends. After the two sides have
/// settled levels `a` and `b`, every path of cost at most `a + b + 1` has an
/// edge (or vertex) joining the two settled sets, so the best junction found
/// is exact once it is at most `a + b + 1`. The flag reports whether the
/// optimal path through the best junction meets the window boundary.
fn bidirectional<W: Weights>(w: &W, scratch: &mut Scratch, a: &[usize], b: &[usize]) -> Option<(u32, bool)> {
    let lat = w.lattice();
    scratch.begin();
    let mut best = u32::MAX;
    // Junction of the best path: last vertex on side A and first on side B.
    let mut junction = (usize::MAX, usize::MAX);
    let mut level = [0u32, 0u32];
    let mut next: [Vec<usize>; 2] = [a.to_vec(), b.to_vec()];
    let mut done = [false, false];
    for (i, side) in [Side::A, Side::B].into_iter().enumerate() {
        for &s in &next[i] {
            scratch.side_set(side, s, 0, NO_PARENT);
        }
    }
    let mut started = [false, false];
    let mut queue: VecDeque<usize> = VecDeque::new();
    loop {
        // Expand the side with the smaller pending frontier.
        let a_turn = !done[0] && (done[1] || !started[0] || (started[1] && next[0].len() <= next[1].len()));
        let i = if a_turn { 0 } else { 1 };
        let (side, other) = if i == 0 { (Side::A, Side::B) } else { (Side::B, Side::A) };
        let l = if started[i] { level[i] + 1 } else { 0 };
        // Once both sides are under way, no path cheaper than `floor` is left.
        let floor = if started[0] && started[1] { l + level[1 - i] + 1 } else { 0 };
        let mut frontier = std::mem::take(&mut next[i]);
        frontier.retain(|&v| scratch.side_dist(side, v) == Some(l));
        queue.clear();
        queue.extend(frontier.iter().copied());
        while let Some(u) = queue.pop_front() {
            if best <= floor {
                return Some((best, junction_touches(lat, scratch, junction)));
            }
            if let Some(d) = scratch.side_dist(other, u) {
                if l + d < best {
                    best = l + d;
                    junction = (u, u);
                }
            }
            for (v, e) in lat.neighbors(u) {
                let t = w.weight(e);
                if let Some(d) = scratch.side_dist(other, v) {
                    if l + t + d < best {
                        best = l + t + d;
                        junction = if side == Side::A { (u, v) } else { (v, u) };
                    }
                }
                match scratch.side_dist(side, v) {
                    Some(d) if d <= l + t => {}
                    _ => {
                        scratch.side_set(side, v, l + t, u as u32);
                        if t == 0 {
                            queue.push_back(v);
                        } else {
                            next[i].push(v);
                        }
                    }
                }
            }
        }
        started[i] = true;
        level[i] = l;
        if next[i].is_empty() {
            done[i] = true;
        }
        if started[0] && started[1] && best <= level[0] + level[1] + 1 {
            return Some((best, junction_touches(lat, scratch, junction)));
        }
        if done[i] {
            // Every vertex reachable from this side is settled.
            return (best != u32::MAX).then(|| (best, junction_touches(lat, scratch, junction)));
        }
    }
}

/// Whether the path through junction `(a, b)` meets the window boundary.
fn junction_touches(lat: &SlabLattice, scratch: &Scratch, (a, b): (usize, usize)) -> bool {
    scratch.side_chain(Side::A, a).chain(scratch.side_chain(Side::B, b)).any(|v| lat.on_window_boundary(v))
}

fn parent_path(scratch: &Scratch, end: usize) -> Vec<usize> {
    let mut path = vec![end];
    let mut cur = end;
    while scratch.parent[cur] != NO_PARENT {
        cur = scratch.parent[cur] as usize;
        path.push(cur);
    }
    path.reverse();
    path
}

/// `T(src, dst)`. The frontier starts from the smaller of the two sets.
pub fn passage_time<W: Weights>(
    w: &W,
    scratch: &mut Scratch,
    src: &VertexSet,
    dst: &VertexSet,
) -> Result<PassageResult, PassageError> {
    let lat = w.lattice();
    let (from, to) = if src.size_hint(lat) <= dst.size_hint(lat) { (src, dst) } else { (dst, src) };
    let sources = from.members(lat);
    if sources.is_empty() {
        return Err(if std::ptr::eq(from, src) { PassageError::EmptySource } else { PassageError::EmptyTarget });
    }
    if to.size_hint(lat) == 0 || matches!(to, VertexSet::HalfSlab(n) if *n > lat.half_width() as i32) {
        return Err(PassageError::EmptyTarget);
    }
    if let (VertexSet::Point(_) | VertexSet::Points(_), VertexSet::Point(_) | VertexSet::Points(_)) = (from, to) {
        let (value, touched_boundary) =
            bidirectional(w, scratch, &sources, &to.members(lat)).ok_or(PassageError::Disconnected)?;
        return Ok(PassageResult { value, geodesic: None, touched_boundary });
    }
    let hit = search(w, scratch, &sources, Some(to), u32::MAX).ok_or(PassageError::Disconnected)?;
    let path = parent_path(scratch, hit.at);
    Ok(PassageResult {
        value: hit.value,
        geodesic: None,
        touched_boundary: path.iter().any(|&v| lat.on_window_boundary(v)),
    })
}

/// Settles every vertex within passage time `limit` of `src`; read the
/// results with [`Scratch::distance`].
pub fn settle_from<W: Weights>(w: &W, scratch: &mut Scratch, src: &VertexSet, limit: u32) -> Result<(), PassageError> {
    let sources = src.members(w.lattice());
    if sources.is_empty() {
        return Err(PassageError::EmptySource);
    }
    search(w, scratch, &sources, None, limit);
    Ok(())
}

fn check_scale(lat: &SlabLattice, n: u32) -> Result<(), PassageError> {
    if n == 0 || (n as u64) * 4 > lat.half_width() as u64 {
        return Err(PassageError::WindowTooSmall { half_width: lat.half_width(), scale: n });
    }
    Ok(())
}

/// Point-to-half-slab time `b(0, n) = T(0, {x >= n})`.
pub fn b0n<W: Weights>(w: &W, scratch: &mut Scratch, n: u32) -> Result<PassageResult, PassageError> {
    let lat = w.lattice();
    check_scale(lat, n)?;
    passage_time(w, scratch, &VertexSet::Point(lat.origin()), &VertexSet::HalfSlab(n as i32))
}

/// `s_n = T(0, boundary S(n))`.
pub fn s_n<W: Weights>(w: &W, scratch: &mut Scratch, n: u32) -> Result<PassageResult, PassageError> {
    let lat = w.lattice();
    if n == 0 || n > lat.half_width() {
        return Err(PassageError::WindowTooSmall { half_width: lat.half_width(), scale: n });
    }
    passage_time(w, scratch, &VertexSet::Point(lat.origin()), &VertexSet::BoxBoundary(n))
}

/// Base-layer vertex nearest to `n * u`.
pub fn nearest_vertex(n: u32, u: (f64, f64)) -> Result<Vertex, PassageError> {
    let norm = (u.0 * u.0 + u.1 * u.1).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
        return Err(PassageError::NotUnit);
    }
    let x = (n as f64 * u.0).round() as i32;
    let y = (n as f64 * u.1).round() as i32;
    Ok(Vertex::new(x, y, 0))
}

/// `T(0, n u)`: passage time to the base-layer vertex nearest to `n u`.
pub fn t0nu<W: Weights>(
    w: &W,
    scratch: &mut Scratch,
    n: u32,
    u: (f64, f64),
) -> Result<PassageResult, PassageError> {
    let lat = w.lattice();
    let target = nearest_vertex(n, u)?;
    if n == 0 || (target.radius() as u64) * 4 > lat.half_width() as u64 {
        return Err(PassageError::WindowTooSmall { half_width: lat.half_width(), scale: n });
    }
    let t = lat.vertex_index(&target).expect("checked against window");
    passage_time(w, scratch, &VertexSet::Point(lat.origin()), &VertexSet::Point(t))
}

/// `a(0, n) = T(0, n e_1)`.
pub fn a0n<W: Weights>(w: &W, scratch: &mut Scratch, n: u32) -> Result<PassageResult, PassageError> {
    t0nu(w, scratch, n, (1.0, 0.0))
}

/// Lexicographically smallest geodesic from `src` to `dst`.
///
/// Paths start at a vertex of `src` and end at their first vertex in `dst`;
/// they are compared by start vertex, then by their sequence of canonical edge
/// indices. The search settles all distances up to `T(src, dst)` and runs a
/// depth-first search over tight edges (`d(w) = d(u) + t(u, w)`) trying
/// neighbours in edge order. A vertex whose subtree failed once can never lead
/// to the target later, so it stays marked and the walk is linear.
pub fn geodesic_lex_min<W: Weights>(
    w: &W,
    scratch: &mut Scratch,
    src: &VertexSet,
    dst: &VertexSet,
) -> Result<PassageResult, PassageError> {
    let lat = w.lattice();
    let sources = src.members(lat);
    if sources.is_empty() {
        return Err(PassageError::EmptySource);
    }
    let total = search(w, scratch, &sources, Some(dst), u32::MAX).ok_or(PassageError::Disconnected)?.value;
    // Settle every vertex at distance <= total.
    search(w, scratch, &sources, None, total);
    let generation = scratch.generation;
    let settled = |s: &Scratch, v: usize| s.stamp[v] == generation && s.dist[v] <= total;

    let mut stack: Vec<(usize, usize)> = Vec::new();
    for &s in &sources {
        if scratch.mark[s] == generation || scratch.dist[s] != 0 {
            continue;
        }
        if dst.contains(lat, s) {
            if total == 0 {
                return Ok(PassageResult {
                    value: 0,
                    geodesic: Some(vec![s]),
                    touched_boundary: lat.on_window_boundary(s),
                });
            }
            continue;
        }
        scratch.mark[s] = generation;
        stack.push((s, 0));
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            let nbrs = lat.neighbors(u);
            let nbrs = nbrs.as_slice();
            let mut advanced = None;
            while *next < nbrs.len() {
                let (v, e) = nbrs[*next];
                *next += 1;
                if scratch.mark[v] == generation || !settled(scratch, v) {
                    continue;
                }
                if scratch.dist[v] != scratch.dist[u] + w.weight(e) {
                    continue;
                }
                advanced = Some(v);
                break;
            }
            match advanced {
                Some(v) => {
                    scratch.mark[v] = generation;
                    if dst.contains(lat, v) {
                        let mut path: Vec<usize> = stack.iter().map(|&(x, _)| x).collect();
                        path.push(v);
                        let touched = path.iter().any(|&x| lat.on_window_boundary(x));
                        return Ok(PassageResult { value: total, geodesic: Some(path), touched_boundary: touched });
                    }
                    stack.push((v, 0));
                }
                None => {
                    stack.pop();
                }
            }
        }
    }
    Err(PassageError::Disconnected)
}

/// Index and vertex where `geodesic` first meets `target`.
pub fn first_hit(lat: &SlabLattice, geodesic: &[usize], target: &VertexSet) -> Result<GeodesicEntry, PassageError> {
    geodesic
        .iter()
        .position(|&v| target.contains(lat, v))
        .map(|index| GeodesicEntry { index, vertex: geodesic[index] })
        .ok_or(PassageError::NoIntersection)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent reference computations for tiny lattices.
    use super::*;

    /// Bellman-Ford relaxation to a fixpoint.
    pub fn bellman<W: Weights>(w: &W, src: &[usize], dst: &[usize]) -> Option<u32> {
        let lat = w.lattice();
        let mut d = vec![u32::MAX; lat.vertex_count()];
        for &s in src {
            d[s] = 0;
        }
        loop {
            let mut changed = false;
            for e in lat.edges() {
                let (a, b) = lat.endpoints(e);
                let c = w.weight(e);
                if d[a] != u32::MAX && d[a] + c < d[b] {
                    d[b] = d[a] + c;
                    changed = true;
                }
                if d[b] != u32::MAX && d[b] + c < d[a] {
                    d[a] = d[b] + c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        dst.iter().map(|&t| d[t]).min().filter(|&x| x != u32::MAX)
    }

    /// Every simple path from `src` ending at its first vertex in `dst`, as
    /// `(weight, start, edge indices, vertices)`.
    pub fn all_paths<W: Weights>(w: &W, src: &[usize], dst: &[usize]) -> Vec<(u32, usize, Vec<usize>, Vec<usize>)> {
        let mut out = Vec::new();
        fn rec<W: Weights>(
            w: &W,
            dst: &[usize],
            path: &mut Vec<usize>,
            edges: &mut Vec<usize>,
            weight: u32,
            out: &mut Vec<(u32, usize, Vec<usize>, Vec<usize>)>,
        ) {
            let lat = w.lattice();
            let u = *path.last().unwrap();
            if dst.contains(&u) {
                out.push((weight, path[0], edges.clone(), path.clone()));
                return;
            }
            for (v, e) in lat.neighbors(u) {
                if path.contains(&v) {
                    continue;
                }
                path.push(v);
                edges.push(lat.edge_index(e));
                rec(w, dst, path, edges, weight + w.weight(e), out);
                path.pop();
                edges.pop();
            }
        }
        for &s in src {
            rec(w, dst, &mut vec![s], &mut Vec::new(), 0, &mut out);
        }
        out
    }
}
