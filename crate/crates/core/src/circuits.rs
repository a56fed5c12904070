//! Open circuits around the origin, the scale function `m(p)`, and the
//! closed-edge cut counts `kappa` and `rho`.
//!
//! A *surrounding circuit* of a ring `S(outer) \ S(inner)` is a simple cycle
//! of open edges whose vertices lie in the ring and whose projection to the
//! plane winds once around the origin. Windings are counted on the lift to
//! the cyclic cover of the ring cut along the ray `{y = 1/2, x > 0}`: a step
//! from `(x, 0, z)` to `(x, 1, z)` with `x >= 1` moves one sheet up.
//!
//! Faces are unit plane squares named by their lower-left corner. The
//! enclosed area of a circuit is the number of faces around which its
//! projection has nonzero winding number; the closed projected interior is
//! the set of plane columns that are corners of such faces or lie on the
//! projection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{edge_between, Weights};
use crate::lattice::{Dir, EdgeRef, Region, SlabLattice, Vertex};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CircuitError {
    #[error("no surrounding open circuit in {0}")]
    Absent(String),
    #[error("region {0} is not an annulus inside the window")]
    BadRegion(String),
    #[error("circuit dump: {0}")]
    Dump(String),
}

/// A surrounding open circuit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    /// Cyclic vertex sequence; the closing edge joins the last vertex to the first.
    pub vertices: Vec<usize>,
    /// Canonical edge indices in traversal order.
    pub edges: Vec<usize>,
    /// Projected winding number around the origin, `+1` or `-1`.
    pub winding: i32,
    pub enclosed_area: u64,
}

/// Plane geometry of a circuit: nonzero-winding faces and closed interior.
#[derive(Debug, Clone)]
pub struct Interior {
    radius: i32,
    faces: Vec<bool>,
    columns: Vec<bool>,
    on_curve: Vec<bool>,
    traversed: Vec<bool>,
}

impl Interior {
    #[inline]
    fn col(&self, x: i32, y: i32) -> Option<usize> {
        let r = self.radius;
        (x.abs() <= r && y.abs() <= r).then(|| ((y + r) * (2 * r + 1) + (x + r)) as usize)
    }

    #[inline]
    fn face(&self, a: i32, b: i32) -> Option<usize> {
        let r = self.radius;
        (a >= -r && a < r && b >= -r && b < r).then(|| ((b + r) * (2 * r) + (a + r)) as usize)
    }

    /// Whether the face with lower-left corner `(a, b)` has nonzero winding.
    pub fn face_inside(&self, a: i32, b: i32) -> bool {
        self.face(a, b).is_some_and(|f| self.faces[f])
    }

    /// Column in the closed projected interior.
    pub fn in_closure(&self, x: i32, y: i32) -> bool {
        self.col(x, y).is_some_and(|c| self.columns[c])
    }

    /// Column on the projection of the circuit.
    pub fn on_curve(&self, x: i32, y: i32) -> bool {
        self.col(x, y).is_some_and(|c| self.on_curve[c])
    }

    /// Column strictly inside: in the closure but not on the projection.
    pub fn strictly_inside(&self, x: i32, y: i32) -> bool {
        self.in_closure(x, y) && !self.on_curve(x, y)
    }

    pub fn area(&self) -> u64 {
        self.faces.iter().filter(|&&f| f).count() as u64
    }

    /// Whether an edge belongs to the closed region `C` together with `int(C)`:
    /// vertical edges over closure columns, and plane edges between closure
    /// columns that border an inside face or carry a step of the projection.
    pub fn holds_edge(&self, lat: &SlabLattice, e: EdgeRef) -> bool {
        let (a, b) = lat.endpoints(e);
        let (va, vb) = (lat.vertex(a), lat.vertex(b));
        if !self.in_closure(va.x, va.y) || !self.in_closure(vb.x, vb.y) {
            return false;
        }
        match e.dir {
            Dir::Z => true,
            Dir::X => {
                self.face_inside(va.x, va.y) || self.face_inside(va.x, va.y - 1) || self.plane_traversed(va, Dir::X)
            }
            Dir::Y => {
                self.face_inside(va.x, va.y) || self.face_inside(va.x - 1, va.y) || self.plane_traversed(va, Dir::Y)
            }
        }
    }

    fn plane_traversed(&self, v: Vertex, dir: Dir) -> bool {
        self.col(v.x, v.y).is_some_and(|c| self.traversed[2 * c + dir as usize])
    }
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Sorted vertex set.
    pub fn vertex_set(&self) -> Vec<usize> {
        let mut v = self.vertices.clone();
        v.sort_unstable();
        v
    }

    /// `C x {0..k}` as sorted vertex indices.
    pub fn thickened(&self, lat: &SlabLattice) -> Vec<usize> {
        let layers = lat.thickness() as usize + 1;
        let mut cols: Vec<usize> = self.vertices.iter().map(|&v| lat.column_of(v)).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut out: Vec<usize> = cols.iter().flat_map(|&c| (0..layers).map(move |z| c + z * lat.layer_size())).collect();
        out.sort_unstable();
        out
    }

    /// Largest sup-norm radius of the projection.
    pub fn max_radius(&self, lat: &SlabLattice) -> i32 {
        self.vertices.iter().map(|&v| lat.vertex(v).radius()).max().unwrap_or(0)
    }

    pub fn min_radius(&self, lat: &SlabLattice) -> i32 {
        self.vertices.iter().map(|&v| lat.vertex(v).radius()).min().unwrap_or(0)
    }

    /// Edge sequence rotated and oriented to its lexicographically smallest form.
    pub fn canonical_edges(&self) -> Vec<usize> {
        canonical_cycle(&self.edges)
    }

    pub fn interior(&self, lat: &SlabLattice) -> Interior {
        interior_of(lat, &self.vertices, self.max_radius(lat))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&CircuitDump {
            edges: self.edges.clone(),
            winding: self.winding,
            enclosed_area: self.enclosed_area,
        })
        .expect("plain data serializes")
    }

    /// Parses and validates a dump against a lattice: the edges must form one
    /// simple cycle whose winding and area match the recorded values.
    pub fn from_json(lat: &SlabLattice, s: &str) -> Result<Circuit, CircuitError> {
        let dump: CircuitDump = serde_json::from_str(s).map_err(|e| CircuitError::Dump(e.to_string()))?;
        let bad = |m: &str| CircuitError::Dump(m.to_string());
        if dump.edges.len() < 4 {
            return Err(bad("a cycle needs at least four edges"));
        }
        let refs: Vec<EdgeRef> = dump
            .edges
            .iter()
            .map(|&i| lat.edge_at(i).ok_or_else(|| bad("edge index out of range")))
            .collect::<Result<_, _>>()?;
        let (a0, b0) = lat.endpoints(refs[0]);
        let (a1, b1) = lat.endpoints(refs[1]);
        let start = if a0 == a1 || a0 == b1 { b0 } else if b0 == a1 || b0 == b1 { a0 } else { return Err(bad("edges 0 and 1 are not adjacent")) };
        let mut vertices = vec![start];
        let mut cur = start;
        for e in &refs {
            let (a, b) = lat.endpoints(*e);
            cur = if a == cur { b } else if b == cur { a } else { return Err(bad("edges do not form a walk")) };
            vertices.push(cur);
        }
        if vertices.pop() != Some(start) {
            return Err(bad("walk does not close"));
        }
        let mut seen = vertices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != vertices.len() {
            return Err(bad("cycle is not simple"));
        }
        let c = build_circuit(lat, vertices);
        if c.winding != dump.winding || c.enclosed_area != dump.enclosed_area {
            return Err(bad("winding or area does not match the edges"));
        }
        Ok(c)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitDump {
    edges: Vec<usize>,
    winding: i32,
    enclosed_area: u64,
}

fn canonical_cycle(edges: &[usize]) -> Vec<usize> {
    let n = edges.len();
    if n == 0 {
        return Vec::new();
    }
    let mut best: Option<Vec<usize>> = None;
    for rev in [false, true] {
        let seq: Vec<usize> = if rev { edges.iter().rev().copied().collect() } else { edges.to_vec() };
        for s in 0..n {
            let cand: Vec<usize> = (0..n).map(|i| seq[(s + i) % n]).collect();
            if best.as_ref().is_none_or(|b| cand < *b) {
                best = Some(cand);
            }
        }
    }
    best.unwrap_or_default()
}

/// Sheet change when stepping from `u` to `v` (adjacent vertices).
#[inline]
fn sheet_delta(u: Vertex, v: Vertex) -> i32 {
    if u.x != v.x || u.z != v.z || u.x < 1 {
        return 0;
    }
    match (u.y, v.y) {
        (0, 1) => 1,
        (1, 0) => -1,
        _ => 0,
    }
}

/// Winding of a closed vertex cycle around the origin.
pub fn winding_of(lat: &SlabLattice, cycle: &[usize]) -> i32 {
    let n = cycle.len();
    (0..n).map(|i| sheet_delta(lat.vertex(cycle[i]), lat.vertex(cycle[(i + 1) % n]))).sum()
}

fn interior_of(lat: &SlabLattice, cycle: &[usize], radius: i32) -> Interior {
    let r = radius.max(1);
    let side = (2 * r + 1) as usize;
    let fside = (2 * r) as usize;
    let mut faces = vec![false; fside * fside];
    let mut columns = vec![false; side * side];
    let mut on_curve = vec![false; side * side];
    let mut traversed = vec![false; 2 * side * side];
    // Signed crossings per face row: a step (x, b) -> (x, b + 1) adds +1 to all
    // faces (a, b) with a < x.
    let mut rows: Vec<Vec<(i32, i32)>> = vec![Vec::new(); fside];
    let n = cycle.len();
    let col = |x: i32, y: i32| ((y + r) * (2 * r + 1) + (x + r)) as usize;
    for i in 0..n {
        let u = lat.vertex(cycle[i]);
        let v = lat.vertex(cycle[(i + 1) % n]);
        on_curve[col(u.x, u.y)] = true;
        if u.x == v.x && u.y != v.y {
            let b = u.y.min(v.y);
            rows[(b + r) as usize].push((u.x, if v.y > u.y { 1 } else { -1 }));
            traversed[2 * col(u.x, b) + 1] = true;
        } else if u.y == v.y && u.x != v.x {
            traversed[2 * col(u.x.min(v.x), u.y)] = true;
        }
    }
    for (bi, row) in rows.iter_mut().enumerate() {
        if row.is_empty() {
            continue;
        }
        row.sort_unstable();
        let b = bi as i32 - r;
        // Walk faces from right to left accumulating crossings at x >= a + 1.
        let mut acc = 0;
        let mut k = row.len();
        for a in (-r..r).rev() {
            while k > 0 && row[k - 1].0 > a {
                acc += row[k - 1].1;
                k -= 1;
            }
            if acc != 0 {
                faces[((b + r) as usize) * fside + (a + r) as usize] = true;
            }
        }
    }
    for b in -r..r {
        for a in -r..r {
            if faces[((b + r) as usize) * fside + (a + r) as usize] {
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    columns[col(a + dx, b + dy)] = true;
                }
            }
        }
    }
    for (c, on) in on_curve.iter().enumerate() {
        if *on {
            columns[c] = true;
        }
    }
    Interior { radius: r, faces, columns, on_curve, traversed }
}

fn build_circuit(lat: &SlabLattice, vertices: Vec<usize>) -> Circuit {
    let n = vertices.len();
    let edges = (0..n)
        .map(|i| lat.edge_index(edge_between(lat, vertices[i], vertices[(i + 1) % n]).expect("cycle steps are edges")))
        .collect();
    let winding = winding_of(lat, &vertices);
    let radius = vertices.iter().map(|&v| lat.vertex(v).radius()).max().unwrap_or(1);
    let enclosed_area = interior_of(lat, &vertices, radius).area();
    Circuit { vertices, edges, winding, enclosed_area }
}

/// Union-find over ring vertices tracking sheet offsets and, per component,
/// the gcd of the windings of its closed walks.
struct WindingUf {
    parent: Vec<u32>,
    offset: Vec<i32>,
    gcd: Vec<u32>,
    size: Vec<u32>,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl WindingUf {
    fn new(n: usize) -> Self {
        WindingUf { parent: (0..n as u32).collect(), offset: vec![0; n], gcd: vec![0; n], size: vec![1; n] }
    }

    /// Root of `x` and the sheet of `x` relative to it.
    fn find(&mut self, x: u32) -> (u32, i32) {
        let mut root = x;
        let mut off = 0;
        while self.parent[root as usize] != root {
            off += self.offset[root as usize];
            root = self.parent[root as usize];
        }
        // Compress, rewriting offsets relative to the root.
        let mut cur = x;
        let mut rem = off;
        while self.parent[cur as usize] != root && cur != root {
            let next = self.parent[cur as usize];
            let step = self.offset[cur as usize];
            self.parent[cur as usize] = root;
            self.offset[cur as usize] = rem;
            rem -= step;
            cur = next;
        }
        (root, off)
    }

    /// Records an open edge with `sheet(b) = sheet(a) + delta`. Returns the
    /// gcd of the resulting component.
    fn union(&mut self, a: u32, b: u32, delta: i32) -> u32 {
        let (ra, oa) = self.find(a);
        let (rb, ob) = self.find(b);
        if ra == rb {
            let d = (oa + delta - ob).unsigned_abs();
            let g = gcd(self.gcd[ra as usize], d);
            self.gcd[ra as usize] = g;
            return g;
        }
        // sheet(rb) relative to ra = oa + delta - ob
        let rel = oa + delta - ob;
        let g = gcd(self.gcd[ra as usize], self.gcd[rb as usize]);
        let (big, small, off) =
            if self.size[ra as usize] >= self.size[rb as usize] { (ra, rb, rel) } else { (rb, ra, -rel) };
        self.parent[small as usize] = big;
        self.offset[small as usize] = off;
        self.size[big as usize] += self.size[small as usize];
        self.gcd[big as usize] = g;
        g
    }
}

/// A ring `S(outer) \ S(inner)` optionally restricted to a set of columns,
/// with local indices over the bounding box `[-outer, outer]^2`.
#[derive(Clone)]
struct RingView<'a> {
    lat: &'a SlabLattice,
    inner: i32,
    outer: i32,
    b: usize,
    layers: usize,
    allowed: Option<Vec<bool>>,
}

impl<'a> RingView<'a> {
    fn new(lat: &'a SlabLattice, inner: u32, outer: u32) -> Self {
        RingView {
            lat,
            inner: inner as i32,
            outer: outer as i32,
            b: (2 * outer + 1) as usize,
            layers: lat.thickness() as usize + 1,
            allowed: None,
        }
    }

    #[inline]
    fn col(&self, x: i32, y: i32) -> usize {
        ((y + self.outer) as usize) * self.b + (x + self.outer) as usize
    }

    #[inline]
    fn col_xy(&self, c: usize) -> (i32, i32) {
        ((c % self.b) as i32 - self.outer, (c / self.b) as i32 - self.outer)
    }

    #[inline]
    fn has_col(&self, x: i32, y: i32) -> bool {
        let r = x.abs().max(y.abs());
        r > self.inner && r <= self.outer && self.allowed.as_ref().is_none_or(|a| a[self.col(x, y)])
    }

    fn columns(&self) -> usize {
        self.b * self.b
    }

    #[inline]
    fn local(&self, x: i32, y: i32, z: i32) -> u32 {
        (z as usize * self.b * self.b + self.col(x, y)) as u32
    }

    #[inline]
    fn global(&self, local: u32) -> usize {
        let local = local as usize;
        let z = local / (self.b * self.b);
        let (x, y) = self.col_xy(local % (self.b * self.b));
        self.lat.vertex_index(&Vertex::new(x, y, z as i32)).expect("ring lies in the window")
    }

    fn restricted(&self, allowed: Vec<bool>) -> Self {
        RingView { allowed: Some(allowed), ..self.clone() }
    }

    /// Columns currently in the region.
    fn column_mask(&self) -> Vec<bool> {
        (0..self.columns())
            .map(|c| {
                let (x, y) = self.col_xy(c);
                self.has_col(x, y)
            })
            .collect()
    }
}

fn ring_of(lat: &SlabLattice, region: &Region) -> Result<(u32, u32), CircuitError> {
    match region.ring_radii() {
        Some((inner, outer)) if inner < outer && outer <= lat.half_width() => Ok((inner, outer)),
        _ => Err(CircuitError::BadRegion(region.to_string())),
    }
}

const PLANE_STEPS: [(i32, i32); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Whether the open subgraph of the view contains a closed walk winding once.
fn view_has_circuit<W: Weights>(w: &W, view: &RingView) -> bool {
    let n = view.columns() * view.layers;
    let mut uf = WindingUf::new(n);
    let lat = view.lat;
    for y in -view.outer..=view.outer {
        for x in -view.outer..=view.outer {
            if !view.has_col(x, y) {
                continue;
            }
            for z in 0..view.layers as i32 {
                let g = lat.vertex_index(&Vertex::new(x, y, z)).expect("in window");
                let here = view.local(x, y, z);
                for dir in Dir::ALL {
                    let Some(e) = lat.edge_from(g, dir) else { continue };
                    let (nx, ny, nz) = match dir {
                        Dir::X => (x + 1, y, z),
                        Dir::Y => (x, y + 1, z),
                        Dir::Z => (x, y, z + 1),
                    };
                    if !view.has_col(nx, ny) || !w.is_open(e) {
                        continue;
                    }
                    let delta = sheet_delta(Vertex::new(x, y, z), Vertex::new(nx, ny, nz));
                    if uf.union(here, view.local(nx, ny, nz), delta) == 1 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// True iff an open circuit in the annulus surrounds the origin.
pub fn has_surrounding_circuit<W: Weights>(w: &W, annulus: &Region) -> Result<bool, CircuitError> {
    let (inner, outer) = ring_of(w.lattice(), annulus)?;
    Ok(view_has_circuit(w, &RingView::new(w.lattice(), inner, outer)))
}

/// Open edges of the view that lie on some cycle (non-bridges), indexed by
/// `3 * lower local endpoint + direction`.
fn cycle_edges<W: Weights>(w: &W, view: &RingView) -> Vec<bool> {
    let lat = view.lat;
    let n = view.columns() * view.layers;
    let steps = [1usize, view.b, view.b * view.b];
    // Bit d: open edge in +d direction; bit 3 + d: open edge in -d direction.
    let mut adj = vec![0u8; n];
    let mut on_cycle = vec![false; 3 * n];
    for z in 0..view.layers as i32 {
        for y in -view.outer..=view.outer {
            for x in -view.outer..=view.outer {
                if !view.has_col(x, y) {
                    continue;
                }
                let g = lat.vertex_index(&Vertex::new(x, y, z)).expect("in window");
                let here = view.local(x, y, z) as usize;
                for dir in Dir::ALL {
                    let (nx, ny) = match dir {
                        Dir::X => (x + 1, y),
                        Dir::Y => (x, y + 1),
                        Dir::Z => (x, y),
                    };
                    if !view.has_col(nx, ny) {
                        continue;
                    }
                    if lat.edge_from(g, dir).is_some_and(|e| w.is_open(e)) {
                        let d = dir as usize;
                        adj[here] |= 1 << d;
                        adj[here + steps[d]] |= 1 << (3 + d);
                        on_cycle[3 * here + d] = true;
                    }
                }
            }
        }
    }
    // Iterative bridge search; tree edges with low[child] > disc[parent] are bridges.
    let mut disc = vec![u32::MAX; n];
    let mut low = vec![0u32; n];
    let mut time = 0u32;
    let mut stack: Vec<(usize, u8, u8)> = Vec::new(); // (vertex, edge bit used to enter, next bit)
    for s in 0..n {
        if adj[s] == 0 || disc[s] != u32::MAX {
            continue;
        }
        disc[s] = time;
        low[s] = time;
        time += 1;
        stack.push((s, u8::MAX, 0));
        while let Some(top) = stack.last_mut() {
            let (v, entry, bit) = *top;
            if bit < 6 {
                top.2 += 1;
                if adj[v] & (1 << bit) == 0 || bit == entry {
                    continue;
                }
                let d = (bit % 3) as usize;
                let u = if bit < 3 { v + steps[d] } else { v - steps[d] };
                if disc[u] == u32::MAX {
                    disc[u] = time;
                    low[u] = time;
                    time += 1;
                    // Entering `u` through its opposite bit.
                    stack.push((u, (bit + 3) % 6, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        let d = (entry % 3) as usize;
                        let lower = if entry < 3 { v } else { p };
                        on_cycle[3 * lower + d] = false;
                    }
                }
            }
        }
    }
    on_cycle
}

/// Faces that every surrounding circuit of the view must enclose: those reached
/// from the origin by crossing plane edges none of whose lifts is an open edge
/// of the view. `None` if that flood escapes the ring, in which case no
/// surrounding circuit exists.
fn forced_faces<W: Weights>(w: &W, view: &RingView) -> Option<Vec<bool>> {
    let r = view.outer;
    let fside = (2 * r) as usize;
    let face = |a: i32, b: i32| ((b + r) as usize) * fside + (a + r) as usize;
    let on_cycle = cycle_edges(w, view);
    let usable = |x0: i32, y0: i32, dir: Dir| -> bool {
        let (x1, y1) = if dir == Dir::X { (x0 + 1, y0) } else { (x0, y0 + 1) };
        if !view.has_col(x0, y0) || !view.has_col(x1, y1) {
            return false;
        }
        (0..view.layers as i32).any(|z| on_cycle[view.local(x0, y0, z) as usize * 3 + dir as usize])
    };
    let mut seen = vec![false; fside * fside];
    let mut stack = vec![(0, 0)];
    seen[face(0, 0)] = true;
    while let Some((a, b)) = stack.pop() {
        // (next face, plane edge separating them as (corner, dir))
        let moves = [
            ((a + 1, b), (a + 1, b, Dir::Y)),
            ((a - 1, b), (a, b, Dir::Y)),
            ((a, b + 1), (a, b + 1, Dir::X)),
            ((a, b - 1), (a, b, Dir::X)),
        ];
        for ((na, nb), (ex, ey, dir)) in moves {
            if usable(ex, ey, dir) {
                continue;
            }
            if na < -r || na >= r || nb < -r || nb >= r {
                return None;
            }
            let f = face(na, nb);
            if !seen[f] {
                seen[f] = true;
                stack.push((na, nb));
            }
        }
    }
    Some(seen)
}

/// Column order for the circuit search: plane distance through the region from
/// the corners of the forced faces, ties by column index.
fn search_order(view: &RingView, forced: &[bool]) -> Vec<usize> {
    let r = view.outer;
    let fside = (2 * r) as usize;
    let mut dist = vec![u32::MAX; view.columns()];
    let mut queue = std::collections::VecDeque::new();
    for b in -r..r {
        for a in -r..r {
            if !forced[((b + r) as usize) * fside + (a + r) as usize] {
                continue;
            }
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (x, y) = (a + dx, b + dy);
                if view.has_col(x, y) {
                    let c = view.col(x, y);
                    if dist[c] == u32::MAX {
                        dist[c] = 0;
                        queue.push_back(c);
                    }
                }
            }
        }
    }
    while let Some(c) = queue.pop_front() {
        let (x, y) = view.col_xy(c);
        for (dx, dy) in PLANE_STEPS {
            let (nx, ny) = (x + dx, y + dy);
            if view.has_col(nx, ny) {
                let n = view.col(nx, ny);
                if dist[n] == u32::MAX {
                    dist[n] = dist[c] + 1;
                    queue.push_back(n);
                }
            }
        }
    }
    let mut keyed: Vec<u64> =
        dist.iter().enumerate().filter(|(_, d)| **d != u32::MAX).map(|(c, d)| ((*d as u64) << 32) | c as u64).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|k| (k & 0xFFFF_FFFF) as usize).collect()
}

/// Canonical circuit of a view: add columns in search order until a winding
/// walk closes, then extract the shortest winding cycle through the last
/// column from the cyclic cover and reduce it to a simple cycle.
fn find_circuit<W: Weights>(w: &W, view: &RingView) -> Option<Circuit> {
    let forced = forced_faces(w, view)?;
    let order = search_order(view, &forced);
    let lat = view.lat;
    let mut uf = WindingUf::new(view.columns() * view.layers);
    let mut added = vec![false; view.columns()];
    let mut closing = None;
    'cols: for &c in &order {
        added[c] = true;
        let (x, y) = view.col_xy(c);
        for z in 0..view.layers as i32 {
            let g = lat.vertex_index(&Vertex::new(x, y, z)).expect("in window");
            let here = view.local(x, y, z);
            for (nb, e) in lat.neighbors(g) {
                let v = lat.vertex(nb);
                if !view.has_col(v.x, v.y) || !added[view.col(v.x, v.y)] || !w.is_open(e) {
                    continue;
                }
                if (v.x, v.y) == (x, y) && v.z > z {
                    continue;
                }
                let delta = sheet_delta(Vertex::new(x, y, z), v);
                if uf.union(here, view.local(v.x, v.y, v.z), delta) == 1 {
                    closing = Some(c);
                    break 'cols;
                }
            }
        }
    }
    let closing = closing?;
    let sub = view.restricted(added.clone());
    let (x, y) = view.col_xy(closing);
    for z in 0..view.layers as i32 {
        if let Some(cycle) = cover_cycle(w, &sub, sub.local(x, y, z)) {
            return Some(build_circuit(lat, cycle));
        }
    }
    // A closed walk exists but no simple winding cycle was recovered through
    // the closing column; fall back to every column of the prefix.
    for &c in order.iter().take_while(|&&c| added[c]) {
        let (x, y) = view.col_xy(c);
        for z in 0..view.layers as i32 {
            if let Some(cycle) = cover_cycle(w, &sub, sub.local(x, y, z)) {
                return Some(build_circuit(lat, cycle));
            }
        }
    }
    None
}

const SHEETS: i32 = 3;

/// Shortest closed walk through `root` with winding +-1 in the cyclic cover,
/// reduced to a simple cycle of global vertex indices.
fn cover_cycle<W: Weights>(w: &W, view: &RingView, root: u32) -> Option<Vec<usize>> {
    let lat = view.lat;
    let span = (2 * SHEETS + 1) as usize;
    let n = view.columns() * view.layers;
    let state = |local: u32, sheet: i32| local as usize * span + (sheet + SHEETS) as usize;
    let mut parent = vec![u32::MAX; n * span];
    let mut visited = vec![false; n * span];
    let mut queue = std::collections::VecDeque::new();
    visited[state(root, 0)] = true;
    queue.push_back((root, 0i32));
    let mut found = None;
    while let Some((u, s)) = queue.pop_front() {
        let g = view.global(u);
        let uv = lat.vertex(g);
        for (nb, e) in lat.neighbors(g) {
            let v = lat.vertex(nb);
            if !view.has_col(v.x, v.y) || !w.is_open(e) {
                continue;
            }
            let ns = s + sheet_delta(uv, v);
            if ns.abs() > SHEETS {
                continue;
            }
            let lv = view.local(v.x, v.y, v.z);
            let st = state(lv, ns);
            if visited[st] {
                continue;
            }
            visited[st] = true;
            parent[st] = state(u, s) as u32;
            if lv == root && ns.abs() == 1 {
                found = Some(st);
                break;
            }
            queue.push_back((lv, ns));
        }
        if found.is_some() {
            break;
        }
    }
    let mut st = found?;
    let mut walk = Vec::new();
    loop {
        let local = (st / span) as u32;
        walk.push(view.global(local));
        if parent[st] == u32::MAX {
            break;
        }
        st = parent[st] as usize;
    }
    walk.reverse();
    // walk = root ... root; drop the repeated endpoint.
    walk.pop();
    simplify_walk(lat, walk)
}

/// Reduces a closed walk with winding +-1 to a simple cycle with winding +-1.
fn simplify_walk(lat: &SlabLattice, mut walk: Vec<usize>) -> Option<Vec<usize>> {
    loop {
        let mut first = std::collections::HashMap::new();
        let mut rep = None;
        for (j, &v) in walk.iter().enumerate() {
            if let Some(&i) = first.get(&v) {
                rep = Some((i, j));
                break;
            }
            first.insert(v, j);
        }
        let Some((i, j)) = rep else {
            return (walk.len() >= 4 && winding_of(lat, &walk).abs() == 1).then_some(walk);
        };
        let inner: Vec<usize> = walk[i..j].to_vec();
        let mut outer: Vec<usize> = walk[..i].to_vec();
        outer.extend_from_slice(&walk[j..]);
        if winding_of(lat, &inner).abs() == 1 {
            walk = inner;
        } else if winding_of(lat, &outer).abs() == 1 {
            walk = outer;
        } else {
            return None;
        }
    }
}

/// Innermost surrounding open circuit of an annulus.
///
/// Candidates come from an iterative-shrinking search: starting from the
/// canonical circuit of a region, the region is cut down to the closed
/// projected interior of the current circuit, and circuit columns next to
/// faces that are not forced inside are peeled while the area strictly drops.
/// A branch and bound over removed circuit edges then looks for circuits of
/// smaller area, pruning with the forced-face lower bound; it is exhaustive
/// unless its work budget [`SEARCH_BUDGET`] runs out. Among the smallest areas found
/// the lexicographically smallest canonical edge sequence wins. The result is
/// a fixed point: searching inside its own closed interior returns it again.
pub fn innermost_circuit<W: Weights>(w: &W, annulus: &Region) -> Result<Circuit, CircuitError> {
    let lat = w.lattice();
    let (inner, outer) = ring_of(lat, annulus)?;
    let ring = RingView::new(lat, inner, outer);
    let mut current = best_in(w, &ring, ring.column_mask()).ok_or_else(|| CircuitError::Absent(annulus.to_string()))?;
    let mut seen = vec![current.vertices.clone()];
    loop {
        let again = best_in(w, &ring, closure_mask(&ring, &current)).expect("a circuit lies in its own closure");
        if again.vertices == current.vertices || seen.contains(&again.vertices) {
            return Ok(current);
        }
        seen.push(again.vertices.clone());
        current = again;
    }
}

/// The search of [`innermost_circuit`] restricted to the ring columns in
/// `within`'s closed projected interior.
pub fn innermost_circuit_in<W: Weights>(w: &W, annulus: &Region, within: &Interior) -> Result<Circuit, CircuitError> {
    let lat = w.lattice();
    let (inner, outer) = ring_of(lat, annulus)?;
    let ring = RingView::new(lat, inner, outer);
    let mask = ring
        .column_mask()
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            let (x, y) = ring.col_xy(c);
            m && within.in_closure(x, y)
        })
        .collect();
    best_in(w, &ring, mask).ok_or_else(|| CircuitError::Absent(annulus.to_string()))
}

/// Work limit of the area branch and bound in [`innermost_circuit`], in ring
/// vertices summed over search nodes.
pub const SEARCH_BUDGET: usize = 1 << 19;

/// Node limits of the area branch and bound regardless of ring size.
const MIN_NODES: usize = 4;
const MAX_NODES: usize = 100_000;

/// Open edges of `w` minus a removed set.
struct Without<'a, W: Weights> {
    w: &'a W,
    removed: &'a [usize],
}

impl<W: Weights> Weights for Without<'_, W> {
    fn lattice(&self) -> &SlabLattice {
        self.w.lattice()
    }

    fn is_open(&self, e: EdgeRef) -> bool {
        self.w.is_open(e) && (self.removed.is_empty() || self.removed.binary_search(&self.w.lattice().edge_index(e)).is_err())
    }
}

fn best_in<W: Weights>(w: &W, ring: &RingView, region: Vec<bool>) -> Option<Circuit> {
    use std::cmp::Reverse;
    use std::collections::{BinaryHeap, HashSet};

    let view = ring.restricted(region.clone());
    let mut best = shrink(w, ring, region.clone())?;
    let mut ties = vec![best.clone()];
    let mut heap = BinaryHeap::new();
    let mut visited: HashSet<Vec<usize>> = HashSet::new();
    let root_lb = forced_faces(w, &view).map_or(0, |f| f.iter().filter(|&&x| x).count() as u64);
    if root_lb < best.enclosed_area {
        for &e in &best.edges {
            heap.push(Reverse((root_lb, vec![e])));
        }
    }
    let max_nodes = (SEARCH_BUDGET / (ring.columns() * ring.layers)).clamp(MIN_NODES, MAX_NODES);
    let mut nodes = 0;
    while let Some(Reverse((lb, removed))) = heap.pop() {
        if lb >= best.enclosed_area || nodes >= max_nodes {
            break;
        }
        if !visited.insert(removed.clone()) {
            continue;
        }
        nodes += 1;
        let masked = Without { w, removed: &removed };
        let Some(forced) = forced_faces(&masked, &view) else { continue };
        let lb = forced.iter().filter(|&&x| x).count() as u64;
        if lb >= best.enclosed_area {
            continue;
        }
        let Some(c) = settle(&masked, ring, region.clone()) else { continue };
        if c.enclosed_area < best.enclosed_area {
            best = c.clone();
            ties = vec![c.clone()];
        } else if c.enclosed_area == best.enclosed_area && !ties.iter().any(|t| t.vertices == c.vertices) {
            ties.push(c.clone());
        }
        if c.enclosed_area > lb {
            for &e in &c.edges {
                let mut child = removed.clone();
                if let Err(pos) = child.binary_search(&e) {
                    child.insert(pos, e);
                    heap.push(Reverse((lb, child)));
                }
            }
        }
    }
    ties.into_iter().min_by_key(|c| c.canonical_edges())
}

fn closure_mask(ring: &RingView, c: &Circuit) -> Vec<bool> {
    let int = c.interior(ring.lat);
    ring.column_mask()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let (x, y) = ring.col_xy(i);
            m && int.in_closure(x, y)
        })
        .collect()
}

/// Canonical circuit of the region, re-searched inside its own closed interior
/// until stable.
fn settle<W: Weights>(w: &W, ring: &RingView, mut region: Vec<bool>) -> Option<Circuit> {
    let mut current = find_circuit(w, &ring.restricted(region.clone()))?;
    loop {
        let int = current.interior(ring.lat);
        for (c, allowed) in region.iter_mut().enumerate() {
            if *allowed {
                let (x, y) = ring.col_xy(c);
                *allowed = int.in_closure(x, y);
            }
        }
        let next = find_circuit(w, &ring.restricted(region.clone())).expect("current circuit lies in the region");
        if next.vertices == current.vertices || next.enclosed_area > current.enclosed_area {
            return Some(current);
        }
        current = next;
    }
}

fn shrink<W: Weights>(w: &W, ring: &RingView, mut region: Vec<bool>) -> Option<Circuit> {
    let lat = ring.lat;
    let mut current = find_circuit(w, &ring.restricted(region.clone()))?;
    'outer: loop {
        let int = current.interior(lat);
        for (c, allowed) in region.iter_mut().enumerate() {
            if *allowed {
                let (x, y) = ring.col_xy(c);
                *allowed = int.in_closure(x, y);
            }
        }
        let view = ring.restricted(region.clone());
        let next = find_circuit(w, &view).expect("current circuit lies in the region");
        if next.vertices != current.vertices {
            if next.enclosed_area <= current.enclosed_area {
                current = next;
                continue;
            }
            break;
        }
        let forced = forced_faces(w, &view).expect("region holds a circuit");
        let fside = (2 * ring.outer) as usize;
        let loose = |a: i32, b: i32| {
            int.face_inside(a, b) && !forced[((b + ring.outer) as usize) * fside + (a + ring.outer) as usize]
        };
        let mut cols: Vec<usize> = current
            .vertices
            .iter()
            .map(|&v| {
                let p = lat.vertex(v);
                ring.col(p.x, p.y)
            })
            .collect();
        cols.sort_unstable();
        cols.dedup();
        for c in cols {
            let (x, y) = ring.col_xy(c);
            if ![(x - 1, y - 1), (x, y - 1), (x - 1, y), (x, y)].iter().any(|&(a, b)| loose(a, b)) {
                continue;
            }
            let mut trial = region.clone();
            trial[c] = false;
            if let Some(cand) = find_circuit(w, &ring.restricted(trial.clone())) {
                if cand.enclosed_area < current.enclosed_area {
                    current = cand;
                    region = trial;
                    continue 'outer;
                }
            }
        }
        break;
    }
    Some(current)
}

/// Per-scale circuit existence and `m(p)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleFunction {
    /// `has_circuit[t]` for `t` in `0..=p_max`.
    pub has_circuit: Vec<bool>,
}

impl ScaleFunction {
    /// Scans annuli `A(0..=p_max)`.
    pub fn scan<W: Weights>(w: &W, p_max: u32) -> Result<Self, CircuitError> {
        Self::scan_from(w, 0, p_max)
    }

    /// Scans annuli `A(p_min..=p_max)`; lower scales are recorded as absent.
    pub fn scan_from<W: Weights>(w: &W, p_min: u32, p_max: u32) -> Result<Self, CircuitError> {
        let mut has_circuit = vec![false; p_max as usize + 1];
        for t in p_min..=p_max {
            has_circuit[t as usize] = has_surrounding_circuit(w, &Region::Annulus(t))?;
        }
        Ok(ScaleFunction { has_circuit })
    }

    pub fn p_max(&self) -> u32 {
        self.has_circuit.len() as u32 - 1
    }

    /// `m(p)`, or `None` when censored (no circuit up to `p_max`).
    pub fn m(&self, p: u32) -> Option<u32> {
        (p..=self.p_max()).find(|&t| self.has_circuit[t as usize])
    }
}

/// `m(p)` scanning annuli up to `p_max`; `None` marks a censored sample.
pub fn scale_m<W: Weights>(w: &W, p: u32, p_max: u32) -> Result<Option<u32>, CircuitError> {
    for t in p..=p_max {
        if has_surrounding_circuit(w, &Region::Annulus(t))? {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// `C_p`: innermost circuit in `A(m(p))`, with `m(p)`.
pub fn circuit_at_scale<W: Weights>(w: &W, p: u32, p_max: u32) -> Result<Option<(u32, Circuit)>, CircuitError> {
    match scale_m(w, p, p_max)? {
        Some(m) => Ok(Some((m, innermost_circuit(w, &Region::Annulus(m))?))),
        None => Ok(None),
    }
}

/// True iff no open path crosses the ring `S(2n) \ S(n)` from `boundary S(n)` to
/// `boundary S(2n)`.
pub fn has_blocking_surface<W: Weights>(w: &W, n: u32) -> Result<bool, CircuitError> {
    let lat = w.lattice();
    if n == 0 || 2 * n > lat.half_width() {
        return Err(CircuitError::BadRegion(format!("Ring({n},{})", 2 * n)));
    }
    let clusters = OpenClusters::build(w, n as i32, 2 * n as i32);
    Ok(!clusters.crossing())
}

/// Open clusters of the closed ring `n_in <= r <= n_out`.
struct OpenClusters {
    lat: SlabLattice,
    n_in: i32,
    n_out: i32,
    parent: Vec<u32>,
}

impl OpenClusters {
    fn build<W: Weights>(w: &W, n_in: i32, n_out: i32) -> Self {
        let lat = w.lattice().clone();
        let mut parent: Vec<u32> = (0..lat.vertex_count() as u32).collect();
        fn find(p: &mut [u32], mut x: u32) -> u32 {
            while p[x as usize] != x {
                p[x as usize] = p[p[x as usize] as usize];
                x = p[x as usize];
            }
            x
        }
        for v in 0..lat.vertex_count() {
            let r = lat.vertex(v).radius();
            if r < n_in || r > n_out {
                continue;
            }
            for dir in Dir::ALL {
                if let Some(e) = lat.edge_from(v, dir) {
                    let (_, b) = lat.endpoints(e);
                    let rb = lat.vertex(b).radius();
                    if rb >= n_in && rb <= n_out && w.is_open(e) {
                        let (ra, rb) = (find(&mut parent, v as u32), find(&mut parent, b as u32));
                        if ra != rb {
                            parent[ra.max(rb) as usize] = ra.min(rb);
                        }
                    }
                }
            }
        }
        for v in 0..parent.len() {
            let r = find(&mut parent, v as u32);
            parent[v] = r;
        }
        OpenClusters { lat, n_in, n_out, parent }
    }

    fn in_ring(&self, v: usize) -> bool {
        let r = self.lat.vertex(v).radius();
        r >= self.n_in && r <= self.n_out
    }

    fn crossing(&self) -> bool {
        let mut inner = std::collections::HashSet::new();
        for v in 0..self.parent.len() {
            if self.lat.vertex(v).radius() == self.n_in {
                inner.insert(self.parent[v]);
            }
        }
        (0..self.parent.len()).any(|v| self.lat.vertex(v).radius() == self.n_out && inner.contains(&self.parent[v]))
    }
}

/// `kappa` (fewest closed edges on a path between the two boundaries) and
/// `rho` (most pairwise edge-disjoint separating closed-edge sets), with the
/// explicit cut family realizing `rho`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutCount {
    pub kappa: u32,
    pub rho: u32,
    /// `level_cuts[l - 1]`: closed edges joining contracted level `l - 1` to `l`.
    pub level_cuts: Vec<Vec<usize>>,
}

/// Contracts open clusters of the ring; `kappa` is the contracted BFS distance
/// between the boundaries and `rho` is realized by taking the closed edges between consecutive BFS levels of the contracted
/// graph. Both are checked: every cut must separate and cuts must be disjoint.
pub fn kappa_rho<W: Weights>(w: &W, inner_scale: u32, outer_scale: u32) -> Result<CutCount, CircuitError> {
    let lat = w.lattice();
    if inner_scale >= outer_scale || outer_scale >= 31 || (1u64 << outer_scale) > lat.half_width() as u64 {
        return Err(CircuitError::BadRegion(format!("scales {inner_scale}..{outer_scale}")));
    }
    let (n_in, n_out) = (1i32 << inner_scale, 1i32 << outer_scale);
    let clusters = OpenClusters::build(w, n_in, n_out);
    // BFS over contracted clusters: cluster distance = number of closed edges.
    let mut level = vec![u32::MAX; lat.vertex_count()];
    let mut queue = std::collections::VecDeque::new();
    let mut members: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
    for v in 0..lat.vertex_count() {
        if clusters.in_ring(v) {
            members.entry(clusters.parent[v]).or_default().push(v);
        }
    }
    for v in 0..lat.vertex_count() {
        if clusters.in_ring(v) && lat.vertex(v).radius() == n_in {
            let c = clusters.parent[v];
            if level[c as usize] == u32::MAX {
                level[c as usize] = 0;
                queue.push_back(c);
            }
        }
    }
    while let Some(c) = queue.pop_front() {
        for &v in &members[&c] {
            for (nb, e) in lat.neighbors(v) {
                if !clusters.in_ring(nb) || w.is_open(e) {
                    continue;
                }
                let d = clusters.parent[nb];
                if level[d as usize] == u32::MAX {
                    level[d as usize] = level[c as usize] + 1;
                    queue.push_back(d);
                }
            }
        }
    }
    let kappa = (0..lat.vertex_count())
        .filter(|&v| lat.vertex(v).radius() == n_out)
        .map(|v| level[clusters.parent[v] as usize])
        .min()
        .unwrap_or(u32::MAX);
    let mut cuts: Vec<Vec<usize>> = vec![Vec::new(); kappa as usize];
    for (i, e) in lat.edges().enumerate() {
        let (a, b) = lat.endpoints(e);
        if !clusters.in_ring(a) || !clusters.in_ring(b) || w.is_open(e) {
            continue;
        }
        let (la, lb) = (level[clusters.parent[a] as usize], level[clusters.parent[b] as usize]);
        let (lo, hi) = (la.min(lb), la.max(lb));
        if hi == lo + 1 && hi <= kappa {
            cuts[(hi - 1) as usize].push(i);
        }
    }
    let rho = cuts.len() as u32;
    let out = CutCount { kappa, rho, level_cuts: cuts };
    if !verify_cuts(w, n_in, n_out, &out) {
        return Err(CircuitError::BadRegion("constructed cut family failed verification".into()));
    }
    Ok(out)
}

/// Every cut separates the boundaries, the cuts are pairwise disjoint, and
/// there are `kappa` of them.
pub fn verify_cuts<W: Weights>(w: &W, n_in: i32, n_out: i32, count: &CutCount) -> bool {
    let lat = w.lattice();
    let mut all = std::collections::HashSet::new();
    for cut in &count.level_cuts {
        for &e in cut {
            if !all.insert(e) {
                return false;
            }
        }
    }
    for cut in &count.level_cuts {
        let blocked: std::collections::HashSet<usize> = cut.iter().copied().collect();
        // Search from the inner boundary using any edge of the ring except the cut.
        let mut seen = vec![false; lat.vertex_count()];
        let mut stack: Vec<usize> = (0..lat.vertex_count())
            .filter(|&v| lat.vertex(v).radius() == n_in)
            .collect();
        for &v in &stack {
            seen[v] = true;
        }
        while let Some(u) = stack.pop() {
            if lat.vertex(u).radius() == n_out {
                return false;
            }
            for (nb, e) in lat.neighbors(u) {
                let r = lat.vertex(nb).radius();
                if seen[nb] || r < n_in || r > n_out || blocked.contains(&lat.edge_index(e)) {
                    continue;
                }
                seen[nb] = true;
                stack.push(nb);
            }
        }
    }
    count.kappa == count.rho
}

/// `G`: the number of disjoint closed separating sets around `S(2^inner)`
/// inside `S(2^outer)`, equal to `rho`.
pub fn count_disjoint_circuits<W: Weights>(w: &W, inner_scale: u32, outer_scale: u32) -> Result<u32, CircuitError> {
    Ok(kappa_rho(w, inner_scale, outer_scale)?.rho)
}
