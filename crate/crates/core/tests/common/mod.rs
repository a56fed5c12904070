#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use slabfpp::config::Weights;
use slabfpp::lattice::SlabLattice;

/// Bellman-Ford over the vertices accepted by `keep`.
pub fn bellman<W: Weights>(w: &W, src: &[usize], dst: &[usize], keep: impl Fn(usize) -> bool) -> Option<u32> {
    let lat = w.lattice();
    let mut d = vec![u32::MAX; lat.vertex_count()];
    for &s in src {
        if keep(s) {
            d[s] = 0;
        }
    }
    loop {
        let mut changed = false;
        for e in lat.edges() {
            let (a, b) = lat.endpoints(e);
            if !keep(a) || !keep(b) {
                continue;
            }
            let t = w.weight(e);
            for (u, v) in [(a, b), (b, a)] {
                if d[u] != u32::MAX && d[u] + t < d[v] {
                    d[v] = d[u] + t;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dst.iter().map(|&v| d[v]).filter(|&x| x != u32::MAX).min()
}

fn angle_winding(lat: &SlabLattice, cycle: &[usize], cx: f64, cy: f64) -> i32 {
    let n = cycle.len();
    let mut total = 0.0f64;
    for i in 0..n {
        let a = lat.vertex(cycle[i]);
        let b = lat.vertex(cycle[(i + 1) % n]);
        let (ax, ay) = (a.x as f64 - cx, a.y as f64 - cy);
        let (bx, by) = (b.x as f64 - cx, b.y as f64 - cy);
        total += (ax * by - ay * bx).atan2(ax * bx + ay * by);
    }
    (total / std::f64::consts::TAU).round() as i32
}

/// Winding number of the projection around the origin by angle summation.
pub fn winding(lat: &SlabLattice, cycle: &[usize]) -> i32 {
    angle_winding(lat, cycle, 0.0, 0.0)
}

/// Number of unit faces whose centre the projection winds around.
pub fn area(lat: &SlabLattice, cycle: &[usize]) -> u64 {
    let r = cycle.iter().map(|&v| lat.vertex(v).radius()).max().unwrap_or(0);
    let mut count = 0;
    for b in -r..r {
        for a in -r..r {
            if angle_winding(lat, cycle, a as f64 + 0.5, b as f64 + 0.5) != 0 {
                count += 1;
            }
        }
    }
    count
}

/// All simple cycles (each once) of open edges among vertices with
/// `inner < radius <= outer`. `None` once more than `budget` DFS steps are used.
pub fn ring_cycles<W: Weights>(w: &W, inner: i32, outer: i32, budget: u64) -> Option<Vec<Vec<usize>>> {
    let lat = w.lattice();
    let inside = |v: usize| {
        let r = lat.vertex(v).radius();
        r > inner && r <= outer
    };
    let verts: Vec<usize> = (0..lat.vertex_count()).filter(|&v| inside(v)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); lat.vertex_count()];
    for &v in &verts {
        adj[v] = lat.neighbors(v).into_iter().filter(|&(u, e)| inside(u) && w.is_open(e)).map(|(u, _)| u).collect();
    }
    let mut out = Vec::new();
    let mut steps = 0u64;
    let mut on = vec![false; lat.vertex_count()];
    for &s in &verts {
        let mut path = vec![s];
        on[s] = true;
        let mut iters: Vec<usize> = vec![0];
        while let Some(&top) = path.last() {
            steps += 1;
            if steps > budget {
                return None;
            }
            let i = iters.last_mut().unwrap();
            let nbs = &adj[top];
            if *i >= nbs.len() {
                on[top] = false;
                path.pop();
                iters.pop();
                continue;
            }
            let u = nbs[*i];
            *i += 1;
            if u == s && path.len() >= 3 && path[1] < *path.last().unwrap() {
                out.push(path.clone());
            } else if u > s && !on[u] {
                on[u] = true;
                path.push(u);
                iters.push(0);
            }
        }
    }
    Some(out)
}

/// Surrounding cycles (winding +-1) with their areas.
pub fn surrounding<W: Weights>(w: &W, inner: i32, outer: i32, budget: u64) -> Option<Vec<(Vec<usize>, u64)>> {
    let lat = w.lattice();
    Some(
        ring_cycles(w, inner, outer, budget)?
            .into_iter()
            .filter(|c| winding(lat, c).abs() == 1)
            .map(|c| {
                let a = area(lat, &c);
                (c, a)
            })
            .collect(),
    )
}

/// Whether some vertex of the ring reaches its own copy one sheet up in the
/// cyclic cover, searched explicitly with sheets in `-s..=s`.
pub fn cover_reachable<W: Weights>(w: &W, inner: i32, outer: i32, s: i32) -> bool {
    let lat = w.lattice();
    let inside = |v: usize| {
        let r = lat.vertex(v).radius();
        r > inner && r <= outer
    };
    let delta = |a: usize, b: usize| {
        let (p, q) = (lat.vertex(a), lat.vertex(b));
        if p.x == q.x && p.x >= 1 && p.z == q.z {
            if (p.y, q.y) == (0, 1) {
                return 1;
            }
            if (p.y, q.y) == (1, 0) {
                return -1;
            }
        }
        0
    };
    // Every surrounding walk crosses the cut, so roots on the cut suffice.
    let roots: Vec<usize> =
        (0..lat.vertex_count()).filter(|&v| inside(v) && lat.vertex(v).y == 0 && lat.vertex(v).x >= 1).collect();
    for root in roots {
        let mut seen = HashSet::from([(root, 0i32)]);
        let mut q = VecDeque::from([(root, 0)]);
        while let Some((v, sh)) = q.pop_front() {
            for (u, e) in lat.neighbors(v) {
                if !inside(u) || !w.is_open(e) {
                    continue;
                }
                let ns: i32 = sh + delta(v, u);
                if ns.abs() > s {
                    continue;
                }
                if u == root && ns.abs() == 1 {
                    return true;
                }
                if seen.insert((u, ns)) {
                    q.push_back((u, ns));
                }
            }
        }
    }
    false
}
