//! Exhaustive reference computations for tiny windows, written without the
//! search, circuit or resampling code they check.

use crate::config::{EdgeConfig, Weights};
use crate::lattice::SlabLattice;

use super::Oracles;

/// Cycle-enumeration step budget for [`BruteForce::innermost_area`].
pub const CYCLE_BUDGET: u64 = 3_000_000;

#[derive(Debug, Clone, Copy, Default)]
pub struct BruteForce;

fn bellman(lat: &SlabLattice, weight: impl Fn(usize) -> u32, src: &[usize], dst: &[usize]) -> Option<u32> {
    let mut d = vec![u32::MAX; lat.vertex_count()];
    for &s in src {
        d[s] = 0;
    }
    loop {
        let mut changed = false;
        for e in lat.edges() {
            let (a, b) = lat.endpoints(e);
            let t = weight(lat.edge_index(e));
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

fn winding_around(lat: &SlabLattice, cycle: &[usize], cx: f64, cy: f64) -> i32 {
    let mut total = 0.0f64;
    for (i, &a) in cycle.iter().enumerate() {
        let (a, b) = (lat.vertex(a), lat.vertex(cycle[(i + 1) % cycle.len()]));
        let (ax, ay) = (a.x as f64 - cx, a.y as f64 - cy);
        let (bx, by) = (b.x as f64 - cx, b.y as f64 - cy);
        total += (ax * by - ay * bx).atan2(ax * bx + ay * by);
    }
    (total / std::f64::consts::TAU).round() as i32
}

fn enclosed_faces(lat: &SlabLattice, cycle: &[usize]) -> u64 {
    let r = cycle.iter().map(|&v| lat.vertex(v).radius()).max().unwrap_or(0);
    let mut count = 0;
    for b in -r..r {
        for a in -r..r {
            if winding_around(lat, cycle, a as f64 + 0.5, b as f64 + 0.5) != 0 {
                count += 1;
            }
        }
    }
    count
}

impl Oracles for BruteForce {
    fn passage(&self, w: &EdgeConfig, src: &[usize], dst: &[usize]) -> Option<u32> {
        let lat = w.lattice();
        bellman(lat, |i| u32::from(w.is_closed_index(i)), src, dst)
    }

    fn geodesic(&self, w: &EdgeConfig, src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
        type Key = (u32, usize, Vec<usize>);
        let mut best: Option<(Key, Vec<usize>)> = None;
        fn walk(
            w: &EdgeConfig,
            dst: &[usize],
            path: &mut Vec<usize>,
            edges: &mut Vec<usize>,
            cost: u32,
            best: &mut Option<(Key, Vec<usize>)>,
        ) {
            let lat = w.lattice();
            let u = *path.last().expect("non-empty");
            if dst.contains(&u) {
                let key = (cost, path[0], edges.clone());
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    *best = Some((key, path.clone()));
                }
                return;
            }
            for (v, e) in lat.neighbors(u) {
                if path.contains(&v) {
                    continue;
                }
                let i = lat.edge_index(e);
                path.push(v);
                edges.push(i);
                walk(w, dst, path, edges, cost + u32::from(w.is_closed_index(i)), best);
                path.pop();
                edges.pop();
            }
        }
        for &s in src {
            walk(w, dst, &mut vec![s], &mut Vec::new(), 0, &mut best);
        }
        best.map(|(_, p)| p)
    }

    fn innermost_area(&self, w: &EdgeConfig, inner: i32, outer: i32) -> Option<Option<u64>> {
        let lat = w.lattice();
        let inside = |v: usize| {
            let r = lat.vertex(v).radius();
            r > inner && r <= outer
        };
        let n = lat.vertex_count();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|v| {
                if !inside(v) {
                    return Vec::new();
                }
                lat.neighbors(v)
                    .into_iter()
                    .filter(|&(u, e)| inside(u) && !w.is_closed_index(lat.edge_index(e)))
                    .map(|(u, _)| u)
                    .collect()
            })
            .collect();
        let mut best: Option<u64> = None;
        let mut steps = 0u64;
        let mut on = vec![false; n];
        // Each simple cycle is found from its least vertex `s`, in one direction.
        for s in (0..n).filter(|&v| inside(v)) {
            let mut path = vec![s];
            let mut next = vec![0usize];
            on[s] = true;
            while let Some(&top) = path.last() {
                steps += 1;
                if steps > CYCLE_BUDGET {
                    return None;
                }
                let i = next.last_mut().expect("parallel to path");
                if *i >= adj[top].len() {
                    on[top] = false;
                    path.pop();
                    next.pop();
                    continue;
                }
                let u = adj[top][*i];
                *i += 1;
                if u == s && path.len() >= 3 && path[1] < top {
                    if winding_around(lat, &path, 0.0, 0.0).abs() == 1 {
                        let a = enclosed_faces(lat, &path);
                        best = Some(best.map_or(a, |b| b.min(a)));
                    }
                } else if u > s && !on[u] {
                    on[u] = true;
                    path.push(u);
                    next.push(0);
                }
            }
        }
        Some(best)
    }

    fn conditional(&self, w: &EdgeConfig, free: &[usize], p: f64, src: &[usize], dst: &[usize]) -> f64 {
        let lat = w.lattice();
        let mut total = 0.0;
        for bits in 0u64..(1 << free.len()) {
            let mut prob = 1.0;
            let mut closed: Vec<bool> = (0..lat.edge_count()).map(|i| w.is_closed_index(i)).collect();
            for (j, &e) in free.iter().enumerate() {
                let open = bits >> j & 1 == 1;
                closed[e] = !open;
                prob *= if open { p } else { 1.0 - p };
            }
            if prob == 0.0 {
                continue;
            }
            let t = bellman(lat, |i| u32::from(closed[i]), src, dst).expect("connected window");
            total += prob * t as f64;
        }
        total
    }
}
