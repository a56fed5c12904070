mod common;

use proptest::prelude::*;
use slabfpp::circuits::*;
use slabfpp::config::{EdgeConfig, Field, Pinned, Weights};
use slabfpp::lattice::{Dir, Region, SlabLattice, Vertex};
use slabfpp::passage::{passage_time, settle_from, Scratch, VertexSet};

fn square_ring(lat: &SlabLattice, r: i32, z: i32) -> Vec<usize> {
    let mut pts = Vec::new();
    for x in -r..r {
        pts.push((x, -r));
    }
    for y in -r..r {
        pts.push((r, y));
    }
    for x in (-r + 1..=r).rev() {
        pts.push((x, r));
    }
    for y in (-r + 1..=r).rev() {
        pts.push((-r, y));
    }
    pts.into_iter().map(|(x, y)| lat.vertex_index(&Vertex::new(x, y, z)).unwrap()).collect()
}

fn only_cycle(lat: &SlabLattice, cycle: &[usize]) -> Pinned {
    let mut p = Pinned::from_fn(lat, |_| false);
    for i in 0..cycle.len() {
        let e = slabfpp::config::edge_between(lat, cycle[i], cycle[(i + 1) % cycle.len()]).unwrap();
        p.set_open(e, true);
    }
    p
}

fn assert_valid<W: Weights>(w: &W, c: &Circuit, inner: i32, outer: i32) {
    let lat = w.lattice();
    assert_eq!(c.vertices.len(), c.edges.len());
    assert_eq!(c.winding.abs(), 1);
    assert_eq!(common::winding(lat, &c.vertices), c.winding);
    assert_eq!(common::area(lat, &c.vertices), c.enclosed_area);
    let set = c.vertex_set();
    assert!(set.windows(2).all(|p| p[0] < p[1]), "not simple");
    for &v in &c.vertices {
        let r = lat.vertex(v).radius();
        assert!(r > inner && r <= outer, "vertex outside the ring");
    }
    for &e in &c.edges {
        assert!(w.is_open(lat.edge_at(e).unwrap()), "closed edge on circuit");
    }
}

#[test]
fn all_open_gives_flat_inner_ring() {
    let lat = SlabLattice::new(16, 2).unwrap();
    let w = EdgeConfig::constant(&lat, false);
    for p in 0..3u32 {
        let a = Region::Annulus(p);
        assert!(has_surrounding_circuit(&w, &a).unwrap());
        let c = innermost_circuit(&w, &a).unwrap();
        let r = (1 << p) + 1;
        assert_eq!(c.enclosed_area, (2 * r * 2 * r) as u64);
        assert!(c.vertices.iter().all(|&v| lat.vertex(v).z == 0));
        assert!(c.vertices.iter().all(|&v| lat.vertex(v).radius() == r));
        assert_valid(&w, &c, 1 << p, 2 << p);
    }
    let ring = Region::Ring { inner: 1, outer: 3 };
    assert!(has_surrounding_circuit(&w, &ring).unwrap());
}

#[test]
fn all_closed_has_nothing() {
    let lat = SlabLattice::new(16, 1).unwrap();
    let w = EdgeConfig::constant(&lat, true);
    for p in 0..3u32 {
        assert!(!has_surrounding_circuit(&w, &Region::Annulus(p)).unwrap());
        assert!(matches!(innermost_circuit(&w, &Region::Annulus(p)), Err(CircuitError::Absent(_))));
    }
    assert!(has_blocking_surface(&w, 2).unwrap());
    assert!(!has_blocking_surface(&EdgeConfig::constant(&lat, false), 2).unwrap());
}

#[test]
fn rejects_bad_regions() {
    let lat = SlabLattice::new(8, 0).unwrap();
    let w = EdgeConfig::constant(&lat, false);
    assert!(matches!(has_surrounding_circuit(&w, &Region::Annulus(3)), Err(CircuitError::BadRegion(_))));
    assert!(has_surrounding_circuit(&w, &Region::Box(3)).is_err());
    assert!(has_blocking_surface(&w, 5).is_err());
    assert!(kappa_rho(&w, 2, 2).is_err());
    assert!(kappa_rho(&w, 1, 4).is_err());
}

#[test]
fn single_planted_ring_is_returned() {
    let lat = SlabLattice::new(16, 1).unwrap();
    for (r, z) in [(5i32, 0), (6, 1), (8, 1)] {
        let ring = square_ring(&lat, r, z);
        let w = only_cycle(&lat, &ring);
        let c = innermost_circuit(&w, &Region::Annulus(2)).unwrap();
        assert_eq!(c.vertex_set(), { let mut v = ring.clone(); v.sort_unstable(); v });
        assert_eq!(c.enclosed_area, (4 * r * r) as u64);
        assert_eq!(scale_m(&w, 0, 3).unwrap(), Some(2));
        assert_eq!(scale_m(&w, 2, 3).unwrap(), Some(2));
        assert_eq!(scale_m(&w, 3, 3).unwrap(), None);
    }
}

#[test]
fn planted_ring_inside_noise_is_innermost() {
    // A square at radius 5 surrounded by a fully open outer band.
    let lat = SlabLattice::new(16, 1).unwrap();
    let ring = square_ring(&lat, 5, 1);
    let mut w = only_cycle(&lat, &ring);
    for e in lat.edges() {
        let (a, b) = lat.endpoints(e);
        if lat.vertex(a).radius() >= 7 && lat.vertex(b).radius() >= 7 {
            w.set_open(e, true);
        }
    }
    let c = innermost_circuit(&w, &Region::Annulus(2)).unwrap();
    assert_eq!(c.enclosed_area, 100);
    assert!(c.vertices.iter().all(|&v| lat.vertex(v).z == 1));
}

#[test]
fn scale_function_skips_to_later_annulus() {
    let lat = SlabLattice::new(16, 0).unwrap();
    let w = only_cycle(&lat, &square_ring(&lat, 6, 0));
    assert_eq!(scale_m(&w, 0, 3).unwrap(), Some(2));
    assert_eq!(scale_m(&w, 1, 3).unwrap(), Some(2));
    let sf = ScaleFunction::scan(&w, 3).unwrap();
    assert_eq!(sf.has_circuit, vec![false, false, true, false]);
    assert_eq!(sf.m(0), Some(2));
    assert_eq!(sf.m(3), None);
    let (m, c) = circuit_at_scale(&w, 1, 3).unwrap().unwrap();
    assert_eq!(m, 2);
    assert_eq!(c.enclosed_area, 144);
}

#[test]
fn existence_matches_exhaustive_cycles_on_tiny_rings() {
    let mut checked = 0;
    for seed in 0..400u64 {
        let k = (seed % 2) as u32;
        let lat = SlabLattice::new(3, k).unwrap();
        let p = [0.55, 0.65, 0.75, 0.85][(seed / 2 % 4) as usize];
        let w = Field::new(&lat, p, 7000 + seed).unwrap().materialize();
        for (inner, outer) in [(0, 2), (1, 3)] {
            let Some(cycles) = common::surrounding(&w, inner, outer, 3_000_000) else { continue };
            checked += 1;
            let region = Region::Ring { inner: inner as u32, outer: outer as u32 };
            let got = has_surrounding_circuit(&w, &region).unwrap();
            assert_eq!(got, !cycles.is_empty(), "seed {seed} ring {inner}..{outer}");
            if got {
                let c = innermost_circuit(&w, &region).unwrap();
                assert_valid(&w, &c, inner, outer);
                let best = cycles.iter().map(|(_, a)| *a).min().unwrap();
                assert_eq!(c.enclosed_area, best, "seed {seed} ring {inner}..{outer}");
            }
        }
    }
    assert!(checked >= 300, "only {checked} instances enumerated");
}

#[test]
fn existence_matches_cover_search_on_16_by_16_annulus() {
    let lat = SlabLattice::new(8, 1).unwrap();
    let mut yes = 0;
    for seed in 0..50u64 {
        let w = Field::new(&lat, 0.5 + 0.004 * seed as f64, 300 + seed).unwrap();
        let got = has_surrounding_circuit(&w, &Region::Annulus(2)).unwrap();
        assert_eq!(got, common::cover_reachable(&w, 4, 8, 6), "seed {seed}");
        yes += got as u32;
    }
    assert!(yes > 5 && yes < 45, "{yes} of 50 have circuits");
}

#[test]
fn innermost_is_idempotent_and_zero_cost() {
    let lat = SlabLattice::new(32, 1).unwrap();
    let mut found = 0;
    for seed in 0..30u64 {
        let w = Field::new(&lat, 0.55, 11 + seed).unwrap();
        for p in 1..4u32 {
            let a = Region::Annulus(p);
            if !has_surrounding_circuit(&w, &a).unwrap() {
                continue;
            }
            found += 1;
            let c = innermost_circuit(&w, &a).unwrap();
            assert_valid(&w, &c, 1 << p, 2 << p);
            let again = innermost_circuit_in(&w, &a, &c.interior(&lat)).unwrap();
            assert_eq!(again, c, "seed {seed} p {p}");
            let mut s = Scratch::new(&lat);
            for &v in c.vertices.iter().step_by(5) {
                let r = passage_time(&w, &mut s, &VertexSet::Point(c.vertices[0]), &VertexSet::Point(v)).unwrap();
                assert_eq!(r.value, 0);
            }
            // Json round trip validates the edge cycle.
            assert_eq!(Circuit::from_json(&lat, &c.to_json()).unwrap().canonical_edges(), c.canonical_edges());
        }
    }
    assert!(found > 15, "{found}");
}

#[test]
fn fact_dichotomy_and_column_bound() {
    let lat = SlabLattice::new(32, 2).unwrap();
    let mut pairs = 0;
    for seed in 0..40u64 {
        let w = Field::new(&lat, 0.4, 90 + seed).unwrap();
        let cs: Vec<Option<(u32, Circuit)>> = (0..4).map(|p| circuit_at_scale(&w, p, 3).unwrap()).collect();
        let mut s = Scratch::new(&lat);
        settle_from(&w, &mut s, &VertexSet::Point(lat.origin()), u32::MAX).unwrap();
        for (p1, c1) in cs.iter().enumerate() {
            let Some((m1, c1)) = c1 else { continue };
            assert!(*m1 as usize >= p1);
            let t_c = c1.vertices.iter().map(|&v| s.distance(v).unwrap()).min().unwrap();
            for x in c1.thickened(&lat) {
                assert!(s.distance(x).unwrap().abs_diff(t_c) <= lat.thickness());
            }
            for c2 in cs.iter().skip(p1 + 1) {
                let Some((m2, c2)) = c2 else { continue };
                pairs += 1;
                assert!(m2 >= m1);
                if m1 == m2 {
                    assert_eq!(c1, c2);
                } else {
                    let int = c2.interior(&lat);
                    for &v in &c1.vertices {
                        let q = lat.vertex(v);
                        assert!(int.strictly_inside(q.x, q.y));
                    }
                }
            }
        }
    }
    assert!(pairs > 20, "{pairs}");
}

#[test]
fn circuit_dump_rejects_garbage() {
    let lat = SlabLattice::new(8, 0).unwrap();
    let w = EdgeConfig::constant(&lat, false);
    let c = innermost_circuit(&w, &Region::Annulus(1)).unwrap();
    let json = c.to_json();
    assert!(Circuit::from_json(&lat, &json).is_ok());
    assert!(Circuit::from_json(&lat, "{").is_err());
    assert!(Circuit::from_json(&lat, r#"{"edges":[1,2,3],"winding":1,"enclosed_area":1}"#).is_err());
    let mut bad = c.clone();
    bad.enclosed_area += 1;
    assert!(Circuit::from_json(&lat, &bad.to_json()).is_err());
    let mut open = c.clone();
    open.edges.pop();
    assert!(Circuit::from_json(&lat, &open.to_json()).is_err());
    let mut big = c.clone();
    big.edges[0] = lat.edge_count();
    assert!(Circuit::from_json(&lat, &big.to_json()).is_err());
}

#[test]
fn kappa_rho_on_constants() {
    let lat = SlabLattice::new(8, 0).unwrap();
    let open = EdgeConfig::constant(&lat, false);
    let cc = kappa_rho(&open, 0, 2).unwrap();
    assert_eq!((cc.kappa, cc.rho), (0, 0));
    assert_eq!(count_disjoint_circuits(&open, 0, 3).unwrap(), 0);
    let closed = EdgeConfig::constant(&lat, true);
    for (j, k) in [(0, 1), (0, 3), (1, 3)] {
        let cc = kappa_rho(&closed, j, k).unwrap();
        assert_eq!(cc.kappa, (1 << k) - (1 << j));
        assert_eq!(cc.rho, cc.kappa);
        assert_eq!(cc.level_cuts.len(), cc.kappa as usize);
    }
}

#[test]
fn kappa_matches_bellman_and_blocking_agrees() {
    for seed in 0..120u64 {
        let k = (seed % 3) as u32;
        let lat = SlabLattice::new(8, k).unwrap();
        let p = [0.3, 0.5, 0.7][(seed % 3) as usize];
        let w = Field::new(&lat, p, 555 + seed).unwrap();
        let (j, kk) = [(0, 2), (1, 3), (0, 3)][(seed / 3 % 3) as usize];
        let (n_in, n_out) = (1i32 << j, 1i32 << kk);
        let cc = kappa_rho(&w, j, kk).unwrap();
        let ring = |v: usize| {
            let r = lat.vertex(v).radius();
            r >= n_in && r <= n_out
        };
        let src: Vec<usize> = (0..lat.vertex_count()).filter(|&v| lat.vertex(v).radius() == n_in).collect();
        let dst: Vec<usize> = (0..lat.vertex_count()).filter(|&v| lat.vertex(v).radius() == n_out).collect();
        assert_eq!(Some(cc.kappa), common::bellman(&w, &src, &dst, ring), "seed {seed}");
        assert_eq!(cc.kappa, cc.rho);
        assert!(verify_cuts(&w, n_in, n_out, &cc));
        if kk == j + 1 {
            assert_eq!(has_blocking_surface(&w, n_in as u32).unwrap(), cc.kappa >= 1);
        }
        let doubling = kappa_rho(&w, j, j + 1).unwrap();
        assert_eq!(has_blocking_surface(&w, n_in as u32).unwrap(), doubling.kappa >= 1);
    }
}

#[test]
fn tampered_cut_family_fails_verification() {
    let lat = SlabLattice::new(8, 1).unwrap();
    let w = EdgeConfig::constant(&lat, true);
    let mut cc = kappa_rho(&w, 0, 2).unwrap();
    assert!(verify_cuts(&w, 1, 4, &cc));
    cc.level_cuts[0].pop();
    assert!(!verify_cuts(&w, 1, 4, &cc));
    let mut dup = kappa_rho(&w, 0, 2).unwrap();
    let e = dup.level_cuts[0][0];
    dup.level_cuts[1].push(e);
    assert!(!verify_cuts(&w, 1, 4, &dup));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn opening_an_edge_never_destroys_a_circuit(seed in 0u64..10_000, pick in 0usize..10_000, k in 0u32..3) {
        let lat = SlabLattice::new(8, k).unwrap();
        let mut cfg = Field::new(&lat, 0.6, seed).unwrap().materialize();
        let before = has_surrounding_circuit(&cfg, &Region::Annulus(1)).unwrap();
        let closed: Vec<usize> = (0..lat.edge_count()).filter(|&i| cfg.is_closed_index(i)).collect();
        prop_assume!(!closed.is_empty());
        cfg.set_closed(closed[pick % closed.len()], false);
        let after = has_surrounding_circuit(&cfg, &Region::Annulus(1)).unwrap();
        prop_assert!(after || !before);
    }

    #[test]
    fn interior_holds_circuit_edges(seed in 0u64..10_000) {
        let lat = SlabLattice::new(16, 1).unwrap();
        let w = Field::new(&lat, 0.7, seed).unwrap();
        if let Ok(c) = innermost_circuit(&w, &Region::Annulus(2)) {
            let int = c.interior(&lat);
            prop_assert_eq!(int.area(), c.enclosed_area);
            for &e in &c.edges {
                prop_assert!(int.holds_edge(&lat, lat.edge_at(e).unwrap()));
            }
            let o = lat.vertex(lat.origin());
            prop_assert!(int.strictly_inside(o.x, o.y));
            for x in -4..=4 {
                prop_assert!(int.in_closure(x, 4) && int.in_closure(4, x));
            }
            let origin_edge = slabfpp::lattice::EdgeRef { base: lat.origin(), dir: Dir::X };
            prop_assert!(int.holds_edge(&lat, origin_edge));
        }
    }
}
