use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, Normal, Poisson};
use slabfpp::stats::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn compensated_sum_beats_naive_cancellation() {
    let mut v = vec![1e16, 1.0, -1e16];
    v.extend(std::iter::repeat_n(1.0, 100));
    assert_eq!(compensated_sum(v.iter().copied()), 101.0);
}

#[test]
fn moments_of_known_data() {
    let x = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    assert_eq!(mean(&x), 5.0);
    assert!((variance(&x) - 32.0 / 7.0).abs() < 1e-12);
    let e = Estimate::of(&x);
    assert!((e.stderr - (32.0f64 / 7.0 / 8.0).sqrt()).abs() < 1e-12);
}

#[test]
fn jackknife_interval_covers_true_variance() {
    let normal = Normal::new(3.0, 2.0).unwrap();
    let mut covered = 0;
    for t in 0..200 {
        let mut r = rng(t);
        let x: Vec<f64> = (0..400).map(|_| normal.sample(&mut r)).collect();
        let v = variance_jackknife(&x).unwrap();
        if v.ci_lo <= 4.0 && 4.0 <= v.ci_hi {
            covered += 1;
        }
    }
    assert!((180..=198).contains(&covered), "coverage {covered}/200");
}

#[test]
fn linear_fit_recovers_line() {
    let x: Vec<f64> = (0..20).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|a| 0.25 * a - 3.0).collect();
    let f = linear_fit(&x, &y).unwrap();
    assert!((f.slope - 0.25).abs() < 1e-12 && (f.intercept + 3.0).abs() < 1e-12);
    assert!((f.r2 - 1.0).abs() < 1e-12);
    assert_eq!(linear_fit(&[1.0, 1.0], &[0.0, 2.0]), Err(StatsError::DegenerateX));
    assert!(linear_fit(&[1.0], &[0.0, 2.0]).is_err());
}

#[test]
fn ks_rejects_at_about_one_percent_under_the_null() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rejected = 0;
    for t in 0..400 {
        let mut r = rng(1000 + t);
        let x: Vec<f64> = (0..500).map(|_| normal.sample(&mut r)).collect();
        if ks_normal(&x) >= ks_critical_1pct(x.len()) {
            rejected += 1;
        }
    }
    assert!(rejected <= 12, "rejected {rejected}/400");
}

#[test]
fn normality_flags_skewed_and_degenerate_data() {
    let mut r = rng(7);
    let exp = Exp::new(1.0).unwrap();
    let x: Vec<f64> = (0..2000).map(|_| exp.sample(&mut r)).collect();
    let rep = normality(&x).unwrap();
    assert!(!rep.passed && rep.skewness > 1.5);

    let flat = SampleSet {
        query: Query { kind: "a0n".into(), n: 8, u: None, k: 0, p: 0.5 },
        values: vec![3; 600],
        seed: 1,
        censored: 0,
    };
    let rep = clt_check(&flat).unwrap();
    assert!(rep.degenerate && !rep.passed);
}

#[test]
fn clt_check_accepts_lattice_data_with_spreading() {
    let mut r = rng(11);
    let pois = Poisson::new(400.0).unwrap();
    let values: Vec<u32> = (0..3000).map(|_| pois.sample(&mut r) as u32).collect();
    let set = SampleSet { query: Query { kind: "a0n".into(), n: 64, u: None, k: 0, p: 0.5 }, values, seed: 5, censored: 0 };
    let rep = clt_check(&set).unwrap();
    assert!(rep.passed, "{rep:?}");
    assert!(rep.skewness.abs() < 0.2);

    let short = SampleSet { values: vec![1, 2, 3], ..set };
    assert!(matches!(clt_check(&short), Err(StatsError::TooFew { .. })));
}

#[test]
fn tail_fit_recovers_geometric_rate() {
    let mut r = rng(3);
    let g = Geometric::new(0.2).unwrap();
    let x: Vec<f64> = (0..20000).map(|_| g.sample(&mut r) as f64).collect();
    let fit = tail_fit(&x, TailModel::Exponential).unwrap();
    let want = -(0.8f64).ln();
    assert!((fit.rate - want).abs() < 0.02, "{} vs {want}", fit.rate);
    assert!(fit.r2 > 0.99);

    let grid: Vec<f64> = (0..=6).map(f64::from).collect();
    let fit = survival_fit(&x, &grid, TailModel::Exponential).unwrap();
    assert!((fit.rate - want).abs() < 0.02);
}

#[test]
fn tail_fit_recovers_stretched_rate() {
    let mut r = rng(4);
    let exp = Exp::new(1.5).unwrap();
    let x: Vec<f64> = (0..20000)
        .map(|_| {
            let s: f64 = exp.sample(&mut r);
            s * s
        })
        .collect();
    let fit = tail_fit(&x, TailModel::StretchedSqrt).unwrap();
    assert!((fit.rate - 1.5).abs() < 0.1, "{}", fit.rate);
}

#[test]
fn tail_fit_refuses_thin_tails() {
    let x = vec![0.0, 1.0, 0.0, 1.0, 2.0];
    assert!(matches!(tail_fit(&x, TailModel::Exponential), Err(StatsError::TailMass(_))));
}

#[test]
fn wlln_spread_shrinks_for_independent_increments() {
    let mut r = rng(9);
    let tables: Vec<DeltaTable> = [4u32, 16, 64]
        .iter()
        .map(|&q| DeltaTable {
            q,
            increments: (0..300).map(|_| (0..q).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect(),
        })
        .collect();
    let rep = wlln_check(&tables, |q| q / 4);
    assert!(rep.shrinking);
    let ratio = rep.rows[0].spread / rep.rows[2].spread;
    assert!((3.0..5.5).contains(&ratio), "ratio {ratio}");
    assert!(rep.rows[2].max_lag_corr < 0.35);
}

#[test]
fn plot_csv_has_header_and_rows() {
    let mut buf = Vec::new();
    write_plot_csv(&mut buf, &[PlotPoint { x: 1.0, y: 2.0, ci_lo: 1.5, ci_hi: 2.5 }]).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s, "x,y,ci_lo,ci_hi\n1.0,2.0,1.5,2.5\n");
}
