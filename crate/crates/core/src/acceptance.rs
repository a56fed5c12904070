//! Acceptance suite: nine criteria run through the experiment harness, each
//! reported with measured values, thresholds and runtime.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::circuits::{has_surrounding_circuit, innermost_circuit};
use crate::config::{rng_for, substream, EdgeConfig, Field, FrozenMask};
use crate::critical::{PcEstimate, RswReport};
use crate::harness::{
    execute, load_pc, CircuitStats, CltSummary, ExperimentKind, ExperimentSpec, Geometry, HarnessError, KappaRhoAudit,
    MartingaleScan, PSetting, QueryKind, ResolvedSpec, ResultRecord, VarianceScan,
};
use crate::invariants::Tally;
use crate::lattice::{Region, SlabLattice, Vertex};
use crate::martingale::{conditional_expectation_exact, martingale_property_check, NestedSetup, Target};
use crate::passage::{geodesic_lex_min, passage_time, Scratch, VertexSet};
use crate::stats::{clt_check, NormalityReport, Query, SampleSet};

pub mod brute;

/// Criteria expected to fail at desk scale; see the README for the analysis.
pub const KNOWN_INFEASIBLE: &[u32] = &[3, 5, 6, 7];

/// Brute-force references used by criterion 2.
pub trait Oracles: Sync {
    /// `T(src, dst)`, `None` if disconnected.
    fn passage(&self, w: &EdgeConfig, src: &[usize], dst: &[usize]) -> Option<u32>;
    /// Vertices of the least path by (weight, start vertex, canonical edge
    /// indices) among simple paths ending at their first `dst` vertex.
    fn geodesic(&self, w: &EdgeConfig, src: &[usize], dst: &[usize]) -> Option<Vec<usize>>;
    /// Least enclosed area of an open cycle winding once around the origin
    /// among vertices with `inner < radius <= outer`: `Some(None)` if there is
    /// none, `None` if the enumeration budget ran out.
    fn innermost_area(&self, w: &EdgeConfig, inner: i32, outer: i32) -> Option<Option<u64>>;
    /// `E[T(src, dst)]` over the `free` edges resampled with open probability
    /// `p`, all other edges as in `w`.
    fn conditional(&self, w: &EdgeConfig, free: &[usize], p: f64, src: &[usize], dst: &[usize]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Sample sizes and tolerances as specified.
    Full,
    /// Tiny sizes exercising every code path in seconds.
    Smoke,
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    /// Directory holding `pc-k0.json`, `pc-k1.json` and `pc-k2.json`.
    pub artifacts: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub profile: Profile,
    /// Where to write every experiment record, if anywhere.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub known_infeasible: bool,
    pub measured: String,
    pub threshold: String,
    pub seconds: f64,
    pub details: Value,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match (self.passed, self.known_infeasible) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known infeasible)",
            (false, false) => "FAIL",
        };
        write!(
            f,
            "criterion {} {verdict}: {} | measured {} | threshold {} | {:.1}s",
            self.id, self.title, self.measured, self.threshold, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub profile: Profile,
    pub seed: u64,
    pub workers: usize,
    pub criteria: Vec<CriterionReport>,
    pub wall_time_s: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    /// Failures outside [`KNOWN_INFEASIBLE`].
    pub fn unexpected_failures(&self) -> Vec<u32> {
        self.criteria.iter().filter(|c| !c.passed && !c.known_infeasible).map(|c| c.id).collect()
    }
}

/// Sample sizes per profile.
struct Plan {
    full: bool,
    c1_instances: usize,
    c1_window: u32,
    c2_instances: usize,
    c3_pc_samples: usize,
    c3_pc_sizes: Vec<u32>,
    c3_rsw: Vec<u32>,
    c3_rsw_samples: usize,
    c4_n: Vec<u32>,
    c4_samples: usize,
    c4_control_samples: usize,
    c5_n: u32,
    c5_samples: usize,
    c6_samples: usize,
    c6_window: u32,
    c7_n: Vec<u32>,
    c7_outer: usize,
    c7_inner: usize,
    c7_property_outer: usize,
    c8_checks: usize,
    c8_window: u32,
}

impl Plan {
    fn new(profile: Profile) -> Plan {
        match profile {
            Profile::Full => Plan {
                full: true,
                c1_instances: 10_000,
                c1_window: 64,
                c2_instances: 200,
                c3_pc_samples: 2000,
                c3_pc_sizes: vec![32, 64, 128],
                c3_rsw: vec![16, 32, 64],
                c3_rsw_samples: 1000,
                c4_n: vec![16, 32, 64, 128, 256, 512],
                c4_samples: 2000,
                c4_control_samples: 500,
                c5_n: 512,
                c5_samples: 2000,
                c6_samples: 2000,
                c6_window: 256,
                c7_n: vec![16, 32, 64, 128],
                c7_outer: 200,
                c7_inner: 64,
                c7_property_outer: 50,
                c8_checks: 20,
                c8_window: 64,
            },
            Profile::Smoke => Plan {
                full: false,
                c1_instances: 90,
                c1_window: 16,
                c2_instances: 20,
                c3_pc_samples: 200,
                c3_pc_sizes: vec![8, 16],
                c3_rsw: vec![8],
                c3_rsw_samples: 50,
                c4_n: vec![4, 8, 16],
                c4_samples: 200,
                c4_control_samples: 100,
                c5_n: 16,
                c5_samples: 600,
                c6_samples: 100,
                c6_window: 32,
                c7_n: vec![4, 8],
                c7_outer: 8,
                c7_inner: 4,
                c7_property_outer: 4,
                c8_checks: 3,
                c8_window: 16,
            },
        }
    }
}

struct Runner<'a> {
    cfg: &'a SuiteConfig,
    plan: Plan,
}

impl Runner<'_> {
    fn pc_path(&self, k: u32) -> PathBuf {
        self.cfg.artifacts.join(format!("pc-k{k}.json"))
    }

    fn spec(&self, kind: ExperimentKind, k: u32, p: PSetting) -> ExperimentSpec {
        ExperimentSpec {
            kind,
            seed: self.cfg.seed,
            workers: self.cfg.workers,
            output: None,
            geometry: Geometry { k, half_width: None, n: None, n_list: None, u: None },
            p: Some(p),
            samples: None,
            inner: None,
            tolerance: None,
            sizes: None,
            rho: None,
            query: None,
            scale: None,
            invariants: None,
            per_sample_csv: true,
            time_limit_s: None,
        }
    }

    fn critical(&self, k: u32) -> PSetting {
        PSetting::Reference(format!("critical:{}", self.pc_path(k).display()))
    }

    /// Executes a spec, keeping the record of a censor-rate abort.
    fn execute(&self, spec: ExperimentSpec) -> Result<(ResolvedSpec, ResultRecord), HarnessError> {
        let resolved = spec.resolve(None)?;
        let record = match execute(&resolved) {
            Ok(r) => r,
            Err(HarnessError::CensorRate { record, .. }) => *record,
            Err(e) => return Err(e),
        };
        if let Some(dir) = &self.cfg.out {
            record.write(dir, resolved.spec.per_sample_csv)?;
        }
        Ok((resolved, record))
    }

    fn budget(&self, seconds: f64, limit: f64) -> bool {
        !self.plan.full || seconds <= limit
    }
}

fn parse<T: serde::de::DeserializeOwned>(record: &ResultRecord) -> Result<T, HarnessError> {
    Ok(serde_json::from_value(record.aggregate.clone())?)
}

fn report(id: u32, title: &str, passed: bool, measured: String, threshold: &str, start: Instant, details: Value) -> CriterionReport {
    CriterionReport {
        id,
        title: title.into(),
        passed,
        known_infeasible: KNOWN_INFEASIBLE.contains(&id),
        measured,
        threshold: threshold.into(),
        seconds: start.elapsed().as_secs_f64(),
        details,
    }
}

/// Runs all nine criteria, printing each line through `sink` as it finishes.
pub fn run_suite(
    cfg: &SuiteConfig,
    oracles: &dyn Oracles,
    mut sink: impl FnMut(&CriterionReport),
) -> Result<SuiteReport, HarnessError> {
    let start = Instant::now();
    let pc = [0, 1, 2].map(|k| load_pc(&cfg.artifacts.join(format!("pc-k{k}.json"))));
    let pc = match pc {
        [Ok(a), Ok(b), Ok(c)] => [a, b, c],
        [a, b, c] => return Err([a, b, c].into_iter().find_map(Result::err).expect("one failed")),
    };
    for (k, est) in pc.iter().enumerate() {
        if est.k != k as u32 {
            return Err(HarnessError::Artifact { path: format!("pc-k{k}.json"), message: format!("holds k = {}", est.k) });
        }
    }
    let r = Runner { cfg, plan: Plan::new(cfg.profile) };
    let mut out = Vec::new();
    let mut push = |c: CriterionReport, out: &mut Vec<CriterionReport>| {
        sink(&c);
        out.push(c);
    };

    let (c1, c1_spec) = criterion1(&r)?;
    push(c1, &mut out);
    push(criterion2(&r, oracles), &mut out);
    let (c3, c3_spec) = criterion3(&r)?;
    push(c3, &mut out);
    let (c4, b512) = criterion4(&r)?;
    push(c4, &mut out);
    push(criterion5(&r, b512)?, &mut out);
    let (c7, mart) = criterion7(&r)?;
    let (c6, c6_spec, c6_tally) = criterion6(&r, &mart)?;
    push(c6, &mut out);
    push(c7, &mut out);
    push(criterion8(&r, c6_tally)?, &mut out);
    push(criterion9(&r, &[c1_spec, c3_spec, c6_spec])?, &mut out);

    Ok(SuiteReport {
        profile: cfg.profile,
        seed: cfg.seed,
        workers: cfg.workers,
        criteria: out,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn criterion1(r: &Runner) -> Result<(CriterionReport, ExperimentSpec), HarnessError> {
    let start = Instant::now();
    let combos: Vec<(u32, PSetting)> = (0..3u32)
        .flat_map(|k| [PSetting::Value(0.3), r.critical(k), PSetting::Value(0.7)].map(|p| (k, p)))
        .collect();
    let per = r.plan.c1_instances.div_ceil(combos.len());
    let (mut instances, mut equal, mut verified) = (0, 0, 0);
    let mut failures = Vec::new();
    let mut example = None;
    for (i, (k, p)) in combos.into_iter().enumerate() {
        let mut spec = r.spec(ExperimentKind::KappaRhoAudit, k, p);
        spec.seed = substream(r.cfg.seed, i as u64);
        spec.samples = Some(per);
        spec.geometry.half_width = Some(r.plan.c1_window);
        let (_, rec) = r.execute(spec.clone())?;
        let a: KappaRhoAudit = parse(&rec)?;
        instances += a.instances;
        equal += a.equal;
        verified += a.verified;
        failures.extend(a.failures.into_iter().map(|f| json!({"k": k, "p": a.p, "failure": f})));
        if k == 1 && matches!(spec.p, Some(PSetting::Reference(_))) {
            example = Some(spec);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = instances >= r.plan.c1_instances && equal == instances && verified == instances && r.budget(secs, 120.0);
    let c = report(
        1,
        "kappa = rho with verified disjoint separating cuts",
        passed,
        format!("{equal}/{instances} equal, {verified}/{instances} verified"),
        "100% over >= 10000 instances, <= 120 s",
        start,
        json!({"instances": instances, "equal": equal, "verified": verified, "failures": failures}),
    );
    Ok((c, example.expect("k = 1 critical combo")))
}

fn criterion2(r: &Runner, oracles: &dyn Oracles) -> CriterionReport {
    let start = Instant::now();
    let need = r.plan.c2_instances;
    let mut counts = serde_json::Map::new();
    let mut mismatches: Vec<String> = Vec::new();
    let seed = substream(r.cfg.seed, 2);

    // passage_time against Bellman-Ford on 5x5x2 windows.
    let mut checked = 0;
    for i in 0..need as u64 {
        let k = (i % 2) as u32;
        let lat = SlabLattice::new(2, k).expect("valid");
        let s = substream(seed, i);
        let cfg = Field::new(&lat, [0.3, 0.5, 0.7][(i % 3) as usize], s).expect("valid").materialize();
        let mut rng = rng_for(s);
        let nv = lat.vertex_count();
        let src: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..nv)).collect();
        let dst: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..nv)).collect();
        let mut scratch = Scratch::new(&lat);
        let got = passage_time(&cfg, &mut scratch, &VertexSet::points(src.clone()), &VertexSet::points(dst.clone()))
            .ok()
            .map(|x| x.value);
        if got != oracles.passage(&cfg, &src, &dst) {
            mismatches.push(format!("passage_time instance {i}"));
        }
        checked += 1;
    }
    counts.insert("passage_time".into(), checked.into());

    // geodesic_lex_min against path enumeration on 3x3x2 and 5x5x1 windows.
    let mut checked = 0;
    for i in 0..need as u64 {
        let (l, k) = if i % 2 == 0 { (1, 1) } else { (2, 0) };
        let lat = SlabLattice::new(l, k).expect("valid");
        let s = substream(seed ^ 0x6765_6f64, i);
        let cfg = Field::new(&lat, 0.5, s).expect("valid").materialize();
        let mut rng = rng_for(s);
        let nv = lat.vertex_count();
        let src = vec![lat.origin()];
        let mut dst: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..nv)).collect();
        dst.retain(|&v| v != lat.origin());
        if dst.is_empty() {
            dst.push(nv - 1);
        }
        let mut scratch = Scratch::new(&lat);
        let got = geodesic_lex_min(&cfg, &mut scratch, &VertexSet::points(src.clone()), &VertexSet::points(dst.clone()))
            .ok()
            .and_then(|x| x.geodesic);
        if got != oracles.geodesic(&cfg, &src, &dst) {
            mismatches.push(format!("geodesic_lex_min instance {i}"));
        }
        checked += 1;
    }
    counts.insert("geodesic_lex_min".into(), checked.into());

    // Circuit existence and innermost area against cycle enumeration on 5x5 rings.
    let (mut existence, mut area, mut tried) = (0, 0, 0u64);
    while (existence < need || area < need) && tried < 50 * need as u64 {
        let i = tried;
        tried += 1;
        let k = if i % 3 == 2 { 1 } else { 0 };
        let lat = SlabLattice::new(2, k).expect("valid");
        let p = [0.6, 0.7, 0.8, 0.9][(i / 3 % 4) as usize] - 0.15 * k as f64;
        let cfg = Field::new(&lat, p, substream(seed ^ 0x6369_7263, i)).expect("valid").materialize();
        let Some(want) = oracles.innermost_area(&cfg, 0, 2) else { continue };
        let region = Region::Ring { inner: 0, outer: 2 };
        let got = has_surrounding_circuit(&cfg, &region).ok();
        existence += 1;
        if got != Some(want.is_some()) {
            mismatches.push(format!("has_surrounding_circuit instance {i}"));
            continue;
        }
        if let Some(a) = want {
            area += 1;
            if innermost_circuit(&cfg, &region).ok().map(|c| c.enclosed_area) != Some(a) {
                mismatches.push(format!("innermost_circuit instance {i}"));
            }
        }
    }
    counts.insert("has_surrounding_circuit".into(), existence.into());
    counts.insert("innermost_circuit".into(), area.into());

    // Exact conditional expectation against completion enumeration.
    let mut checked = 0;
    for i in 0..need as u64 {
        let k = (i % 2) as u32;
        let lat = SlabLattice::new(2, k).expect("valid");
        let s = substream(seed ^ 0x636f_6e64, i);
        let p = [0.3, 0.5, 0.7][(i % 3) as usize];
        let cfg = Field::new(&lat, p, s).expect("valid").materialize();
        let mut rng = rng_for(s);
        let mut idx: Vec<usize> = (0..lat.edge_count()).collect();
        idx.shuffle(&mut rng);
        let mut free = idx[..rng.random_range(4..=12)].to_vec();
        free.sort_unstable();
        let mut mask = FrozenMask::none(&lat);
        for e in 0..lat.edge_count() {
            if free.binary_search(&e).is_err() {
                mask.freeze(e);
            }
        }
        let corner = lat.vertex_index(&Vertex::new(2, 1, k as i32)).expect("inside");
        let ring: Vec<usize> = (0..lat.vertex_count()).filter(|&v| lat.vertex(v).radius() == 2).collect();
        let (target, dst) = if i % 4 < 2 {
            (Target::Passage { src: VertexSet::Point(lat.origin()), dst: VertexSet::Point(corner) }, vec![corner])
        } else {
            (Target::Passage { src: VertexSet::Point(lat.origin()), dst: VertexSet::BoxBoundary(2) }, ring)
        };
        let want = oracles.conditional(&cfg, &free, p, &[lat.origin()], &dst);
        match conditional_expectation_exact(&cfg, &mask, &target, p) {
            Ok(got) if (got - want).abs() <= 1e-9 => {}
            _ => mismatches.push(format!("conditional_expectation instance {i}")),
        }
        checked += 1;
    }
    counts.insert("conditional_expectation".into(), checked.into());

    let enough = counts.values().all(|v| v.as_u64().unwrap_or(0) >= need as u64);
    let secs = start.elapsed().as_secs_f64();
    let passed = enough && mismatches.is_empty() && r.budget(secs, 300.0);
    let measured = format!(
        "{} mismatches; instances {}",
        mismatches.len(),
        counts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
    );
    report(
        2,
        "library matches brute-force oracles",
        passed,
        measured,
        &format!("0 mismatches, >= {need} instances each, <= 300 s"),
        start,
        json!({"instances": counts, "mismatches": mismatches}),
    )
}

fn criterion3(r: &Runner) -> Result<(CriterionReport, ExperimentSpec), HarnessError> {
    let start = Instant::now();
    let mut pc = r.spec(ExperimentKind::PcEstimate, 0, PSetting::Value(0.5));
    pc.p = None;
    pc.tolerance = Some(0.005);
    pc.samples = Some(r.plan.c3_pc_samples);
    pc.sizes = Some(r.plan.c3_pc_sizes.clone());
    let (_, rec) = r.execute(pc)?;
    let est: PcEstimate = parse(&rec)?;
    let pc_ok = (est.p_c_hat - 0.5).abs() <= 0.01;

    let mut rsw = r.spec(ExperimentKind::RswCheck, 1, r.critical(1));
    rsw.geometry.n_list = Some(r.plan.c3_rsw.clone());
    rsw.samples = Some(r.plan.c3_rsw_samples);
    rsw.rho = Some(1.0);
    let (_, rec) = r.execute(rsw.clone())?;
    let rep: RswReport = parse(&rec)?;
    let box_ok = rep.rows.iter().all(|row| (0.2..=0.8).contains(&row.box_crossing.f_hat));
    let circ_ok = rep.rows.iter().all(|row| row.circuit_frequency >= 0.05);
    let secs = start.elapsed().as_secs_f64();
    let passed = pc_ok && box_ok && circ_ok && r.budget(secs, 600.0);
    let rows: Vec<String> = rep
        .rows
        .iter()
        .map(|row| format!("n={} f={:.3} circuit={:.4}", row.n, row.box_crossing.f_hat, row.circuit_frequency))
        .collect();
    let c = report(
        3,
        "critical point pinning and box crossings",
        passed,
        format!("p_c(k=0)={:.4}; k=1 at p={:.4}: {}", est.p_c_hat, rep.p, rows.join(", ")),
        "|p_c(k=0) - 0.5| <= 0.01; f in [0.2, 0.8]; circuit frequency >= 0.05; <= 600 s",
        start,
        json!({"pc_k0": est, "rsw": rep, "pc_ok": pc_ok, "box_ok": box_ok, "circuit_ok": circ_ok}),
    );
    Ok((c, rsw))
}

fn criterion4(r: &Runner) -> Result<(CriterionReport, SampleSet), HarnessError> {
    let start = Instant::now();
    let mut spec = r.spec(ExperimentKind::VarianceScan, 1, r.critical(1));
    spec.geometry.n_list = Some(r.plan.c4_n.clone());
    spec.samples = Some(r.plan.c4_samples);
    let (resolved, rec) = r.execute(spec)?;
    let scan: VarianceScan = parse(&rec)?;
    let n_top = *r.plan.c4_n.last().expect("non-empty");
    let top = SampleSet {
        query: Query { kind: "b0n".into(), n: n_top, u: None, k: 1, p: resolved.p },
        values: rec.column(&format!("b0n:n={n_top}")).into_iter().map(|v| v as u32).collect(),
        seed: r.cfg.seed,
        censored: scan.rows.last().map_or(0, |row| row.censored),
    };

    let mut control = r.spec(ExperimentKind::VarianceScan, 1, PSetting::Value(resolved.p - 0.1));
    control.geometry.n_list = Some(r.plan.c4_n.clone());
    control.samples = Some(r.plan.c4_control_samples);
    let (_, crec) = r.execute(control)?;
    let cscan: VarianceScan = parse(&crec)?;

    let secs = start.elapsed().as_secs_f64();
    let passed = scan.log_fit_passed && !cscan.log_fit_passed && !rec.partial && r.budget(secs, 1200.0);
    let fit = |s: &VarianceScan| {
        s.regression.as_ref().map_or("no fit".into(), |g| {
            format!("slope={:.4} r2={:.3} ratio={:.2}", g.slope, g.r2, s.log_ratio.unwrap_or(f64::NAN))
        })
    };
    let c = report(
        4,
        "variance grows like log n at p_c, not below it",
        passed,
        format!("critical {}; control at p-0.1 {} (log fit {})", fit(&scan), fit(&cscan), if cscan.log_fit_passed { "passes" } else { "fails" }),
        "slope > 0, r2 >= 0.8, max/min Var/log n <= 3; control fails the fit; <= 1200 s",
        start,
        json!({"critical": scan, "control": cscan}),
    );
    Ok((c, top))
}

fn criterion5(r: &Runner, b: SampleSet) -> Result<CriterionReport, HarnessError> {
    let start = Instant::now();
    let b_report = clt_check(&b).ok();
    let mut spec = r.spec(ExperimentKind::CltCheck, 1, r.critical(1));
    spec.query = Some(QueryKind::T0nu);
    spec.geometry.n = Some(r.plan.c5_n);
    spec.geometry.u = Some((std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2));
    spec.samples = Some(r.plan.c5_samples);
    // Too few uncensored values is a failed check, not a suite error.
    let t = match r.execute(spec) {
        Ok((_, rec)) => Ok(parse::<CltSummary>(&rec)?),
        Err(e @ HarnessError::Stats(_)) => Err(e.to_string()),
        Err(e) => return Err(e),
    };
    let secs = start.elapsed().as_secs_f64();
    let describe = |x: Option<&NormalityReport>| {
        x.map_or("unavailable".into(), |n| {
            format!("KS={:.4} (crit {:.4}) skew={:.2} kurt={:.2} distinct={}", n.ks, n.ks_critical, n.skewness, n.excess_kurtosis, !n.degenerate)
        })
    };
    let t_passed = t.as_ref().is_ok_and(|t| t.report.passed);
    let passed = b_report.as_ref().is_some_and(|x| x.passed) && t_passed && r.budget(secs, 900.0);
    let t_text = match &t {
        Ok(t) => describe(Some(&t.report)),
        Err(e) => format!("unavailable ({e})"),
    };
    let t_json = match &t {
        Ok(t) => json!(t),
        Err(e) => json!({"error": e}),
    };
    Ok(report(
        5,
        "standardized passage times are normal",
        passed,
        format!("b(0,{}): {}; T(0,nu): {t_text}", b.query.n, describe(b_report.as_ref())),
        "KS below the 1% critical value for both; <= 900 s",
        start,
        json!({"b0n": b_report, "t0nu": t_json}),
    ))
}

fn criterion6(r: &Runner, mart: &MartingaleScan) -> Result<(CriterionReport, ExperimentSpec, Tally), HarnessError> {
    let start = Instant::now();
    let mut spec = r.spec(ExperimentKind::CircuitStats, 1, r.critical(1));
    spec.geometry.half_width = Some(r.plan.c6_window);
    spec.geometry.n = Some(r.plan.c6_window / 8);
    spec.scale = Some(1);
    spec.samples = Some(r.plan.c6_samples);
    spec.invariants = Some(r.plan.c6_samples.min(200));
    let (_, rec) = r.execute(spec.clone())?;
    let stats: CircuitStats = parse(&rec)?;
    let excess_ok = stats.tail_fit.as_ref().is_some_and(|f| f.rate > 0.0 && f.r2 >= 0.9);
    let delta_ok = mart.delta_tail.as_ref().is_some_and(|f| f.rate > 0.0 && f.r2 >= 0.9);
    let secs = start.elapsed().as_secs_f64();
    let passed = excess_ok && delta_ok && r.budget(secs, 600.0);
    let excess = stats.tail_fit.as_ref().map_or("no fit".into(), |f| format!("rate={:.4} r2={:.3}", f.rate, f.r2));
    let delta = mart
        .delta_tail
        .as_ref()
        .map_or(format!("no fit ({})", mart.delta_tail_error.clone().unwrap_or_default()), |f| {
            format!("rate={:.4} r2={:.3}", f.rate, f.r2)
        });
    let c = report(
        6,
        "exponential tail of m(p) - p and stretched tail of |Delta_p|",
        passed,
        format!("m(1)-1: {excess}, {}/{} without circuit up to p_max; |Delta|: {delta}", stats.censored, stats.samples),
        "negative slope with r2 >= 0.9 for both; <= 600 s",
        start,
        json!({"excess": stats, "delta_tail": mart.delta_tail}),
    );
    Ok((c, spec, stats.invariants))
}

fn criterion7(r: &Runner) -> Result<(CriterionReport, MartingaleScan), HarnessError> {
    let start = Instant::now();
    let mut spec = r.spec(ExperimentKind::MartingaleScan, 1, r.critical(1));
    spec.geometry.n_list = Some(r.plan.c7_n.clone());
    spec.samples = Some(r.plan.c7_outer);
    spec.inner = Some(r.plan.c7_inner);
    let (resolved, rec) = r.execute(spec)?;
    let scan: MartingaleScan = parse(&rec)?;
    let top = scan.scales.last().expect("non-empty");
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let tele = frac(top.telescoping_within, top.used);
    let rem = frac(top.remainder_within, top.remainder_total);
    let growth_ok = scan.growth.as_ref().is_some_and(|g| g.slope > 0.0 && g.r2 >= 0.8);

    // Martingale property on the first outer configuration at the top scale.
    let lat = SlabLattice::new(resolved.half_width, 1)?;
    let setup = NestedSetup::new(&lat, resolved.p, r.plan.c7_inner)?;
    let cfg = Field::new(&lat, resolved.p, substream(r.cfg.seed, 0x7072_6f70))?.materialize();
    let mut property = Vec::new();
    for p in 0..=top.q.min(7) {
        let check = martingale_property_check(&cfg, &setup, p, top.q, r.plan.c7_property_outer, substream(r.cfg.seed, p as u64));
        property.push(match check {
            Ok(c) => json!({"p": p, "passed": c.passed, "mean": c.mean, "stderr": c.stderr, "used": c.used, "censored": c.censored}),
            Err(e) => json!({"p": p, "passed": false, "error": e.to_string()}),
        });
    }
    let property_ok = property.iter().all(|x| x["passed"] == json!(true));
    let secs = start.elapsed().as_secs_f64();
    let passed = top.used > 0 && tele >= 0.95 && property_ok && rem >= 0.99 && growth_ok && r.budget(secs, 900.0);
    let censor: usize = scan.scales.iter().map(|s| s.censored).sum();
    let total: usize = scan.scales.iter().map(|s| s.outer).sum();
    let c = report(
        7,
        "martingale decomposition of the circuit passage time",
        passed,
        format!(
            "n={}: {}/{} uncensored, telescoping {:.3}, remainder {:.3}, property {}/{}, growth {}; censored {censor}/{total} overall",
            top.n,
            top.used,
            top.outer,
            tele,
            rem,
            property.iter().filter(|x| x["passed"] == json!(true)).count(),
            property.len(),
            scan.growth.as_ref().map_or("no fit".into(), |g| format!("slope={:.4} r2={:.3}", g.slope, g.r2)),
        ),
        "telescoping >= 95%, |mean| <= 3 se for p <= 7, remainder >= 99%, growth slope > 0 with r2 >= 0.8; <= 900 s",
        start,
        json!({"scan": scan, "property": property}),
    );
    Ok((c, scan))
}

fn criterion8(r: &Runner, critical: Tally) -> Result<CriterionReport, HarnessError> {
    let start = Instant::now();
    let mut tally = critical;
    let mut runs = vec![json!({"run": "criterion 6", "checked": tally.checked})];
    for (k, p) in [(0u32, 0.65), (1, 0.5), (2, 0.45)] {
        let mut spec = r.spec(ExperimentKind::CircuitStats, k, PSetting::Value(p));
        spec.geometry.half_width = Some(r.plan.c8_window);
        spec.geometry.n = Some(r.plan.c8_window / 4);
        spec.samples = Some(r.plan.c8_checks);
        spec.invariants = Some(r.plan.c8_checks);
        let (_, rec) = r.execute(spec)?;
        let stats: CircuitStats = parse(&rec)?;
        runs.push(json!({"k": k, "p": p, "checked": stats.invariants.checked, "violations": stats.invariants.violations.len()}));
        tally.merge(stats.invariants);
    }
    let passed = tally.checked > 0 && tally.clean();
    Ok(report(
        8,
        "per-sample geometric invariants",
        passed,
        format!("{} violations in {} checks", tally.violations.len(), tally.checked),
        "zero violations",
        start,
        json!({"runs": runs, "violations": tally.violations}),
    ))
}

fn criterion9(r: &Runner, specs: &[ExperimentSpec]) -> Result<CriterionReport, HarnessError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut all_same = true;
    for spec in specs {
        let mut hashes = Vec::new();
        for workers in [1usize, 4, 8] {
            let mut s = spec.clone();
            s.workers = workers;
            let (_, rec) = r.execute(s)?;
            hashes.push(rec.aggregate_hash);
        }
        let same = hashes.windows(2).all(|w| w[0] == w[1]);
        all_same &= same;
        rows.push(json!({"kind": spec.kind.name(), "hashes": hashes, "identical": same}));
    }
    Ok(report(
        9,
        "aggregates identical under 1, 4 and 8 workers",
        all_same,
        format!("{}/{} experiments identical", rows.iter().filter(|x| x["identical"] == json!(true)).count(), rows.len()),
        "identical aggregate hashes",
        start,
        json!({"experiments": rows}),
    ))
}
