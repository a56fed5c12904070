use std::path::Path;

use slabfpp::critical::{estimate_pc_with, PcOptions};
use slabfpp::harness::*;

fn spec(text: &str) -> ResolvedSpec {
    ExperimentSpec::from_toml(text, None).unwrap()
}

fn schema_path(text: &str) -> String {
    match ExperimentSpec::from_toml(text, None) {
        Err(HarnessError::Schema { path, .. }) => path,
        other => panic!("expected schema error, got {other:?}"),
    }
}

const VARIANCE: &str = r#"
kind = "variance-scan"
seed = 7
samples = 60
p = 0.45
[geometry]
k = 1
n_list = [4, 8, 16]
"#;

#[test]
fn schema_errors_carry_field_paths() {
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\nsamples = \"many\"\n[geometry]\nk = 1"), "samples");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\n[geometry]\nk = 1\nwidth = 3"), "geometry.width");
    assert_eq!(schema_path("kind = \"nope\"\nseed = 1\n[geometry]\nk = 1"), "kind");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\n[geometry]\nk = -1"), "geometry.k");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\np = 0.4\n[geometry]\nk = 1\nn_list = [8]\nL = 16"), "geometry.L");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\np = 1.4\n[geometry]\nk = 1\nn_list = [8]"), "p");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\n[geometry]\nk = 1\nn_list = [8]"), "p");
    assert_eq!(schema_path("kind = \"rsw-check\"\nseed = 1\np = 0.5\n[geometry]\nk = 1"), "geometry.n_list");
    assert_eq!(schema_path("kind = \"clt-check\"\nseed = 1\np = 0.5\nsamples = 10\n[geometry]\nk = 1\nn = 4"), "samples");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\nworkers = 0\np = 0.5\n[geometry]\nk = 1\nn = 4"), "workers");
    assert_eq!(schema_path("kind = \"variance-scan\"\nseed = 1\np = \"half\"\n[geometry]\nk = 1\nn = 4"), "p");
    assert!(matches!(ExperimentSpec::from_toml("kind = [", None), Err(HarnessError::Schema { .. })));
}

#[test]
fn window_defaults_to_four_query_scales() {
    assert_eq!(spec(VARIANCE).half_width, 64);
    let t = spec(
        "kind = \"clt-check\"\nseed = 1\np = 0.5\nsamples = 500\nquery = \"t0nu\"\n[geometry]\nk = 0\nn = 100\nu = [0.6, 0.8]",
    );
    assert_eq!(t.half_width, 320);
}

#[test]
fn critical_reference_is_loaded_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let opts = PcOptions { sizes: vec![8, 16], samples: 200, ..PcOptions::default() };
    let pc = estimate_pc_with(0, 0.01, 3, &opts).unwrap();
    std::fs::write(dir.path().join("pc.json"), pc.to_json()).unwrap();
    let text = "kind = \"rsw-check\"\nseed = 1\np = \"critical:pc.json\"\n[geometry]\nk = 0\nn_list = [8]";
    let r = ExperimentSpec::from_toml(text, Some(dir.path())).unwrap();
    assert_eq!(r.p, pc.p_c_hat);
    let wrong_k = text.replace("k = 0", "k = 1");
    assert!(matches!(ExperimentSpec::from_toml(&wrong_k, Some(dir.path())), Err(HarnessError::Schema { path, .. }) if path == "p"));
    let missing = text.replace("pc.json", "absent.json");
    assert!(matches!(ExperimentSpec::from_toml(&missing, Some(dir.path())), Err(HarnessError::Artifact { .. })));
}

#[test]
fn planar_pc_estimate_is_one_half() {
    let r = execute(&spec(
        "kind = \"pc-estimate\"\nseed = 11\ntolerance = 0.01\nsamples = 1500\nsizes = [16, 32, 64]\n[geometry]\nk = 0",
    ))
    .unwrap();
    let p = r.aggregate["p_c_hat"].as_f64().unwrap();
    assert!((p - 0.5).abs() <= 0.02, "{p}");
}

#[test]
fn all_open_variance_scan_is_flat_zero() {
    let r = execute(&spec(&VARIANCE.replace("p = 0.45", "p = 1.0"))).unwrap();
    let rows = r.aggregate["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|row| row["variance"]["variance"].as_f64() == Some(0.0)));
    assert_eq!(r.aggregate["regression"]["slope"].as_f64(), Some(0.0));
    assert!(r.column("b0n:n=8").iter().all(|&v| v == 0.0));
}

#[test]
fn aggregates_do_not_depend_on_worker_count() {
    let texts = [
        VARIANCE.to_string(),
        "kind = \"kappa-rho-audit\"\nseed = 3\nsamples = 40\np = 0.5\n[geometry]\nk = 1\nL = 16".to_string(),
        "kind = \"circuit-stats\"\nseed = 3\nsamples = 40\ninvariants = 5\np = 0.6\n[geometry]\nk = 0\nL = 32\nn = 6"
            .to_string(),
        "kind = \"clt-check\"\nseed = 3\nsamples = 500\np = 0.45\n[geometry]\nk = 1\nn = 6".to_string(),
        "kind = \"martingale-scan\"\nseed = 3\nsamples = 6\ninner = 4\np = 0.95\n[geometry]\nk = 0\nn_list = [4]\nL = 16"
            .to_string(),
        "kind = \"rsw-check\"\nseed = 3\nsamples = 30\np = 0.5\n[geometry]\nk = 0\nn_list = [4, 8]".to_string(),
    ];
    for text in texts {
        let base = execute(&spec(&text)).unwrap();
        for workers in [2, 5] {
            let r = execute(&spec(&format!("workers = {workers}\n{text}"))).unwrap();
            assert_eq!(r.aggregate_hash, base.aggregate_hash, "{text}");
            assert_eq!(r.spec_hash, base.spec_hash);
            assert_eq!(r.rows.iter().map(|x| (x.sample, &x.label, x.value)).collect::<Vec<_>>(),
                base.rows.iter().map(|x| (x.sample, &x.label, x.value)).collect::<Vec<_>>());
        }
        assert!(!base.partial, "{text}");
    }
}

#[test]
fn spec_hash_tracks_content() {
    let a = spec(VARIANCE);
    assert_eq!(a.hash(), spec(&format!("output = \"elsewhere\"\n{VARIANCE}")).hash());
    assert_ne!(a.hash(), spec(&VARIANCE.replace("seed = 7", "seed = 8")).hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn run_writes_json_and_traceable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(VARIANCE);
    let (record, path) = run(&s, dir.path()).unwrap();
    assert_eq!(path, dir.path().join(format!("variance-scan-{}.json", &record.spec_hash[..12])));
    let back: ResultRecord = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back.aggregate, record.aggregate);
    assert_eq!(back.aggregate_hash, record.aggregate_hash);
    let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("spec_hash,seed,worker,sample,label,value"));
    let first = lines.next().unwrap();
    assert!(first.starts_with(&format!("{},7,0,0,b0n:n=4,", record.spec_hash)), "{first}");
    assert_eq!(csv.lines().count(), 1 + 3 * 60);
}

#[test]
fn output_directory_precedence() {
    let s = spec(VARIANCE).spec;
    assert_eq!(output_dir(Some(Path::new("x")), &s), Path::new("x"));
    let mut t = s.clone();
    t.output = Some("y".into());
    assert_eq!(output_dir(None, &t), Path::new("y"));
}

#[test]
fn time_limit_yields_partial_record() {
    let r = execute(&spec(&format!("time_limit_s = 1e-9\n{}", VARIANCE.replace("samples = 60", "samples = 5000")))).unwrap();
    assert!(r.partial);
    assert!(r.samples_done < 5000);
}

#[test]
fn censoring_above_two_percent_aborts_with_partial_flush() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("kind = \"martingale-scan\"\nseed = 1\nsamples = 10\ninner = 4\np = 0.2\n[geometry]\nk = 0\nn_list = [4]\nL = 16");
    match run(&s, dir.path()) {
        Err(HarnessError::CensorRate { rate, record, .. }) => {
            assert!(rate > 0.02);
            assert!(record.partial);
            let written = dir.path().join(format!("martingale-scan-{}.json", &record.spec_hash[..12]));
            assert!(written.exists());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bundled_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut kinds = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let spec = ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        kinds.push(spec.spec.kind);
    }
    for kind in ExperimentKind::ALL {
        assert!(kinds.contains(&kind), "no bundled config for {}", kind.name());
    }
}
