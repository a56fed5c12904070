use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const VARIANCE: &str = "kind = \"variance-scan\"\nseed = 7\nsamples = 40\np = 0.45\n[geometry]\nk = 1\nn_list = [4, 8]\n";

fn slabfpp(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slabfpp"));
    cmd.args(args).env_remove("SLABFPP_OUT");
    if let Some(dir) = env_out {
        cmd.env("SLABFPP_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn files_with(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    v
}

fn record(dir: &Path) -> serde_json::Value {
    let json = files_with(dir, "json");
    assert_eq!(json.len(), 1, "{json:?}");
    serde_json::from_str(&std::fs::read_to_string(&json[0]).unwrap()).unwrap()
}

#[test]
fn experiment_writes_record_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "v.toml", VARIANCE);
    let out = tmp.path().join("out");
    let o = slabfpp(&["variance-scan", "--config", &spec, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&out);
    assert_eq!(rec["kind"], "variance-scan");
    assert_eq!(rec["samples_done"], 40);
    let csv = files_with(&out, "csv");
    assert_eq!(std::fs::read_to_string(&csv[0]).unwrap().lines().count(), 1 + 2 * 40);
}

#[test]
fn schema_errors_exit_nonzero_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "bad.toml", &VARIANCE.replace("n_list = [4, 8]", "n_list = [4, 8]\nL = 8"));
    let o = slabfpp(&["variance-scan", "--config", &spec, "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometry.L"));
    assert!(files_with(tmp.path(), "json").is_empty());
}

#[test]
fn subcommand_must_match_spec_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "v.toml", VARIANCE);
    let o = slabfpp(&["clt-check", "--config", &spec, "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind"));
}

#[test]
fn output_directory_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "v.toml", VARIANCE);
    let env_dir = tmp.path().join("from-env");
    let o = slabfpp(&["variance-scan", "--config", &spec], Some(&env_dir));
    assert!(o.status.success());
    assert_eq!(record(&env_dir)["samples_done"], 40);

    let flag_dir = tmp.path().join("from-flag");
    let o = slabfpp(&["variance-scan", "--config", &spec, "--out", flag_dir.to_str().unwrap()], Some(&env_dir));
    assert!(o.status.success());
    assert!(flag_dir.exists());
}

#[test]
fn seed_override_changes_results_and_workers_do_not() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "v.toml", VARIANCE);
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["variance-scan", "--config", &spec, "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(slabfpp(&args, None).status.success());
        record(&dir)
    };
    let base = run("base", &[]);
    let threaded = run("threaded", &["--workers", "3"]);
    let reseeded = run("reseeded", &["--seed", "8"]);
    assert_eq!(base["aggregate_hash"], threaded["aggregate_hash"]);
    assert_eq!(base["spec_hash"], threaded["spec_hash"]);
    assert_eq!(threaded["workers"], 3);
    assert_ne!(base["spec_hash"], reseeded["spec_hash"]);
    assert_eq!(reseeded["seed"], 8);
}

#[test]
fn pc_estimate_writes_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        "pc.toml",
        "kind = \"pc-estimate\"\nseed = 3\ntolerance = 0.02\nsamples = 200\nsizes = [8, 16]\n[geometry]\nk = 0\n",
    );
    let artifact = tmp.path().join("pc-k0.json");
    let o = slabfpp(
        &["pc-estimate", "--config", &spec, "--out", tmp.path().join("out").to_str().unwrap(), "--artifact", artifact.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&artifact).unwrap()).unwrap();
    assert_eq!(est["k"], 0);
    assert!(est["date"].is_string());
    let p = est["p_c_hat"].as_f64().unwrap();
    assert!((0.4..=0.6).contains(&p), "{p}");
}

#[test]
fn acceptance_strict_exit_code_follows_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let artifacts = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../artifacts");
    let out = tmp.path().join("acc");
    let o = slabfpp(
        &[
            "acceptance",
            "--profile",
            "smoke",
            "--strict",
            "--artifacts",
            artifacts.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion ")).count(), 9, "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("acceptance-report.json")).unwrap()).unwrap();
    let failed = report["criteria"].as_array().unwrap().iter().any(|c| c["passed"] == false);
    assert_eq!(o.status.code(), Some(if failed { 2 } else { 0 }));
}

#[test]
fn acceptance_requires_pinned_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = slabfpp(
        &["acceptance", "--profile", "smoke", "--artifacts", tmp.path().to_str().unwrap(), "--out", tmp.path().to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
}
