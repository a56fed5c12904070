use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slabfpp::acceptance::{brute::BruteForce, run_suite, Profile, SuiteConfig};
use slabfpp::critical::PcEstimate;
use slabfpp::harness::{output_dir, run, ExperimentKind, ExperimentSpec, HarnessError, PSetting};

#[derive(Parser)]
#[command(name = "slabfpp", version, about = "Monte Carlo experiments for critical first-passage percolation on slabs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the critical point of the slab by crossing-probability bisection.
    PcEstimate(ExperimentArgs),
    /// Variance of passage times against log n.
    VarianceScan(ExperimentArgs),
    /// Normality of standardized passage times.
    CltCheck(ExperimentArgs),
    /// Circuit scales m(p) and per-sample geometric checks.
    CircuitStats(ExperimentArgs),
    /// Nested estimates of martingale increments.
    MartingaleScan(ExperimentArgs),
    /// Audit of the cut-count duality kappa = rho.
    KappaRhoAudit(ExperimentArgs),
    /// Box crossings and annulus circuits at a fixed p.
    RswCheck(ExperimentArgs),
    /// Run every acceptance criterion and report pass/fail.
    Acceptance(AcceptanceArgs),
}

#[derive(Args)]
struct Common {
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (default: spec `output`, then $SLABFPP_OUT, then ./results).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the edge-open probability of the spec.
    #[arg(long)]
    p: Option<f64>,
    /// pc-estimate only: also write the estimate as a standalone artifact here.
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Smoke,
}

#[derive(Args)]
struct AcceptanceArgs {
    /// Directory holding the pinned pc-k0.json, pc-k1.json and pc-k2.json.
    #[arg(long, default_value = "artifacts")]
    artifacts: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    profile: ProfileArg,
    /// Exit nonzero when any criterion fails.
    #[arg(long)]
    strict: bool,
    /// Accepted for symmetry with the experiment subcommands; the suite is fixed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PcEstimate(a) => experiment(ExperimentKind::PcEstimate, a),
        Command::VarianceScan(a) => experiment(ExperimentKind::VarianceScan, a),
        Command::CltCheck(a) => experiment(ExperimentKind::CltCheck, a),
        Command::CircuitStats(a) => experiment(ExperimentKind::CircuitStats, a),
        Command::MartingaleScan(a) => experiment(ExperimentKind::MartingaleScan, a),
        Command::KappaRhoAudit(a) => experiment(ExperimentKind::KappaRhoAudit, a),
        Command::RswCheck(a) => experiment(ExperimentKind::RswCheck, a),
        Command::Acceptance(a) => acceptance(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn experiment(kind: ExperimentKind, a: ExperimentArgs) -> Result<ExitCode, HarnessError> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| HarnessError::Artifact { path: a.config.display().to_string(), message: e.to_string() })?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    // Parse once for the overrides, then validate the final spec.
    let mut spec = ExperimentSpec::from_toml(&text, Some(base))?.spec;
    if spec.kind != kind {
        return Err(HarnessError::Schema {
            path: "kind".into(),
            message: format!("spec is {}, subcommand is {}", spec.kind.name(), kind.name()),
        });
    }
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    if let Some(w) = a.common.workers {
        spec.workers = w;
    }
    if let Some(p) = a.p {
        spec.p = Some(PSetting::Value(p));
    }
    let dir = output_dir(a.common.out.as_deref(), &spec);
    let resolved = spec.resolve(Some(base))?;
    let (record, path) = match run(&resolved, &dir) {
        Ok(x) => x,
        Err(HarnessError::CensorRate { rate, record, .. }) => {
            eprintln!("partial record written for spec {}", &record.spec_hash[..12]);
            return Err(HarnessError::CensorRate { rate, limit: slabfpp::harness::MAX_CENSOR_RATE, record });
        }
        Err(e) => return Err(e),
    };
    if kind == ExperimentKind::PcEstimate {
        let mut est: PcEstimate = serde_json::from_value(record.aggregate.clone())?;
        est.date = Some(humantime::format_rfc3339_seconds(SystemTime::now()).to_string());
        let target = a.artifact.unwrap_or_else(|| dir.join(format!("pc-k{}.json", est.k)));
        std::fs::write(&target, est.to_json() + "\n")?;
        println!("pc artifact: {}", target.display());
        println!("p_c_hat = {} ci = [{}, {}]", est.p_c_hat, est.ci.0, est.ci.1);
    }
    println!("{}", path.display());
    println!(
        "{} spec {} aggregate {} samples {}/{} censored {}{} ({:.1}s)",
        kind.name(),
        &record.spec_hash[..12],
        &record.aggregate_hash[..12],
        record.samples_done,
        record.samples_requested,
        record.censored,
        if record.partial { " PARTIAL" } else { "" },
        record.wall_time_s
    );
    Ok(ExitCode::SUCCESS)
}

fn acceptance(a: AcceptanceArgs) -> Result<ExitCode, HarnessError> {
    if let Some(c) = &a.config {
        eprintln!("note: acceptance ignores --config {}", c.display());
    }
    let out = a
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os(slabfpp::harness::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(slabfpp::harness::DEFAULT_OUT));
    let cfg = SuiteConfig {
        artifacts: a.artifacts,
        seed: a.common.seed.unwrap_or(20_240_601),
        workers: a.common.workers.unwrap_or(1),
        profile: match a.profile {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Smoke => Profile::Smoke,
        },
        out: Some(out.clone()),
    };
    let report = run_suite(&cfg, &BruteForce, |c| println!("{c}"))?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("acceptance-report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let failed = report.criteria.iter().filter(|c| !c.passed).count();
    println!("{} of {} criteria passed; report {}", report.criteria.len() - failed, report.criteria.len(), path.display());
    Ok(if a.strict && failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}
