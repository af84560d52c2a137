use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vaxopt_core::adjoint::ObjectiveKind;
use vaxopt_io::artifact::{Manifest, RunArtifact};
use vaxopt_io::config::RunConfig;
use vaxopt_io::pipeline::run_and_write;

#[derive(Parser)]
#[command(name = "vaxopt", version, about = "Optimal age-stratified vaccine allocation on the SIRDVW model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline simulation with diagnostics, no calibration or optimization.
    Simulate(Common),
    /// Calibrates the model against the configured data.
    Calibrate(Common),
    /// Full run: optional calibration, baseline, optimization, diagnostics.
    Optimize(Common),
    /// Sensitivity surfaces of the reproduction number along the baseline.
    Scan(Common),
    /// Summarizes and verifies a written run.
    Report(Common),
    /// Runs the HTTP/JSON service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Common {
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `<output_dir or runs>/<name>-<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// deceased, infected or hospitalized.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<ObjectiveKind>,
}

#[derive(Args)]
struct ServeArgs {
    /// Config whose output_dir becomes the state directory when `--out` is absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// State directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<ObjectiveKind>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Jobs run at the same time.
    #[arg(long, default_value_t = 2)]
    max_jobs: usize,
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    s.parse().map_err(|e: vaxopt_core::CoreError| e.to_string())
}

type Failure = (u8, String);

fn fail<E: std::fmt::Display>(e: E) -> Failure {
    (2, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => run(&c, Verb::Simulate),
        Command::Calibrate(c) => run(&c, Verb::Calibrate),
        Command::Optimize(c) => run(&c, Verb::Optimize),
        Command::Scan(c) => run(&c, Verb::Scan),
        Command::Report(c) => report(&c),
        Command::Serve(s) => serve(s),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Verb {
    Simulate,
    Calibrate,
    Optimize,
    Scan,
}

fn load(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(fail)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = c.objective {
        cfg.objective = kind;
    }
    Ok(cfg)
}

fn run_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    match &c.out {
        Some(dir) => dir.clone(),
        None => cfg
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(format!("{}-{}", cfg.name, cfg.id())),
    }
}

fn run(c: &Common, verb: Verb) -> Result<(), Failure> {
    let mut cfg = load(c)?;
    match verb {
        Verb::Simulate | Verb::Scan => {
            cfg.optimize = false;
            cfg.calibration = None;
        }
        Verb::Calibrate => {
            match cfg.calibration.as_mut() {
                Some(cal) => cal.enabled = true,
                None => return Err(fail("the config has no [calibration] table")),
            }
            cfg.optimize = false;
        }
        Verb::Optimize => cfg.optimize = true,
    }
    cfg.validate().map_err(fail)?;
    let dir = run_dir(c, &cfg);
    let (art, manifest) = run_and_write(&cfg, &dir).map_err(fail)?;
    println!("run {} -> {}", cfg.id(), dir.display());
    println!("content hash {}", manifest.content_hash);
    for w in &art.warnings {
        println!("warning: {w}");
    }
    match verb {
        Verb::Calibrate => print_calibration(&art),
        Verb::Scan => print_scans(&art),
        Verb::Optimize => print_optimization(&art),
        Verb::Simulate => print_baseline(&art),
    }
    match &art.failure {
        Some(f) => Err((1, format!("stage {} failed: {}", f.stage, f.message))),
        None => Ok(()),
    }
}

fn print_baseline(art: &RunArtifact) {
    if let (Some(traj), Some(params)) = (&art.baseline, &art.params) {
        if let Ok((i, h, d)) = vaxopt_core::analysis::daily_totals(traj, params) {
            let last = |v: &[f64]| v.last().copied().unwrap_or(0.0);
            println!(
                "baseline over {} days: infected {:.1}, hospitalized {:.1}, deceased {:.1} at the end",
                traj.grid().n_days(),
                last(&i),
                last(&h),
                last(&d)
            );
        }
    }
}

fn print_calibration(art: &RunArtifact) {
    let Some(cal) = &art.calibration else {
        return;
    };
    println!("least squares error {:.6e}", cal.least_squares.error);
    println!("{:<12} {:>12} {:>12} {:>12}", "parameter", "median", "2.5%", "97.5%");
    for s in &cal.summaries {
        println!("{:<12} {:>12.6} {:>12.6} {:>12.6}", s.name, s.median, s.ci_low, s.ci_high);
    }
    println!("acceptance rate {:.3}", cal.acceptance_rate);
}

fn print_scans(art: &RunArtifact) {
    println!("{:<6} {:>5} {:>12} {:>12}", "axis", "week", "reference", "range");
    for s in &art.scans {
        println!("{:<6} {:>5} {:>12.6} {:>12.6}", format!("{:?}", s.axis).to_lowercase(), s.week, s.reference, s.range());
    }
}

fn print_optimization(art: &RunArtifact) {
    print_calibration(art);
    print_baseline(art);
    if let Some(t) = &art.trace {
        println!(
            "cost {:.6e} -> {:.6e} in {} iterations (converged: {})",
            t.initial_cost,
            t.final_cost(),
            t.records.len(),
            t.converged
        );
    }
    if let Some(v) = &art.variation {
        let last = |x: &[f64]| x.last().copied().unwrap_or(0.0);
        println!(
            "saved at the end: infected {:.1}, hospitalized {:.1}, deceased {:.1}",
            last(&v.lambda_i),
            last(&v.lambda_h),
            last(&v.lambda_d)
        );
    }
}

fn report(c: &Common) -> Result<(), Failure> {
    let dir = match &c.out {
        Some(d) => d.clone(),
        None => {
            let mut cfg = load(c)?;
            cfg.optimize = true;
            run_dir(c, &cfg)
        }
    };
    report_dir(&dir)
}

fn report_dir(dir: &Path) -> Result<(), Failure> {
    let manifest = Manifest::load(dir).map_err(fail)?;
    let intact = manifest.verify(dir).map_err(fail)?;
    println!("run {} ({})", manifest.name, dir.display());
    println!("config hash  {}", manifest.config_hash);
    println!("content hash {}", manifest.content_hash);
    println!("files {}, digests {}", manifest.files.len(), if intact { "verified" } else { "MISMATCH" });
    let status: serde_json::Value = read_json(dir, "status.json")?;
    println!("stages {}", status.get("stages_completed").map(|v| v.to_string()).unwrap_or_default());
    if let Some(f) = status.get("failure").filter(|f| !f.is_null()) {
        println!("failure {f}");
    }
    if dir.join("trace.json").exists() {
        let trace: vaxopt_core::optimizer::OptimizationTrace = read_json(dir, "trace.json")?;
        println!("cost {:.6e} -> {:.6e} in {} iterations", trace.initial_cost, trace.final_cost(), trace.records.len());
    }
    if dir.join("policy_optimal.json").exists() {
        let p: vaxopt_core::DosingPolicy = read_json(dir, "policy_optimal.json")?;
        let params: vaxopt_core::ModelParams = read_json(dir, "params.json")?;
        println!("first doses by age class:");
        for (label, doses) in params.ages.labels().iter().zip(p.first_doses_by_age()) {
            println!("  {label:<8} {doses:>14.1}");
        }
    }
    if intact {
        Ok(())
    } else {
        Err((1, "artifact files do not match the manifest".into()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, Failure> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(fail)
}

fn serve(s: ServeArgs) -> Result<(), Failure> {
    let dir = match (&s.out, &s.config) {
        (Some(d), _) => d.clone(),
        (None, Some(path)) => {
            let mut cfg = RunConfig::load(path).map_err(fail)?;
            if let Some(seed) = s.seed {
                cfg.seed = seed;
            }
            if let Some(kind) = s.objective {
                cfg.objective = kind;
            }
            cfg.output_dir.unwrap_or_else(|| PathBuf::from("vaxopt-state"))
        }
        (None, None) => PathBuf::from("vaxopt-state"),
    };
    let rt = tokio::runtime::Runtime::new().map_err(fail)?;
    println!("serving {} on http://{}{}", dir.display(), s.bind, vaxopt_server::API_PREFIX);
    rt.block_on(vaxopt_server::serve(s.bind, &dir, s.max_jobs)).map_err(fail)
}
