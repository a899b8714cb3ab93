use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tuplesgd::analysis::{run_checks, strong_convexity_mu, CheckConfig, ConvergenceCheck, Suite};
use tuplesgd::cgm::{
    load_sensor_csv, noise_threshold_mask, solve_cgm, synthetic_stream, window_features, write_sensor_csv,
    CsvSchema, SyntheticStream, TargetPolicy,
};
use tuplesgd::experiments::{preset_by_name, run_experiment, sha256_hex, write_experiment, ExperimentSpec};
use tuplesgd::matrix::norm;
use tuplesgd::solvers::{run_solver_with_mask, MaskMode};
use tuplesgd::textio::{format_mask, format_matrix, format_vector, load_mask, load_matrix, load_vector, read_to_string, write_string};
use tuplesgd::{generate_gaussian_system, run_solver, LinearSystem, Method, Projection, SolverConfig, StepSchedule, TupleMissingModel};

const OUT_ENV: &str = "TUPLESGD_OUT";

#[derive(Parser)]
#[command(name = "tuplesgd", version, about = "SGD solvers for least squares with tuple-missing data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian system (A.txt, y.txt, xstar.txt) or a synthetic sensor CSV
    Gen(GenArgs),
    /// Run one solver on a system read from disk
    Solve(SolveArgs),
    /// Run the exact and Monte-Carlo oracle checks
    Check(CheckArgs),
    /// Run a replicated experiment preset or spec file
    Bench(BenchArgs),
    /// Window a sensor CSV into a tuple-structured system and solve it
    Cgm(CgmArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Solve(_) => "solve",
            Command::Check(_) => "check",
            Command::Bench(_) => "bench",
            Command::Cgm(_) => "cgm",
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a synthetic sensor stream with this many windows instead of a system
    #[arg(long)]
    cgm_windows: Option<usize>,
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long, default_value_t = 300)]
    window_seconds: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleKind {
    Fixed,
    InvMuK,
}

#[derive(Args)]
struct SolveArgs {
    /// Directory holding A.txt, y.txt and xstar.txt
    #[arg(long)]
    system: Option<PathBuf>,
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    xstar: Option<PathBuf>,
    /// sgd, msgd or tuple-msgd
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 1)]
    ell: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScheduleKind::Fixed)]
    schedule: ScheduleKind,
    /// Projection radius; defaults to 2‖x_*‖ under inv-mu-k
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed 0/1 mask file; masks are resampled every step when absent
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    record_every: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// all, unbiased, bias, bound or convergence
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
    ell: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.6, 0.9])]
    p: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 20)]
    bound_points: usize,
    #[arg(long, default_value_t = 200)]
    convergence_replications: usize,
    /// Directory for report.json; the report goes to stdout either way
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// ExperimentSpec JSON file
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output root; the experiment is written to <root>/<name>
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Last,
    Mean,
}

#[derive(Args)]
struct CgmArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON document {timestamp, features: [..], noise, glucose}
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 5)]
    readings: usize,
    #[arg(long, default_value_t = 300.0)]
    window_seconds: f64,
    #[arg(long, default_value_t = 0.4)]
    missing_frac: f64,
    #[arg(long, value_enum, default_value_t = TargetArg::Last)]
    target: TargetArg,
    #[arg(long, value_delimiter = ',', default_values_t = ["sgd".to_string(), "msgd".to_string(), "tuple-msgd".to_string()])]
    methods: Vec<String>,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    /// Defaults to 5 passes over the windows
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = tuplesgd::cgm::DEFAULT_REJECT_CAP)]
    reject_cap: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad flags or flag combinations (exit code 1).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<tuplesgd::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// One `key=value` summary line per run.
struct Summary {
    command: &'static str,
    pass: bool,
    fields: Vec<(String, String)>,
}

impl Summary {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            pass: true,
            fields: Vec::new(),
        }
    }

    fn add(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "ok" } else { "fail" };
        write!(f, "RESULT {} status={status}", self.command)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

fn output_dir(flag: Option<PathBuf>, default_name: &str) -> PathBuf {
    flag.unwrap_or_else(|| output_root(None).join(default_name))
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from))
}

fn checksum_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `files` into `dir` plus a `manifest.json` with checksums of
/// inputs and outputs and the exact command line.
fn emit(dir: &Path, command: &str, files: &[(String, String)], inputs: &[&Path]) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for (name, contents) in files {
        write_string(&dir.join(name), contents)?;
        outputs.insert(name.clone(), sha256_hex(contents.as_bytes()));
    }
    let mut input_sums = BTreeMap::new();
    for p in inputs {
        input_sums.insert(p.display().to_string(), checksum_file(p)?);
    }
    let manifest = json!({
        "command": command,
        "invocation": std::env::args().collect::<Vec<_>>(),
        "inputs": input_sums,
        "outputs": outputs,
    });
    write_string(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(())
}

fn pretty(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn cmd_gen(args: GenArgs, summary: &mut Summary) -> Result<()> {
    let out = output_dir(args.out, "gen");
    if let Some(windows) = args.cgm_windows {
        let params = SyntheticStream {
            windows,
            window_seconds: args.window_seconds,
            features: args.features,
            seed: args.seed,
        };
        if windows == 0 {
            return Err(usage("--cgm-windows must be at least 1"));
        }
        if args.features == 0 {
            return Err(usage("--features must be at least 1"));
        }
        let schema = CsvSchema::generic(args.features);
        let records = synthetic_stream(&params)?;
        let files = vec![
            ("sensors.csv".to_string(), write_sensor_csv(&records, &schema)?),
            ("schema.json".to_string(), pretty(&schema)?),
        ];
        emit(&out, "gen", &files, &[])?;
        summary
            .add("kind", "sensors")
            .add("records", records.len())
            .add("out", out.display());
        return Ok(());
    }
    let m = args.m.ok_or_else(|| usage("--m is required"))?;
    let n = args.n.ok_or_else(|| usage("--n is required"))?;
    if m == 0 {
        return Err(usage("--m must be at least 1, got 0"));
    }
    if n == 0 {
        return Err(usage("--n must be at least 1, got 0"));
    }
    let sys = generate_gaussian_system(m, n, args.seed)?;
    let files = vec![
        ("A.txt".to_string(), format_matrix(&sys.a)),
        ("y.txt".to_string(), format_vector(&sys.y)),
        ("xstar.txt".to_string(), format_vector(sys.x_star()?)),
    ];
    emit(&out, "gen", &files, &[])?;
    summary.add("m", m).add("n", n).add("seed", args.seed).add("out", out.display());
    Ok(())
}

fn cmd_solve(args: SolveArgs, summary: &mut Summary) -> Result<()> {
    let pick = |explicit: Option<PathBuf>, name: &str| -> Result<PathBuf> {
        explicit
            .or_else(|| args.system.as_ref().map(|d| d.join(name)))
            .ok_or_else(|| usage(format!("need --system or an explicit path for {name}")))
    };
    let a_path = pick(args.a.clone(), "A.txt")?;
    let y_path = pick(args.y.clone(), "y.txt")?;
    let x_path = pick(args.xstar.clone(), "xstar.txt")?;
    let method: Method = args.method.parse()?;
    let sys = LinearSystem::new(load_matrix(&a_path)?, load_vector(&y_path)?, Some(load_vector(&x_path)?))?;
    let model = TupleMissingModel::new(sys.cols(), args.ell, args.p)?;

    let mut mu = None;
    let schedule = match args.schedule {
        ScheduleKind::Fixed => {
            let alpha = args
                .alpha
                .ok_or_else(|| usage("--alpha is required with --schedule fixed"))?;
            StepSchedule::Fixed { alpha }
        }
        ScheduleKind::InvMuK => {
            if args.alpha.is_some() {
                return Err(usage("--alpha cannot be combined with --schedule inv-mu-k"));
            }
            let est = strong_convexity_mu(&sys.a)?;
            if est.rank_deficient {
                return Err(usage("A is rank deficient (mu = 0); inv-mu-k needs full column rank"));
            }
            mu = Some(est.mu);
            StepSchedule::InverseMuK { mu: est.mu }
        }
    };
    let radius = match (args.radius, args.schedule) {
        (Some(r), _) => Some(r),
        (None, ScheduleKind::InvMuK) => Some(2.0 * norm(sys.x_star()?)),
        (None, ScheduleKind::Fixed) => None,
    };
    let mut config = SolverConfig::new(method, model, schedule, args.iters, args.seed).with_record_every(args.record_every);
    if let Some(radius) = radius {
        config = config.with_projection(Projection::Ball { radius });
    }
    let mut inputs = vec![a_path.as_path(), y_path.as_path(), x_path.as_path()];
    let trace = match &args.mask {
        Some(path) => {
            inputs.push(path.as_path());
            run_solver_with_mask(&sys, &config, &load_mask(path)?)?
        }
        None => run_solver(&sys, &config)?,
    };
    let out = output_dir(args.out, "solve");
    let config_doc = json!({
        "solver": config,
        "mask_mode": trace.mask_mode,
        "mu": mu,
        "radius": radius,
    });
    let files = vec![
        ("trace.csv".to_string(), trace.to_csv()),
        ("config.json".to_string(), pretty(&config_doc)?),
    ];
    emit(&out, "solve", &files, &inputs)?;
    println!("final error: {:e}", trace.final_error());
    summary
        .add("method", method)
        .add("iterations", args.iters)
        .add("final_error", format!("{:e}", trace.final_error()))
        .add("out", out.display());
    Ok(())
}

fn cmd_check(args: CheckArgs, summary: &mut Summary) -> Result<()> {
    let suite: Suite = args.suite.parse()?;
    let cfg = CheckConfig {
        suite,
        m: args.m,
        n: args.n,
        ells: args.ell,
        ps: args.p,
        points: args.points,
        seed: args.seed,
        mc_samples: args.mc_samples,
        bound_points: args.bound_points,
        convergence: ConvergenceCheck {
            replications: args.convergence_replications,
            ..ConvergenceCheck::default()
        },
    };
    let report = run_checks(&cfg)?;
    let doc = json!({
        "config": cfg,
        "pass": report.all_pass(),
        "report": report,
    });
    let text = pretty(&doc)?;
    print!("{text}");
    if let Some(dir) = args.out {
        emit(&dir, "check", &[("report.json".to_string(), text)], &[])?;
    }
    let worst = report
        .checks
        .iter()
        .map(|c| c.max_deviation)
        .fold(0.0_f64, f64::max);
    summary.pass = report.all_pass();
    summary
        .add("suite", args.suite)
        .add("checks", report.checks.len())
        .add("failed", report.checks.iter().filter(|c| !c.pass).count())
        .add("max_deviation", format!("{worst:e}"));
    Ok(())
}

fn cmd_bench(args: BenchArgs, summary: &mut Summary) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => preset_by_name(name)?,
        (None, Some(path)) => {
            let text = read_to_string(path)?;
            inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
            serde_json::from_str::<ExperimentSpec>(&text)
                .map_err(|e| usage(format!("invalid spec file {}: {e}", path.display())))?
        }
        _ => return Err(usage("exactly one of --preset or --spec is required")),
    };
    if let Some(r) = args.replications {
        spec = spec.with_replications(r);
    }
    spec.validate()?;
    let result = match args.workers {
        Some(0) => return Err(usage("--workers must be at least 1")),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .context("building worker pool")?
            .install(|| run_experiment(&spec))?,
        None => run_experiment(&spec)?,
    };
    let argv: Vec<String> = std::env::args().collect();
    let (dir, manifest) = write_experiment(&result, &output_root(args.out), &argv, &inputs)?;
    for cell in result.ordering() {
        let ranked: Vec<String> = cell
            .ranked
            .iter()
            .map(|(a, e)| format!("{a} ({e:.4e})"))
            .collect();
        println!("ell={} p={}: {}", cell.model.ell, cell.model.p, ranked.join(" < "));
    }
    summary.pass = result.failures.is_empty();
    summary
        .add("name", &spec.name)
        .add("cells", result.cells.len())
        .add("replications", spec.replications)
        .add("failures", manifest.failures.len());
    for cell in result.ordering() {
        if let Some(best) = cell.best() {
            summary.add(format!("best_ell{}_p{}", cell.model.ell, cell.model.p), best);
        }
    }
    summary.add("out", dir.display());
    if !result.failures.is_empty() {
        for f in &manifest.failures {
            eprintln!("failed: {f}");
        }
        anyhow::bail!("{} replicate(s) failed; partial results written", manifest.failures.len());
    }
    Ok(())
}

fn cmd_cgm(args: CgmArgs, summary: &mut Summary) -> Result<()> {
    let schema: CsvSchema = serde_json::from_str(&read_to_string(&args.schema)?)
        .with_context(|| format!("parsing schema {}", args.schema.display()))?;
    let report = load_sensor_csv(&args.input, &schema, args.reject_cap)?;
    for r in &report.rejects {
        eprintln!("rejected line {}: {}", r.line, r.reason);
    }
    let policy = match args.target {
        TargetArg::Last => TargetPolicy::LastAtOrBeforeEnd,
        TargetArg::Mean => TargetPolicy::WindowMean,
    };
    let windowed = window_features(&report.records, args.readings, args.window_seconds, policy)?;
    let noise_mask = noise_threshold_mask(&windowed, &windowed.noise, args.missing_frac)?;
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<tuplesgd::Result<Vec<_>>>()?;
    let rows = windowed.c.rows();
    let iters = args.iters.unwrap_or(5 * rows as u64);
    let base = SolverConfig::new(
        Method::Sgd,
        TupleMissingModel::complete(windowed.c.cols())?,
        StepSchedule::Fixed { alpha: args.alpha },
        iters,
        args.seed,
    );
    let run = solve_cgm(&windowed, &noise_mask, &methods, &base)?;

    let provenance = json!({
        "rows": rows,
        "cols": windowed.c.cols(),
        "ell": windowed.ell,
        "readings_per_window": windowed.readings_per_window,
        "window_seconds": args.window_seconds,
        "target_policy": policy,
        "threshold": noise_mask.threshold,
        "target_missing_fraction": noise_mask.target_fraction,
        "realized_missing_fraction": noise_mask.realized_fraction,
        "rejected_readings": noise_mask.rejected_readings,
        "total_readings": noise_mask.total_readings,
        "p": run.p,
        "dropped_short_windows": windowed.dropped_short,
        "dropped_windows_without_target": windowed.dropped_no_target,
        "csv_rows": report.total_rows,
        "csv_rejects": report.rejects,
        "alpha": args.alpha,
        "iterations": iters,
        "seed": args.seed,
    });
    let mut files = vec![
        ("C.txt".to_string(), format_matrix(&windowed.c)),
        ("g.txt".to_string(), format_vector(&windowed.g)),
        ("ghat.txt".to_string(), format_vector(&run.system.y)),
        ("xstar.txt".to_string(), format_vector(run.system.x_star()?)),
        ("mask.txt".to_string(), format_mask(&noise_mask.mask)),
        ("provenance.json".to_string(), pretty(&provenance)?),
    ];
    for t in &run.traces {
        let mode = match t.mode {
            MaskMode::Fixed => "fixed",
            MaskMode::Resample => "resample",
        };
        files.push((format!("traces/{mode}_{}.csv", t.method), t.trace.to_csv()));
    }
    let out = output_dir(args.out, "cgm");
    emit(&out, "cgm", &files, &[args.input.as_path(), args.schema.as_path()])?;
    summary
        .add("rows", rows)
        .add("cols", windowed.c.cols())
        .add("ell", windowed.ell)
        .add("realized_missing", noise_mask.realized_fraction)
        .add("p", run.p)
        .add("traces", run.traces.len())
        .add("out", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let mut summary = Summary::new(cli.command.name());
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a, &mut summary),
        Command::Solve(a) => cmd_solve(a, &mut summary),
        Command::Check(a) => cmd_check(a, &mut summary),
        Command::Bench(a) => cmd_bench(a, &mut summary),
        Command::Cgm(a) => cmd_cgm(a, &mut summary),
    };
    match outcome {
        Ok(()) => {
            println!("{summary}");
            if summary.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = exit_code(&e);
            summary.pass = false;
            summary.add("code", code);
            println!("{summary}");
            ExitCode::from(code)
        }
    }
}
