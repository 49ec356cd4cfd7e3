use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use survdtr::simbench::{
    calibrate_c0, run_benchmark, simulate, BenchConfig, CovariateIndexing, Design,
};
use survdtr::tuning::cross_validate;
use survdtr::{
    derive_seed, fit, Dataset, FitConfig, PolicySet, PropensityLookup, PropensitySource, TimeGrid,
    TuningGrid,
};

#[derive(Parser, Debug)]
#[command(
    name = "survdtr",
    version,
    about = "Angle-based dynamic treatment regimes for censored survival data"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DTR_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from one of the simulation designs.
    Simulate(SimulateArgs),
    /// Learn a regime from training data.
    Fit(FitArgs),
    /// Estimate the survival probability of a regime on test data.
    Evaluate(EvaluateArgs),
    /// Cross-validate the surrogate steepness and penalty.
    Cv(CvArgs),
    /// Run a replicated simulation benchmark.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    example: u8,
    #[arg(long)]
    n: usize,
    /// Target censoring rate.
    #[arg(long)]
    censor: f64,
    /// Target time recorded with the data.
    #[arg(long)]
    tg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Indexing::StageCoordinate)]
    indexing: Indexing,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Indexing {
    StageCoordinate,
    FirstStageFlat,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    /// Fit configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    tg: f64,
    /// Propensity source (JSON); uniform over the arms when absent.
    #[arg(long)]
    propensity: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    train: PathBuf,
    /// Tuning grid (JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Base fit configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `cv.csv` and `cv_best.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the report files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a C,
    version: &'static str,
    core_version: &'static str,
}

type Failure = Box<dyn std::error::Error>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_reader(f).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    seed: u64,
    config: &C,
) -> Result<(), Failure> {
    let canonical = serde_json::to_vec(config)?;
    let manifest = Manifest {
        command,
        seed,
        config_sha256: format!("{:x}", Sha256::digest(&canonical)),
        config,
        version: env!("CARGO_PKG_VERSION"),
        core_version: survdtr::VERSION,
    };
    write_json(path, &manifest)
}

/// `policy.json` -> `policy.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn load_fit_config(path: Option<&Path>, seed: Option<u64>) -> Result<FitConfig, Failure> {
    let mut config: FitConfig = match path {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct SimulateConfig {
    example_id: u8,
    n: usize,
    censor_rate: f64,
    t_g: f64,
    indexing: CovariateIndexing,
    c0: f64,
    realized_censoring: f64,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let design = Design {
        indexing: match a.indexing {
            Indexing::StageCoordinate => CovariateIndexing::StageCoordinate,
            Indexing::FirstStageFlat => CovariateIndexing::FirstStageFlat,
        },
        ..Design::example(a.example)
    };
    design.validate()?;
    let horizon = design.layout()?.horizon();
    if !(a.tg > 0.0 && a.tg <= horizon) {
        return Err(format!("--tg {} must lie in (0, {horizon}]", a.tg).into());
    }
    let c0 = calibrate_c0(&design, a.censor, derive_seed(a.seed, 0))?;
    let (data, truth) = simulate(&design, a.n, c0, derive_seed(a.seed, 1))?;
    data.write_dir(&a.out)?;
    write_json(&a.out.join("truth.json"), &truth)?;
    let config = SimulateConfig {
        example_id: a.example,
        n: a.n,
        censor_rate: a.censor,
        t_g: a.tg,
        indexing: design.indexing,
        c0,
        realized_censoring: data.censoring_rate(),
    };
    write_manifest(&a.out.join("manifest.json"), "simulate", a.seed, &config)?;
    log::info!("wrote {} subjects to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    let config = load_fit_config(a.config.as_deref(), a.seed)?;
    let data = Dataset::read_dir(&a.train)?;
    let (result, prop) = fit(&data, &config)?;
    write_json(&a.out, &result.policy)?;
    let stem = a
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("policy");
    write_json(
        &a.out.with_file_name(format!("{stem}.summary.json")),
        &survdtr::optimizer::FitSummary::from(&result),
    )?;
    if let PropensityLookup::Fitted(models) = &prop {
        write_json(
            &a.out.with_file_name(format!("{stem}.propensity.json")),
            models,
        )?;
    }
    write_manifest(&sibling_manifest(&a.out), "fit", config.seed, &config)?;
    log::info!(
        "objective {:.6} after {} iterations (converged: {})",
        result.objective,
        result.iterations,
        result.converged
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    value: f64,
    t_g: f64,
    n: usize,
    grid_points: usize,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let policy: PolicySet = read_json(&a.policy)?;
    let data = Dataset::read_dir(&a.test)?;
    let grid = TimeGrid::build(&data, a.tg)?;
    let source: PropensitySource = match &a.propensity {
        Some(p) => read_json(p)?,
        None => PropensitySource::Uniform,
    };
    let prop = PropensityLookup::resolve(&source, &data, grid.decision_stages())?;
    let value = survdtr::km_value_hard(&data, &policy, &prop, &grid)?;
    let eval = Evaluation {
        value,
        t_g: a.tg,
        n: data.len(),
        grid_points: grid.len(),
    };
    match &a.out {
        Some(out) => {
            write_json(out, &eval)?;
            write_manifest(&sibling_manifest(out), "evaluate", 0, &source)?;
        }
        None => println!("{}", serde_json::to_string(&eval)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct CvBest {
    b: f64,
    lambda: f64,
    score: f64,
}

fn cmd_cv(a: &CvArgs) -> Result<(), Failure> {
    let config = load_fit_config(a.config.as_deref(), a.seed)?;
    let mut grid: TuningGrid = read_json(&a.grid)?;
    if let Some(s) = a.seed {
        grid.seed = s;
    }
    let data = Dataset::read_dir(&a.train)?;
    let outcome = cross_validate(&data, &grid, &config)?;
    std::fs::create_dir_all(&a.out)?;
    outcome.write_csv(BufWriter::new(File::create(a.out.join("cv.csv"))?))?;
    let best = CvBest {
        b: outcome.b,
        lambda: outcome.lambda,
        score: outcome.best_score,
    };
    write_json(&a.out.join("cv_best.json"), &best)?;
    write_manifest(
        &a.out.join("cv.manifest.json"),
        "cv",
        grid.seed,
        &(&grid, &config),
    )?;
    println!("{}", serde_json::to_string(&best)?);
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let mut config: BenchConfig = read_json(&a.config)?;
    if let Some(s) = a.seed {
        config.scenario.seed = s;
    }
    let report = run_benchmark(&config)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_csv(BufWriter::new(File::create(a.out.join("bench.csv"))?))?;
    let table = report.table();
    std::fs::write(a.out.join("bench_table.txt"), &table)?;
    write_json(&a.out.join("bench_report.json"), &report)?;
    write_manifest(
        &a.out.join("bench.manifest.json"),
        "bench",
        config.scenario.seed,
        &config,
    )?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err("--threads must be positive".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
