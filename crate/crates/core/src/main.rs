use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cbmlab::analysis::{concept_diagnostics, susceptible_set, THEORY_SEED};
use cbmlab::dataset::{
    generate_synthetic, inject_noise, load_csv, save_csv, NoiseKind, NoiseScope, NoiseSpec,
    SyntheticSpec,
};
use cbmlab::harness::{
    load_run, read_text, run_experiment, run_sweep, run_theory_checks, uncertainty_plot_csv,
    write_run, write_sweep, write_text, ExperimentConfig, SweepConfig, TheoryCheck,
};
use cbmlab::intervene::{
    intervention_curve, parse_budgets, Criterion, InterventionMode, InterventionPolicy,
};
use cbmlab::optim::OptimizerKind;
use cbmlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cbmlab",
    version,
    about = "Concept bottleneck models under noisy supervision"
)]
struct Cli {
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "CBMLAB_WORKERS")]
    workers: Option<usize>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus metadata sidecar).
    Gen,
    /// Inject label noise into a dataset.
    Noise(NoiseArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Compute an intervention curve for a trained run.
    Intervene(InterveneArgs),
    /// Compare a clean and a noisy run.
    Analyze(AnalyzeArgs),
    /// Run the numerical checks.
    Theory(TheoryArgs),
    /// Run a seeded parameter sweep.
    Sweep,
}

#[derive(Args)]
struct NoiseArgs {
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    apply_to: Option<ScopeArg>,
}

#[derive(Args)]
struct TrainArgs {
    /// Optimizer for the built-in benchmark when no config is given.
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
}

#[derive(Args)]
struct InterveneArgs {
    /// Run directory holding model.json and the run record.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "ucp")]
    criterion: String,
    #[arg(long, default_value = "correct")]
    mode: String,
    /// `0:k`, `0:16:2` or `0,1,5`.
    #[arg(long, default_value = "0:k")]
    budgets: String,
    #[arg(long)]
    adaptive: bool,
    /// Clean run, needed by the susceptibility criterion.
    #[arg(long)]
    clean: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    what: AnalyzeWhat,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    /// Size of the top-s sets.
    #[arg(long, default_value_t = 5)]
    top_s: usize,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, value_enum, default_value = "all")]
    check: CheckArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Symmetric,
    Asymmetric,
    Grouped,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Concepts,
    Targets,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Sam,
    Jsam,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeWhat {
    Susceptibility,
    Diagnostics,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    All,
    Jsam,
    Grad,
    Entropy,
    Ranking,
    Recovery,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(w) = cli.workers {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global();
    }
    match run(&cli) {
        Ok(Outcome::Done(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::Failed(summary)) => {
            println!("{summary}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

enum Outcome {
    Done(String),
    /// A numerical check missed its tolerance.
    Failed(String),
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Gen => gen(cli),
        Command::Noise(args) => noise(cli, args),
        Command::Train(args) => train(cli, args),
        Command::Intervene(args) => intervene(cli, args),
        Command::Analyze(args) => analyze(cli, args),
        Command::Theory(args) => theory(cli, args),
        Command::Sweep => sweep(cli),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn gen(cli: &Cli) -> Result<Outcome> {
    let mut spec = match &cli.config {
        Some(path) => serde_json::from_str::<SyntheticSpec>(&read_text(path)?)?,
        None => SyntheticSpec::benchmark(0),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    let path = out_dir(cli, "data").join("dataset.csv");
    save_csv(&ds, &path)?;
    Ok(Outcome::Done(format!(
        "gen: {} samples, d={}, k={}, classes={} -> {}",
        ds.len(),
        ds.input_dim(),
        ds.num_concepts(),
        ds.num_classes(),
        path.display()
    )))
}

fn noise(cli: &Cli, args: &NoiseArgs) -> Result<Outcome> {
    let mut spec = match &cli.config {
        Some(path) => serde_json::from_str::<NoiseSpec>(&read_text(path)?)?,
        None => NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.0,
            apply_to: NoiseScope::Both,
            seed: 0,
        },
    };
    if let Some(kind) = args.kind {
        spec.kind = match kind {
            KindArg::Symmetric => NoiseKind::Symmetric,
            KindArg::Asymmetric => NoiseKind::Asymmetric,
            KindArg::Grouped => NoiseKind::Grouped,
        };
    }
    if let Some(rate) = args.rate {
        spec.rate = rate;
    }
    if let Some(scope) = args.apply_to {
        spec.apply_to = match scope {
            ScopeArg::Concepts => NoiseScope::Concepts,
            ScopeArg::Targets => NoiseScope::Targets,
            ScopeArg::Both => NoiseScope::Both,
        };
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = out_dir(cli, "noisy");
    let target = out.join("dataset.csv");
    if same_file(&target, &args.data) {
        return Err(Error::Config(
            "refusing to overwrite the input dataset".into(),
        ));
    }
    let ds = load_csv(&args.data)?;
    let (noisy, mask) = inject_noise(&ds, &spec)?;
    save_csv(&noisy, &target)?;
    let k = mask.concepts.ncols();
    let mut csv = String::from("sample,target");
    for j in 0..k {
        let _ = write!(csv, ",c{j}");
    }
    csv.push('\n');
    for (i, row) in mask.concepts.rows().into_iter().enumerate() {
        let _ = write!(csv, "{i},{}", u8::from(mask.targets[i]));
        for b in row {
            let _ = write!(csv, ",{b}");
        }
        csv.push('\n');
    }
    write_text(&out.join("flip_mask.csv"), &csv)?;
    write_text(
        &out.join("noise.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    Ok(Outcome::Done(format!(
        "noise: concept flips {:.4}, target flips {:.4} -> {}",
        mask.concept_flip_fraction(),
        mask.target_flip_fraction(),
        target.display()
    )))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let kind = match args.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Sam => OptimizerKind::Sam,
                OptimizerArg::Jsam => OptimizerKind::Jsam,
            };
            ExperimentConfig::benchmark(
                0,
                kind,
                if kind == OptimizerKind::Sgd {
                    0.0
                } else {
                    args.rho
                },
            )
        }
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let started = Instant::now();
    let outcome = run_experiment(&cfg)?;
    let dir = out_dir(cli, "runs/default");
    write_run(&dir, &outcome, started)?;
    let m = &outcome.metrics;
    Ok(Outcome::Done(format!(
        "train: task acc {:.4}, concept acc {:.4}, epochs {} -> {}",
        m.test_task_accuracy,
        m.test_concept_accuracy,
        outcome.history.epochs_run,
        dir.display()
    )))
}

fn intervene(cli: &Cli, args: &InterveneArgs) -> Result<Outcome> {
    let criterion: Criterion = args.criterion.parse()?;
    let mode: InterventionMode = args.mode.parse()?;
    let run = load_run(&args.run)?;
    let test = &run.data.test;
    let budgets = parse_budgets(&args.budgets, test.num_concepts())?;
    let mut policy = InterventionPolicy::new(criterion, mode, cli.seed.unwrap_or(run.config.seed));
    policy.adaptive = args.adaptive;
    if criterion == Criterion::Susceptibility {
        let clean_dir = args
            .clean
            .as_ref()
            .ok_or(Error::OracleMissing("susceptibility"))?;
        let clean = load_run(clean_dir)?;
        let report = susceptible_set(&clean.model, &run.model, test, true)?;
        policy.class_rankings = report.per_class;
    }
    let curve = intervention_curve(&run.model, test, &policy, &budgets)?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| args.run.join("interventions"));
    let path = dir.join(format!("{criterion}_{mode}.csv"));
    write_text(&path, &curve.to_csv())?;
    let first = curve.accuracies.first().copied().unwrap_or(f64::NAN);
    let last = curve.accuracies.last().copied().unwrap_or(f64::NAN);
    Ok(Outcome::Done(format!(
        "intervene: {criterion} {mode}, accuracy {first:.4} -> {last:.4}, area {:.4} -> {}",
        curve.area(),
        path.display()
    )))
}

fn analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<Outcome> {
    let clean = load_run(&args.clean)?;
    let noisy = load_run(&args.noisy)?;
    let test = &noisy.data.test;
    let report = susceptible_set(&clean.model, &noisy.model, test, true)?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| args.noisy.join("analysis"));
    write_text(&dir.join("susceptibility.csv"), &report.to_csv())?;
    write_text(
        &dir.join("susceptibility.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    let mut summary = format!(
        "analyze: |S| = {} of {}, mean drop {:.4}",
        report.susceptible.len(),
        report.delta.len(),
        report.mean_delta
    );
    if let AnalyzeWhat::Diagnostics = args.what {
        let diag = concept_diagnostics(&noisy.model, test, &report, args.top_s);
        write_text(
            &dir.join("diagnostics.json"),
            &serde_json::to_string_pretty(&diag)?,
        )?;
        write_text(
            &dir.join("uncertainty_vs_susceptibility.csv"),
            &uncertainty_plot_csv(&report, &diag),
        )?;
        let _ = write!(
            summary,
            ", top-{} overlap {:.2}, kendall {:.3}",
            args.top_s, diag.top_s.overlap_fraction, diag.kendall_normalized
        );
    }
    let _ = write!(summary, " -> {}", dir.display());
    Ok(Outcome::Done(summary))
}

fn theory(cli: &Cli, args: &TheoryArgs) -> Result<Outcome> {
    let which = match args.check {
        CheckArg::All => TheoryCheck::All,
        CheckArg::Jsam => TheoryCheck::Jsam,
        CheckArg::Grad => TheoryCheck::Grad,
        CheckArg::Entropy => TheoryCheck::Entropy,
        CheckArg::Ranking => TheoryCheck::Ranking,
        CheckArg::Recovery => TheoryCheck::Recovery,
    };
    let report = run_theory_checks(which, cli.seed.unwrap_or(THEORY_SEED))?;
    let dir = out_dir(cli, "theory");
    write_text(
        &dir.join("theory.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    let parts: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" }))
        .collect();
    let summary = format!("theory: {}", parts.join(", "));
    Ok(if report.passed() {
        Outcome::Done(summary)
    } else {
        Outcome::Failed(summary)
    })
}

fn sweep(cli: &Cli) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs --config".into()))?;
    let mut cfg = SweepConfig::from_json(&read_text(path)?)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = (0..cfg.seeds.len() as u64)
            .map(|i| seed.wrapping_add(i))
            .collect();
    }
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_sweep(&cfg, workers)?;
    let dir = out_dir(cli, "sweep");
    write_sweep(&dir, &cfg, &result)?;
    Ok(Outcome::Done(format!(
        "sweep: {} cells x {} seeds = {} runs -> {}",
        cfg.cells().len(),
        cfg.seeds.len(),
        result.runs.len(),
        dir.display()
    )))
}
