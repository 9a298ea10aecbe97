//! Experiment configuration, the end-to-end pipeline, run directories and
//! seeded parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::analysis::{
    alignment_proxy, concept_diagnostics, min_max_normalize, per_concept_accuracy,
    saliency_overlap, susceptible_set, ConceptDiagnostics, SaliencyOverlap, SusceptibilityReport,
};
use crate::dataset::{
    generate_synthetic, inject_noise, load_csv, split_indices, LabeledDataset, NoiseKind,
    NoiseScope, NoiseSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::intervene::{
    intervention_curve, Criterion, InterventionMode, InterventionOutcome, InterventionPolicy,
};
use crate::model::CbmModel;
use crate::optim::{
    train, OptimizerKind, OptimizerSpec, PlateauDecay, StrategyConfig, TrainConfig, TrainHistory,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub criterion: Criterion,
    #[serde(default = "correct_mode")]
    pub mode: InterventionMode,
    #[serde(default)]
    pub adaptive: bool,
}

fn correct_mode() -> InterventionMode {
    InterventionMode::Correct
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisToggles {
    /// Train a noise-free twin and compute the accuracy-drop susceptible set.
    #[serde(default)]
    pub susceptibility: bool,
    /// Entropy / loss-susceptibility / rank diagnostics (needs `susceptibility`).
    #[serde(default)]
    pub diagnostics: bool,
    /// Size of the top-s sets and of the saliency sets.
    #[serde(default = "five")]
    pub top_s: usize,
}

fn five() -> usize {
    5
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Applied in order to the training and validation splits; test labels stay clean.
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub train: TrainConfig,
    #[serde(default)]
    pub interventions: Vec<PolicyConfig>,
    /// Intervention budgets; defaults to 0..=k.
    #[serde(default)]
    pub budgets: Option<Vec<usize>>,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    /// Split and random-criterion seed.
    #[serde(default)]
    pub seed: u64,
}

/// The default independent-strategy training recipe used for the benchmark.
pub fn default_train_config(kind: OptimizerKind, rho: f64) -> TrainConfig {
    TrainConfig {
        strategy: StrategyConfig::Independent,
        optimizer: OptimizerSpec {
            kind,
            learning_rate: 0.01,
            momentum: 0.9,
            rho,
            weight_decay: 4e-5,
            epochs: 30,
            batch_size: 64,
            plateau_decay: Some(PlateauDecay::default()),
            seed: 0,
        },
        target_optimizer: None,
        hidden_width: None,
        weighted_loss: false,
        seed: 0,
    }
}

impl ExperimentConfig {
    /// Synthetic benchmark with optional symmetric noise on both concepts and targets.
    pub fn benchmark(seed: u64, kind: OptimizerKind, rho: f64) -> Self {
        let mut cfg = ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec::benchmark(seed)),
            noise: Vec::new(),
            split: default_split(),
            train: default_train_config(kind, rho),
            interventions: Vec::new(),
            budgets: None,
            analysis: AnalysisToggles::default(),
            seed,
        };
        cfg.reseed(seed);
        cfg
    }

    /// Derives every sub-seed (data, noise, split, init, shuffling) from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        for (i, n) in self.noise.iter_mut().enumerate() {
            n.seed = seed.wrapping_add(1 + i as u64);
        }
        self.train.seed = seed;
        self.train.optimizer.seed = seed;
        if let Some(t) = &mut self.train.target_optimizer {
            t.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            for n in &self.noise {
                n.validate()?;
                if n.kind == NoiseKind::Grouped && spec.group_size.is_none() {
                    return Err(Error::Config(
                        "grouped noise requires `group_size` in the synthetic spec".into(),
                    ));
                }
            }
        } else {
            for n in &self.noise {
                n.validate()?;
            }
        }
        self.train.validate()?;
        if self.analysis.diagnostics && !self.analysis.susceptibility {
            return Err(Error::Config(
                "diagnostics need `analysis.susceptibility`".into(),
            ));
        }
        let needs_clean = self
            .interventions
            .iter()
            .any(|p| p.criterion == Criterion::Susceptibility);
        if needs_clean && !self.analysis.susceptibility {
            return Err(Error::Config(
                "the susceptibility criterion needs `analysis.susceptibility`".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    /// Same configuration without any noise.
    pub fn clean_twin(&self) -> Self {
        ExperimentConfig {
            noise: Vec::new(),
            interventions: Vec::new(),
            analysis: AnalysisToggles::default(),
            ..self.clone()
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splits with noise applied to the supervision splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clean: LabeledDataset,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    /// Clean held-out split.
    pub test: LabeledDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let clean = match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec)?,
        DataSource::Csv(path) => load_csv(path)?,
    };
    let mut noisy = clean.clone();
    for spec in &cfg.noise {
        noisy = inject_noise(&noisy, spec)?.0;
    }
    let [train, val, test] = split_indices(&clean, cfg.split, cfg.seed)?;
    Ok(PreparedData {
        train: noisy.subset(&train),
        val: noisy.subset(&val),
        test: clean.subset(&test),
        clean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub criterion: Criterion,
    pub mode: InterventionMode,
    pub area: f64,
    pub accuracy_at_zero: Option<f64>,
    pub accuracy_at_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_task_accuracy: f64,
    pub test_concept_accuracy: f64,
    /// Target predictor fed ground-truth concepts.
    pub oracle_task_accuracy: f64,
    pub alignment_proxy_mean: f64,
    pub alignment_proxy: Vec<f64>,
    pub per_concept_accuracy: Vec<f64>,
    pub curves: Vec<CurveSummary>,
    #[serde(default)]
    pub saliency_overlap: Option<SaliencyOverlap>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub model: CbmModel,
    pub history: TrainHistory,
    pub metrics: Metrics,
    pub curves: Vec<InterventionOutcome>,
    pub clean_model: Option<CbmModel>,
    pub susceptibility: Option<SusceptibilityReport>,
    pub diagnostics: Option<ConceptDiagnostics>,
}

pub fn evaluate(model: &CbmModel, test: &LabeledDataset) -> Metrics {
    let align = alignment_proxy(model, test);
    Metrics {
        test_task_accuracy: model.task_accuracy(test),
        test_concept_accuracy: model.concept_accuracy(test),
        oracle_task_accuracy: model.oracle_task_accuracy(test),
        alignment_proxy_mean: align.mean,
        alignment_proxy: align.per_concept,
        per_concept_accuracy: per_concept_accuracy(model, test).to_vec(),
        curves: Vec::new(),
        saliency_overlap: None,
    }
}

/// Data preparation, training, evaluation, optional clean twin, interventions.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let (model, history) = train(&data.train, &data.val, &cfg.train)?;
    let mut metrics = evaluate(&model, &data.test);

    let (clean_model, susceptibility, diagnostics) = if cfg.analysis.susceptibility {
        let twin = cfg.clean_twin();
        let twin_data = prepare_data(&twin)?;
        let (clean_model, _) = train(&twin_data.train, &twin_data.val, &twin.train)?;
        let report = susceptible_set(&clean_model, &model, &data.test, true)?;
        metrics.saliency_overlap = Some(saliency_overlap(
            &model.f,
            &report.susceptible,
            cfg.analysis.top_s,
        ));
        let diag = cfg
            .analysis
            .diagnostics
            .then(|| concept_diagnostics(&model, &data.test, &report, cfg.analysis.top_s));
        (Some(clean_model), Some(report), diag)
    } else {
        (None, None, None)
    };

    let k = data.test.num_concepts();
    let budgets = cfg.budgets.clone().unwrap_or_else(|| (0..=k).collect());
    let mut curves = Vec::with_capacity(cfg.interventions.len());
    for p in &cfg.interventions {
        let mut policy = InterventionPolicy::new(p.criterion, p.mode, cfg.seed);
        policy.adaptive = p.adaptive;
        if p.criterion == Criterion::Susceptibility {
            policy.class_rankings = susceptibility.as_ref().and_then(|r| r.per_class.clone());
        }
        let curve = intervention_curve(&model, &data.test, &policy, &budgets)?;
        metrics.curves.push(CurveSummary {
            criterion: curve.criterion,
            mode: curve.mode,
            area: curve.area(),
            accuracy_at_zero: curve.accuracy_at(0),
            accuracy_at_full: curve.accuracy_at(k),
        });
        curves.push(curve);
    }

    Ok(ExperimentOutcome {
        config: cfg.clone(),
        model,
        history,
        metrics,
        curves,
        clean_model,
        susceptibility,
        diagnostics,
    })
}

/// Provenance of a run directory. Everything except `wall_clock_seconds` is
/// a deterministic function of `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

pub fn curve_file_name(criterion: Criterion, mode: InterventionMode) -> String {
    format!("curves/{criterion}_{mode}.csv")
}

/// Plot data relating normalized entropy to normalized accuracy drop.
pub fn uncertainty_plot_csv(report: &SusceptibilityReport, diag: &ConceptDiagnostics) -> String {
    let u = min_max_normalize(&diag.uncertainty);
    let d = min_max_normalize(&report.delta);
    let mut out = String::from("concept,norm_delta,norm_entropy,in_S\n");
    for i in 0..u.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            d[i],
            u[i],
            u8::from(report.in_susceptible(i))
        );
    }
    out
}

/// Writes `runs/<name>/{config.json, model.json, history.csv, metrics.json, curves/*.csv, run.json}`.
pub fn write_run(dir: &Path, outcome: &ExperimentOutcome, started: Instant) -> Result<RunRecord> {
    let mut artifacts: Vec<(String, String)> = vec![
        (
            "config.json".into(),
            serde_json::to_string_pretty(&outcome.config)?,
        ),
        ("model.json".into(), outcome.model.to_json()?),
        ("history.csv".into(), outcome.history.to_csv()),
        (
            "metrics.json".into(),
            serde_json::to_string_pretty(&outcome.metrics)?,
        ),
    ];
    for curve in &outcome.curves {
        artifacts.push((curve_file_name(curve.criterion, curve.mode), curve.to_csv()));
    }
    if let Some(clean) = &outcome.clean_model {
        artifacts.push(("clean_model.json".into(), clean.to_json()?));
    }
    if let Some(report) = &outcome.susceptibility {
        artifacts.push(("susceptibility.csv".into(), report.to_csv()));
        artifacts.push((
            "susceptibility.json".into(),
            serde_json::to_string_pretty(report)?,
        ));
        if let Some(diag) = &outcome.diagnostics {
            artifacts.push((
                "diagnostics.json".into(),
                serde_json::to_string_pretty(diag)?,
            ));
            artifacts.push((
                "uncertainty_vs_susceptibility.csv".into(),
                uncertainty_plot_csv(report, diag),
            ));
        }
    }
    for (name, text) in &artifacts {
        write_text(&dir.join(name), text)?;
    }
    let record = RunRecord {
        config: outcome.config.clone(),
        artifacts: artifacts.into_iter().map(|(n, _)| n).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        version: VERSION.into(),
    };
    write_text(
        &dir.join("run.json"),
        &serde_json::to_string_pretty(&record)?,
    )?;
    Ok(record)
}

/// Re-runs the configuration stored in `<dir>/run.json` (or `config.json`) into `out`.
pub fn replay_run(dir: &Path, out: &Path) -> Result<RunRecord> {
    let cfg = load_run_config(dir)?;
    let started = Instant::now();
    let outcome = run_experiment(&cfg)?;
    write_run(out, &outcome, started)
}

pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    let record = dir.join("run.json");
    if record.exists() {
        let rec: RunRecord = serde_json::from_str(&read_text(&record)?)?;
        rec.config.validate()?;
        return Ok(rec.config);
    }
    ExperimentConfig::load(&dir.join("config.json"))
}

/// A trained run loaded back from disk with its evaluation split.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub model: CbmModel,
    pub data: PreparedData,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let model_path = dir.join("model.json");
    if !model_path.exists() {
        return Err(Error::MissingArtifact(model_path));
    }
    let config = load_run_config(dir)?;
    let model = CbmModel::load(&model_path)?;
    let data = prepare_data(&config)?;
    model.check_compatible(&data.test)?;
    Ok(LoadedRun {
        config,
        model,
        data,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub noise_rates: Vec<f64>,
    #[serde(default = "both_scope")]
    pub noise_scopes: Vec<NoiseScope>,
    #[serde(default = "symmetric")]
    pub noise_kind: NoiseKind,
    #[serde(default = "sgd_only")]
    pub optimizers: Vec<OptimizerKind>,
    #[serde(default = "independent_only")]
    pub strategies: Vec<StrategyConfig>,
}

fn both_scope() -> Vec<NoiseScope> {
    vec![NoiseScope::Both]
}

fn symmetric() -> NoiseKind {
    NoiseKind::Symmetric
}

fn sgd_only() -> Vec<OptimizerKind> {
    vec![OptimizerKind::Sgd]
}

fn independent_only() -> Vec<StrategyConfig> {
    vec![StrategyConfig::Independent]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
    /// Radius for SAM / J-SAM cells when the base optimizer has none.
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    0.05
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.noise_rates.is_empty()
            || g.noise_scopes.is_empty()
            || g.optimizers.is_empty()
            || g.strategies.is_empty()
        {
            return Err(Error::Config(
                "every sweep axis needs at least one value".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for cell in self.cells() {
            self.cell_config(&cell, self.seeds[0])?.validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &rate in &g.noise_rates {
            for &scope in &g.noise_scopes {
                for &optimizer in &g.optimizers {
                    for &strategy in &g.strategies {
                        out.push(SweepCell {
                            noise_rate: rate,
                            noise_scope: scope,
                            optimizer,
                            strategy,
                        });
                    }
                }
            }
        }
        out
    }

    /// Resolved configuration for one cell and replicate seed.
    pub fn cell_config(&self, cell: &SweepCell, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.noise = if cell.noise_rate > 0.0 {
            vec![NoiseSpec {
                kind: self.grid.noise_kind,
                rate: cell.noise_rate,
                apply_to: cell.noise_scope,
                seed: 0,
            }]
        } else {
            Vec::new()
        };
        cfg.train.strategy = cell.strategy;
        cfg.train.optimizer.kind = cell.optimizer;
        if cell.optimizer != OptimizerKind::Sgd && cfg.train.optimizer.rho <= 0.0 {
            cfg.train.optimizer.rho = self.rho;
        }
        if let StrategyConfig::Joint { .. } = cell.strategy {
            cfg.train.target_optimizer = None;
        }
        cfg.reseed(cell.seed(seed));
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub noise_rate: f64,
    pub noise_scope: NoiseScope,
    pub optimizer: OptimizerKind,
    pub strategy: StrategyConfig,
}

impl SweepCell {
    pub fn key(&self) -> String {
        let strategy = match self.strategy {
            StrategyConfig::Joint { lambda } => format!("joint({lambda})"),
            other => other.tag().to_string(),
        };
        format!(
            "{},{},{},{}",
            self.noise_rate,
            scope_name(self.noise_scope),
            self.optimizer,
            strategy
        )
    }

    /// Replicate seed decoupled across cells.
    pub fn seed(&self, base_seed: u64) -> u64 {
        xxh3_64_with_seed(self.key().as_bytes(), base_seed)
    }
}

pub fn scope_name(scope: NoiseScope) -> &'static str {
    match scope {
        NoiseScope::Concepts => "concepts",
        NoiseScope::Targets => "targets",
        NoiseScope::Both => "both",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub cell: SweepCell,
    pub base_seed: u64,
    pub run_seed: u64,
    pub test_task_accuracy: f64,
    pub test_concept_accuracy: f64,
    pub alignment_proxy_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub aggregate_csv: String,
    pub runs_csv: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs every (cell, seed) pair on a pool of `workers` threads. Results are
/// joined in grid order, so the output does not depend on `workers`.
pub fn run_sweep(cfg: &SweepConfig, workers: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let cell = cells[c];
                let run_cfg = cfg.cell_config(&cell, seed)?;
                let outcome = run_experiment(&run_cfg)?;
                Ok(SweepRun {
                    cell,
                    base_seed: seed,
                    run_seed: run_cfg.seed,
                    test_task_accuracy: outcome.metrics.test_task_accuracy,
                    test_concept_accuracy: outcome.metrics.test_concept_accuracy,
                    alignment_proxy_mean: outcome.metrics.alignment_proxy_mean,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut grouped: BTreeMap<usize, Vec<&SweepRun>> = BTreeMap::new();
    for (job, run) in jobs.iter().zip(&runs) {
        grouped.entry(job.0).or_default().push(run);
    }
    let mut aggregate = String::from(
        "noise_rate,noise_scope,optimizer,strategy,n_seeds,task_acc_mean,task_acc_std,concept_acc_mean,concept_acc_std,alignment_proxy_mean,alignment_proxy_std\n",
    );
    for (c, group) in &grouped {
        let cell = cells[*c];
        let (ta, ts) = mean_std(
            &group
                .iter()
                .map(|r| r.test_task_accuracy)
                .collect::<Vec<_>>(),
        );
        let (ca, cs) = mean_std(
            &group
                .iter()
                .map(|r| r.test_concept_accuracy)
                .collect::<Vec<_>>(),
        );
        let (aa, as_) = mean_std(
            &group
                .iter()
                .map(|r| r.alignment_proxy_mean)
                .collect::<Vec<_>>(),
        );
        let _ = writeln!(
            aggregate,
            "{},{},{ta},{ts},{ca},{cs},{aa},{as_}",
            cell.key(),
            group.len()
        );
    }
    let mut runs_csv = String::from(
        "noise_rate,noise_scope,optimizer,strategy,base_seed,run_seed,task_acc,concept_acc,alignment_proxy\n",
    );
    for r in &runs {
        let _ = writeln!(
            runs_csv,
            "{},{},{},{},{},{}",
            r.cell.key(),
            r.base_seed,
            r.run_seed,
            r.test_task_accuracy,
            r.test_concept_accuracy,
            r.alignment_proxy_mean
        );
    }
    Ok(SweepResult {
        runs,
        aggregate_csv: aggregate,
        runs_csv,
    })
}

pub fn write_sweep(dir: &Path, cfg: &SweepConfig, result: &SweepResult) -> Result<()> {
    write_text(&dir.join("sweep.json"), &serde_json::to_string_pretty(cfg)?)?;
    write_text(&dir.join("aggregate.csv"), &result.aggregate_csv)?;
    write_text(&dir.join("runs.csv"), &result.runs_csv)
}

// ---------------------------------------------------------------------------
// Theory checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TheoryCheck {
    All,
    Jsam,
    Grad,
    Entropy,
    Ranking,
    Recovery,
}

impl TheoryCheck {
    fn includes(self, other: TheoryCheck) -> bool {
        self == TheoryCheck::All || self == other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Sigmas for the ranking-consistency trend, largest first.
pub const RANKING_SIGMAS: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0];

/// `(k, s)` pairs for the zero-noise recovery check.
pub const RECOVERY_CASES: [(usize, usize); 5] = [(5, 1), (10, 3), (16, 5), (20, 5), (20, 20)];

/// Whether `means` is non-increasing up to `z` combined standard errors.
pub fn non_increasing_within(points: &[crate::analysis::SimulationPoint], z: f64) -> bool {
    points.windows(2).all(|w| {
        let slack = z * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].mean <= w[0].mean + slack
    })
}

/// Runs the selected numerical checks with their default tolerances.
pub fn run_theory_checks(which: TheoryCheck, seed: u64) -> Result<TheoryReport> {
    use crate::analysis::{
        check_error_entropy, check_gradients, check_jsam_decomposition,
        simulate_ranking_consistency, simulate_recovery, Dims,
    };
    let mut checks = Vec::new();
    if which.includes(TheoryCheck::Jsam) {
        let r = check_jsam_decomposition(100, Dims { d: 6, m: 5, k: 4 }, 0.05, 1e-10, seed);
        checks.push(CheckResult {
            name: "jsam".into(),
            passed: r.passed,
            detail: serde_json::to_value(&r)?,
        });
    }
    if which.includes(TheoryCheck::Grad) {
        let r = check_gradients(50, Dims { d: 5, m: 4, k: 3 }, 3, 1e-6, seed);
        checks.push(CheckResult {
            name: "grad".into(),
            passed: r.passed,
            detail: serde_json::to_value(&r)?,
        });
    }
    if which.includes(TheoryCheck::Entropy) {
        let grid: Vec<f64> = (1..=9).map(|i| f64::from(i) / 10.0).collect();
        let r = check_error_entropy(&grid, 100_000, seed);
        checks.push(CheckResult {
            name: "entropy".into(),
            passed: r.max_abs_deviation < 0.005,
            detail: serde_json::to_value(&r)?,
        });
    }
    if which.includes(TheoryCheck::Ranking) {
        let points = simulate_ranking_consistency(20, 1.0, &RANKING_SIGMAS, 2000, seed)?;
        let at = |s: f64| {
            points
                .iter()
                .find(|p| p.sigma == s)
                .map_or(f64::NAN, |p| p.mean)
        };
        let passed = at(0.0) == 0.0 && at(0.001) < 0.01 && non_increasing_within(&points, 3.0);
        checks.push(CheckResult {
            name: "ranking".into(),
            passed,
            detail: serde_json::to_value(&points)?,
        });
    }
    if which.includes(TheoryCheck::Recovery) {
        let mut rows = Vec::new();
        let mut passed = true;
        for (k, s) in RECOVERY_CASES {
            let p = simulate_recovery(k, s, 1.0, &[0.0], 1000, seed)?;
            passed &= p[0].mean == 1.0;
            rows.push(serde_json::json!({ "k": k, "s": s, "probability": p[0].mean }));
        }
        checks.push(CheckResult {
            name: "recovery".into(),
            passed,
            detail: serde_json::Value::Array(rows),
        });
    }
    Ok(TheoryReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::benchmark(seed, OptimizerKind::Sgd, 0.0);
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.n = 160;
            spec.d = 8;
            spec.k = 6;
            spec.num_classes = 4;
            spec.prototype_min_hamming = 2;
            spec.group_size = Some(3);
        }
        cfg.train.optimizer.epochs = 3;
        cfg.train.optimizer.batch_size = 16;
        cfg
    }

    #[test]
    fn reseed_touches_every_seed() {
        let mut cfg = tiny(0);
        cfg.noise.push(NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.1,
            apply_to: NoiseScope::Both,
            seed: 0,
        });
        cfg.reseed(42);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.optimizer.seed, 42);
        assert_eq!(cfg.noise[0].seed, 43);
        match cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.seed, 42),
            DataSource::Csv(_) => unreachable!(),
        }
    }

    #[test]
    fn config_validation_catches_cross_field_errors() {
        let mut cfg = tiny(1);
        cfg.interventions.push(PolicyConfig {
            criterion: Criterion::Susceptibility,
            mode: InterventionMode::Correct,
            adaptive: false,
        });
        assert!(cfg.validate().is_err());
        cfg.analysis.susceptibility = true;
        assert!(cfg.validate().is_ok());
        let mut grouped = tiny(1);
        if let DataSource::Synthetic(spec) = &mut grouped.data {
            spec.group_size = None;
        }
        grouped.noise.push(NoiseSpec {
            kind: NoiseKind::Grouped,
            rate: 0.2,
            apply_to: NoiseScope::Concepts,
            seed: 0,
        });
        assert!(matches!(grouped.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn test_split_stays_clean() {
        let mut cfg = tiny(3);
        cfg.noise.push(NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.5,
            apply_to: NoiseScope::Both,
            seed: 0,
        });
        cfg.reseed(3);
        let data = prepare_data(&cfg).unwrap();
        let clean = prepare_data(&cfg.clean_twin()).unwrap();
        assert_eq!(data.test, clean.test);
        assert_ne!(data.train, clean.train);
    }

    #[test]
    fn sweep_cells_and_seeds() {
        let sweep = SweepConfig {
            base: tiny(0),
            grid: SweepGrid {
                noise_rates: vec![0.0, 0.2, 0.4],
                noise_scopes: vec![NoiseScope::Both],
                noise_kind: NoiseKind::Symmetric,
                optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Sam],
                strategies: vec![StrategyConfig::Independent],
            },
            seeds: vec![1, 2, 3, 4, 5],
            rho: 0.05,
        };
        let cells = sweep.cells();
        assert_eq!(cells.len(), 6);
        let sam = sweep.cell_config(&cells[1], 1).unwrap();
        assert_eq!(sam.train.optimizer.rho, 0.05);
        assert_ne!(cells[0].seed(1), cells[1].seed(1));
        assert_eq!(cells[0].seed(1), cells[0].seed(1));
    }
}
