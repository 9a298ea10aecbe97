//! SGD, SAM and J-SAM updates, and the three CBM training strategies.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    concept_grads, concept_grads_from_residual, concept_loss, concept_residual, joint_grads,
    joint_loss, sigmoid, target_grads, task_loss, threshold, CbmModel, ConceptGrads,
    ConceptPredictor, LossWeights, Parameters, Strategy, TargetGrads, TargetPredictor,
};
use crate::{seeded_rng, stream_rng};

/// Gradient norm below which SAM skips the perturbation.
pub const SAM_MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Jsam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Jsam => "jsam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauDecay {
    fn default() -> Self {
        PlateauDecay {
            factor: 0.1,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    /// SAM neighbourhood radius.
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub plateau_decay: Option<PlateauDecay>,
    #[serde(default)]
    pub seed: u64,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.0,
            rho: 0.0,
            weight_decay: 0.0,
            epochs,
            batch_size,
            plateau_decay: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if matches!(self.kind, OptimizerKind::Sam | OptimizerKind::Jsam) && self.rho <= 0.0 {
            return bad(format!("{} needs rho > 0", self.kind));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(p) = self.plateau_decay {
            if !(p.factor > 0.0 && p.factor <= 1.0) || p.patience == 0 {
                return bad("plateau_decay needs factor in (0, 1] and patience >= 1".into());
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state: momentum buffer and the current learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub buffer: Option<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec) -> Self {
        OptimizerState {
            learning_rate: spec.learning_rate,
            buffer: None,
        }
    }
}

/// Heavy-ball SGD: decay is added to the gradient, the momentum buffer is
/// updated, and parameters move by `−lr · buffer`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) {
    assert_eq!(params.len(), grads.len(), "parameter / gradient length");
    let mut step: Vec<f64> = grads
        .iter()
        .zip(params.iter())
        .map(|(g, p)| g + spec.weight_decay * p)
        .collect();
    if spec.momentum > 0.0 {
        let buffer = state.buffer.get_or_insert_with(|| vec![0.0; params.len()]);
        for (b, s) in buffer.iter_mut().zip(step.iter_mut()) {
            *b = spec.momentum * *b + *s;
            *s = *b;
        }
    }
    let lr = state.learning_rate;
    for (p, s) in params.iter_mut().zip(&step) {
        *p -= lr * s;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SAM ascent direction `ρ · g / ‖g‖₂`, or `None` when the gradient vanishes.
pub fn sam_perturbation(grads: &[f64], rho: f64) -> Option<Vec<f64>> {
    let norm = l2_norm(grads);
    if norm < SAM_MIN_GRAD_NORM {
        return None;
    }
    Some(grads.iter().map(|g| rho * g / norm).collect())
}

/// A differentiable training loss over indexed samples.
pub trait Objective {
    type Model: Parameters + Clone;

    /// Mean loss and flat mean gradient over `batch`.
    fn loss_and_grad(&self, model: &Self::Model, batch: &[usize]) -> (f64, Vec<f64>);

    fn loss(&self, model: &Self::Model, batch: &[usize]) -> f64;
}

/// One plain SGD step on `batch`; returns the batch loss before the step.
pub fn sgd_objective_step<O: Objective>(
    model: &mut O::Model,
    objective: &O,
    batch: &[usize],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) -> f64 {
    let (loss, grads) = objective.loss_and_grad(model, batch);
    let mut flat = model.to_flat();
    sgd_step(&mut flat, &grads, spec, state);
    model.set_flat(&flat);
    loss
}

/// One SAM step: gradient at `w`, perturb by `ρ g/‖g‖` over all trained
/// parameters jointly, then descend at `w` with the gradient taken at the
/// perturbed point. Returns the batch loss at `w`.
pub fn sam_step<O: Objective>(
    model: &mut O::Model,
    objective: &O,
    batch: &[usize],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) -> f64 {
    let (loss, g1) = objective.loss_and_grad(model, batch);
    let mut flat = model.to_flat();
    let descent = match sam_perturbation(&g1, spec.rho) {
        Some(eps) => {
            let mut perturbed = model.clone();
            let shifted: Vec<f64> = flat.iter().zip(&eps).map(|(w, e)| w + e).collect();
            perturbed.set_flat(&shifted);
            objective.loss_and_grad(&perturbed, batch).1
        }
        None => g1,
    };
    sgd_step(&mut flat, &descent, spec, state);
    model.set_flat(&flat);
    loss
}

/// Closed-form J-SAM descent direction for one sample: the plain BCE
/// gradient plus the adaptive regularizers on `z xᵀ` (first layer) and on the
/// residual-weighted heads (second layer). `residual_j = ∂ℓ/∂g_j`.
pub fn jsam_direction(
    g: &ConceptPredictor,
    x: ArrayView1<f64>,
    residual: ArrayView1<f64>,
    rho: f64,
) -> ConceptGrads {
    let mut grads = concept_grads_from_residual(g, x, residual);
    let norm = l2_norm(&grads.to_flat());
    if norm < SAM_MIN_GRAD_NORM || rho == 0.0 {
        return grads;
    }
    let z = g.hidden(x);
    let x_sq = x.dot(&x);
    let r_sq: f64 = residual.iter().map(|r| r * r).sum();
    // W: + Σ_j ρ r_j² / ‖∇ℓ‖ · z xᵀ
    let coef = rho * r_sq / norm;
    for a in 0..z.len() {
        grads.w.row_mut(a).scaled_add(coef * z[a], &x);
    }
    // v_j: + ρ r_j / ‖∇ℓ‖ · Σ_i r_i ‖x‖² v_i
    let mixed = g.v.t().dot(&residual) * x_sq;
    for j in 0..residual.len() {
        grads
            .v
            .row_mut(j)
            .scaled_add(rho * residual[j] / norm, &mixed);
    }
    grads
}

/// Concept-predictor training loss (weighted BCE, no task term).
pub struct ConceptObjective<'a> {
    pub inputs: &'a Array2<f64>,
    pub concepts: &'a Array2<f64>,
    pub weights: &'a LossWeights,
}

impl Objective for ConceptObjective<'_> {
    type Model = ConceptPredictor;

    fn loss_and_grad(&self, model: &ConceptPredictor, batch: &[usize]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut acc = ConceptGrads::zeros_like(model);
        for &i in batch {
            let x = self.inputs.row(i);
            let c = self.concepts.row(i);
            total += concept_loss(model.logits(x).view(), c, self.weights);
            acc.add_assign(&concept_grads(model, x, c, self.weights));
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        (
            total * scale,
            acc.to_flat().into_iter().map(|v| v * scale).collect(),
        )
    }

    fn loss(&self, model: &ConceptPredictor, batch: &[usize]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|&i| {
                concept_loss(
                    model.logits(self.inputs.row(i)).view(),
                    self.concepts.row(i),
                    self.weights,
                )
            })
            .sum();
        total / batch.len().max(1) as f64
    }
}

impl ConceptObjective<'_> {
    /// J-SAM step: per-sample closed-form directions averaged over the batch.
    pub fn jsam_step(
        &self,
        model: &mut ConceptPredictor,
        batch: &[usize],
        spec: &OptimizerSpec,
        state: &mut OptimizerState,
    ) -> Result<f64> {
        jsam_step(
            model,
            self.inputs,
            self.concepts,
            self.weights,
            batch,
            spec,
            state,
        )
    }
}

/// Applies one J-SAM update to the concept predictor; returns the batch loss.
pub fn jsam_step(
    g: &mut ConceptPredictor,
    inputs: &Array2<f64>,
    concepts: &Array2<f64>,
    weights: &LossWeights,
    batch: &[usize],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) -> Result<f64> {
    if g.head_bias.is_some() {
        return Err(Error::Unsupported(
            "J-SAM closed form needs a concept predictor without head bias".into(),
        ));
    }
    let mut acc = ConceptGrads::zeros_like(g);
    let mut total = 0.0;
    for &i in batch {
        let x = inputs.row(i);
        let c = concepts.row(i);
        let logits = g.logits(x);
        total += concept_loss(logits.view(), c, weights);
        let residual = concept_residual(logits.view(), c, weights);
        acc.add_assign(&jsam_direction(g, x, residual.view(), spec.rho));
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    let grads: Vec<f64> = acc.to_flat().into_iter().map(|v| v * scale).collect();
    let mut flat = g.to_flat();
    sgd_step(&mut flat, &grads, spec, state);
    g.set_flat(&flat);
    Ok(total * scale)
}

/// Softmax cross-entropy of the target predictor on fixed concept features.
pub struct TargetObjective<'a> {
    pub features: &'a Array2<f64>,
    pub targets: &'a [usize],
}

impl Objective for TargetObjective<'_> {
    type Model = TargetPredictor;

    fn loss_and_grad(&self, model: &TargetPredictor, batch: &[usize]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut acc = TargetGrads::zeros_like(model);
        for &i in batch {
            let c = self.features.row(i);
            total += task_loss(model.scores(c).view(), self.targets[i]);
            acc.add_assign(&target_grads(model, c, self.targets[i]));
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        (
            total * scale,
            acc.to_flat().into_iter().map(|v| v * scale).collect(),
        )
    }

    fn loss(&self, model: &TargetPredictor, batch: &[usize]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|&i| task_loss(model.scores(self.features.row(i)).view(), self.targets[i]))
            .sum();
        total / batch.len().max(1) as f64
    }
}

/// Joint objective `ℓ_Y(f(σ(g(x))), y) + λ Σ_j ℓ_{C_j}`.
pub struct JointObjective<'a> {
    pub inputs: &'a Array2<f64>,
    pub concepts: &'a Array2<f64>,
    pub targets: &'a [usize],
    pub lambda: f64,
    pub weights: &'a LossWeights,
}

impl Parameters for CbmModel {
    fn num_params(&self) -> usize {
        self.g.num_params() + self.f.num_params()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = self.g.to_flat();
        out.extend(self.f.to_flat());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let split = self.g.num_params();
        self.g.set_flat(&flat[..split]);
        self.f.set_flat(&flat[split..]);
    }
}

impl Objective for JointObjective<'_> {
    type Model = CbmModel;

    fn loss_and_grad(&self, model: &CbmModel, batch: &[usize]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut g_acc = ConceptGrads::zeros_like(&model.g);
        let mut f_acc = TargetGrads::zeros_like(&model.f);
        for &i in batch {
            let (x, c, y) = (self.inputs.row(i), self.concepts.row(i), self.targets[i]);
            total += joint_loss(model, x, c, y, self.lambda, self.weights);
            let grads = joint_grads(model, x, c, y, self.lambda, self.weights);
            g_acc.add_assign(&grads.g);
            f_acc.add_assign(&grads.f);
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut flat = g_acc.to_flat();
        flat.extend(f_acc.to_flat());
        (total * scale, flat.into_iter().map(|v| v * scale).collect())
    }

    fn loss(&self, model: &CbmModel, batch: &[usize]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|&i| {
                joint_loss(
                    model,
                    self.inputs.row(i),
                    self.concepts.row(i),
                    self.targets[i],
                    self.lambda,
                    self.weights,
                )
            })
            .sum();
        total / batch.len().max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// Training loops

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyConfig {
    Independent,
    Sequential,
    Joint { lambda: f64 },
}

impl StrategyConfig {
    pub fn tag(&self) -> Strategy {
        match self {
            StrategyConfig::Independent => Strategy::Independent,
            StrategyConfig::Sequential => Strategy::Sequential,
            StrategyConfig::Joint { .. } => Strategy::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: StrategyConfig,
    /// Optimizer for the concept predictor, or for the whole model when joint.
    pub optimizer: OptimizerSpec,
    /// Optimizer for the target predictor; defaults to `optimizer`
    /// (J-SAM falls back to SAM there, since its closed form is concept-only).
    #[serde(default)]
    pub target_optimizer: Option<OptimizerSpec>,
    /// Hidden width m; defaults to max(d, k).
    #[serde(default)]
    pub hidden_width: Option<usize>,
    #[serde(default)]
    pub weighted_loss: bool,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(t) = &self.target_optimizer {
            t.validate()?;
            if t.kind == OptimizerKind::Jsam {
                return Err(Error::Unsupported(
                    "J-SAM applies to the concept predictor only".into(),
                ));
            }
        }
        if let StrategyConfig::Joint { lambda } = self.strategy {
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(Error::Config(format!(
                    "joint strategy needs lambda > 0, got {lambda}"
                )));
            }
            if self.optimizer.kind == OptimizerKind::Jsam {
                return Err(Error::Unsupported(
                    "J-SAM is defined for the concept BCE only, not the joint loss".into(),
                ));
            }
            if self.target_optimizer.is_some() {
                return Err(Error::Config(
                    "joint training uses one shared optimizer".into(),
                ));
            }
        }
        if self.hidden_width == Some(0) {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_target_optimizer(&self) -> OptimizerSpec {
        match &self.target_optimizer {
            Some(spec) => spec.clone(),
            None => {
                let mut spec = self.optimizer.clone();
                if spec.kind == OptimizerKind::Jsam {
                    spec.kind = OptimizerKind::Sam;
                }
                spec
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch metrics. Concept-phase epochs come first, then target-phase
/// epochs, numbered continuously.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub epochs_run: usize,
    pub final_epoch: Option<usize>,
    pub seed: u64,
}

impl TrainHistory {
    fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(HistoryRow {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
        }
        out
    }

    /// Values of one metric on one split, in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }
}

struct Plateau {
    decay: Option<PlateauDecay>,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    fn new(decay: Option<PlateauDecay>) -> Self {
        Plateau {
            decay,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    fn observe(&mut self, loss: f64, state: &mut OptimizerState) {
        let Some(decay) = self.decay else { return };
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= decay.patience {
                state.learning_rate *= decay.factor;
                self.bad_epochs = 0;
            }
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_loss(loss: f64, phase: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite {phase} loss at epoch {epoch}, batch {batch}"
        )))
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn concept_hits(g: &ConceptPredictor, inputs: &Array2<f64>, concepts: &Array2<f64>) -> f64 {
    if concepts.is_empty() {
        return 0.0;
    }
    let probs = g.predict_probs(inputs);
    let hits = probs
        .iter()
        .zip(concepts.iter())
        .filter(|(p, c)| f64::from(threshold(**p)) == **c)
        .count();
    hits as f64 / probs.len() as f64
}

fn target_hits(f: &TargetPredictor, features: &Array2<f64>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = features
        .rows()
        .into_iter()
        .zip(targets)
        .filter(|(c, &y)| f.predict_class(*c) == y)
        .count();
    hits as f64 / targets.len() as f64
}

fn step_with<O: Objective>(
    kind: OptimizerKind,
    model: &mut O::Model,
    objective: &O,
    batch: &[usize],
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
) -> Result<f64> {
    match kind {
        OptimizerKind::Sgd => Ok(sgd_objective_step(model, objective, batch, spec, state)),
        OptimizerKind::Sam => Ok(sam_step(model, objective, batch, spec, state)),
        OptimizerKind::Jsam => Err(Error::Unsupported(
            "J-SAM applies to the concept predictor only".into(),
        )),
    }
}

fn train_concepts(
    g: &mut ConceptPredictor,
    train: &LabeledDataset,
    val: &LabeledDataset,
    weights: &LossWeights,
    spec: &OptimizerSpec,
    history: &mut TrainHistory,
) -> Result<()> {
    let train_c = train.concepts_f64();
    let val_c = val.concepts_f64();
    let objective = ConceptObjective {
        inputs: &train.inputs,
        concepts: &train_c,
        weights,
    };
    let val_objective = ConceptObjective {
        inputs: &val.inputs,
        concepts: &val_c,
        weights,
    };
    let mut rng = stream_rng(spec.seed, 1);
    let mut state = OptimizerState::new(spec);
    let mut plateau = Plateau::new(spec.plateau_decay);
    for _ in 0..spec.epochs {
        let epoch = history.epochs_run;
        for (b, batch) in batches(train.len(), spec.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let loss = match spec.kind {
                OptimizerKind::Jsam => objective.jsam_step(g, batch, spec, &mut state)?,
                kind => step_with(kind, g, &objective, batch, spec, &mut state)?,
            };
            check_loss(loss, "concept", epoch, b)?;
        }
        let train_loss = objective.loss(g, &all(train.len()));
        check_loss(train_loss, "concept", epoch, usize::MAX)?;
        history.push(epoch, "train", "concept_loss", train_loss);
        history.push(
            epoch,
            "train",
            "concept_acc",
            concept_hits(g, &train.inputs, &train_c),
        );
        let monitored = if val.is_empty() {
            train_loss
        } else {
            let val_loss = val_objective.loss(g, &all(val.len()));
            history.push(epoch, "val", "concept_loss", val_loss);
            history.push(
                epoch,
                "val",
                "concept_acc",
                concept_hits(g, &val.inputs, &val_c),
            );
            val_loss
        };
        plateau.observe(monitored, &mut state);
        history.epochs_run += 1;
    }
    Ok(())
}

fn train_target(
    f: &mut TargetPredictor,
    train_features: &Array2<f64>,
    train_targets: &[usize],
    val_features: &Array2<f64>,
    val_targets: &[usize],
    spec: &OptimizerSpec,
    history: &mut TrainHistory,
) -> Result<()> {
    let objective = TargetObjective {
        features: train_features,
        targets: train_targets,
    };
    let val_objective = TargetObjective {
        features: val_features,
        targets: val_targets,
    };
    let mut rng = stream_rng(spec.seed, 2);
    let mut state = OptimizerState::new(spec);
    let mut plateau = Plateau::new(spec.plateau_decay);
    for _ in 0..spec.epochs {
        let epoch = history.epochs_run;
        for (b, batch) in batches(train_targets.len(), spec.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let loss = step_with(spec.kind, f, &objective, batch, spec, &mut state)?;
            check_loss(loss, "task", epoch, b)?;
        }
        let train_loss = objective.loss(f, &all(train_targets.len()));
        check_loss(train_loss, "task", epoch, usize::MAX)?;
        history.push(epoch, "train", "task_loss", train_loss);
        history.push(
            epoch,
            "train",
            "task_acc",
            target_hits(f, train_features, train_targets),
        );
        let monitored = if val_targets.is_empty() {
            train_loss
        } else {
            let val_loss = val_objective.loss(f, &all(val_targets.len()));
            history.push(epoch, "val", "task_loss", val_loss);
            history.push(
                epoch,
                "val",
                "task_acc",
                target_hits(f, val_features, val_targets),
            );
            val_loss
        };
        plateau.observe(monitored, &mut state);
        history.epochs_run += 1;
    }
    Ok(())
}

fn train_joint(
    model: &mut CbmModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    lambda: f64,
    weights: &LossWeights,
    spec: &OptimizerSpec,
    history: &mut TrainHistory,
) -> Result<()> {
    let train_c = train.concepts_f64();
    let val_c = val.concepts_f64();
    let objective = JointObjective {
        inputs: &train.inputs,
        concepts: &train_c,
        targets: &train.targets,
        lambda,
        weights,
    };
    let val_objective = JointObjective {
        inputs: &val.inputs,
        concepts: &val_c,
        targets: &val.targets,
        lambda,
        weights,
    };
    let mut rng = stream_rng(spec.seed, 3);
    let mut state = OptimizerState::new(spec);
    let mut plateau = Plateau::new(spec.plateau_decay);
    for _ in 0..spec.epochs {
        let epoch = history.epochs_run;
        for (b, batch) in batches(train.len(), spec.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let loss = step_with(spec.kind, model, &objective, batch, spec, &mut state)?;
            check_loss(loss, "joint", epoch, b)?;
        }
        let train_loss = objective.loss(model, &all(train.len()));
        check_loss(train_loss, "joint", epoch, usize::MAX)?;
        history.push(epoch, "train", "joint_loss", train_loss);
        history.push(epoch, "train", "concept_acc", model.concept_accuracy(train));
        history.push(epoch, "train", "task_acc", model.task_accuracy(train));
        let monitored = if val.is_empty() {
            train_loss
        } else {
            let val_loss = val_objective.loss(model, &all(val.len()));
            history.push(epoch, "val", "joint_loss", val_loss);
            history.push(epoch, "val", "concept_acc", model.concept_accuracy(val));
            history.push(epoch, "val", "task_acc", model.task_accuracy(val));
            val_loss
        };
        plateau.observe(monitored, &mut state);
        history.epochs_run += 1;
    }
    Ok(())
}

/// Freshly initialized model for the datasets' shapes.
pub fn init_model(d: usize, k: usize, num_classes: usize, config: &TrainConfig) -> CbmModel {
    let m = config.hidden_width.unwrap_or(d.max(k));
    let mut rng = seeded_rng(config.seed);
    let g = ConceptPredictor::init(d, m, k, &mut rng);
    let f = TargetPredictor::init(k, num_classes, &mut rng);
    CbmModel {
        g,
        f,
        strategy: config.strategy.tag(),
    }
}

/// Trains a CBM with the configured strategy.
///
/// * independent: `g` on (x, c); `f` on (ground-truth c, y).
/// * sequential: `g` first, then `f` on `g`'s concept probabilities.
/// * joint: both at once on `ℓ_Y + λ Σ ℓ_C`.
pub fn train(
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(CbmModel, TrainHistory)> {
    config.validate()?;
    if train_ds.input_dim() != val_ds.input_dim()
        || train_ds.num_concepts() != val_ds.num_concepts()
    {
        return Err(Error::Schema(
            "train and validation datasets differ in shape".into(),
        ));
    }
    if train_ds.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let num_classes = train_ds.num_classes().max(val_ds.num_classes());
    let mut model = init_model(
        train_ds.input_dim(),
        train_ds.num_concepts(),
        num_classes,
        config,
    );
    let weights = if config.weighted_loss {
        LossWeights::from_imbalance(train_ds)
    } else {
        LossWeights::uniform(train_ds.num_concepts())
    };
    let mut history = TrainHistory {
        seed: config.seed,
        ..TrainHistory::default()
    };

    match config.strategy {
        StrategyConfig::Independent | StrategyConfig::Sequential => {
            train_concepts(
                &mut model.g,
                train_ds,
                val_ds,
                &weights,
                &config.optimizer,
                &mut history,
            )?;
            let (train_features, val_features) = if config.strategy == StrategyConfig::Independent {
                (train_ds.concepts_f64(), val_ds.concepts_f64())
            } else {
                (
                    model.g.predict_probs(&train_ds.inputs),
                    model.g.predict_probs(&val_ds.inputs),
                )
            };
            let target_spec = config.resolved_target_optimizer();
            train_target(
                &mut model.f,
                &train_features,
                &train_ds.targets,
                &val_features,
                &val_ds.targets,
                &target_spec,
                &mut history,
            )?;
        }
        StrategyConfig::Joint { lambda } => {
            train_joint(
                &mut model,
                train_ds,
                val_ds,
                lambda,
                &weights,
                &config.optimizer,
                &mut history,
            )?;
        }
    }
    history.final_epoch = history.epochs_run.checked_sub(1);
    model.validate()?;
    Ok((model, history))
}

/// Concept probabilities of `g` on one input, as a fresh vector.
pub fn concept_probs(g: &ConceptPredictor, x: ArrayView1<f64>) -> Array1<f64> {
    g.logits(x).mapv(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// ℓ(w) = w²/2 on a single scalar.
    #[derive(Clone)]
    struct Scalar(f64);

    impl Parameters for Scalar {
        fn num_params(&self) -> usize {
            1
        }
        fn to_flat(&self) -> Vec<f64> {
            vec![self.0]
        }
        fn set_flat(&mut self, flat: &[f64]) {
            self.0 = flat[0];
        }
    }

    struct Quadratic;

    impl Objective for Quadratic {
        type Model = Scalar;
        fn loss_and_grad(&self, model: &Scalar, _batch: &[usize]) -> (f64, Vec<f64>) {
            (0.5 * model.0 * model.0, vec![model.0])
        }
        fn loss(&self, model: &Scalar, _batch: &[usize]) -> f64 {
            0.5 * model.0 * model.0
        }
    }

    fn spec(kind: OptimizerKind, lr: f64, momentum: f64, rho: f64) -> OptimizerSpec {
        OptimizerSpec {
            kind,
            learning_rate: lr,
            momentum,
            rho,
            ..OptimizerSpec::sgd(lr, 1, 1)
        }
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let s = spec(OptimizerKind::Sgd, 0.0, 0.9, 0.0);
        let mut state = OptimizerState::new(&s);
        let mut p = vec![1.0, -2.0];
        sgd_step(&mut p, &[3.0, 4.0], &s, &mut state);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_sgd_update() {
        let s = spec(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let mut state = OptimizerState::new(&s);
        let mut p = vec![1.0, -2.0];
        sgd_step(&mut p, &[3.0, 4.0], &s, &mut state);
        assert_eq!(p, vec![1.0 - 0.1 * 3.0, -2.0 - 0.1 * 4.0]);
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        // Hand-rolled heavy-ball recurrence on ℓ(w) = w²/2:
        // b1 = g0, w1 = w0 − lr b1; b2 = μ b1 + g1, w2 = w1 − lr b2.
        let (lr, mu, w0) = (0.1, 0.9, 1.0);
        let b1 = w0;
        let w1 = w0 - lr * b1;
        let b2 = mu * b1 + w1;
        let w2 = w1 - lr * b2;

        let s = spec(OptimizerKind::Sgd, lr, mu, 0.0);
        let mut state = OptimizerState::new(&s);
        let mut model = Scalar(w0);
        sgd_objective_step(&mut model, &Quadratic, &[0], &s, &mut state);
        assert_abs_diff_eq!(model.0, w1, epsilon = 1e-15);
        sgd_objective_step(&mut model, &Quadratic, &[0], &s, &mut state);
        assert_abs_diff_eq!(model.0, w2, epsilon = 1e-15);
        assert_abs_diff_eq!(w2, 0.9 - 0.1 * (0.9 + 0.9), epsilon = 1e-15);
    }

    #[test]
    fn perturbation_is_unit_scaled() {
        let eps = sam_perturbation(&[3.0, 4.0], 0.05).unwrap();
        assert_abs_diff_eq!(eps[0], 0.03, epsilon = 1e-15);
        assert_abs_diff_eq!(eps[1], 0.04, epsilon = 1e-15);
        assert!(sam_perturbation(&[0.0, 1e-13], 0.05).is_none());
    }

    #[test]
    fn sam_on_quadratic() {
        let s = spec(OptimizerKind::Sam, 1.0, 0.0, 0.1);
        let mut state = OptimizerState::new(&s);
        let mut model = Scalar(1.0);
        sam_step(&mut model, &Quadratic, &[0], &s, &mut state);
        // perturbed gradient 1.1, w = 1 − 1.1
        assert_abs_diff_eq!(model.0, -0.1, epsilon = 1e-15);
    }

    #[test]
    fn sam_with_zero_radius_is_sgd() {
        let s_sam = spec(OptimizerKind::Sam, 0.3, 0.9, 0.0);
        let s_sgd = spec(OptimizerKind::Sgd, 0.3, 0.9, 0.0);
        let (mut a, mut b) = (Scalar(2.5), Scalar(2.5));
        let (mut sa, mut sb) = (OptimizerState::new(&s_sam), OptimizerState::new(&s_sgd));
        for _ in 0..5 {
            sam_step(&mut a, &Quadratic, &[0], &s_sam, &mut sa);
            sgd_objective_step(&mut b, &Quadratic, &[0], &s_sgd, &mut sb);
            assert_eq!(a.0.to_bits(), b.0.to_bits());
        }
    }

    #[test]
    fn validation_rules() {
        assert!(spec(OptimizerKind::Sam, 0.1, 0.0, 0.0).validate().is_err());
        assert!(spec(OptimizerKind::Sgd, 0.1, 1.0, 0.0).validate().is_err());
        assert!(spec(OptimizerKind::Jsam, 0.1, 0.0, 0.05).validate().is_ok());
        let cfg = TrainConfig {
            strategy: StrategyConfig::Joint { lambda: 1.0 },
            optimizer: spec(OptimizerKind::Jsam, 0.1, 0.0, 0.05),
            target_optimizer: None,
            hidden_width: None,
            weighted_loss: false,
            seed: 0,
        };
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
        let cfg = TrainConfig {
            strategy: StrategyConfig::Independent,
            ..cfg
        };
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.resolved_target_optimizer().kind, OptimizerKind::Sam);
    }

    #[test]
    fn jsam_rejects_head_bias() {
        let mut rng = crate::seeded_rng(0);
        let mut g = ConceptPredictor::init(2, 2, 2, &mut rng);
        g.head_bias = Some(Array1::zeros(2));
        let inputs = Array2::ones((1, 2));
        let concepts = Array2::ones((1, 2));
        let s = spec(OptimizerKind::Jsam, 0.1, 0.0, 0.05);
        let mut state = OptimizerState::new(&s);
        let res = jsam_step(
            &mut g,
            &inputs,
            &concepts,
            &LossWeights::uniform(2),
            &[0],
            &s,
            &mut state,
        );
        assert!(matches!(res, Err(Error::Unsupported(_))));
    }
}
