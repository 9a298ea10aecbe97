//! The two-layer linear concept bottleneck model.
//!
//! A shared first layer `z = W x` feeds one linear head per concept,
//! `g_j(x) = <v_j, z>`, squashed by a sigmoid into concept probabilities.
//! A linear target predictor `f(c) = U c + b` maps (soft) concepts to class
//! scores, normalized with a softmax.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn log_sum_exp(scores: ArrayView1<f64>) -> f64 {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = scores.mapv(|s| (s - max).exp());
    let total = out.sum();
    out /= total;
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(v: ArrayView1<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Flat, fixed-order view of a parameter set, used by the optimizers.
pub trait Parameters {
    fn num_params(&self) -> usize;
    fn to_flat(&self) -> Vec<f64>;
    /// Overwrites every parameter from `flat` (same order as `to_flat`).
    fn set_flat(&mut self, flat: &[f64]);
}

fn push_all(out: &mut Vec<f64>, values: impl IntoIterator<Item = f64>) {
    out.extend(values);
}

fn take_into<'a, 'b>(flat: &'a [f64], target: impl Iterator<Item = &'b mut f64>) -> &'a [f64] {
    let mut used = 0;
    for (dst, src) in target.zip(flat) {
        *dst = *src;
        used += 1;
    }
    &flat[used..]
}

// ---------------------------------------------------------------------------
// Concept predictor

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPredictor {
    /// m × d shared first layer.
    pub w: Array2<f64>,
    /// k × m per-concept heads (row j is `v_j`).
    pub v: Array2<f64>,
    pub head_bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptOutput {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGrads {
    pub w: Array2<f64>,
    pub v: Array2<f64>,
    pub head_bias: Option<Array1<f64>>,
}

impl ConceptPredictor {
    /// N(0, 1/fan_in) initialization, no head bias.
    pub fn init<R: Rng>(d: usize, m: usize, k: usize, rng: &mut R) -> Self {
        ConceptPredictor {
            w: gaussian_matrix(m, d, d, rng),
            v: gaussian_matrix(k, m, m, rng),
            head_bias: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.v.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.v.ncols() != self.w.nrows() {
            return Err(Error::Schema(format!(
                "head width {} does not match hidden width {}",
                self.v.ncols(),
                self.w.nrows()
            )));
        }
        if let Some(b) = &self.head_bias {
            if b.len() != self.num_concepts() {
                return Err(Error::Schema(
                    "head bias length differs from concept count".into(),
                ));
            }
        }
        let finite = self.w.iter().chain(self.v.iter()).all(|x| x.is_finite())
            && self.head_bias.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numeric(
                "non-finite concept predictor parameter".into(),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x)
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut logits = self.v.dot(&self.hidden(x));
        if let Some(b) = &self.head_bias {
            logits += b;
        }
        logits
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ConceptOutput> {
        if x.len() != self.input_dim() {
            return Err(Error::Schema(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        check_finite(x, "input")?;
        let logits = self.logits(x);
        let probs = logits.mapv(sigmoid);
        Ok(ConceptOutput { logits, probs })
    }

    /// Concept probabilities for every row of `inputs` (n × k).
    pub fn predict_probs(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut logits = inputs.dot(&self.w.t()).dot(&self.v.t());
        if let Some(b) = &self.head_bias {
            logits += b;
        }
        logits.mapv_inplace(sigmoid);
        logits
    }
}

impl Parameters for ConceptPredictor {
    fn num_params(&self) -> usize {
        self.w.len() + self.v.len() + self.head_bias.as_ref().map_or(0, |b| b.len())
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        push_all(&mut out, self.w.iter().copied());
        push_all(&mut out, self.v.iter().copied());
        if let Some(b) = &self.head_bias {
            push_all(&mut out, b.iter().copied());
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let rest = take_into(flat, self.w.iter_mut());
        let rest = take_into(rest, self.v.iter_mut());
        if let Some(b) = &mut self.head_bias {
            take_into(rest, b.iter_mut());
        }
    }
}

impl ConceptGrads {
    pub fn zeros_like(g: &ConceptPredictor) -> Self {
        ConceptGrads {
            w: Array2::zeros(g.w.raw_dim()),
            v: Array2::zeros(g.v.raw_dim()),
            head_bias: g.head_bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_all(&mut out, self.w.iter().copied());
        push_all(&mut out, self.v.iter().copied());
        if let Some(b) = &self.head_bias {
            push_all(&mut out, b.iter().copied());
        }
        out
    }

    pub fn add_assign(&mut self, other: &ConceptGrads) {
        self.w += &other.w;
        self.v += &other.v;
        if let (Some(a), Some(b)) = (&mut self.head_bias, &other.head_bias) {
            *a += b;
        }
    }
}

/// Gradients of the concept loss with respect to the head logits, given
/// per-concept residuals `r_j = ∂ℓ/∂g_j`.
pub fn concept_grads_from_residual(
    g: &ConceptPredictor,
    x: ArrayView1<f64>,
    residual: ArrayView1<f64>,
) -> ConceptGrads {
    let z = g.hidden(x);
    let (k, m) = g.v.dim();
    let d = x.len();
    let mut gv = Array2::zeros((k, m));
    for j in 0..k {
        gv.row_mut(j).scaled_add(residual[j], &z);
    }
    // Σ_j r_j v_j, then outer product with x.
    let back = g.v.t().dot(&residual);
    let mut gw = Array2::zeros((m, d));
    for a in 0..m {
        gw.row_mut(a).scaled_add(back[a], &x);
    }
    ConceptGrads {
        w: gw,
        v: gv,
        head_bias: g.head_bias.as_ref().map(|_| residual.to_owned()),
    }
}

// ---------------------------------------------------------------------------
// Target predictor

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPredictor {
    /// M × k weights.
    pub u: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutput {
    pub scores: Array1<f64>,
    pub probs: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrads {
    pub u: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TargetPredictor {
    pub fn init<R: Rng>(k: usize, num_classes: usize, rng: &mut R) -> Self {
        TargetPredictor {
            u: gaussian_matrix(num_classes, k, k, rng),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.u.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.u.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.u.nrows() {
            return Err(Error::Schema(
                "target bias length differs from class count".into(),
            ));
        }
        if !self.u.iter().chain(self.bias.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numeric(
                "non-finite target predictor parameter".into(),
            ));
        }
        Ok(())
    }

    pub fn scores(&self, c: ArrayView1<f64>) -> Array1<f64> {
        self.u.dot(&c) + &self.bias
    }

    pub fn forward(&self, c: ArrayView1<f64>) -> Result<TargetOutput> {
        if c.len() != self.num_concepts() {
            return Err(Error::Schema(format!(
                "concept vector has length {}, model expects {}",
                c.len(),
                self.num_concepts()
            )));
        }
        check_finite(c, "concept vector")?;
        let scores = self.scores(c);
        let probs = softmax(scores.view());
        Ok(TargetOutput { scores, probs })
    }

    pub fn predict_class(&self, c: ArrayView1<f64>) -> usize {
        argmax(self.scores(c).view())
    }
}

impl Parameters for TargetPredictor {
    fn num_params(&self) -> usize {
        self.u.len() + self.bias.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        push_all(&mut out, self.u.iter().copied());
        push_all(&mut out, self.bias.iter().copied());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let rest = take_into(flat, self.u.iter_mut());
        take_into(rest, self.bias.iter_mut());
    }
}

impl TargetGrads {
    pub fn zeros_like(f: &TargetPredictor) -> Self {
        TargetGrads {
            u: Array2::zeros(f.u.raw_dim()),
            bias: Array1::zeros(f.bias.len()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.u.iter().chain(self.bias.iter()).copied().collect()
    }

    pub fn add_assign(&mut self, other: &TargetGrads) {
        self.u += &other.u;
        self.bias += &other.bias;
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients

/// Per-concept positive-class weights for the concept BCE.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(Array1<f64>);

impl LossWeights {
    pub fn uniform(k: usize) -> Self {
        LossWeights(Array1::ones(k))
    }

    pub fn new(weights: Array1<f64>) -> Result<Self> {
        if weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(LossWeights(weights))
        } else {
            Err(Error::Config(
                "loss weights must be finite and strictly positive".into(),
            ))
        }
    }

    /// `#negatives / #positives` per concept, counts floored at 1 so the
    /// ratio stays finite and positive.
    pub fn from_imbalance(ds: &LabeledDataset) -> Self {
        let k = ds.num_concepts();
        let positives = ds.concepts.map(|&c| c as usize).sum_axis(Axis(0));
        let n = ds.len();
        let weights = (0..k)
            .map(|j| {
                let pos = positives[j];
                (n - pos).max(1) as f64 / pos.max(1) as f64
            })
            .collect();
        LossWeights(weights)
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weighted BCE summed over concepts; the weight scales the positive term.
pub fn concept_loss(logits: ArrayView1<f64>, c: ArrayView1<f64>, weights: &LossWeights) -> f64 {
    logits
        .iter()
        .zip(c.iter())
        .zip(weights.0.iter())
        .map(|((&g, &cj), &w)| w * cj * softplus(-g) + (1.0 - cj) * softplus(g))
        .sum()
}

/// `∂ concept_loss / ∂ g_j`; equals `σ(g_j) − c_j` for unit weights.
pub fn concept_residual(
    logits: ArrayView1<f64>,
    c: ArrayView1<f64>,
    weights: &LossWeights,
) -> Array1<f64> {
    let mut r = Array1::zeros(logits.len());
    for j in 0..logits.len() {
        let s = sigmoid(logits[j]);
        r[j] = weights.0[j] * c[j] * (s - 1.0) + (1.0 - c[j]) * s;
    }
    r
}

/// Softmax cross-entropy `−log softmax(scores)_y`.
pub fn task_loss(scores: ArrayView1<f64>, y: usize) -> f64 {
    log_sum_exp(scores) - scores[y]
}

pub fn concept_grads(
    g: &ConceptPredictor,
    x: ArrayView1<f64>,
    c: ArrayView1<f64>,
    weights: &LossWeights,
) -> ConceptGrads {
    let logits = g.logits(x);
    let residual = concept_residual(logits.view(), c, weights);
    concept_grads_from_residual(g, x, residual.view())
}

pub fn target_grads(f: &TargetPredictor, c: ArrayView1<f64>, y: usize) -> TargetGrads {
    let mut delta = softmax(f.scores(c).view());
    delta[y] -= 1.0;
    let (m, k) = f.u.dim();
    let mut gu = Array2::zeros((m, k));
    for a in 0..m {
        gu.row_mut(a).scaled_add(delta[a], &c);
    }
    TargetGrads { u: gu, bias: delta }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    pub g: ConceptGrads,
    pub f: TargetGrads,
}

impl JointGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.g.to_flat();
        out.extend(self.f.to_flat());
        out
    }
}

/// Loss of the joint objective `ℓ_Y(f(σ(g(x))), y) + λ Σ_j ℓ_{C_j}` on one sample.
pub fn joint_loss(
    model: &CbmModel,
    x: ArrayView1<f64>,
    c: ArrayView1<f64>,
    y: usize,
    lambda: f64,
    weights: &LossWeights,
) -> f64 {
    let logits = model.g.logits(x);
    let probs = logits.mapv(sigmoid);
    task_loss(model.f.scores(probs.view()).view(), y)
        + lambda * concept_loss(logits.view(), c, weights)
}

pub fn joint_grads(
    model: &CbmModel,
    x: ArrayView1<f64>,
    c: ArrayView1<f64>,
    y: usize,
    lambda: f64,
    weights: &LossWeights,
) -> JointGrads {
    let logits = model.g.logits(x);
    let probs = logits.mapv(sigmoid);
    let f_grads = target_grads(&model.f, probs.view(), y);
    // ∂ℓ_Y/∂ĉ = Uᵀ(p − onehot), then through the sigmoid.
    let d_probs = model.f.u.t().dot(&f_grads.bias);
    let mut residual = concept_residual(logits.view(), c, weights) * lambda;
    for j in 0..residual.len() {
        residual[j] += d_probs[j] * probs[j] * (1.0 - probs[j]);
    }
    JointGrads {
        g: concept_grads_from_residual(&model.g, x, residual.view()),
        f: f_grads,
    }
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Independent,
    Sequential,
    Joint,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Independent => "independent",
            Strategy::Sequential => "sequential",
            Strategy::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    pub g: ConceptPredictor,
    pub f: TargetPredictor,
    pub strategy: Strategy,
}

impl CbmModel {
    pub fn new(g: ConceptPredictor, f: TargetPredictor, strategy: Strategy) -> Result<Self> {
        let model = CbmModel { g, f, strategy };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.g.validate()?;
        self.f.validate()?;
        if self.g.num_concepts() != self.f.num_concepts() {
            return Err(Error::Schema(format!(
                "concept predictor emits {} concepts, target predictor consumes {}",
                self.g.num_concepts(),
                self.f.num_concepts()
            )));
        }
        Ok(())
    }

    pub fn check_compatible(&self, ds: &LabeledDataset) -> Result<()> {
        if ds.input_dim() != self.g.input_dim()
            || ds.num_concepts() != self.g.num_concepts()
            || ds.num_classes() > self.f.num_classes()
        {
            return Err(Error::Schema(format!(
                "dataset shape (d={}, k={}, M={}) does not fit model (d={}, k={}, M={})",
                ds.input_dim(),
                ds.num_concepts(),
                ds.num_classes(),
                self.g.input_dim(),
                self.g.num_concepts(),
                self.f.num_classes()
            )));
        }
        Ok(())
    }

    /// Predicted class for soft or hard concepts.
    pub fn predict_from_concepts(&self, c: ArrayView1<f64>) -> usize {
        self.f.predict_class(c)
    }

    /// Task accuracy of `f ∘ σ ∘ g` over `ds`.
    pub fn task_accuracy(&self, ds: &LabeledDataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let probs = self.g.predict_probs(&ds.inputs);
        let hits = probs
            .rows()
            .into_iter()
            .zip(&ds.targets)
            .filter(|(c, &y)| self.f.predict_class(*c) == y)
            .count();
        hits as f64 / ds.len() as f64
    }

    /// Task accuracy of `f` fed the ground-truth concepts.
    pub fn oracle_task_accuracy(&self, ds: &LabeledDataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let hits = (0..ds.len())
            .filter(|&i| self.f.predict_class(ds.concept_row(i).view()) == ds.targets[i])
            .count();
        hits as f64 / ds.len() as f64
    }

    /// Mean thresholded concept accuracy over all entries.
    pub fn concept_accuracy(&self, ds: &LabeledDataset) -> f64 {
        if ds.is_empty() || ds.num_concepts() == 0 {
            return 0.0;
        }
        let probs = self.g.predict_probs(&ds.inputs);
        let hits = probs
            .iter()
            .zip(ds.concepts.iter())
            .filter(|(p, &c)| threshold(**p) == c)
            .count();
        hits as f64 / probs.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.into_model()
    }
}

/// Hard concept label: probabilities at or above 0.5 map to 1.
pub fn threshold(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

// ---------------------------------------------------------------------------
// Checkpoint format

pub const CHECKPOINT_FORMAT: &str = "cbmlab-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointShape {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub num_classes: usize,
    pub head_bias: bool,
}

/// On-disk model: shape header plus row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub strategy: Strategy,
    pub shape: CheckpointShape,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub head_bias: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&CbmModel> for Checkpoint {
    fn from(model: &CbmModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            strategy: model.strategy,
            shape: CheckpointShape {
                d: model.g.input_dim(),
                m: model.g.hidden_dim(),
                k: model.g.num_concepts(),
                num_classes: model.f.num_classes(),
                head_bias: model.g.head_bias.is_some(),
            },
            w: model.g.w.iter().copied().collect(),
            v: model.g.v.iter().copied().collect(),
            head_bias: model.g.head_bias.as_ref().map(|b| b.to_vec()),
            u: model.f.u.iter().copied().collect(),
            bias: model.f.bias.to_vec(),
        }
    }
}

impl Checkpoint {
    pub fn into_model(self) -> Result<CbmModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::Schema(format!(
                "unsupported checkpoint `{}` version {}",
                self.format, self.version
            )));
        }
        let s = self.shape;
        let sized = |name: &str, data: Vec<f64>, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let expected = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Schema("shape overflow".into()))?;
            if data.len() != expected {
                return Err(Error::Schema(format!(
                    "`{name}` holds {} values, shape needs {rows}×{cols}",
                    data.len()
                )));
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
        };
        let w = sized("w", self.w, s.m, s.d)?;
        let v = sized("v", self.v, s.k, s.m)?;
        let u = sized("u", self.u, s.num_classes, s.k)?;
        if self.bias.len() != s.num_classes {
            return Err(Error::Schema(
                "`bias` length differs from num_classes".into(),
            ));
        }
        let head_bias = match (s.head_bias, self.head_bias) {
            (true, Some(b)) if b.len() == s.k => Some(Array1::from(b)),
            (false, None) => None,
            _ => {
                return Err(Error::Schema(
                    "`head_bias` disagrees with the shape header".into(),
                ))
            }
        };
        CbmModel::new(
            ConceptPredictor { w, v, head_bias },
            TargetPredictor {
                u,
                bias: Array1::from(self.bias),
            },
            self.strategy,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn scalar_model() -> ConceptPredictor {
        ConceptPredictor {
            w: array![[2.0]],
            v: array![[3.0]],
            head_bias: None,
        }
    }

    #[test]
    fn zero_first_layer_gives_half_probabilities() {
        let g = ConceptPredictor {
            w: Array2::zeros((2, 3)),
            v: array![[1.0, -4.0], [0.5, 2.0]],
            head_bias: None,
        };
        let out = g.forward(array![1.0, 2.0, 3.0].view()).unwrap();
        assert_eq!(out.logits, array![0.0, 0.0]);
        assert_eq!(out.probs, array![0.5, 0.5]);
    }

    #[test]
    fn scalar_forward() {
        let out = scalar_model().forward(array![1.0].view()).unwrap();
        assert_eq!(out.logits[0], 6.0);
        // 1 / (1 + e^-6)
        assert_abs_diff_eq!(out.probs[0], 0.997_527_376_843_365_6, epsilon = 1e-15);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let g = scalar_model();
        assert!(matches!(
            g.forward(array![f64::NAN].view()),
            Err(Error::Numeric(_))
        ));
        assert!(g.forward(array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for t in [-30.0, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid(t);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn target_forward_cases() {
        let f = TargetPredictor {
            u: Array2::zeros((4, 3)),
            bias: Array1::zeros(4),
        };
        let out = f.forward(array![1.0, 0.0, 1.0].view()).unwrap();
        for p in out.probs.iter() {
            assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
        }
        let p = softmax(array![1.0, 0.0].view());
        assert_abs_diff_eq!(p[0], 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.268_941_421_369_995_1, epsilon = 1e-12);
        let shifted = softmax(array![101.0, 100.0].view());
        assert_abs_diff_eq!(shifted[0], p[0], epsilon = 1e-12);
    }

    #[test]
    fn concept_loss_cases() {
        let w1 = LossWeights::uniform(1);
        assert_abs_diff_eq!(
            concept_loss(array![0.0].view(), array![1.0].view(), &w1),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(concept_loss(array![800.0].view(), array![1.0].view(), &w1) < 1e-300);
        let w2 = LossWeights::uniform(2);
        assert_abs_diff_eq!(
            concept_loss(array![0.0, 0.0].view(), array![1.0, 0.0].view(), &w2),
            2.0 * std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // saturated wrong prediction stays finite
        let big = concept_loss(array![-800.0].view(), array![1.0].view(), &w1);
        assert_abs_diff_eq!(big, 800.0, epsilon = 1e-9);
    }

    #[test]
    fn task_loss_cases() {
        assert_abs_diff_eq!(
            task_loss(array![2.0, 2.0, 2.0].view(), 1),
            3f64.ln(),
            epsilon = 1e-15
        );
        // −ln σ(1)
        assert_abs_diff_eq!(
            task_loss(array![1.0, 0.0].view(), 0),
            0.313_261_687_518_222_8,
            epsilon = 1e-12
        );
        assert!(task_loss(array![-3.0, 9.0].view(), 1) >= 0.0);
    }

    #[test]
    fn stationary_residual_zeroes_gradient() {
        let g = ConceptPredictor {
            w: array![[0.3, -0.2], [0.1, 0.4]],
            v: array![[1.0, 2.0]],
            head_bias: None,
        };
        let x = array![0.5, -1.0];
        let p = g.forward(x.view()).unwrap().probs;
        let grads = concept_grads(&g, x.view(), p.view(), &LossWeights::uniform(1));
        assert!(grads.to_flat().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn target_bias_gradient_sums_to_zero() {
        let f = TargetPredictor {
            u: array![[0.3, -1.0], [2.0, 0.1], [-0.5, 0.5]],
            bias: array![0.1, 0.2, -0.3],
        };
        let grads = target_grads(&f, array![0.7, 0.2].view(), 1);
        assert_abs_diff_eq!(grads.bias.sum(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn imbalance_weights() {
        let ds = LabeledDataset::new(
            Array2::zeros((4, 1)),
            array![[1, 0, 0], [0, 0, 0], [0, 0, 1], [0, 0, 1]],
            vec![0, 0, 0, 0],
            1,
        )
        .unwrap();
        let w = LossWeights::from_imbalance(&ds);
        assert_eq!(w.as_array(), &array![3.0, 4.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = crate::seeded_rng(11);
        let model = CbmModel::new(
            ConceptPredictor::init(5, 4, 3, &mut rng),
            TargetPredictor::init(3, 2, &mut rng),
            Strategy::Sequential,
        )
        .unwrap();
        let back = CbmModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut rng = crate::seeded_rng(1);
        let model = CbmModel::new(
            ConceptPredictor::init(2, 2, 2, &mut rng),
            TargetPredictor::init(2, 2, &mut rng),
            Strategy::Joint,
        )
        .unwrap();
        let mut ckpt = Checkpoint::from(&model);
        ckpt.w.pop();
        assert!(matches!(ckpt.into_model(), Err(Error::Schema(_))));
    }
}
