//! Susceptibility, uncertainty and alignment diagnostics, plus numerical
//! checks of the J-SAM regularization decomposition and of the
//! uncertainty-vs-susceptibility ranking results.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    concept_grads_from_residual, concept_loss, concept_residual, joint_grads, joint_loss, sigmoid,
    target_grads, task_loss, threshold, CbmModel, ConceptPredictor, LossWeights, Parameters,
    Strategy, TargetPredictor,
};
use crate::optim::jsam_direction;
use crate::stream_rng;

/// Binary Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Thresholded per-concept accuracy of probabilities against labels.
pub fn accuracy_from_probs(probs: &Array2<f64>, concepts: &Array2<u8>) -> Array1<f64> {
    let (n, k) = probs.dim();
    let mut acc = Array1::zeros(k);
    if n == 0 {
        return acc;
    }
    for j in 0..k {
        let hits = (0..n)
            .filter(|&i| threshold(probs[[i, j]]) == concepts[[i, j]])
            .count();
        acc[j] = hits as f64 / n as f64;
    }
    acc
}

pub fn per_concept_accuracy(model: &CbmModel, ds: &LabeledDataset) -> Array1<f64> {
    accuracy_from_probs(&model.g.predict_probs(&ds.inputs), &ds.concepts)
}

/// Indices whose value strictly exceeds the mean.
pub fn above_mean(values: ArrayView1<f64>) -> (f64, Vec<usize>) {
    if values.is_empty() {
        return (0.0, Vec::new());
    }
    let mean = values.sum() / values.len() as f64;
    let set = (0..values.len()).filter(|&i| values[i] > mean).collect();
    (mean, set)
}

/// Indices ordered by descending value, lowest index first on ties.
pub fn descending_order(values: ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Accuracy-drop susceptibility of each concept between a clean and a noisy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityReport {
    pub acc_clean: Vec<f64>,
    pub acc_noisy: Vec<f64>,
    /// `acc_clean − acc_noisy`.
    pub delta: Vec<f64>,
    pub mean_delta: f64,
    /// Concepts whose drop strictly exceeds the mean drop.
    pub susceptible: Vec<usize>,
    /// Per class: concept indices ranked by the class-restricted drop.
    pub per_class: Option<Vec<Vec<usize>>>,
    pub per_class_delta: Option<Vec<Vec<f64>>>,
}

impl SusceptibilityReport {
    pub fn from_accuracies(acc_clean: Array1<f64>, acc_noisy: Array1<f64>) -> Self {
        let delta = &acc_clean - &acc_noisy;
        Self::from_parts(acc_clean.to_vec(), acc_noisy.to_vec(), delta)
    }

    fn from_parts(acc_clean: Vec<f64>, acc_noisy: Vec<f64>, delta: Array1<f64>) -> Self {
        let (mean_delta, susceptible) = above_mean(delta.view());
        SusceptibilityReport {
            acc_clean,
            acc_noisy,
            delta: delta.to_vec(),
            mean_delta,
            susceptible,
            per_class: None,
            per_class_delta: None,
        }
    }

    /// Report built straight from a drop vector (clean accuracies set to 1).
    pub fn from_deltas(delta: &[f64]) -> Self {
        let clean = vec![1.0; delta.len()];
        let noisy = delta.iter().map(|d| 1.0 - d).collect();
        Self::from_parts(clean, noisy, Array1::from(delta.to_vec()))
    }

    pub fn in_susceptible(&self, i: usize) -> bool {
        self.susceptible.binary_search(&i).is_ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept,acc_clean,acc_noisy,delta,in_S\n");
        for i in 0..self.delta.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{}",
                self.acc_clean[i],
                self.acc_noisy[i],
                self.delta[i],
                u8::from(self.in_susceptible(i))
            );
        }
        out
    }
}

pub fn susceptible_set(
    clean: &CbmModel,
    noisy: &CbmModel,
    eval: &LabeledDataset,
    per_class: bool,
) -> Result<SusceptibilityReport> {
    clean.check_compatible(eval)?;
    noisy.check_compatible(eval)?;
    let clean_probs = clean.g.predict_probs(&eval.inputs);
    let noisy_probs = noisy.g.predict_probs(&eval.inputs);
    let mut report = SusceptibilityReport::from_accuracies(
        accuracy_from_probs(&clean_probs, &eval.concepts),
        accuracy_from_probs(&noisy_probs, &eval.concepts),
    );
    if per_class {
        let mut rankings = Vec::with_capacity(eval.num_classes());
        let mut deltas = Vec::with_capacity(eval.num_classes());
        for members in eval.class_indices() {
            let sub = eval.subset(&members);
            let delta = accuracy_from_probs(
                &clean_probs.select(ndarray::Axis(0), &members),
                &sub.concepts,
            ) - accuracy_from_probs(
                &noisy_probs.select(ndarray::Axis(0), &members),
                &sub.concepts,
            );
            rankings.push(descending_order(delta.view()));
            deltas.push(delta.to_vec());
        }
        report.per_class = Some(rankings);
        report.per_class_delta = Some(deltas);
    }
    Ok(report)
}

/// Mean task-loss reduction from correcting each concept to its true value.
pub fn loss_susceptibility(model: &CbmModel, ds: &LabeledDataset) -> Array1<f64> {
    let k = ds.num_concepts();
    let mut delta = Array1::zeros(k);
    if ds.is_empty() {
        return delta;
    }
    let probs = model.g.predict_probs(&ds.inputs);
    for s in 0..ds.len() {
        let c_hat = probs.row(s);
        let y = ds.targets[s];
        let base = task_loss(model.f.scores(c_hat).view(), y);
        let mut corrected = c_hat.to_owned();
        for i in 0..k {
            let keep = corrected[i];
            corrected[i] = f64::from(ds.concepts[[s, i]]);
            delta[i] += base - task_loss(model.f.scores(corrected.view()).view(), y);
            corrected[i] = keep;
        }
    }
    delta / ds.len() as f64
}

/// Per-concept mean predictive entropy over `ds`.
pub fn mean_entropy(model: &CbmModel, ds: &LabeledDataset) -> Array1<f64> {
    let probs = model.g.predict_probs(&ds.inputs);
    let k = probs.ncols();
    if probs.nrows() == 0 {
        return Array1::zeros(k);
    }
    probs
        .mapv(entropy)
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty")
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "pearson on lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Number of pairs `i < j` ordered strictly oppositely by `a` and `b`.
///
/// Works on rank vectors (`a[i]` = rank of item `i`) and on raw scores alike;
/// tied pairs are not discordant.
pub fn kendall_tau_distance<T: PartialOrd>(a: &[T], b: &[T]) -> usize {
    assert_eq!(a.len(), b.len(), "rankings of different length");
    let mut count = 0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].partial_cmp(&a[j]);
            let db = b[i].partial_cmp(&b[j]);
            use std::cmp::Ordering::{Greater, Less};
            if matches!(
                (da, db),
                (Some(Less), Some(Greater)) | (Some(Greater), Some(Less))
            ) {
                count += 1;
            }
        }
    }
    count
}

pub fn max_kendall_distance(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Top-`s` indices by descending value (lowest index on ties), sorted.
pub fn top_s(values: ArrayView1<f64>, s: usize) -> Vec<usize> {
    let mut top = descending_order(values);
    top.truncate(s);
    top.sort_unstable();
    top
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSOverlap {
    /// Top-s by susceptibility.
    pub by_susceptibility: Vec<usize>,
    /// Top-s by uncertainty.
    pub by_uncertainty: Vec<usize>,
    pub exact_match: bool,
    pub overlap_fraction: f64,
}

pub fn top_s_overlap(delta: ArrayView1<f64>, u: ArrayView1<f64>, s: usize) -> TopSOverlap {
    let a = top_s(delta, s);
    let b = top_s(u, s);
    let common = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    let overlap_fraction = if a.is_empty() {
        1.0
    } else {
        common as f64 / a.len() as f64
    };
    TopSOverlap {
        exact_match: a == b,
        by_susceptibility: a,
        by_uncertainty: b,
        overlap_fraction,
    }
}

/// Concepts of `f`'s row for `class`, ordered by |weight| descending, with signs.
pub fn concept_saliency(f: &TargetPredictor, class: usize, top_n: usize) -> Vec<(usize, f64)> {
    let row = f.u.row(class);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
    order.into_iter().take(top_n).map(|i| (i, row[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOverlap {
    pub top_n: usize,
    /// Fraction of classes whose top-n salient concepts meet the susceptible set.
    pub intersecting_fraction: f64,
    /// Fraction of classes whose top-n salient concepts all lie in the susceptible set.
    pub contained_fraction: f64,
}

pub fn saliency_overlap(
    f: &TargetPredictor,
    susceptible: &[usize],
    top_n: usize,
) -> SaliencyOverlap {
    let m = f.num_classes();
    let (mut meet, mut inside) = (0, 0);
    for y in 0..m {
        let top = concept_saliency(f, y, top_n);
        let hits = top.iter().filter(|(i, _)| susceptible.contains(i)).count();
        meet += usize::from(hits > 0);
        inside += usize::from(!top.is_empty() && hits == top.len());
    }
    let frac = |c: usize| if m == 0 { 0.0 } else { c as f64 / m as f64 };
    SaliencyOverlap {
        top_n,
        intersecting_fraction: frac(meet),
        contained_fraction: frac(inside),
    }
}

/// ROC-AUC of `scores` for binary `labels`; ties count one half.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U with mid-ranks for ties.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            if labels[i] == 1 {
                rank_sum += mid_rank;
            }
        }
        start = end + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Per-concept ROC-AUC of predicted probabilities, a stand-in for concept
/// alignment. Concepts with a single label value score 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProxy {
    pub per_concept: Vec<f64>,
    pub mean: f64,
}

pub fn alignment_proxy(model: &CbmModel, ds: &LabeledDataset) -> AlignmentProxy {
    let probs = model.g.predict_probs(&ds.inputs);
    let per_concept: Vec<f64> = (0..ds.num_concepts())
        .map(|j| {
            let scores = probs.column(j).to_vec();
            let labels = ds.concepts.column(j).to_vec();
            auc(&scores, &labels).unwrap_or(0.5)
        })
        .collect();
    let mean = if per_concept.is_empty() {
        0.0
    } else {
        per_concept.iter().sum::<f64>() / per_concept.len() as f64
    };
    AlignmentProxy { per_concept, mean }
}

/// Rescales to [0, 1]; constant vectors map to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Uncertainty and susceptibility summaries for one noisy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDiagnostics {
    /// Mean predictive entropy per concept.
    pub uncertainty: Vec<f64>,
    /// Mean task-loss reduction from correcting each concept.
    pub loss_susceptibility: Vec<f64>,
    /// Pearson(u, Δacc) over the susceptible set, when defined.
    pub pearson_susceptible: Option<f64>,
    /// Pearson(u, Δacc) over the complement, when defined.
    pub pearson_rest: Option<f64>,
    pub top_s: TopSOverlap,
    pub kendall_distance: usize,
    pub kendall_normalized: f64,
}

pub fn concept_diagnostics(
    noisy: &CbmModel,
    ds: &LabeledDataset,
    report: &SusceptibilityReport,
    s: usize,
) -> ConceptDiagnostics {
    let u = mean_entropy(noisy, ds);
    let delta = loss_susceptibility(noisy, ds);
    let restricted = |keep: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..u.len()).filter(|&i| keep(i)).collect();
        let a: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| report.delta[i]).collect();
        pearson(&a, &b).ok()
    };
    let pearson_susceptible = restricted(&|i| report.in_susceptible(i));
    let pearson_rest = restricted(&|i| !report.in_susceptible(i));
    let kendall_distance = kendall_tau_distance(delta.as_slice().unwrap(), u.as_slice().unwrap());
    let max = max_kendall_distance(u.len());
    ConceptDiagnostics {
        top_s: top_s_overlap(delta.view(), u.view(), s.min(u.len())),
        uncertainty: u.to_vec(),
        loss_susceptibility: delta.to_vec(),
        pearson_susceptible,
        pearson_rest,
        kendall_distance,
        kendall_normalized: if max == 0 {
            0.0
        } else {
            kendall_distance as f64 / max as f64
        },
    }
}

// ---------------------------------------------------------------------------
// Numerical verification

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub k: usize,
}

fn gaussian_predictor<R: Rng>(dims: Dims, rng: &mut R) -> ConceptPredictor {
    let mut draw = |r: usize, c: usize| {
        Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal))
    };
    ConceptPredictor {
        w: draw(dims.m, dims.d),
        v: draw(dims.k, dims.m),
        head_bias: None,
    }
}

fn gaussian_vector<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal))
}

fn binary_vector<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || f64::from(rng.gen_range(0..=1u8)))
}

/// Jacobian of every head logit with respect to the flat parameters, by unit
/// central differences. The logits are affine in each single parameter, so
/// the difference quotient is exact up to rounding.
fn logit_jacobian(g: &ConceptPredictor, x: ArrayView1<f64>) -> Array2<f64> {
    let base = g.to_flat();
    let mut jac = Array2::zeros((g.num_concepts(), base.len()));
    let mut probe = g.clone();
    let mut shifted = base.clone();
    for p in 0..base.len() {
        shifted[p] = base[p] + 1.0;
        probe.set_flat(&shifted);
        let plus = probe.logits(x);
        shifted[p] = base[p] - 1.0;
        probe.set_flat(&shifted);
        let minus = probe.logits(x);
        shifted[p] = base[p];
        for j in 0..plus.len() {
            jac[[j, p]] = (plus[j] - minus[j]) / 2.0;
        }
    }
    jac
}

/// J-SAM direction evaluated straight from its definition: residuals at `w`,
/// logit Jacobian at `w + ε` with `ε = ρ ∇L / ‖∇L‖`.
pub fn jsam_direction_by_definition(
    g: &ConceptPredictor,
    x: ArrayView1<f64>,
    residual: ArrayView1<f64>,
    rho: f64,
) -> Vec<f64> {
    let grad = logit_jacobian(g, x).t().dot(&residual);
    let norm = grad.dot(&grad).sqrt();
    if norm < crate::optim::SAM_MIN_GRAD_NORM {
        return grad.to_vec();
    }
    let mut perturbed = g.clone();
    let shifted: Vec<f64> = g
        .to_flat()
        .iter()
        .zip(grad.iter())
        .map(|(w, gr)| w + rho * gr / norm)
        .collect();
    perturbed.set_flat(&shifted);
    logit_jacobian(&perturbed, x).t().dot(&residual).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsamCheck {
    pub trials: usize,
    pub dims: Dims,
    pub rho: f64,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the closed-form J-SAM update with the definition on random
/// Gaussian instances.
pub fn check_jsam_decomposition(
    trials: usize,
    dims: Dims,
    rho: f64,
    tolerance: f64,
    seed: u64,
) -> JsamCheck {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = stream_rng(seed, t as u64);
        let g = gaussian_predictor(dims, &mut rng);
        let x = gaussian_vector(dims.d, &mut rng);
        let c = binary_vector(dims.k, &mut rng);
        let residual = concept_residual(
            g.logits(x.view()).view(),
            c.view(),
            &LossWeights::uniform(dims.k),
        );
        let closed = jsam_direction(&g, x.view(), residual.view(), rho).to_flat();
        let direct = jsam_direction_by_definition(&g, x.view(), residual.view(), rho);
        for (a, b) in closed.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    JsamCheck {
        trials,
        dims,
        rho,
        max_abs_deviation: worst,
        tolerance,
        passed: worst < tolerance,
    }
}

fn central_difference<F: Fn(&[f64]) -> f64>(loss: F, at: &[f64], step: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|p| {
            probe[p] = at[p] + step;
            let plus = loss(&probe);
            probe[p] = at[p] - step;
            let minus = loss(&probe);
            probe[p] = at[p];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = crate::optim::l2_norm(a).max(crate::optim::l2_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub trials: usize,
    pub max_rel_error_concept: f64,
    pub max_rel_error_target: f64,
    pub max_rel_error_joint: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Analytic concept, target and joint gradients against central finite
/// differences (step 1e-5) on random Gaussian instances.
pub fn check_gradients(
    trials: usize,
    dims: Dims,
    num_classes: usize,
    tolerance: f64,
    seed: u64,
) -> GradientCheck {
    const STEP: f64 = 1e-5;
    let (mut ec, mut et, mut ej): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for t in 0..trials {
        let mut rng = stream_rng(seed, t as u64);
        let g = gaussian_predictor(dims, &mut rng);
        let f = TargetPredictor {
            u: Array2::from_shape_simple_fn((num_classes, dims.k), || {
                rng.sample::<f64, _>(StandardNormal)
            }),
            bias: gaussian_vector(num_classes, &mut rng),
        };
        let x = gaussian_vector(dims.d, &mut rng);
        let c = binary_vector(dims.k, &mut rng);
        let y = rng.gen_range(0..num_classes);
        let weights = LossWeights::new(Array1::from_shape_simple_fn(dims.k, || {
            rng.gen_range(0.5..3.0)
        }))
        .expect("positive weights");
        let lambda = rng.gen_range(0.1..2.0);

        let analytic = concept_grads_from_residual(
            &g,
            x.view(),
            concept_residual(g.logits(x.view()).view(), c.view(), &weights).view(),
        )
        .to_flat();
        let numeric = central_difference(
            |p| {
                let mut probe = g.clone();
                probe.set_flat(p);
                concept_loss(probe.logits(x.view()).view(), c.view(), &weights)
            },
            &g.to_flat(),
            STEP,
        );
        ec = ec.max(relative_error(&analytic, &numeric));

        let soft = g.logits(x.view()).mapv(sigmoid);
        let analytic = target_grads(&f, soft.view(), y).to_flat();
        let numeric = central_difference(
            |p| {
                let mut probe = f.clone();
                probe.set_flat(p);
                task_loss(probe.scores(soft.view()).view(), y)
            },
            &f.to_flat(),
            STEP,
        );
        et = et.max(relative_error(&analytic, &numeric));

        let model = CbmModel {
            g: g.clone(),
            f: f.clone(),
            strategy: Strategy::Joint,
        };
        let analytic = joint_grads(&model, x.view(), c.view(), y, lambda, &weights).to_flat();
        let numeric = central_difference(
            |p| {
                let mut probe = model.clone();
                probe.set_flat(p);
                joint_loss(&probe, x.view(), c.view(), y, lambda, &weights)
            },
            &model.to_flat(),
            STEP,
        );
        ej = ej.max(relative_error(&analytic, &numeric));
    }
    GradientCheck {
        trials,
        max_rel_error_concept: ec,
        max_rel_error_target: et,
        max_rel_error_joint: ej,
        tolerance,
        passed: ec < tolerance && et < tolerance && ej < tolerance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntropyPoint {
    pub c_hat: f64,
    pub monte_carlo: f64,
    pub closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntropyCheck {
    pub trials: usize,
    pub points: Vec<ErrorEntropyPoint>,
    pub max_abs_deviation: f64,
}

/// Monte-Carlo `E|ĉ − c*|` with `c* ~ Bernoulli(ĉ)` against `2ĉ(1 − ĉ)`.
pub fn check_error_entropy(grid: &[f64], trials: usize, seed: u64) -> ErrorEntropyCheck {
    let points: Vec<ErrorEntropyPoint> = grid
        .par_iter()
        .enumerate()
        .map(|(g, &c_hat)| {
            let mut rng = stream_rng(seed, g as u64);
            let total: f64 = (0..trials)
                .map(|_| {
                    let truth = if rng.gen::<f64>() < c_hat { 1.0 } else { 0.0 };
                    (c_hat - truth).abs()
                })
                .sum();
            ErrorEntropyPoint {
                c_hat,
                monte_carlo: if trials == 0 {
                    0.0
                } else {
                    total / trials as f64
                },
                closed_form: 2.0 * c_hat * (1.0 - c_hat),
            }
        })
        .collect();
    let max_abs_deviation = points
        .iter()
        .map(|p| (p.monte_carlo - p.closed_form).abs())
        .fold(0.0, f64::max);
    ErrorEntropyCheck {
        trials,
        points,
        max_abs_deviation,
    }
}

/// Draws `u ~ U(0,1)^k` and `δ = α u + N(0, σ²)`.
fn linear_noise_draw<R: Rng>(
    k: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let u = Array1::from_shape_simple_fn(k, || rng.gen::<f64>());
    let delta = if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        u.mapv(|ui| alpha * ui + noise.sample(rng))
    } else {
        u.mapv(|ui| alpha * ui)
    };
    (u, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPoint {
    pub sigma: f64,
    pub mean: f64,
    /// Monte-Carlo standard error of `mean`.
    pub std_error: f64,
}

fn summarize(sigma: f64, values: &[f64]) -> SimulationPoint {
    let n = values.len() as f64;
    if values.is_empty() {
        return SimulationPoint {
            sigma,
            mean: 0.0,
            std_error: 0.0,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    SimulationPoint {
        sigma,
        mean,
        std_error: (var / n).sqrt(),
    }
}

fn validate_simulation(k: usize, alpha: f64, sigmas: &[f64]) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!(
            "sigma must be finite and >= 0, got {s}"
        )));
    }
    Ok(())
}

/// Mean normalized Kendall distance between the rankings of `δ` and `u`
/// under the linear-noise model, per σ.
pub fn simulate_ranking_consistency(
    k: usize,
    alpha: f64,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SimulationPoint>> {
    validate_simulation(k, alpha, sigmas)?;
    let max = max_kendall_distance(k).max(1) as f64;
    Ok(sigmas
        .iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let taus: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = stream_rng(seed.wrapping_add(si as u64), t as u64);
                    let (u, delta) = linear_noise_draw(k, alpha, sigma, &mut rng);
                    kendall_tau_distance(delta.as_slice().unwrap(), u.as_slice().unwrap()) as f64
                        / max
                })
                .collect();
            summarize(sigma, &taus)
        })
        .collect())
}

/// Probability that the top-`s` sets of `u` and `δ` coincide, per σ.
pub fn simulate_recovery(
    k: usize,
    s: usize,
    alpha: f64,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SimulationPoint>> {
    validate_simulation(k, alpha, sigmas)?;
    if s > k {
        return Err(Error::Config(format!("s={s} exceeds k={k}")));
    }
    Ok(sigmas
        .iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let hits: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = stream_rng(seed.wrapping_add(si as u64), t as u64);
                    let (u, delta) = linear_noise_draw(k, alpha, sigma, &mut rng);
                    f64::from(u8::from(top_s(u.view(), s) == top_s(delta.view(), s)))
                })
                .collect();
            summarize(sigma, &hits)
        })
        .collect())
}

/// Default seed for the theory checks.
pub const THEORY_SEED: u64 = 20_240_521;
