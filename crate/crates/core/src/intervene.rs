//! Test-time concept intervention: score concepts, pick a budgeted subset,
//! overwrite them (with the true value or its negation) and re-run `f`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::entropy;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{softmax, CbmModel, TargetPredictor};
use crate::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Random,
    /// Entropy of the concept prediction.
    Ucp,
    /// Contribution of the concept to the target scores.
    Cctp,
    /// Error against the ground truth (oracle).
    Lcp,
    /// Expected KL shift of the target distribution.
    Ectp,
    /// Expected change in target entropy.
    Eudtp,
    /// Per-class ranking from a clean/noisy susceptibility report (oracle).
    Susceptibility,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Random,
        Criterion::Ucp,
        Criterion::Cctp,
        Criterion::Lcp,
        Criterion::Ectp,
        Criterion::Eudtp,
        Criterion::Susceptibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::Ucp => "ucp",
            Criterion::Cctp => "cctp",
            Criterion::Lcp => "lcp",
            Criterion::Ectp => "ectp",
            Criterion::Eudtp => "eudtp",
            Criterion::Susceptibility => "susceptibility",
        }
    }

    /// Needs information unavailable at test time.
    pub fn is_oracle(self) -> bool {
        matches!(self, Criterion::Lcp | Criterion::Susceptibility)
    }

    /// Whether larger scores are selected first.
    pub fn descending(self) -> bool {
        // EUDTP scores are (expected post-intervention entropy − current
        // entropy): the largest reduction is the most negative value.
        self != Criterion::Eudtp
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Correct,
    Incorrect,
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterventionMode::Correct => "correct",
            InterventionMode::Incorrect => "incorrect",
        })
    }
}

impl FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(InterventionMode::Correct),
            "incorrect" => Ok(InterventionMode::Incorrect),
            _ => Err(Error::Config(format!("unknown intervention mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub criterion: Criterion,
    pub mode: InterventionMode,
    #[serde(default)]
    pub seed: u64,
    /// Re-score after every single intervention instead of ranking once.
    #[serde(default)]
    pub adaptive: bool,
    /// Susceptibility criterion only: ranked concept indices per class.
    #[serde(default)]
    pub class_rankings: Option<Vec<Vec<usize>>>,
}

impl InterventionPolicy {
    pub fn new(criterion: Criterion, mode: InterventionMode, seed: u64) -> Self {
        InterventionPolicy {
            criterion,
            mode,
            seed,
            adaptive: false,
            class_rankings: None,
        }
    }
}

/// Per-sample information some criteria need.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleContext<'a> {
    /// Ground-truth concepts.
    pub truth: Option<ArrayView1<'a, f64>>,
    /// Ranked concepts for the sample's class.
    pub class_ranking: Option<&'a [usize]>,
    pub seed: u64,
    pub sample: u64,
    /// Distinguishes repeated random draws for the same sample.
    pub round: u64,
}

fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum()
}

fn distribution_entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .map(|&a| if a > 0.0 { a * a.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Target distributions after setting concept `i` to 0 and to 1.
fn counterfactuals(
    f: &TargetPredictor,
    probs: ArrayView1<f64>,
    i: usize,
) -> (Array1<f64>, Array1<f64>) {
    let mut c = probs.to_owned();
    c[i] = 0.0;
    let y0 = softmax(f.scores(c.view()).view());
    c[i] = 1.0;
    let y1 = softmax(f.scores(c.view()).view());
    (y0, y1)
}

/// Scores every concept of one sample under `criterion`.
pub fn score_concepts(
    criterion: Criterion,
    f: &TargetPredictor,
    probs: ArrayView1<f64>,
    ctx: &SampleContext<'_>,
) -> Result<Array1<f64>> {
    let k = probs.len();
    let scores = match criterion {
        Criterion::Random => {
            let mut rng = stream_rng(ctx.seed.wrapping_add(ctx.round), ctx.sample);
            Array1::from_shape_fn(k, |_| rng.gen::<f64>())
        }
        Criterion::Ucp => probs.mapv(entropy),
        Criterion::Cctp => Array1::from_shape_fn(k, |i| {
            let col: f64 = f.u.column(i).iter().map(|w| w.abs()).sum();
            probs[i].abs() * col
        }),
        Criterion::Lcp => {
            let truth = ctx.truth.ok_or(Error::OracleMissing("lcp"))?;
            Array1::from_shape_fn(k, |i| (probs[i] - truth[i]).abs())
        }
        Criterion::Ectp => {
            let base = softmax(f.scores(probs).view());
            Array1::from_shape_fn(k, |i| {
                let (y0, y1) = counterfactuals(f, probs, i);
                (1.0 - probs[i]) * kl_divergence(y0.view(), base.view())
                    + probs[i] * kl_divergence(y1.view(), base.view())
            })
        }
        Criterion::Eudtp => {
            let base = distribution_entropy(softmax(f.scores(probs).view()).view());
            Array1::from_shape_fn(k, |i| {
                let (y0, y1) = counterfactuals(f, probs, i);
                // (1−ĉ)H(ŷ₀) + ĉH(ŷ₁) − H(ŷ), grouped so a concept that
                // cannot move ŷ scores exactly zero.
                (1.0 - probs[i]) * (distribution_entropy(y0.view()) - base)
                    + probs[i] * (distribution_entropy(y1.view()) - base)
            })
        }
        Criterion::Susceptibility => {
            let ranking = ctx
                .class_ranking
                .ok_or(Error::OracleMissing("susceptibility"))?;
            let mut s = Array1::zeros(k);
            for (pos, &i) in ranking.iter().enumerate() {
                if i < k && pos < k {
                    s[i] = (k - pos) as f64;
                }
            }
            s
        }
    };
    Ok(scores)
}

/// Top `min(budget, k)` indices in the criterion's ranking direction; ties go
/// to the lower concept index.
pub fn select(scores: ArrayView1<f64>, budget: usize, criterion: Criterion) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if criterion.descending() {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    }
    order.truncate(budget.min(scores.len()));
    order
}

/// Overwrites the chosen coordinates with the true bit (correct) or its
/// negation (incorrect).
pub fn apply_intervention(
    probs: ArrayView1<f64>,
    indices: &[usize],
    truth: ArrayView1<f64>,
    mode: InterventionMode,
) -> Array1<f64> {
    let mut out = probs.to_owned();
    for &i in indices {
        out[i] = match mode {
            InterventionMode::Correct => truth[i],
            InterventionMode::Incorrect => 1.0 - truth[i],
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub criterion: Criterion,
    pub mode: InterventionMode,
    pub budgets: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub n_samples: usize,
    /// Concepts intervened on per sample at the largest budget, in order;
    /// smaller budgets use prefixes.
    pub selections: Vec<Vec<usize>>,
}

impl InterventionOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,criterion,mode,accuracy,n_samples\n");
        self.append_csv_rows(&mut out);
        out
    }

    pub fn append_csv_rows(&self, out: &mut String) {
        for (b, acc) in self.budgets.iter().zip(&self.accuracies) {
            let _ = writeln!(
                out,
                "{b},{},{},{acc},{}",
                self.criterion, self.mode, self.n_samples
            );
        }
    }

    /// Trapezoidal area under accuracy vs. budget.
    pub fn area(&self) -> f64 {
        self.budgets
            .windows(2)
            .zip(self.accuracies.windows(2))
            .map(|(b, a)| (b[1] as f64 - b[0] as f64) * (a[0] + a[1]) / 2.0)
            .sum()
    }

    pub fn accuracy_at(&self, budget: usize) -> Option<f64> {
        self.budgets
            .iter()
            .position(|&b| b == budget)
            .map(|i| self.accuracies[i])
    }
}

fn ordered_selection(
    model: &CbmModel,
    policy: &InterventionPolicy,
    probs: ArrayView1<f64>,
    ctx: SampleContext<'_>,
    max_budget: usize,
) -> Result<Vec<usize>> {
    if !policy.adaptive {
        let scores = score_concepts(policy.criterion, &model.f, probs, &ctx)?;
        return Ok(select(scores.view(), max_budget, policy.criterion));
    }
    let truth = ctx.truth.expect("curves always carry ground truth");
    let mut current = probs.to_owned();
    let mut chosen: Vec<usize> = Vec::with_capacity(max_budget);
    for round in 0..max_budget {
        let ctx = SampleContext {
            round: round as u64,
            ..ctx
        };
        let scores = score_concepts(policy.criterion, &model.f, current.view(), &ctx)?;
        let next = select(scores.view(), scores.len(), policy.criterion)
            .into_iter()
            .find(|i| !chosen.contains(i))
            .expect("budget never exceeds k");
        current = apply_intervention(current.view(), &[next], truth, policy.mode);
        chosen.push(next);
    }
    Ok(chosen)
}

/// Task accuracy over `ds` after intervening on `b` concepts per sample, for
/// each `b` in `budgets`.
pub fn intervention_curve(
    model: &CbmModel,
    ds: &LabeledDataset,
    policy: &InterventionPolicy,
    budgets: &[usize],
) -> Result<InterventionOutcome> {
    model.check_compatible(ds)?;
    let k = ds.num_concepts();
    if let Some(&b) = budgets.iter().find(|&&b| b > k) {
        return Err(Error::Config(format!(
            "budget {b} exceeds concept count {k}"
        )));
    }
    if policy.criterion == Criterion::Susceptibility {
        match &policy.class_rankings {
            Some(r) if r.len() >= ds.num_classes() => {}
            Some(_) => {
                return Err(Error::Config(
                    "class rankings do not cover every class".into(),
                ))
            }
            None => return Err(Error::OracleMissing("susceptibility")),
        }
    }
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    let probs = model.g.predict_probs(&ds.inputs);
    let truth = ds.concepts_f64();

    let per_sample: Vec<(Vec<usize>, Vec<bool>)> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let ctx = SampleContext {
                truth: Some(truth.row(i)),
                class_ranking: policy
                    .class_rankings
                    .as_ref()
                    .map(|r| r[ds.targets[i]].as_slice()),
                seed: policy.seed,
                sample: i as u64,
                round: 0,
            };
            let order = ordered_selection(model, policy, probs.row(i), ctx, max_budget)?;
            let hits = budgets
                .iter()
                .map(|&b| {
                    let edited =
                        apply_intervention(probs.row(i), &order[..b], truth.row(i), policy.mode);
                    model.predict_from_concepts(edited.view()) == ds.targets[i]
                })
                .collect();
            Ok((order, hits))
        })
        .collect::<Result<_>>()?;

    let n = ds.len();
    let accuracies = (0..budgets.len())
        .map(|j| {
            let hits = per_sample.iter().filter(|(_, h)| h[j]).count();
            if n == 0 {
                0.0
            } else {
                hits as f64 / n as f64
            }
        })
        .collect();
    Ok(InterventionOutcome {
        criterion: policy.criterion,
        mode: policy.mode,
        budgets: budgets.to_vec(),
        accuracies,
        n_samples: n,
        selections: per_sample.into_iter().map(|(o, _)| o).collect(),
    })
}

/// Parses a budget list: `0:16`, `0:k`, `0:16:2` or `0,1,5`.
pub fn parse_budgets(text: &str, k: usize) -> Result<Vec<usize>> {
    let value = |s: &str| -> Result<usize> {
        let s = s.trim();
        if s == "k" {
            return Ok(k);
        }
        s.parse()
            .map_err(|_| Error::Config(format!("bad budget `{s}` in `{text}`")))
    };
    let budgets: Vec<usize> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let (start, end, step) = match parts.as_slice() {
            [a, b] => (value(a)?, value(b)?, 1),
            [a, b, c] => (value(a)?, value(b)?, value(c)?),
            _ => return Err(Error::Config(format!("bad budget range `{text}`"))),
        };
        if step == 0 || start > end {
            return Err(Error::Config(format!("bad budget range `{text}`")));
        }
        if end > k {
            return Err(Error::Config(format!(
                "budget {end} exceeds concept count {k}"
            )));
        }
        (start..=end).step_by(step).collect()
    } else {
        text.split(',').map(value).collect::<Result<_>>()?
    };
    if let Some(b) = budgets.iter().find(|&&b| b > k) {
        return Err(Error::Config(format!(
            "budget {b} exceeds concept count {k}"
        )));
    }
    Ok(budgets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn toy_f() -> TargetPredictor {
        TargetPredictor {
            u: array![[1.0, 0.0, -2.0], [0.5, 0.0, 1.0]],
            bias: array![0.1, -0.1],
        }
    }

    #[test]
    fn ucp_peaks_at_half() {
        let probs = array![0.5, 0.1, 0.7, 0.95];
        let s = score_concepts(
            Criterion::Ucp,
            &toy_f_k(4),
            probs.view(),
            &SampleContext::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(s[0], std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(s.iter().skip(1).all(|&v| v < s[0]));
    }

    fn toy_f_k(k: usize) -> TargetPredictor {
        TargetPredictor {
            u: Array2::ones((2, k)),
            bias: Array1::zeros(2),
        }
    }

    #[test]
    fn zero_column_has_no_influence() {
        let probs = array![0.3, 0.6, 0.8];
        let ctx = SampleContext::default();
        for criterion in [Criterion::Cctp, Criterion::Ectp, Criterion::Eudtp] {
            let s = score_concepts(criterion, &toy_f(), probs.view(), &ctx).unwrap();
            assert_eq!(s[1], 0.0, "{criterion}");
        }
    }

    #[test]
    fn cctp_closed_form() {
        let probs = array![0.3, 0.6, 0.8];
        let s = score_concepts(
            Criterion::Cctp,
            &toy_f(),
            probs.view(),
            &SampleContext::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(s[0], 0.3 * 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 0.8 * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lcp_needs_truth() {
        let probs = array![0.3, 0.6, 0.8];
        let err = score_concepts(
            Criterion::Lcp,
            &toy_f(),
            probs.view(),
            &SampleContext::default(),
        );
        assert!(matches!(err, Err(Error::OracleMissing("lcp"))));
        let truth = array![1.0, 0.0, 1.0];
        let ctx = SampleContext {
            truth: Some(truth.view()),
            ..Default::default()
        };
        let s = score_concepts(Criterion::Lcp, &toy_f(), probs.view(), &ctx).unwrap();
        assert_abs_diff_eq!(s[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn random_scores_are_reproducible() {
        let probs = array![0.3, 0.6, 0.8];
        let ctx = SampleContext {
            seed: 4,
            sample: 2,
            ..Default::default()
        };
        let a = score_concepts(Criterion::Random, &toy_f(), probs.view(), &ctx).unwrap();
        let b = score_concepts(Criterion::Random, &toy_f(), probs.view(), &ctx).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn selection_rules() {
        let s = array![0.2, 0.9, 0.9];
        assert!(select(s.view(), 0, Criterion::Ucp).is_empty());
        assert_eq!(select(s.view(), 2, Criterion::Ucp), vec![1, 2]);
        assert_eq!(select(s.view(), 3, Criterion::Ucp), vec![1, 2, 0]);
        assert_eq!(select(s.view(), 10, Criterion::Ucp).len(), 3);
        assert_eq!(
            select(array![0.1, -0.5, 0.0].view(), 1, Criterion::Eudtp),
            vec![1]
        );
    }

    #[test]
    fn apply_modes() {
        let p = array![0.9, 0.2];
        let t = array![1.0, 1.0];
        assert_eq!(
            apply_intervention(p.view(), &[1], t.view(), InterventionMode::Correct),
            array![0.9, 1.0]
        );
        assert_eq!(
            apply_intervention(p.view(), &[1], t.view(), InterventionMode::Incorrect),
            array![0.9, 0.0]
        );
        assert_eq!(
            apply_intervention(p.view(), &[0, 1], t.view(), InterventionMode::Correct),
            t
        );
        assert_eq!(p, array![0.9, 0.2]);
    }

    #[test]
    fn susceptibility_scores_follow_ranking() {
        let ranking = [2usize, 0];
        let ctx = SampleContext {
            class_ranking: Some(&ranking),
            ..Default::default()
        };
        let s = score_concepts(
            Criterion::Susceptibility,
            &toy_f(),
            array![0.5, 0.5, 0.5].view(),
            &ctx,
        )
        .unwrap();
        assert_eq!(select(s.view(), 2, Criterion::Susceptibility), vec![2, 0]);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!(parse_budgets("0:4", 4).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_budgets("0:k:2", 4).unwrap(), vec![0, 2, 4]);
        assert_eq!(parse_budgets("0,1,3", 4).unwrap(), vec![0, 1, 3]);
        assert!(parse_budgets("0:5", 4).is_err());
        assert!(parse_budgets("a", 4).is_err());
    }
}
