//! Labeled (input, concept, target) triplets: synthetic generation, CSV
//! persistence, stratified splitting and label-noise injection.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

const MAX_PROTOTYPE_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// n × d real inputs.
    pub inputs: Array2<f64>,
    /// n × k binary concept labels (entries 0 or 1).
    pub concepts: Array2<u8>,
    /// Class index per sample, each in `[0, num_classes)`.
    pub targets: Vec<usize>,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    /// Optional partition of the concept indices into semantic groups.
    pub groups: Option<Vec<Vec<usize>>>,
}

impl LabeledDataset {
    /// Builds a dataset with default names and checks every invariant.
    pub fn new(
        inputs: Array2<f64>,
        concepts: Array2<u8>,
        targets: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let k = concepts.ncols();
        let ds = LabeledDataset {
            inputs,
            concepts,
            targets,
            concept_names: default_concept_names(k),
            class_names: default_class_names(num_classes),
            groups: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if self.concepts.nrows() != n || self.targets.len() != n {
            return Err(Error::Schema(format!(
                "leading dimensions differ: inputs {}, concepts {}, targets {}",
                n,
                self.concepts.nrows(),
                self.targets.len()
            )));
        }
        if self.concept_names.len() != self.num_concepts() {
            return Err(Error::Schema(format!(
                "{} concept names for {} concepts",
                self.concept_names.len(),
                self.num_concepts()
            )));
        }
        if let Some(bad) = self.concepts.iter().find(|&&c| c > 1) {
            return Err(Error::Schema(format!("non-binary concept entry {bad}")));
        }
        let m = self.num_classes();
        if let Some(bad) = self.targets.iter().find(|&&y| y >= m) {
            return Err(Error::Schema(format!("target {bad} outside [0, {m})")));
        }
        if let Some(groups) = &self.groups {
            validate_groups(groups, self.num_concepts())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Concept labels of sample `i` as reals.
    pub fn concept_row(&self, i: usize) -> Array1<f64> {
        self.concepts.row(i).mapv(f64::from)
    }

    /// Concept matrix as reals.
    pub fn concepts_f64(&self) -> Array2<f64> {
        self.concepts.mapv(f64::from)
    }

    /// Samples at `indices`, in that order; metadata carried over.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(Axis(0), indices),
            concepts: self.concepts.select(Axis(0), indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            concept_names: self.concept_names.clone(),
            class_names: self.class_names.clone(),
            groups: self.groups.clone(),
        }
    }

    /// Indices of the samples belonging to each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.targets.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            concept_names: self.concept_names.clone(),
            class_names: self.class_names.clone(),
            groups: self.groups.clone(),
        }
    }
}

fn default_concept_names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("c{j}")).collect()
}

fn default_class_names(m: usize) -> Vec<String> {
    (0..m).map(|y| format!("class{y}")).collect()
}

fn validate_groups(groups: &[Vec<usize>], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for group in groups {
        if group.is_empty() {
            return Err(Error::Schema("empty concept group".into()));
        }
        for &j in group {
            if j >= k {
                return Err(Error::Schema(format!("group member {j} outside [0, {k})")));
            }
            if seen[j] {
                return Err(Error::Schema(format!("concept {j} appears in two groups")));
            }
            seen[j] = true;
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::Schema(format!(
            "concept {j} is not covered by any group"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Parameters of the prototype-based synthetic benchmark.
///
/// Every class owns a binary concept prototype; a sample's concepts are its
/// class prototype with optional independent bit flips, and its input is a
/// fixed random linear embedding of the concepts plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub num_classes: usize,
    #[serde(default = "one")]
    pub prototype_min_hamming: usize,
    #[serde(default)]
    pub concept_instance_flip: f64,
    #[serde(default)]
    pub input_noise_scale: f64,
    /// When set, concepts are partitioned into contiguous groups of this size.
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    /// The default desk-scale benchmark: n=2000, d=32, k=16, M=8, σ_x=0.5.
    pub fn benchmark(seed: u64) -> Self {
        SyntheticSpec {
            n: 2000,
            d: 32,
            k: 16,
            num_classes: 8,
            prototype_min_hamming: 4,
            concept_instance_flip: 0.0,
            input_noise_scale: 0.5,
            group_size: Some(4),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.d == 0 {
            return cfg("k and d must be positive".into());
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        if self.k < 63 && self.num_classes > (1usize << self.k) {
            return cfg(format!(
                "{} classes cannot have distinct prototypes over {} concepts",
                self.num_classes, self.k
            ));
        }
        if self.n < self.num_classes {
            return cfg(format!(
                "n={} smaller than num_classes={}",
                self.n, self.num_classes
            ));
        }
        if self.prototype_min_hamming == 0 || self.prototype_min_hamming > self.k {
            return cfg(format!(
                "prototype_min_hamming must lie in [1, k={}], got {}",
                self.k, self.prototype_min_hamming
            ));
        }
        if !(0.0..1.0).contains(&self.concept_instance_flip) {
            return cfg(format!(
                "concept_instance_flip must lie in [0, 1), got {}",
                self.concept_instance_flip
            ));
        }
        if !(self.input_noise_scale.is_finite() && self.input_noise_scale >= 0.0) {
            return cfg(format!(
                "input_noise_scale must be finite and >= 0, got {}",
                self.input_noise_scale
            ));
        }
        if self.group_size == Some(0) {
            return cfg("group_size must be positive".into());
        }
        Ok(())
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Draws `num_classes` prototypes with the requested pairwise Hamming separation.
pub fn sample_prototypes<R: Rng>(
    rng: &mut R,
    num_classes: usize,
    k: usize,
    min_hamming: usize,
) -> Result<Vec<Vec<u8>>> {
    let mut prototypes: Vec<Vec<u8>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while prototypes.len() < num_classes {
        if attempts == MAX_PROTOTYPE_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "found only {} of {} prototypes with min Hamming distance {} after {} attempts",
                prototypes.len(),
                num_classes,
                min_hamming,
                MAX_PROTOTYPE_ATTEMPTS
            )));
        }
        attempts += 1;
        let candidate: Vec<u8> = (0..k).map(|_| rng.gen_range(0..=1u8)).collect();
        if prototypes
            .iter()
            .all(|p| hamming(p, &candidate) >= min_hamming)
        {
            prototypes.push(candidate);
        }
    }
    Ok(prototypes)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let (n, d, k, m) = (spec.n, spec.d, spec.k, spec.num_classes);

    let prototypes = sample_prototypes(&mut rng, m, k, spec.prototype_min_hamming)?;
    let embedding = Array2::from_shape_simple_fn((d, k), || rng.sample::<f64, _>(StandardNormal));

    let mut targets: Vec<usize> = (0..n).map(|i| i % m).collect();
    targets.shuffle(&mut rng);

    let mut concepts = Array2::<u8>::zeros((n, k));
    for (i, &y) in targets.iter().enumerate() {
        for j in 0..k {
            let bit = prototypes[y][j];
            let flip = spec.concept_instance_flip > 0.0 && rng.gen_bool(spec.concept_instance_flip);
            concepts[[i, j]] = if flip { 1 - bit } else { bit };
        }
    }

    let clean = concepts.mapv(f64::from).dot(&embedding.t());
    let mut inputs = clean;
    if spec.input_noise_scale > 0.0 {
        for v in inputs.iter_mut() {
            *v += spec.input_noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let groups = spec.group_size.map(|size| {
        (0..k)
            .collect::<Vec<_>>()
            .chunks(size)
            .map(|c| c.to_vec())
            .collect::<Vec<_>>()
    });

    let ds = LabeledDataset {
        inputs,
        concepts,
        targets,
        concept_names: default_concept_names(k),
        class_names: default_class_names(m),
        groups,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Noise injection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScope {
    Concepts,
    Targets,
    Both,
}

impl NoiseScope {
    pub fn concepts(self) -> bool {
        matches!(self, NoiseScope::Concepts | NoiseScope::Both)
    }

    pub fn targets(self) -> bool {
        matches!(self, NoiseScope::Targets | NoiseScope::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub apply_to: NoiseScope,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "noise rate must lie in [0, 1], got {}",
                self.rate
            )));
        }
        if self.kind == NoiseKind::Grouped && !self.apply_to.concepts() {
            return Err(Error::Config("grouped noise must apply to concepts".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, ds: &LabeledDataset) -> Result<()> {
        self.validate()?;
        if self.kind == NoiseKind::Grouped && ds.groups.is_none() {
            return Err(Error::Config(
                "grouped noise requires a concept group map".into(),
            ));
        }
        if self.apply_to.targets() && self.rate > 0.0 && ds.num_classes() < 2 && !ds.is_empty() {
            return Err(Error::Config(
                "target noise needs at least two classes".into(),
            ));
        }
        Ok(())
    }
}

/// Entries changed by noise injection.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipMask {
    pub concepts: Array2<u8>,
    pub targets: Vec<bool>,
}

impl FlipMask {
    pub fn concept_flip_fraction(&self) -> f64 {
        let total = self.concepts.len();
        if total == 0 {
            return 0.0;
        }
        self.concepts.iter().filter(|&&b| b == 1).count() as f64 / total as f64
    }

    pub fn target_flip_fraction(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().filter(|&&b| b).count() as f64 / self.targets.len() as f64
    }
}

/// Corrupts concepts and/or targets according to `spec`, returning the noisy
/// copy and the mask of changed entries. Concepts are processed before targets
/// from one seeded stream.
///
/// Grouped noise only covers concepts; with `apply_to = both`, targets receive
/// symmetric noise at the same rate.
pub fn inject_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<(LabeledDataset, FlipMask)> {
    spec.validate_for(ds)?;
    let mut rng = seeded_rng(spec.seed);
    let mut noisy = ds.clone();
    let (n, k, m) = (ds.len(), ds.num_concepts(), ds.num_classes());
    let gamma = spec.rate;

    if spec.apply_to.concepts() && gamma > 0.0 && k > 0 {
        match spec.kind {
            NoiseKind::Symmetric => {
                for v in noisy.concepts.iter_mut() {
                    if rng.gen_bool(gamma) {
                        *v ^= 1;
                    }
                }
            }
            NoiseKind::Asymmetric => {
                for i in 0..n {
                    for j in 0..k {
                        if rng.gen_bool(gamma) {
                            let next = (j + 1) % k;
                            noisy.concepts[[i, j]] ^= 1;
                            if next != j {
                                noisy.concepts[[i, next]] ^= 1;
                            }
                        }
                    }
                }
            }
            NoiseKind::Grouped => {
                let groups = ds.groups.as_ref().expect("checked by validate_for");
                for i in 0..n {
                    for group in groups {
                        if rng.gen_bool(gamma) {
                            let j = group[rng.gen_range(0..group.len())];
                            noisy.concepts[[i, j]] ^= 1;
                        }
                    }
                }
            }
        }
    }

    if spec.apply_to.targets() && gamma > 0.0 && m >= 2 {
        for y in noisy.targets.iter_mut() {
            if !rng.gen_bool(gamma) {
                continue;
            }
            *y = match spec.kind {
                NoiseKind::Asymmetric => (*y + 1) % m,
                NoiseKind::Symmetric | NoiseKind::Grouped => {
                    let draw = rng.gen_range(0..m - 1);
                    if draw >= *y {
                        draw + 1
                    } else {
                        draw
                    }
                }
            };
        }
    }

    let mask = FlipMask {
        concepts: ndarray::Zip::from(&ds.concepts)
            .and(&noisy.concepts)
            .map_collect(|a, b| a ^ b),
        targets: ds
            .targets
            .iter()
            .zip(&noisy.targets)
            .map(|(a, b)| a != b)
            .collect(),
    };
    Ok((noisy, mask))
}

// ---------------------------------------------------------------------------
// Splitting

/// Seeded class-stratified partition into (train, val, test) index lists.
///
/// Split totals follow largest-remainder rounding of `n · fraction`; each
/// class contributes its floor share to every split, and the leftover
/// samples are handed out so the totals are met exactly.
pub fn split_indices(
    ds: &LabeledDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!(
            "split fractions must be non-negative, got {fractions:?}"
        )));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let by_class = ds.class_indices();
    for (y, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < active {
            return Err(Error::Stratification(format!(
                "class {y} has {} samples but {active} non-empty splits were requested",
                members.len()
            )));
        }
    }

    let totals = largest_remainder(ds.len(), &fractions);
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(by_class.len());
    let mut deficit = totals;
    let mut leftovers: Vec<(usize, [f64; 3], usize)> = Vec::new();
    for (y, members) in by_class.iter().enumerate() {
        let nc = members.len();
        let mut c = [0usize; 3];
        let mut rem = [0.0; 3];
        for s in 0..3 {
            let q = nc as f64 * fractions[s];
            c[s] = q.floor() as usize;
            rem[s] = q - q.floor();
            deficit[s] -= c[s];
        }
        let left = nc - c.iter().sum::<usize>();
        counts.push(c);
        if left > 0 {
            leftovers.push((y, rem, left));
        }
    }
    for (y, rem, left) in leftovers {
        for _ in 0..left {
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
            let pick = order
                .iter()
                .copied()
                .find(|&s| {
                    deficit[s] > 0 && counts[y][s] as f64 <= by_class[y].len() as f64 * fractions[s]
                })
                .or_else(|| order.iter().copied().find(|&s| deficit[s] > 0))
                .expect("leftover samples always match the remaining deficit");
            counts[y][pick] += 1;
            deficit[pick] -= 1;
        }
    }

    let mut rng = seeded_rng(seed);
    let mut out: [Vec<usize>; 3] = Default::default();
    for (y, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let mut start = 0;
        for s in 0..3 {
            out[s].extend_from_slice(&shuffled[start..start + counts[y][s]]);
            start += counts[y][s];
        }
    }
    for part in out.iter_mut() {
        part.shuffle(&mut rng);
    }
    Ok(out)
}

fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut rems = [(0.0, 0usize); 3];
    for s in 0..3 {
        let q = n as f64 * fractions[s];
        counts[s] = q.floor() as usize;
        rems[s] = (q - q.floor(), s);
    }
    let mut left = n - counts.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, s) in rems.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[s] > 0.0 {
            counts[s] += 1;
            left -= 1;
        }
    }
    counts
}

pub fn split(
    ds: &LabeledDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let [train, val, test] = split_indices(ds, fractions, seed)?;
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

// ---------------------------------------------------------------------------
// CSV persistence

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
}

impl Metadata {
    pub fn from_json(text: &str) -> Result<Self> {
        let meta: Metadata = serde_json::from_str(text)?;
        if let Some(groups) = &meta.groups {
            validate_groups(groups, meta.concept_names.len())?;
        }
        Ok(meta)
    }
}

/// Path of the metadata sidecar for a dataset CSV: `data.csv` → `data.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Parses the dataset CSV format: header `x0..x{d-1},c0..c{k-1},y`.
///
/// Without metadata the class count is one more than the largest target.
pub fn parse_csv(text: &str, meta: Option<&Metadata>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let (d, k) = parse_header(&header)?;
    if let Some(meta) = meta {
        if meta.concept_names.len() != k {
            return Err(Error::Schema(format!(
                "metadata names {} concepts, CSV has {k}",
                meta.concept_names.len()
            )));
        }
    }

    let mut inputs = Vec::new();
    let mut concepts = Vec::new();
    let mut targets = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: "-".into(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: "-".into(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let err = |message: String| Error::Parse {
                row,
                column: header[col].clone(),
                message,
            };
            if col < d {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("`{cell}` is not a number")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite input `{cell}`")));
                }
                inputs.push(v);
            } else if col < d + k {
                match cell {
                    "0" => concepts.push(0u8),
                    "1" => concepts.push(1u8),
                    _ => return Err(err(format!("concept cell `{cell}` is not 0 or 1"))),
                }
            } else {
                let y: usize = cell
                    .parse()
                    .map_err(|_| err(format!("target `{cell}` is not a non-negative integer")))?;
                if let Some(meta) = meta {
                    if y >= meta.class_names.len() {
                        return Err(err(format!(
                            "target {y} outside [0, {})",
                            meta.class_names.len()
                        )));
                    }
                }
                targets.push(y);
            }
        }
    }

    let n = targets.len();
    let inputs = Array2::from_shape_vec((n, d), inputs).expect("row lengths checked");
    let concepts = Array2::from_shape_vec((n, k), concepts).expect("row lengths checked");
    let ds = match meta {
        Some(meta) => LabeledDataset {
            inputs,
            concepts,
            targets,
            concept_names: meta.concept_names.clone(),
            class_names: meta.class_names.clone(),
            groups: meta.groups.clone(),
        },
        None => {
            let m = targets.iter().max().map_or(0, |&y| y + 1);
            LabeledDataset {
                inputs,
                concepts,
                targets,
                concept_names: default_concept_names(k),
                class_names: default_class_names(m),
                groups: None,
            }
        }
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_header(header: &[String]) -> Result<(usize, usize)> {
    let y_pos = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Schema("missing `y` column".into()))?;
    if y_pos != header.len() - 1 {
        return Err(Error::Schema("`y` must be the last column".into()));
    }
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let k = header[d..y_pos]
        .iter()
        .take_while(|h| h.starts_with('c'))
        .count();
    if d + k != y_pos {
        return Err(Error::Schema(format!(
            "unexpected column `{}`",
            header[d + k]
        )));
    }
    for (j, h) in header[..d].iter().enumerate() {
        if *h != format!("x{j}") {
            return Err(Error::Schema(format!(
                "expected column `x{j}`, found `{h}`"
            )));
        }
    }
    for (j, h) in header[d..y_pos].iter().enumerate() {
        if *h != format!("c{j}") {
            return Err(Error::Schema(format!(
                "expected column `c{j}`, found `{h}`"
            )));
        }
    }
    Ok((d, k))
}

/// Renders the CSV body; inputs use 17 significant digits.
pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let (d, k) = (ds.input_dim(), ds.num_concepts());
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend((0..k).map(|j| format!("c{j}")));
    header.push("y".into());
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds
            .inputs
            .row(i)
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        fields.extend(ds.concepts.row(i).iter().map(|c| c.to_string()));
        fields.push(ds.targets[i].to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Writes `path` and its metadata sidecar.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_csv_string(ds)).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&ds.metadata())?;
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(side, e))?;
    Ok(())
}

/// Reads a dataset CSV, using the metadata sidecar when one exists.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let raw = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(Metadata::from_json(&raw)?)
    } else {
        None
    };
    parse_csv(&text, meta.as_ref())
}

/// Distinct concept rows, sorted.
pub fn distinct_concept_rows(ds: &LabeledDataset) -> BTreeSet<Vec<u8>> {
    ds.concepts.rows().into_iter().map(|r| r.to_vec()).collect()
}
