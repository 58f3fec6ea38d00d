//! Synthetic distribution-shift benchmark.
//!
//! Domains are Gaussian prototype mixtures: single-label samples draw a
//! class from the prior and sit at that prototype plus isotropic noise;
//! multi-label samples activate each class independently and sum the active
//! prototypes (none active is a valid empty-label sample). Shifts compose a
//! covariate transform (affine map, extra noise, feature dropout) and a
//! label-space restriction/reweighting into the generative process, so a
//! `(spec, n, seed)` triple still fully determines every dataset bit.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::metrics::{sample_map, top1, EvalBatch};
use crate::nn::{
    backward_and_step, BnSource, ForwardMode, LayerSpec, LossKind, MicroNet, TrainableMask,
};
use crate::pseudo::PseudoLabelBlock;
use crate::TaskMode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Label generation regime of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LabelMode {
    /// One class per sample, drawn from `priors` (sums to 1).
    Single { priors: Vec<f64> },
    /// Each class present independently with its activation probability.
    Multi { activation: Vec<f64> },
}

/// Affine feature map `x -> A x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub matrix: DenseMatrix,
    pub offset: Vec<f64>,
}

impl Affine {
    /// Uniform scaling plus constant offset.
    pub fn scale_offset(dim: usize, scale: f64, offset: f64) -> Self {
        let mut m = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, scale);
        }
        Affine {
            matrix: m,
            offset: vec![offset; dim],
        }
    }

    fn apply(&self, x: &mut [f64], scratch: &mut Vec<f64>) {
        scratch.clear();
        scratch.extend_from_slice(x);
        for (i, out) in x.iter_mut().enumerate() {
            let row = self.matrix.row(i);
            let mut acc = self.offset[i];
            for (a, v) in row.iter().zip(scratch.iter()) {
                acc += a * v;
            }
            *out = acc;
        }
    }

    /// `self` after `earlier`: `x -> A2(A1 x + b1) + b2`.
    fn compose_after(&self, earlier: &Affine) -> Result<Affine> {
        let matrix = self.matrix.matmul(&earlier.matrix)?;
        let mut offset = self.offset.clone();
        for (i, o) in offset.iter_mut().enumerate() {
            let row = self.matrix.row(i);
            for (a, b) in row.iter().zip(earlier.offset.iter()) {
                *o += a * b;
            }
        }
        Ok(Affine { matrix, offset })
    }
}

/// Covariate corruption folded into a domain's generative process, applied
/// after the clean draw: affine map, then extra Gaussian noise, then
/// feature dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateShift {
    pub affine: Option<Affine>,
    pub added_noise: f64,
    pub feature_dropout: f64,
}

impl CovariateShift {
    pub fn none() -> Self {
        CovariateShift {
            affine: None,
            added_noise: 0.0,
            feature_dropout: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.affine.is_none() && self.added_noise == 0.0 && self.feature_dropout == 0.0
    }

    fn compose_after(&self, earlier: &CovariateShift) -> Result<CovariateShift> {
        let affine = match (&earlier.affine, &self.affine) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some(b.compose_after(a)?),
        };
        Ok(CovariateShift {
            affine,
            added_noise: (earlier.added_noise.powi(2) + self.added_noise.powi(2)).sqrt(),
            feature_dropout: 1.0 - (1.0 - earlier.feature_dropout) * (1.0 - self.feature_dropout),
        })
    }
}

/// Generative description of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub class_count: usize,
    pub feature_dim: usize,
    /// `class_count x feature_dim`, rows pairwise distinct.
    pub prototypes: DenseMatrix,
    pub label_mode: LabelMode,
    /// Isotropic Gaussian noise around the prototype sum, >= 0.
    pub noise_scale: f64,
    pub covariate: CovariateShift,
}

impl DomainSpec {
    pub fn new(
        name: impl Into<String>,
        prototypes: DenseMatrix,
        label_mode: LabelMode,
        noise_scale: f64,
    ) -> Result<Self> {
        let spec = DomainSpec {
            name: name.into(),
            class_count: prototypes.rows(),
            feature_dim: prototypes.cols(),
            prototypes,
            label_mode,
            noise_scale,
            covariate: CovariateShift::none(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.feature_dim == 0 {
            return Err(Error::config("domain needs at least 1 class and 1 feature dimension"));
        }
        if self.prototypes.rows() != self.class_count
            || self.prototypes.cols() != self.feature_dim
        {
            return Err(Error::shape(format!(
                "prototypes are {}x{}, spec says {}x{}",
                self.prototypes.rows(),
                self.prototypes.cols(),
                self.class_count,
                self.feature_dim
            )));
        }
        for a in 0..self.class_count {
            for b in (a + 1)..self.class_count {
                if self.prototypes.row(a) == self.prototypes.row(b) {
                    return Err(Error::config(format!("prototypes {a} and {b} are identical")));
                }
            }
        }
        match &self.label_mode {
            LabelMode::Single { priors } => {
                if priors.len() != self.class_count {
                    return Err(Error::shape(format!(
                        "{} priors for {} classes",
                        priors.len(),
                        self.class_count
                    )));
                }
                if priors.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                    return Err(Error::config("priors must be finite and non-negative"));
                }
                let sum: f64 = priors.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("priors sum to {sum}, expected 1")));
                }
            }
            LabelMode::Multi { activation } => {
                if activation.len() != self.class_count {
                    return Err(Error::shape(format!(
                        "{} activation probabilities for {} classes",
                        activation.len(),
                        self.class_count
                    )));
                }
                if activation.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::config("activation probabilities must lie in [0, 1]"));
                }
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::config(format!(
                "noise scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        if let Some(a) = &self.covariate.affine {
            if a.matrix.rows() != self.feature_dim
                || a.matrix.cols() != self.feature_dim
                || a.offset.len() != self.feature_dim
            {
                return Err(Error::shape("affine transform does not match the feature dimension"));
            }
        }
        if !(self.covariate.added_noise.is_finite() && self.covariate.added_noise >= 0.0) {
            return Err(Error::config("added noise must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.covariate.feature_dropout) {
            return Err(Error::config("feature dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn task(&self) -> TaskMode {
        match self.label_mode {
            LabelMode::Single { .. } => TaskMode::SingleLabel,
            LabelMode::Multi { .. } => TaskMode::MultiLabel,
        }
    }

    /// Stable hash of the full generative description.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Distribution-shift description applied on top of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub name: String,
    pub covariate: CovariateShift,
    /// Classes present in the target; `None` keeps all.
    pub label_subset: Option<Vec<usize>>,
    /// Per-class prior/activation multipliers; `None` keeps all.
    pub prior_reweight: Option<Vec<f64>>,
    /// Ordinal severity, 1..=5.
    pub severity: u8,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            name: String::new(),
            covariate: CovariateShift::none(),
            label_subset: None,
            prior_reweight: None,
            severity: 1,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!("severity must be 1..=5, got {}", self.severity)));
        }
        if let Some(subset) = &self.label_subset {
            if subset.is_empty() {
                return Err(Error::config("label subset must be non-empty"));
            }
            if let Some(&c) = subset.iter().find(|&&c| c >= class_count) {
                return Err(Error::range(format!(
                    "label subset class {c} out of range for {class_count} classes"
                )));
            }
        }
        if let Some(w) = &self.prior_reweight {
            if w.len() != class_count {
                return Err(Error::shape(format!(
                    "{} reweight entries for {class_count} classes",
                    w.len()
                )));
            }
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::config("reweight entries must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Compose a shift into a domain's generative process. The class space stays
/// fixed (absent classes simply never occur), so source models remain
/// directly applicable.
pub fn apply_shift(spec: &DomainSpec, shift: &ShiftSpec) -> Result<DomainSpec> {
    spec.validate()?;
    shift.validate(spec.class_count)?;
    let mut out = spec.clone();
    if !shift.name.is_empty() {
        out.name = format!("{}+{}", spec.name, shift.name);
    }
    out.covariate = shift.covariate.compose_after(&spec.covariate)?;

    let in_subset = |c: usize| {
        shift
            .label_subset
            .as_ref()
            .map_or(true, |s| s.contains(&c))
    };
    let weight = |c: usize| shift.prior_reweight.as_ref().map_or(1.0, |w| w[c]);
    match &mut out.label_mode {
        LabelMode::Single { priors } => {
            for (c, p) in priors.iter_mut().enumerate() {
                if !in_subset(c) {
                    *p = 0.0;
                } else {
                    *p *= weight(c);
                }
            }
            let sum: f64 = priors.iter().sum();
            if sum <= 0.0 {
                return Err(Error::config(
                    "shift removes every class with positive prior mass",
                ));
            }
            for p in priors.iter_mut() {
                *p /= sum;
            }
        }
        LabelMode::Multi { activation } => {
            for (c, p) in activation.iter_mut().enumerate() {
                if !in_subset(c) {
                    *p = 0.0;
                } else {
                    *p = (*p * weight(c)).min(1.0);
                }
            }
            if activation.iter().all(|&p| p == 0.0) {
                return Err(Error::config("shift zeroes every activation probability"));
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub domain: String,
    pub seed: u64,
    pub spec_hash: String,
}

/// Features with binary labels and generation provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: DenseMatrix,
    pub labels: DenseMatrix,
    pub task: TaskMode,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.labels.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.rows() {
            return Err(Error::shape(format!(
                "{} feature rows vs {} label rows",
                self.features.rows(),
                self.labels.rows()
            )));
        }
        for (i, row) in self.labels.iter_rows().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones + zeros != row.len() {
                return Err(Error::data(format!("labels row {i} is not binary")));
            }
            if self.task == TaskMode::SingleLabel && ones != 1 {
                return Err(Error::data(format!(
                    "single-label row {i} has {ones} positives"
                )));
            }
        }
        Ok(())
    }

    /// Rows selected by index, provenance preserved.
    pub fn subset(&self, indices: &[usize], name_suffix: &str) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            features: self.features.select_rows(indices)?,
            labels: self.labels.select_rows(indices)?,
            task: self.task,
            provenance: Provenance {
                domain: format!("{}{}", self.provenance.domain, name_suffix),
                ..self.provenance.clone()
            },
        })
    }

    /// Write `<prefix>.features.csv`, `<prefix>.labels.csv` and
    /// `<prefix>.json` (the sidecar).
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let base = prefix
            .to_str()
            .ok_or_else(|| Error::config("dataset path is not valid UTF-8"))?;
        std::fs::write(format!("{base}.features.csv"), self.features.to_csv())?;
        std::fs::write(format!("{base}.labels.csv"), self.labels.to_csv())?;
        let sidecar = serde_json::json!({
            "domain": self.provenance.domain,
            "seed": self.provenance.seed,
            "spec_hash": self.provenance.spec_hash,
            "task": self.task,
            "n": self.len(),
            "classes": self.class_count(),
            "feature_dim": self.features.cols(),
        });
        std::fs::write(
            format!("{base}.json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serialization cannot fail"),
        )?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<LabeledDataset> {
        let base = prefix
            .to_str()
            .ok_or_else(|| Error::config("dataset path is not valid UTF-8"))?;
        let features = DenseMatrix::from_csv(&std::fs::read_to_string(format!(
            "{base}.features.csv"
        ))?)?;
        let labels =
            DenseMatrix::from_csv(&std::fs::read_to_string(format!("{base}.labels.csv"))?)?;
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(format!("{base}.json"))?)
                .map_err(|e| Error::data(format!("sidecar parse: {e}")))?;
        let task: TaskMode = serde_json::from_value(
            sidecar
                .get("task")
                .cloned()
                .ok_or_else(|| Error::data("sidecar missing task"))?,
        )
        .map_err(|e| Error::data(format!("sidecar task: {e}")))?;
        let ds = LabeledDataset {
            features,
            labels,
            task,
            provenance: Provenance {
                domain: sidecar
                    .get("domain")
                    .and_then(|v| v.as_str())
                    .unwrap_or("unknown")
                    .to_string(),
                seed: sidecar.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
                spec_hash: sidecar
                    .get("spec_hash")
                    .and_then(|v| v.as_str())
                    .unwrap_or("")
                    .to_string(),
            },
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Sample `n` points from a domain. The draw order per sample is fixed
/// (labels, base noise, shift noise, shift dropout), so `(spec, n, seed)`
/// reproduces datasets bit for bit.
pub fn generate_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("cannot generate an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.class_count;
    let d = spec.feature_dim;
    let mut features = DenseMatrix::zeros(n, d);
    let mut labels = DenseMatrix::zeros(n, c);
    let mut scratch = Vec::with_capacity(d);
    for i in 0..n {
        match &spec.label_mode {
            LabelMode::Single { priors } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut cls = c - 1;
                for (j, &p) in priors.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        cls = j;
                        break;
                    }
                }
                labels.set(i, cls, 1.0);
                let row = features.row_mut(i);
                row.copy_from_slice(spec.prototypes.row(cls));
            }
            LabelMode::Multi { activation } => {
                for (j, &p) in activation.iter().enumerate() {
                    if rng.gen::<f64>() < p {
                        labels.set(i, j, 1.0);
                        let row = features.row_mut(i);
                        for (f, v) in row.iter_mut().zip(spec.prototypes.row(j).iter()) {
                            *f += v;
                        }
                    }
                }
            }
        }
        let row = features.row_mut(i);
        if spec.noise_scale > 0.0 {
            for f in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *f += spec.noise_scale * z;
            }
        }
        if let Some(a) = &spec.covariate.affine {
            a.apply(row, &mut scratch);
        }
        if spec.covariate.added_noise > 0.0 {
            for f in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *f += spec.covariate.added_noise * z;
            }
        }
        if spec.covariate.feature_dropout > 0.0 {
            for f in row.iter_mut() {
                if rng.gen::<f64>() < spec.covariate.feature_dropout {
                    *f = 0.0;
                }
            }
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        task: spec.task(),
        provenance: Provenance {
            domain: spec.name.clone(),
            seed,
            spec_hash: spec.hash(),
        },
    })
}

/// Stratum key used for the stratified split: first positive class, or
/// `class_count` for empty-label rows.
fn stratum(labels: &DenseMatrix, i: usize) -> usize {
    let row = labels.row(i);
    row.iter()
        .position(|&v| v == 1.0)
        .unwrap_or(labels.cols())
}

/// Disjoint adapt/test partition, stratified by first positive class. Both
/// sides must end up non-empty.
pub fn split_adapt_test(
    ds: &LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    ds.validate()?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!(
            "split ratio must lie strictly inside (0, 1), got {ratio}"
        )));
    }
    let n = ds.len();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count() + 1];
    for i in 0..n {
        strata[stratum(&ds.labels, i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapt_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in strata.iter_mut() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64) * ratio).round() as usize;
        adapt_idx.extend_from_slice(&members[..take]);
        test_idx.extend_from_slice(&members[take..]);
    }
    adapt_idx.sort_unstable();
    test_idx.sort_unstable();
    if adapt_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::data(format!(
            "split ratio {ratio} leaves an empty side ({} adapt, {} test)",
            adapt_idx.len(),
            test_idx.len()
        )));
    }
    Ok((
        ds.subset(&adapt_idx, "/adapt")?,
        ds.subset(&test_idx, "/test")?,
    ))
}

/// Keep only rows with exactly one positive label and flip the task to
/// single-label. May return an empty dataset (with a warning).
pub fn filter_single_label(ds: &LabeledDataset) -> Result<LabeledDataset> {
    ds.validate()?;
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels.row(i).iter().filter(|&&v| v == 1.0).count() == 1)
        .collect();
    if keep.is_empty() {
        log::warn!(
            "single-label filter removed every row of domain {}",
            ds.provenance.domain
        );
    }
    let mut out = ds.subset(&keep, "/single")?;
    out.task = TaskMode::SingleLabel;
    Ok(out)
}

/// A trained source classifier with everything needed to adapt it later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceModel {
    pub net: MicroNet,
    pub task: TaskMode,
    pub class_count: usize,
    /// Train-set fit reached at the end of source training (top-1 accuracy
    /// for single-label, sample mAP for multi-label).
    pub train_fit: f64,
}

/// Checkpoint container version; bump on layout changes.
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: SourceModel,
}

impl SourceModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json =
            serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization cannot fail");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SourceModel> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("checkpoint parse: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt.model)
    }

    /// Clean forward with running statistics, probabilities out.
    pub fn predict(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        self.net.predict(features, self.task)
    }
}

/// Source-training hyperparameters (fixed: the benchmark wants a competent
/// source model, not a tuning exercise).
const SOURCE_LR: f64 = 0.05;
const SOURCE_BATCH: usize = 64;
const SOURCE_FIT_FLOOR: f64 = 0.95;

/// Supervised training on freshly generated source data. Errors if the
/// train-set fit stays below 0.95 (top-1 for single-label, mAP for
/// multi-label); that signals the architecture or epoch budget is too small
/// for the domain.
pub fn train_source(
    spec: &DomainSpec,
    n: usize,
    arch: &[LayerSpec],
    epochs: usize,
    seed: u64,
) -> Result<SourceModel> {
    let data = generate_domain(spec, n, seed)?;
    let net = MicroNet::new(arch, TrainableMask::All, seed ^ 0x5f5f_5f5f)?;
    if net.in_dim() != spec.feature_dim || net.out_dim() != spec.class_count {
        return Err(Error::shape(format!(
            "architecture maps {} -> {}, domain needs {} -> {}",
            net.in_dim(),
            net.out_dim(),
            spec.feature_dim,
            spec.class_count
        )));
    }
    let mut net = net;
    let task = spec.task();
    let loss = match task {
        TaskMode::SingleLabel => LossKind::CrossEntropy,
        TaskMode::MultiLabel => LossKind::BinaryCrossEntropy,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c3c_3c3c);
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(SOURCE_BATCH) {
            let batch = data.features.select_rows(chunk)?;
            let targets =
                PseudoLabelBlock::new(data.labels.select_rows(chunk)?, task)?;
            backward_and_step(
                &mut net,
                &batch,
                &targets,
                loss,
                SOURCE_LR,
                ForwardMode::Noisy,
                BnSource::Batch,
                &mut noise_rng,
            )?;
        }
    }
    let probs = net.predict(&data.features, task)?;
    let batch = EvalBatch::new(probs, data.labels.clone(), task)?;
    let train_fit = match task {
        TaskMode::SingleLabel => top1(&batch)?,
        TaskMode::MultiLabel => sample_map(&batch)?,
    };
    if train_fit < SOURCE_FIT_FLOOR {
        return Err(Error::config(format!(
            "source training reached fit {train_fit:.4} < {SOURCE_FIT_FLOOR}; increase network capacity or epochs"
        )));
    }
    Ok(SourceModel {
        net,
        task,
        class_count: spec.class_count,
        train_fit,
    })
}

/// The shipped benchmark: one source domain, one validation target and three
/// test targets of increasing severity.
#[derive(Debug, Clone)]
pub struct BenchSuite {
    pub source: DomainSpec,
    pub validation: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

/// Default architecture used by the suite for a domain.
pub fn default_arch(feature_dim: usize, class_count: usize, dropout: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            in_dim: feature_dim,
            out_dim: 32,
        },
        LayerSpec::BatchNorm {
            dim: 32,
            momentum: 0.1,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense {
            in_dim: 32,
            out_dim: class_count,
        },
    ]
}

/// Severity-graded covariate shift: growing contraction, offset and noise.
pub fn severity_shift(severity: u8, feature_dim: usize) -> Result<ShiftSpec> {
    if !(1..=5).contains(&severity) {
        return Err(Error::config(format!("severity must be 1..=5, got {severity}")));
    }
    let idx = (severity - 1) as usize;
    let scale = [0.95, 0.85, 0.7, 0.45, 0.2][idx];
    let offset = [0.05, 0.15, 0.35, 0.7, 1.2][idx];
    let noise = [0.05, 0.1, 0.2, 0.35, 0.5][idx];
    Ok(ShiftSpec {
        name: format!("sev{severity}"),
        covariate: CovariateShift {
            affine: Some(Affine::scale_offset(feature_dim, scale, offset)),
            added_noise: noise,
            feature_dropout: 0.0,
        },
        label_subset: None,
        prior_reweight: None,
        severity,
    })
}

/// Deterministic prototype layout: well-separated directions with distinct
/// norms, seeded.
fn make_prototypes(class_count: usize, feature_dim: usize, seed: u64, spread: f64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(class_count, feature_dim);
    for c in 0..class_count {
        let row = m.row_mut(c);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = spread * z;
        }
    }
    m
}

/// Build the standard suite for a task mode: source plus four shifted
/// domains (validation at severity 3, targets at severities 2, 3, 4 with
/// varied label restrictions).
pub fn standard_suite(task: TaskMode) -> Result<BenchSuite> {
    let c = 8;
    let d = 24;
    let prototypes = make_prototypes(c, d, 20_240_601, 1.6);
    let label_mode = match task {
        TaskMode::SingleLabel => LabelMode::Single {
            priors: vec![1.0 / c as f64; c],
        },
        TaskMode::MultiLabel => LabelMode::Multi {
            activation: vec![0.3; c],
        },
    };
    let source = DomainSpec::new("source", prototypes, label_mode, 0.35)?;

    let validation = apply_shift(&source, &{
        let mut s = severity_shift(3, d)?;
        s.name = "validation".into();
        s
    })?;

    let mut targets = Vec::new();
    let mut t1 = severity_shift(2, d)?;
    t1.name = "target-a".into();
    targets.push(apply_shift(&source, &t1)?);

    let mut t2 = severity_shift(3, d)?;
    t2.name = "target-b".into();
    t2.label_subset = Some((0..6).collect());
    targets.push(apply_shift(&source, &t2)?);

    let mut t3 = severity_shift(4, d)?;
    t3.name = "target-c".into();
    t3.prior_reweight = Some(
        (0..c)
            .map(|i| if i % 2 == 0 { 1.5 } else { 0.5 })
            .collect(),
    );
    targets.push(apply_shift(&source, &t3)?);

    Ok(BenchSuite {
        source,
        validation,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_single(noise: f64) -> DomainSpec {
        DomainSpec::new(
            "toy",
            DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap(),
            LabelMode::Single {
                priors: vec![0.5, 0.5],
            },
            noise,
        )
        .unwrap()
    }

    fn toy_multi() -> DomainSpec {
        DomainSpec::new(
            "toym",
            DenseMatrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]])
                .unwrap(),
            LabelMode::Multi {
                activation: vec![0.4, 0.4, 0.4],
            },
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn spec_validation_catches_bad_inputs() {
        let protos = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(DomainSpec::new(
            "dup",
            protos,
            LabelMode::Single { priors: vec![0.5, 0.5] },
            0.1
        )
        .is_err());
        let protos = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(DomainSpec::new(
            "bad-prior",
            protos.clone(),
            LabelMode::Single { priors: vec![0.5, 0.4] },
            0.1
        )
        .is_err());
        assert!(DomainSpec::new(
            "bad-act",
            protos,
            LabelMode::Multi { activation: vec![0.5, 1.2] },
            0.1
        )
        .is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = toy_multi();
        let a = generate_domain(&spec, 50, 11).unwrap();
        let b = generate_domain(&spec, 50, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&spec, 50, 12).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn zero_noise_single_label_sits_on_prototypes() {
        let spec = toy_single(0.0);
        let ds = generate_domain(&spec, 20, 3).unwrap();
        for i in 0..20 {
            let cls = if ds.labels.get(i, 0) == 1.0 { 0 } else { 1 };
            assert_eq!(ds.features.row(i), spec.prototypes.row(cls));
        }
    }

    #[test]
    fn empirical_frequencies_match_priors() {
        let spec = DomainSpec::new(
            "freq",
            DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            LabelMode::Single {
                priors: vec![0.2, 0.3, 0.5],
            },
            0.0,
        )
        .unwrap();
        let n = 10_000;
        let ds = generate_domain(&spec, n, 5).unwrap();
        for (c, &p) in [0.2, 0.3, 0.5].iter().enumerate() {
            let count = (0..n).filter(|&i| ds.labels.get(i, c) == 1.0).count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count - n as f64 * p).abs() < 3.0 * sigma,
                "class {c}: {count} vs {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn multi_label_rows_may_be_empty_and_sum_prototypes() {
        let spec = toy_multi();
        let ds = generate_domain(&spec, 400, 7).unwrap();
        let empties = (0..400)
            .filter(|&i| ds.labels.row(i).iter().all(|&v| v == 0.0))
            .count();
        assert!(empties > 0, "activation 0.4^3 should leave some empty rows");
        // With noise 0.2 the feature should stay near the prototype sum.
        for i in 0..400 {
            let mut expect = vec![0.0; 3];
            for c in 0..3 {
                if ds.labels.get(i, c) == 1.0 {
                    for (e, v) in expect.iter_mut().zip(spec.prototypes.row(c).iter()) {
                        *e += v;
                    }
                }
            }
            for (f, e) in ds.features.row(i).iter().zip(expect.iter()) {
                assert!((f - e).abs() < 1.5, "row {i} far from prototype sum");
            }
        }
    }

    #[test]
    fn identity_shift_preserves_the_spec() {
        let spec = toy_multi();
        let shifted = apply_shift(&spec, &ShiftSpec::identity()).unwrap();
        assert_eq!(spec, shifted);
    }

    #[test]
    fn label_subset_of_one_class_restricts_sampling() {
        let spec = toy_single(0.1);
        let mut shift = ShiftSpec::identity();
        shift.name = "only0".into();
        shift.label_subset = Some(vec![0]);
        let target = apply_shift(&spec, &shift).unwrap();
        let ds = generate_domain(&target, 100, 9).unwrap();
        for i in 0..100 {
            assert_eq!(ds.labels.get(i, 0), 1.0);
        }
        assert_eq!(target.name, "toy+only0");
    }

    #[test]
    fn affine_compose_matches_sequential_application() {
        let spec = toy_single(0.0);
        let s1 = ShiftSpec {
            name: "a".into(),
            covariate: CovariateShift {
                affine: Some(Affine::scale_offset(2, 0.5, 1.0)),
                added_noise: 0.0,
                feature_dropout: 0.0,
            },
            label_subset: None,
            prior_reweight: None,
            severity: 2,
        };
        let s2 = ShiftSpec {
            name: "b".into(),
            covariate: CovariateShift {
                affine: Some(Affine::scale_offset(2, 2.0, -0.5)),
                added_noise: 0.0,
                feature_dropout: 0.0,
            },
            label_subset: None,
            prior_reweight: None,
            severity: 2,
        };
        let once = apply_shift(&apply_shift(&spec, &s1).unwrap(), &s2).unwrap();
        // x -> 2(0.5x + 1) - 0.5 = x + 1.5.
        let ds = generate_domain(&once, 10, 4).unwrap();
        let base = generate_domain(&spec, 10, 4).unwrap();
        for i in 0..10 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    ds.features.get(i, j),
                    base.features.get(i, j) + 1.5,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn shift_validation_rejects_bad_subsets() {
        let spec = toy_single(0.1);
        let mut shift = ShiftSpec::identity();
        shift.label_subset = Some(vec![]);
        assert!(apply_shift(&spec, &shift).is_err());
        shift.label_subset = Some(vec![7]);
        assert!(apply_shift(&spec, &shift).is_err());
        let mut shift = ShiftSpec::identity();
        shift.severity = 6;
        assert!(apply_shift(&spec, &shift).is_err());
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let spec = toy_single(0.3);
        let ds = generate_domain(&spec, 200, 21).unwrap();
        let (adapt, test) = split_adapt_test(&ds, 0.75, 1).unwrap();
        assert_eq!(adapt.len() + test.len(), 200);
        // Union of rows equals the original dataset (both splits keep
        // original order, so merge-by-feature comparison suffices).
        let mut seen = vec![false; 200];
        for part in [&adapt, &test] {
            for i in 0..part.len() {
                let row = part.features.row(i);
                let pos = (0..200)
                    .find(|&j| !seen[j] && ds.features.row(j) == row)
                    .expect("row must come from the original");
                seen[pos] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
        // Stratification: per class, the adapt share matches 0.75 +- 1 row.
        for c in 0..2 {
            let total = (0..200).filter(|&i| ds.labels.get(i, c) == 1.0).count();
            let in_adapt = (0..adapt.len())
                .filter(|&i| adapt.labels.get(i, c) == 1.0)
                .count();
            let want = (total as f64 * 0.75).round() as usize;
            assert!(
                in_adapt == want,
                "class {c}: {in_adapt} of {total} in adapt, wanted {want}"
            );
        }
        assert!(matches!(split_adapt_test(&ds, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(split_adapt_test(&ds, 0.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = generate_domain(&toy_multi(), 80, 31).unwrap();
        let (a1, t1) = split_adapt_test(&ds, 0.75, 5).unwrap();
        let (a2, t2) = split_adapt_test(&ds, 0.75, 5).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
        let (a3, _) = split_adapt_test(&ds, 0.75, 6).unwrap();
        assert_ne!(a1.features.data(), a3.features.data());
    }

    #[test]
    fn single_label_filter_keeps_exactly_one_positive_rows() {
        let ds = generate_domain(&toy_multi(), 300, 41).unwrap();
        let filtered = filter_single_label(&ds).unwrap();
        let expect = (0..300)
            .filter(|&i| ds.labels.row(i).iter().filter(|&&v| v == 1.0).count() == 1)
            .count();
        assert_eq!(filtered.len(), expect);
        assert_eq!(filtered.task, TaskMode::SingleLabel);
        filtered.validate().unwrap();

        let single = generate_domain(&toy_single(0.1), 50, 42).unwrap();
        let same = filter_single_label(&single).unwrap();
        assert_eq!(same.features, single.features);
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&toy_multi(), 40, 51).unwrap();
        let prefix = dir.path().join("toym");
        ds.save(&prefix).unwrap();
        let back = LabeledDataset::load(&prefix).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn source_training_converges_on_separable_domain() {
        let spec = toy_single(0.2);
        let arch = default_arch(2, 2, 0.1);
        let model = train_source(&spec, 300, &arch, 30, 7).unwrap();
        assert!(model.train_fit >= 0.95);
        // Held-out accuracy beats chance comfortably.
        let held = generate_domain(&spec, 200, 99).unwrap();
        let probs = model.predict(&held.features).unwrap();
        let batch = EvalBatch::new(probs, held.labels, TaskMode::SingleLabel).unwrap();
        assert!(top1(&batch).unwrap() > 0.9);
    }

    #[test]
    fn source_training_is_seed_deterministic() {
        let spec = toy_single(0.2);
        let arch = default_arch(2, 2, 0.1);
        let a = train_source(&spec, 200, &arch, 20, 3).unwrap();
        let b = train_source(&spec, 200, &arch, 20, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a.net).unwrap(),
            serde_json::to_string(&b.net).unwrap()
        );
    }

    #[test]
    fn hopeless_training_budget_errors_with_advice() {
        let spec = toy_multi();
        let arch = default_arch(3, 3, 0.0);
        let err = train_source(&spec, 200, &arch, 0, 7).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("capacity or epochs")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_single(0.2);
        let model = train_source(&spec, 200, &default_arch(2, 2, 0.1), 20, 3).unwrap();
        let p1 = dir.path().join("m1.json");
        let p2 = dir.path().join("m2.json");
        model.save(&p1).unwrap();
        let back = SourceModel::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p1).unwrap(),
            std::fs::read_to_string(&p2).unwrap()
        );
    }

    #[test]
    fn standard_suite_has_targets_and_validation() {
        for task in [TaskMode::SingleLabel, TaskMode::MultiLabel] {
            let suite = standard_suite(task).unwrap();
            assert!(suite.targets.len() >= 3);
            assert_eq!(suite.source.task(), task);
            assert_eq!(suite.validation.task(), task);
            for t in &suite.targets {
                assert_eq!(t.class_count, suite.source.class_count);
                assert_ne!(t, &suite.source);
            }
        }
    }
}
