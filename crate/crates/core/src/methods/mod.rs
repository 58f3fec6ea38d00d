//! The adaptation method zoo.
//!
//! Every method is a uniform procedure `(source model, unlabelled adapt set,
//! config, seed) -> (adapted network, trajectory)`. The source model object
//! is never modified; adaptation always works on a copy. Test-split labels
//! are reachable only through [`Evaluator`], which hands out metric reports
//! rather than labels, so no gradient step or graph build can touch them by
//! construction.
//!
//! One run is sequential and deterministic: all randomness flows from the
//! run seed through fixed-purpose ChaCha streams (batch shuffling vs dropout
//! noise), so identical inputs reproduce identical networks bit for bit.

mod adapt;
mod grid;

pub use adapt::{
    adapt_adabn, adapt_dropout_student, adapt_dust, adapt_em, adapt_notela, adapt_pl,
    adapt_shot_lite, adapt_nrc_lite,
};
pub use grid::{method_grid, results_csv, run_grid, GridOutcome, ResultRow, ValidationBench};

use crate::bench::{LabeledDataset, SourceModel};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::metrics::{EvalBatch, MetricReport};
use crate::nn::{MicroNet, TrainableMask};
use crate::pseudo::SolverConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Method selector used for grid construction and dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Notela,
    DropoutStudent,
    Pl,
    Em,
    AdaBn,
    Dust,
    ShotLite,
    NrcLite,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Notela => "notela",
            MethodKind::DropoutStudent => "dropout_student",
            MethodKind::Pl => "pl",
            MethodKind::Em => "em",
            MethodKind::AdaBn => "adabn",
            MethodKind::Dust => "dust",
            MethodKind::ShotLite => "shot_lite",
            MethodKind::NrcLite => "nrc_lite",
        }
    }

    pub fn all() -> [MethodKind; 8] {
        [
            MethodKind::Notela,
            MethodKind::DropoutStudent,
            MethodKind::Pl,
            MethodKind::Em,
            MethodKind::AdaBn,
            MethodKind::Dust,
            MethodKind::ShotLite,
            MethodKind::NrcLite,
        ]
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Method-specific hyperparameters. Fields exist exactly for the method they
/// belong to; the variant IS the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    /// Laplacian-adjusted teacher with a mutual k-NN graph over features.
    Notela { solver: SolverConfig, k: usize },
    /// The lambda = 0 special case: same loop, no graph term.
    DropoutStudent { solver: SolverConfig },
    /// Hard pseudo-labels above a confidence threshold.
    Pl { threshold: f64 },
    /// Prediction-entropy minimization through the normalization layers.
    Em,
    /// Batch-norm statistic recomputation, no gradient steps.
    AdaBn,
    /// Consistency-filtered pseudo-labelling via repeated noisy passes.
    Dust { passes: usize, kl_quantile: f64 },
    /// Information maximization plus nearest-centroid labels, head frozen.
    ShotLite { beta: f64 },
    /// Neighbourhood-affinity alignment with reciprocal weighting.
    NrcLite {
        k: usize,
        extended_k: usize,
        base_affinity: f64,
    },
}

impl MethodSpec {
    pub fn kind(&self) -> MethodKind {
        match self {
            MethodSpec::Notela { .. } => MethodKind::Notela,
            MethodSpec::DropoutStudent { .. } => MethodKind::DropoutStudent,
            MethodSpec::Pl { .. } => MethodKind::Pl,
            MethodSpec::Em => MethodKind::Em,
            MethodSpec::AdaBn => MethodKind::AdaBn,
            MethodSpec::Dust { .. } => MethodKind::Dust,
            MethodSpec::ShotLite { .. } => MethodKind::ShotLite,
            MethodSpec::NrcLite { .. } => MethodKind::NrcLite,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MethodSpec::Notela { solver, k } => {
                solver.validate()?;
                if *k == 0 {
                    return Err(Error::config("graph neighbour count k must be at least 1"));
                }
            }
            MethodSpec::DropoutStudent { solver } => {
                solver.validate()?;
                if solver.lambda != 0.0 {
                    return Err(Error::config(format!(
                        "dropout student is the lambda = 0 method; got lambda {}",
                        solver.lambda
                    )));
                }
            }
            MethodSpec::Pl { threshold } => {
                if !(0.0..1.0).contains(threshold) {
                    return Err(Error::range(format!(
                        "confidence threshold must lie in [0, 1), got {threshold}"
                    )));
                }
            }
            MethodSpec::Em | MethodSpec::AdaBn => {}
            MethodSpec::Dust { passes, kl_quantile } => {
                if *passes < 2 {
                    return Err(Error::config(format!(
                        "consistency needs at least 2 stochastic passes, got {passes}"
                    )));
                }
                if !(0.0..=1.0).contains(kl_quantile) {
                    return Err(Error::range(format!(
                        "KL quantile must lie in [0, 1], got {kl_quantile}"
                    )));
                }
            }
            MethodSpec::ShotLite { beta } => {
                if !(beta.is_finite() && *beta >= 0.0) {
                    return Err(Error::config(format!(
                        "pseudo-label weight beta must be finite and >= 0, got {beta}"
                    )));
                }
            }
            MethodSpec::NrcLite {
                k,
                extended_k,
                base_affinity,
            } => {
                if *k == 0 || *extended_k == 0 {
                    return Err(Error::config(
                        "neighbour counts k and extended_k must be at least 1",
                    ));
                }
                if !(base_affinity.is_finite() && *base_affinity > 0.0 && *base_affinity <= 1.0) {
                    return Err(Error::config(format!(
                        "base affinity must lie in (0, 1], got {base_affinity}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Knobs shared by every method (the "All" rows of the tuning grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub trainable: TrainableMask,
    pub use_dropout: bool,
    /// Keep the source's running batch-norm statistics frozen during steps;
    /// otherwise batch statistics drive normalization and the running
    /// estimates track them.
    pub use_source_bn_stats: bool,
    pub cosine_decay: bool,
}

impl CommonConfig {
    pub fn new(lr: f64, epochs: usize) -> Self {
        CommonConfig {
            lr,
            epochs,
            batch_size: 64,
            trainable: TrainableMask::All,
            use_dropout: true,
            use_source_bn_stats: false,
            cosine_decay: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be finite and > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Full description of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub common: CommonConfig,
    pub spec: MethodSpec,
}

impl MethodConfig {
    pub fn new(common: CommonConfig, spec: MethodSpec) -> Result<Self> {
        let cfg = MethodConfig { common, spec };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.common.validate()?;
        self.spec.validate()?;
        if self.spec.kind() == MethodKind::AdaBn && self.common.epochs > 1 {
            return Err(Error::config(
                "statistic recomputation is a one-shot procedure; epochs must be 0 or 1",
            ));
        }
        Ok(())
    }

    pub fn kind(&self) -> MethodKind {
        self.spec.kind()
    }

    /// Stable short hash of the full configuration, used to key results
    /// tables.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
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

/// Features without labels: the only view of the adaptation split that
/// methods receive, so label leakage into training is a type error.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: DenseMatrix,
}

impl UnlabeledSet {
    pub fn new(features: DenseMatrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::data("adaptation set must be non-empty"));
        }
        features.check_finite("adaptation features")?;
        Ok(UnlabeledSet { features })
    }

    /// Strip the labels off a dataset.
    pub fn from_dataset(ds: &LabeledDataset) -> Result<Self> {
        UnlabeledSet::new(ds.features.clone())
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Holds the labelled test split and answers evaluation queries about a
/// network. Methods can obtain metric reports from it but never the labels
/// themselves.
#[derive(Debug, Clone)]
pub struct Evaluator {
    features: DenseMatrix,
    labels: DenseMatrix,
    task: crate::TaskMode,
    min_positives: usize,
}

impl Evaluator {
    pub fn from_dataset(ds: &LabeledDataset, min_positives: usize) -> Result<Self> {
        ds.validate()?;
        if ds.is_empty() {
            return Err(Error::data("test split must be non-empty"));
        }
        Ok(Evaluator {
            features: ds.features.clone(),
            labels: ds.labels.clone(),
            task: ds.task,
            min_positives,
        })
    }

    pub fn task(&self) -> crate::TaskMode {
        self.task
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Clean forward with running statistics, then the full metric suite.
    pub fn evaluate(&self, net: &MicroNet) -> Result<MetricReport> {
        let probs = net.predict(&self.features, self.task)?;
        let batch = EvalBatch::new(probs.clone(), self.labels.clone(), self.task)?;
        MetricReport::compute(&batch, &probs, self.min_positives)
    }
}

/// One trajectory entry. Epoch 0 is the source snapshot; its loss is `None`,
/// as is the loss of methods that take no gradient steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub adapt_loss: Option<f64>,
    pub report: MetricReport,
}

/// Per-epoch record of an adaptation run: epochs + 1 points, contiguous
/// epoch indices starting at 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationTrajectory {
    pub method: String,
    pub points: Vec<TrajectoryPoint>,
}

impl AdaptationTrajectory {
    fn new(method: &str) -> Self {
        AdaptationTrajectory {
            method: method.to_string(),
            points: Vec::new(),
        }
    }

    pub fn final_report(&self) -> &MetricReport {
        &self
            .points
            .last()
            .expect("a trajectory always holds the epoch-0 snapshot")
            .report
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Run any method per its config. The source model is copied, never touched.
pub fn adapt(
    src: &SourceModel,
    adapt_set: &UnlabeledSet,
    cfg: &MethodConfig,
    evaluator: &Evaluator,
    seed: u64,
) -> Result<(MicroNet, AdaptationTrajectory)> {
    match cfg.kind() {
        MethodKind::Notela => adapt_notela(src, adapt_set, cfg, evaluator, seed),
        MethodKind::DropoutStudent => adapt_dropout_student(src, adapt_set, cfg, evaluator, seed),
        MethodKind::Pl => adapt_pl(src, adapt_set, cfg, evaluator, seed),
        MethodKind::Em => adapt_em(src, adapt_set, cfg, evaluator, seed),
        MethodKind::AdaBn => adapt_adabn(src, adapt_set, cfg, evaluator, seed),
        MethodKind::Dust => adapt_dust(src, adapt_set, cfg, evaluator, seed),
        MethodKind::ShotLite => adapt_shot_lite(src, adapt_set, cfg, evaluator, seed),
        MethodKind::NrcLite => adapt_nrc_lite(src, adapt_set, cfg, evaluator, seed),
    }
}
