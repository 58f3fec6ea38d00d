//! Hyperparameter grids and the tuning harness.
//!
//! The grid for each method is the Cartesian product of the shared axes
//! (learning rate, trainable parameters, dropout, source statistics, cosine
//! decay) with the method's own axes. Selection runs every configuration
//! over every seed on a validation bench and keeps the best final-epoch
//! validation score: mean average precision for multi-label tasks, top-1
//! accuracy for single-label ones. Subset selection is slicing: the grid is
//! an ordinary vector and the runner takes any subset of it.

use crate::bench::SourceModel;
use crate::error::{Error, Result};
use crate::methods::{
    adapt, AdaptationTrajectory, CommonConfig, Evaluator, MethodConfig, MethodKind, MethodSpec,
    UnlabeledSet,
};
use crate::metrics::MetricReport;
use crate::nn::TrainableMask;
use crate::pseudo::{SolverConfig, UpdateFrequency};
use crate::TaskMode;
use serde::{Deserialize, Serialize};

/// Everything a tuning run needs from the held-out validation domain: the
/// pre-trained source model, the unlabelled adaptation split, and an
/// evaluator over the labelled remainder.
#[derive(Debug, Clone)]
pub struct ValidationBench {
    pub source: SourceModel,
    pub adapt: UnlabeledSet,
    pub evaluator: Evaluator,
    pub domain: String,
}

impl ValidationBench {
    pub fn new(
        source: SourceModel,
        adapt: UnlabeledSet,
        evaluator: Evaluator,
        domain: impl Into<String>,
    ) -> Result<Self> {
        if evaluator.task() != source.task {
            return Err(Error::config(format!(
                "evaluator task {} does not match source task {}",
                evaluator.task(),
                source.task
            )));
        }
        if source.net.in_dim() != adapt.features().cols() {
            return Err(Error::shape(format!(
                "source model expects {} features, adaptation split has {}",
                source.net.in_dim(),
                adapt.features().cols()
            )));
        }
        Ok(ValidationBench {
            source,
            adapt,
            evaluator,
            domain: domain.into(),
        })
    }
}

/// One line of the persisted results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub domain: String,
    pub split: String,
    pub epoch: usize,
    pub map: f64,
    pub cmap: f64,
    /// Single-label only; empty in the CSV otherwise.
    pub top1: Option<f64>,
    pub mean_max_conf: f64,
}

/// Flatten a trajectory into result rows, one per recorded epoch.
pub fn rows_from_trajectory(
    traj: &AdaptationTrajectory,
    config_hash: &str,
    seed: u64,
    domain: &str,
    split: &str,
) -> Vec<ResultRow> {
    traj.points
        .iter()
        .map(|p| ResultRow {
            method: traj.method.clone(),
            config_hash: config_hash.to_string(),
            seed,
            domain: domain.to_string(),
            split: split.to_string(),
            epoch: p.epoch,
            map: p.report.map,
            cmap: p.report.cmap,
            top1: p.report.top1,
            mean_max_conf: p.report.mean_max_conf,
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Serialize rows to CSV with the canonical column set. Floats print in
/// shortest round-trip form, so identical runs produce identical bytes.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out =
        String::from("method,config_hash,seed,domain,split,epoch,map,cmap,top1,mean_max_conf\n");
    for r in rows {
        let top1 = r.top1.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.method),
            r.config_hash,
            r.seed,
            csv_field(&r.domain),
            csv_field(&r.split),
            r.epoch,
            r.map,
            r.cmap,
            top1,
            r.mean_max_conf
        ));
    }
    out
}

/// Outcome of a grid search: the winning configuration, its mean validation
/// score, and every row produced along the way.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: MethodConfig,
    pub best_score: f64,
    pub rows: Vec<ResultRow>,
}

fn selection_score(report: &MetricReport, task: TaskMode) -> f64 {
    match task {
        TaskMode::MultiLabel => report.map,
        TaskMode::SingleLabel => report.top1.expect("single-label reports always carry top-1"),
    }
}

/// Tune one method: run every configuration with every seed on the
/// validation bench and pick the configuration with the best final-epoch
/// score averaged over seeds. Ties keep the earliest configuration, so the
/// result is a pure function of the inputs.
pub fn run_grid(
    configs: &[MethodConfig],
    bench: &ValidationBench,
    seeds: &[u64],
) -> Result<GridOutcome> {
    if configs.is_empty() {
        return Err(Error::config("hyperparameter grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::config("grid search needs at least one seed"));
    }
    let kind = configs[0].kind();
    if let Some(other) = configs.iter().find(|c| c.kind() != kind) {
        return Err(Error::config(format!(
            "grid mixes methods {kind} and {}; tune one method at a time",
            other.kind()
        )));
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (ci, cfg) in configs.iter().enumerate() {
        let hash = cfg.hash();
        let mut score_sum = 0.0;
        for &seed in seeds {
            let (_, traj) = adapt(&bench.source, &bench.adapt, cfg, &bench.evaluator, seed)?;
            score_sum += selection_score(traj.final_report(), bench.evaluator.task());
            rows.extend(rows_from_trajectory(&traj, &hash, seed, &bench.domain, "valid"));
        }
        let score = score_sum / seeds.len() as f64;
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((ci, score));
        }
    }
    let (ci, best_score) = best.expect("non-empty grid always yields a best");
    Ok(GridOutcome {
        best: configs[ci].clone(),
        best_score,
        rows,
    })
}

const LRS: [f64; 3] = [1e-5, 1e-4, 1e-3];
const MASKS: [TrainableMask; 2] = [TrainableMask::BatchNormOnly, TrainableMask::All];
const FLAGS: [bool; 2] = [true, false];

fn solver_grid(lambdas_follow_alpha: bool) -> Vec<SolverConfig> {
    let mut out = Vec::new();
    for &alpha in &[0.1, 1.0] {
        for freq in [UpdateFrequency::EveryIteration, UpdateFrequency::EveryEpoch] {
            let lambda = if lambdas_follow_alpha { alpha } else { 0.0 };
            let mut solver = SolverConfig::new(alpha, lambda).expect("grid constants are valid");
            solver.update_frequency = freq;
            out.push(solver);
        }
    }
    out
}

fn specs_for(kind: MethodKind) -> Vec<MethodSpec> {
    match kind {
        MethodKind::Notela => {
            let mut out = Vec::new();
            for &k in &[5usize, 10, 15] {
                for solver in solver_grid(true) {
                    out.push(MethodSpec::Notela { solver, k });
                }
            }
            out
        }
        MethodKind::DropoutStudent => solver_grid(false)
            .into_iter()
            .map(|solver| MethodSpec::DropoutStudent { solver })
            .collect(),
        MethodKind::Pl => [0.0, 0.5, 0.9, 0.95]
            .iter()
            .map(|&threshold| MethodSpec::Pl { threshold })
            .collect(),
        MethodKind::Em => vec![MethodSpec::Em],
        MethodKind::AdaBn => vec![MethodSpec::AdaBn],
        MethodKind::Dust => {
            let mut out = Vec::new();
            for &passes in &[2usize, 3, 4] {
                for &kl_quantile in &[0.8, 0.9, 0.99] {
                    out.push(MethodSpec::Dust { passes, kl_quantile });
                }
            }
            out
        }
        MethodKind::ShotLite => [0.0, 0.3, 0.6, 0.9]
            .iter()
            .map(|&beta| MethodSpec::ShotLite { beta })
            .collect(),
        MethodKind::NrcLite => {
            let mut out = Vec::new();
            for &k in &[5usize, 10, 15] {
                for &extended_k in &[5usize, 10, 15] {
                    for &base_affinity in &[0.1, 0.2] {
                        out.push(MethodSpec::NrcLite { k, extended_k, base_affinity });
                    }
                }
            }
            out
        }
    }
}

/// The full tuning grid for one method at a fixed epoch budget.
///
/// Axes without meaning for a method are dropped rather than multiplied
/// out: entropy minimization always trains the normalization parameters on
/// batch statistics, and statistic recomputation takes no gradient steps at
/// all, so each appears exactly once per remaining combination.
pub fn method_grid(kind: MethodKind, epochs: usize) -> Vec<MethodConfig> {
    let mut out = Vec::new();
    if kind == MethodKind::AdaBn {
        let mut common = CommonConfig::new(1e-4, epochs.min(1));
        common.use_dropout = false;
        let cfg = MethodConfig::new(common, MethodSpec::AdaBn)
            .expect("grid entries are valid by construction");
        return vec![cfg];
    }
    for &lr in &LRS {
        let masks: &[TrainableMask] = if kind == MethodKind::Em {
            &[TrainableMask::BatchNormOnly]
        } else {
            &MASKS
        };
        for &trainable in masks {
            for &use_dropout in &FLAGS {
                let bn_flags: &[bool] = if kind == MethodKind::Em { &[false] } else { &FLAGS };
                for &use_source_bn_stats in bn_flags {
                    for &cosine_decay in &FLAGS {
                        for spec in specs_for(kind) {
                            let common = CommonConfig {
                                lr,
                                epochs,
                                batch_size: 64,
                                trainable,
                                use_dropout,
                                use_source_bn_stats,
                                cosine_decay,
                            };
                            out.push(
                                MethodConfig::new(common, spec)
                                    .expect("grid entries are valid by construction"),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}
