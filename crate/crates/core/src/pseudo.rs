//! The teacher: Laplacian-adjusted pseudo-label solver.
//!
//! Given model probabilities `p` and a mutual k-NN affinity graph `w`, the
//! teacher minimizes, over label distributions `y` on the simplex,
//!
//! ```text
//! (1/N) sum_i [ -y_i . log p_i + alpha * y_i . log y_i ]
//!   - (lambda/N) sum_{i,j} w_ij y_i . y_j
//! ```
//!
//! The linearized problem has the closed form
//! `y_i ∝ p_i^{1/alpha} ⊙ exp((lambda/alpha) sum_j w_ij p_j)`; unrolling the
//! concave-convex procedure repeats that update with the previous iterate in
//! the exponent. Multi-label mode applies the same formula independently per
//! class to each Bernoulli pair `[p, 1-p]`.
//!
//! All products are evaluated in log domain with per-row max subtraction;
//! probabilities are floored at 1e-12 before logs so saturated logistic
//! outputs cannot produce infinities.

use crate::error::{Error, Result};
use crate::knn::MutualKnnGraph;
use crate::matrix::DenseMatrix;
use crate::nn::sigmoid;
use crate::TaskMode;
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// How often the outer adaptation loop refreshes pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateFrequency {
    EveryIteration,
    EveryEpoch,
}

/// Per-sample label distributions.
///
/// Single-label: each row lives on the C-simplex. Multi-label: each entry is
/// a positive-class probability in `[0, 1]`, implicitly paired with its
/// complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBlock {
    task: TaskMode,
    values: DenseMatrix,
}

impl PseudoLabelBlock {
    pub fn new(values: DenseMatrix, task: TaskMode) -> Result<Self> {
        values.check_finite("label distributions")?;
        match task {
            TaskMode::SingleLabel => {
                for (i, row) in values.iter_rows().enumerate() {
                    if row.iter().any(|&v| v < 0.0) {
                        return Err(Error::data(format!("row {i} has a negative entry")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::data(format!(
                            "row {i} sums to {sum}, expected 1 within 1e-9"
                        )));
                    }
                }
            }
            TaskMode::MultiLabel => {
                if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::data(format!("entry {v} outside [0, 1]")));
                }
            }
        }
        Ok(PseudoLabelBlock { task, values })
    }

    /// Maximally soft block: uniform rows (single-label) or 0.5 everywhere
    /// (multi-label). Used where an operation needs target shape and task but
    /// ignores the values, e.g. entropy minimization.
    pub fn uniform(n: usize, c: usize, task: TaskMode) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(Error::data("uniform block needs positive dimensions"));
        }
        let fill = match task {
            TaskMode::SingleLabel => 1.0 / c as f64,
            TaskMode::MultiLabel => 0.5,
        };
        let values = DenseMatrix::from_vec(n, c, vec![fill; n * c])?;
        PseudoLabelBlock::new(values, task)
    }

    pub fn task(&self) -> TaskMode {
        self.task
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        Ok(PseudoLabelBlock {
            task: self.task,
            values: self.values.select_rows(indices)?,
        })
    }

    /// Mean over samples of the maximum class probability (single-label) or
    /// the maximum positive-class probability (multi-label).
    pub fn mean_max_confidence(&self) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .values
            .iter_rows()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        sum / self.rows() as f64
    }
}

/// Teacher-solver parameters.
///
/// The experiments tie `lambda = alpha` by default; construction helpers in
/// the methods layer apply that tie, here both are free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Softness weight, > 0. Small alpha sharpens `p^{1/alpha}` toward hard
    /// labels.
    pub alpha: f64,
    /// Laplacian weight, >= 0.
    pub lambda: f64,
    /// CCP iteration cap, >= 1. The headline method uses exactly 1.
    pub ccp_iterations: usize,
    /// Early-stop threshold on the max per-entry change between iterates.
    pub ccp_tolerance: f64,
    pub update_frequency: UpdateFrequency,
}

impl SolverConfig {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        let cfg = SolverConfig {
            alpha,
            lambda,
            ccp_iterations: 1,
            ccp_tolerance: 1e-10,
            update_frequency: UpdateFrequency::EveryEpoch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be finite and > 0, got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.ccp_iterations == 0 {
            return Err(Error::config("ccp_iterations must be at least 1"));
        }
        if !(self.ccp_tolerance.is_finite() && self.ccp_tolerance > 0.0) {
            return Err(Error::config(format!(
                "ccp_tolerance must be finite and > 0, got {}",
                self.ccp_tolerance
            )));
        }
        Ok(())
    }

    pub fn with_iterations(mut self, iterations: usize, tolerance: f64) -> Result<Self> {
        self.ccp_iterations = iterations;
        self.ccp_tolerance = tolerance;
        self.validate()?;
        Ok(self)
    }
}

fn check_solver_inputs(
    probs: &PseudoLabelBlock,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<()> {
    cfg.validate()?;
    if graph.n() != probs.rows() {
        return Err(Error::shape(format!(
            "graph has {} nodes, probabilities have {} rows",
            graph.n(),
            probs.rows()
        )));
    }
    Ok(())
}

/// One closed-form update with `current` in the exponent:
/// `y ∝ p^{1/alpha} ⊙ exp((lambda/alpha) W·current)`.
fn closed_form_update(
    probs: &PseudoLabelBlock,
    current: &DenseMatrix,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<DenseMatrix> {
    let p = probs.values();
    let n = p.rows();
    let c = p.cols();
    let inv_alpha = 1.0 / cfg.alpha;
    let ratio = cfg.lambda / cfg.alpha;
    let mut out = DenseMatrix::zeros(n, c);
    match probs.task() {
        TaskMode::SingleLabel => {
            let smooth = if cfg.lambda > 0.0 {
                Some(graph.weighted_sums(current)?)
            } else {
                None
            };
            for i in 0..n {
                let pi = p.row(i);
                let oi = out.row_mut(i);
                for j in 0..c {
                    let mut l = inv_alpha * pi[j].max(PROB_FLOOR).ln();
                    if let Some(s) = &smooth {
                        l += ratio * s.get(i, j);
                    }
                    oi[j] = l;
                }
                let max = oi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in oi.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in oi.iter_mut() {
                    *v /= sum;
                }
            }
        }
        TaskMode::MultiLabel => {
            let (s_pos, s_neg) = if cfg.lambda > 0.0 {
                let pos = graph.weighted_sums(current)?;
                let neg = graph.weighted_sums(&current.map(|v| 1.0 - v))?;
                (Some(pos), Some(neg))
            } else {
                (None, None)
            };
            for i in 0..n {
                for j in 0..c {
                    let sp = p.get(i, j);
                    let mut l1 = inv_alpha * sp.max(PROB_FLOOR).ln();
                    let mut l0 = inv_alpha * (1.0 - sp).max(PROB_FLOOR).ln();
                    if let (Some(pos), Some(neg)) = (&s_pos, &s_neg) {
                        l1 += ratio * pos.get(i, j);
                        l0 += ratio * neg.get(i, j);
                    }
                    out.set(i, j, sigmoid(l1 - l0));
                }
            }
        }
    }
    Ok(out)
}

/// One Laplacian-adjusted teacher update:
/// `y_i ∝ p_i^{1/alpha} ⊙ exp((lambda/alpha) sum_j w_ij p_j)`, normalized
/// per row (single-label) or per Bernoulli pair (multi-label).
pub fn teacher_step(
    probs: &PseudoLabelBlock,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<PseudoLabelBlock> {
    check_solver_inputs(probs, graph, cfg)?;
    let values = closed_form_update(probs, probs.values(), graph, cfg)?;
    PseudoLabelBlock::new(values, probs.task())
}

/// Result of an unrolled CCP run.
#[derive(Debug, Clone)]
pub struct CcpTrace {
    pub labels: PseudoLabelBlock,
    /// Objective at `y^(0) = p` followed by the objective after each
    /// performed iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

/// Unrolled CCP: iterate `y^(t) ∝ p^{1/alpha} ⊙ exp((lambda/alpha) W·y^(t-1))`
/// from `y^(0) = p`, stopping at the iteration cap or when the max per-entry
/// change drops below `cfg.ccp_tolerance`. One iteration reproduces
/// [`teacher_step`] exactly.
pub fn ccp_solve(
    probs: &PseudoLabelBlock,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<PseudoLabelBlock> {
    Ok(ccp_solve_traced(probs, graph, cfg)?.labels)
}

/// [`ccp_solve`] with the objective trajectory retained.
pub fn ccp_solve_traced(
    probs: &PseudoLabelBlock,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<CcpTrace> {
    check_solver_inputs(probs, graph, cfg)?;
    let mut current = probs.clone();
    let mut objectives = vec![objective_value(&current, probs, graph, cfg)?];
    let mut iterations = 0;
    for _ in 0..cfg.ccp_iterations {
        let next = closed_form_update(probs, current.values(), graph, cfg)?;
        let delta = next.max_abs_diff(current.values())?;
        current = PseudoLabelBlock::new(next, probs.task())?;
        objectives.push(objective_value(&current, probs, graph, cfg)?);
        iterations += 1;
        if delta < cfg.ccp_tolerance {
            break;
        }
    }
    Ok(CcpTrace {
        labels: current,
        objectives,
        iterations,
    })
}

/// The teacher objective
/// `(1/N) sum_i [-y_i.log p_i + alpha y_i.log y_i] - (lambda/N) sum_{ij} w_ij y_i.y_j`,
/// with `0 log 0 := 0`. Multi-label sums the three terms over the C Bernoulli
/// pairs per sample.
pub fn objective_value(
    labels: &PseudoLabelBlock,
    probs: &PseudoLabelBlock,
    graph: &MutualKnnGraph,
    cfg: &SolverConfig,
) -> Result<f64> {
    cfg.validate()?;
    if labels.task() != probs.task() {
        return Err(Error::config("labels and probabilities disagree on task mode"));
    }
    if labels.rows() != probs.rows() || labels.cols() != probs.cols() {
        return Err(Error::shape(format!(
            "labels are {}x{}, probabilities are {}x{}",
            labels.rows(),
            labels.cols(),
            probs.rows(),
            probs.cols()
        )));
    }
    if graph.n() != labels.rows() {
        return Err(Error::shape(format!(
            "graph has {} nodes, labels have {} rows",
            graph.n(),
            labels.rows()
        )));
    }
    let n = labels.rows() as f64;
    let y = labels.values();
    let p = probs.values();
    let xlogy = |a: f64, b: f64| if a > 0.0 { a * b.max(PROB_FLOOR).ln() } else { 0.0 };
    let mut pointwise = 0.0;
    let mut quad = 0.0;
    match labels.task() {
        TaskMode::SingleLabel => {
            for i in 0..y.rows() {
                let yi = y.row(i);
                let pi = p.row(i);
                for j in 0..y.cols() {
                    pointwise += -xlogy(yi[j], pi[j]) + cfg.alpha * xlogy(yi[j], yi[j]);
                }
            }
            if cfg.lambda > 0.0 {
                let wy = graph.weighted_sums(y)?;
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let wi = wy.row(i);
                    for j in 0..y.cols() {
                        quad += yi[j] * wi[j];
                    }
                }
            }
        }
        TaskMode::MultiLabel => {
            for i in 0..y.rows() {
                for j in 0..y.cols() {
                    let yv = y.get(i, j);
                    let pv = p.get(i, j);
                    pointwise += -xlogy(yv, pv) - xlogy(1.0 - yv, 1.0 - pv)
                        + cfg.alpha * (xlogy(yv, yv) + xlogy(1.0 - yv, 1.0 - yv));
                }
            }
            if cfg.lambda > 0.0 {
                let wy_pos = graph.weighted_sums(y)?;
                let neg = y.map(|v| 1.0 - v);
                let wy_neg = graph.weighted_sums(&neg)?;
                for i in 0..y.rows() {
                    for j in 0..y.cols() {
                        quad += y.get(i, j) * wy_pos.get(i, j)
                            + neg.get(i, j) * wy_neg.get(i, j);
                    }
                }
            }
        }
    }
    Ok(pointwise / n - cfg.lambda * quad / n)
}

/// Boolean keep-mask over a batch: one column for per-sample masks, C
/// columns for per-(sample, class)-pair masks. Single-column masks broadcast
/// across classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if cols == 0 || keep.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask of {} entries does not fill {rows}x{cols}",
                keep.len()
            )));
        }
        Ok(KeepMask { rows, cols, keep })
    }

    pub fn all_kept(rows: usize, cols: usize) -> Self {
        KeepMask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Whether unit (i, j) is kept; single-column masks broadcast over j.
    pub fn kept(&self, i: usize, j: usize) -> bool {
        if self.cols == 1 {
            self.keep[i]
        } else {
            self.keep[i * self.cols + j]
        }
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    /// Rows with at least one kept unit.
    pub fn kept_row_count(&self) -> usize {
        (0..self.rows)
            .filter(|&i| (0..self.cols).any(|j| self.keep[i * self.cols + j]))
            .count()
    }

    pub fn any(&self) -> bool {
        self.keep.iter().any(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

/// Hard pseudo-labels with a confidence keep-mask.
///
/// Single-label: one-hot at the argmax (ties to the lowest class index), the
/// sample kept iff its max probability reaches `threshold`. Multi-label: per
/// class, label 1 iff `p >= 0.5`, the pair kept iff `max(p, 1-p)` reaches
/// `threshold`.
pub fn hard_labels(
    probs: &PseudoLabelBlock,
    threshold: f64,
) -> Result<(PseudoLabelBlock, KeepMask)> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::range(format!(
            "confidence threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let v = probs.values();
    let (n, c) = (v.rows(), v.cols());
    let mut hard = DenseMatrix::zeros(n, c);
    match probs.task() {
        TaskMode::SingleLabel => {
            let mut keep = Vec::with_capacity(n);
            for i in 0..n {
                let row = v.row(i);
                let mut best = 0usize;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                hard.set(i, best, 1.0);
                keep.push(row[best] >= threshold);
            }
            Ok((
                PseudoLabelBlock::new(hard, TaskMode::SingleLabel)?,
                KeepMask::from_vec(n, 1, keep)?,
            ))
        }
        TaskMode::MultiLabel => {
            let mut keep = Vec::with_capacity(n * c);
            for i in 0..n {
                for j in 0..c {
                    let p = v.get(i, j);
                    if p >= 0.5 {
                        hard.set(i, j, 1.0);
                    }
                    keep.push(p.max(1.0 - p) >= threshold);
                }
            }
            Ok((
                PseudoLabelBlock::new(hard, TaskMode::MultiLabel)?,
                KeepMask::from_vec(n, c, keep)?,
            ))
        }
    }
}
