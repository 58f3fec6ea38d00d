//! Losses, backpropagation and SGD steps for [`MicroNet`].
//!
//! Four loss families share one backward pass: supervised cross-entropy (the
//! student update against soft or hard pseudo-labels), entropy minimization
//! (no targets), and a dot-product alignment loss against externally built
//! target distributions. Gradients are exact, including the full batch-mode
//! batch-norm backward; finite-difference tests pin every path.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{BnSource, ForwardMode, ForwardTrace, Layer, MicroNet, TrainableMask, BN_EPS};
use crate::pseudo::{KeepMask, PseudoLabelBlock};
use crate::TaskMode;
use rand_chacha::ChaCha8Rng;

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy against a target distribution (single-label).
    CrossEntropy,
    /// Per-class Bernoulli cross-entropy against target marginals
    /// (multi-label).
    BinaryCrossEntropy,
    /// Entropy of the model's own prediction; targets are ignored apart from
    /// their task mode.
    EntropyMin,
    /// Negative dot product between the prediction and a target
    /// distribution.
    DotProduct,
}

/// Per-layer parameter gradients, aligned with `MicroNet::layers`.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense { dweight: DenseMatrix, dbias: Vec<f64> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

/// Cosine learning-rate decay from `base_lr` (step 0) to zero (`step ==
/// total_steps`).
pub fn cosine_decay(base_lr: f64, step: usize, total_steps: usize) -> Result<f64> {
    if !(base_lr.is_finite() && base_lr >= 0.0) {
        return Err(Error::config(format!("base learning rate must be finite and non-negative, got {base_lr}")));
    }
    if total_steps == 0 {
        return Err(Error::config("cosine decay needs a positive total step count"));
    }
    if step > total_steps {
        return Err(Error::range(format!("step {step} exceeds total steps {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

fn check_loss_inputs(
    net: &MicroNet,
    batch: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    keep: Option<&KeepMask>,
) -> Result<()> {
    if targets.values().rows() != batch.rows() || targets.values().cols() != net.out_dim() {
        return Err(Error::shape(format!(
            "targets are {}x{}, expected {}x{}",
            targets.values().rows(),
            targets.values().cols(),
            batch.rows(),
            net.out_dim()
        )));
    }
    match loss {
        LossKind::CrossEntropy if targets.task() != TaskMode::SingleLabel => {
            return Err(Error::config("cross-entropy requires single-label targets"));
        }
        LossKind::BinaryCrossEntropy if targets.task() != TaskMode::MultiLabel => {
            return Err(Error::config("binary cross-entropy requires multi-label targets"));
        }
        _ => {}
    }
    if let Some(mask) = keep {
        if mask.rows() != batch.rows() {
            return Err(Error::shape(format!(
                "keep mask covers {} rows, batch has {}",
                mask.rows(),
                batch.rows()
            )));
        }
        if mask.cols() != 1 && mask.cols() != net.out_dim() {
            return Err(Error::shape(format!(
                "keep mask must have 1 or {} columns, got {}",
                net.out_dim(),
                mask.cols()
            )));
        }
    }
    Ok(())
}

/// Loss value and gradient with respect to the logits.
///
/// Dropped units (per the keep mask) contribute neither loss nor gradient;
/// the normalizer is the number of rows with at least one kept unit, so the
/// kept subset behaves as if it were the whole batch. Returns `None` when
/// nothing is kept.
pub(crate) fn loss_and_logit_grad(
    logits: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    keep: Option<&KeepMask>,
) -> Result<Option<(f64, DenseMatrix)>> {
    let n = logits.rows();
    let c = logits.cols();
    let kept = |i: usize, j: usize| keep.map_or(true, |m| m.kept(i, j));
    let mut contributing = 0usize;
    for i in 0..n {
        if (0..c).any(|j| kept(i, j)) {
            contributing += 1;
        }
    }
    if contributing == 0 {
        return Ok(None);
    }
    let norm = contributing as f64;
    let task = targets.task();
    let t = targets.values();
    let mut total = 0.0;
    let mut dz = DenseMatrix::zeros(n, c);

    match (loss, task) {
        (LossKind::CrossEntropy, _) => {
            for i in 0..n {
                if !kept(i, 0) {
                    continue;
                }
                let z = logits.row(i);
                let (logp, p) = log_softmax_row(z);
                let mut row_loss = 0.0;
                for j in 0..c {
                    row_loss -= t.get(i, j) * logp[j];
                }
                total += row_loss;
                let d = dz.row_mut(i);
                for j in 0..c {
                    d[j] = (p[j] - t.get(i, j)) / norm;
                }
            }
        }
        (LossKind::BinaryCrossEntropy, _) => {
            for i in 0..n {
                for j in 0..c {
                    if !kept(i, j) {
                        continue;
                    }
                    let z = logits.get(i, j);
                    let y = t.get(i, j);
                    total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
                    dz.set(i, j, (crate::nn::sigmoid(z) - y) / norm);
                }
            }
        }
        (LossKind::EntropyMin, TaskMode::SingleLabel) => {
            for i in 0..n {
                if !kept(i, 0) {
                    continue;
                }
                let z = logits.row(i);
                let (logp, p) = log_softmax_row(z);
                let mut h = 0.0;
                for j in 0..c {
                    if p[j] > 0.0 {
                        h -= p[j] * logp[j];
                    }
                }
                total += h;
                let d = dz.row_mut(i);
                for j in 0..c {
                    let lp = if p[j] > 0.0 { logp[j] } else { 0.0 };
                    d[j] = -p[j] * (lp + h) / norm;
                }
            }
        }
        (LossKind::EntropyMin, TaskMode::MultiLabel) => {
            for i in 0..n {
                for j in 0..c {
                    if !kept(i, j) {
                        continue;
                    }
                    let z = logits.get(i, j);
                    let s = crate::nn::sigmoid(z);
                    // Binary entropy written in logits: H = log(1+e^{-|z|}) + |z|e^{-|z|}/(1+e^{-|z|})
                    // evaluated directly from sigma for clarity; endpoints are 0.
                    let mut h = 0.0;
                    if s > 0.0 && s < 1.0 {
                        h = -s * s.ln() - (1.0 - s) * (1.0 - s).ln();
                    }
                    total += h;
                    dz.set(i, j, -s * (1.0 - s) * z / norm);
                }
            }
        }
        (LossKind::DotProduct, TaskMode::SingleLabel) => {
            for i in 0..n {
                if !kept(i, 0) {
                    continue;
                }
                let z = logits.row(i);
                let (_, p) = log_softmax_row(z);
                let mut dot = 0.0;
                for j in 0..c {
                    dot += t.get(i, j) * p[j];
                }
                total -= dot;
                let d = dz.row_mut(i);
                for j in 0..c {
                    d[j] = -p[j] * (t.get(i, j) - dot) / norm;
                }
            }
        }
        (LossKind::DotProduct, TaskMode::MultiLabel) => {
            for i in 0..n {
                for j in 0..c {
                    if !kept(i, j) {
                        continue;
                    }
                    let z = logits.get(i, j);
                    let s = crate::nn::sigmoid(z);
                    let y = t.get(i, j);
                    total -= y * s + (1.0 - y) * (1.0 - s);
                    dz.set(i, j, -(2.0 * y - 1.0) * s * (1.0 - s) / norm);
                }
            }
        }
    }
    let value = total / norm;
    if !value.is_finite() {
        return Err(Error::numeric(format!("loss evaluated to {value}")));
    }
    Ok(Some((value, dz)))
}

fn log_softmax_row(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let logp: Vec<f64> = z.iter().map(|&v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|&v| v.exp()).collect();
    (logp, p)
}

/// Exact gradients of a scalar loss with logit gradient `dlogits`, walked
/// back through the trace.
pub(crate) fn backprop(
    net: &MicroNet,
    trace: &ForwardTrace,
    dlogits: &DenseMatrix,
) -> Result<Gradients> {
    let logits = &trace.logits;
    if dlogits.rows() != logits.rows() || dlogits.cols() != logits.cols() {
        return Err(Error::shape(format!(
            "logit gradient is {}x{}, logits are {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    let n = logits.rows();
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(net.layers().len());
    let mut d = dlogits.clone();
    for (idx, layer) in net.layers().iter().enumerate().rev() {
        let input = &trace.activations[idx];
        match layer {
            Layer::Dense { weight, .. } => {
                let dweight = input.matmul_at_b(&d)?;
                let dbias = d.col_sums();
                let d_prev = d.matmul_a_bt(weight)?;
                grads.push(LayerGrad::Dense { dweight, dbias });
                d = d_prev;
            }
            Layer::BatchNorm {
                gamma,
                running_mean,
                running_var,
                ..
            } => {
                let dim = gamma.len();
                let (mean, var): (&[f64], &[f64]) = match &trace.bn_batch[idx] {
                    Some(stats) => (&stats.mean, &stats.var),
                    None => (running_mean, running_var),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut dgamma = vec![0.0; dim];
                let mut dbeta = vec![0.0; dim];
                let mut xhat = DenseMatrix::zeros(n, dim);
                for i in 0..n {
                    let xi = input.row(i);
                    let xh = xhat.row_mut(i);
                    for j in 0..dim {
                        xh[j] = (xi[j] - mean[j]) * inv_std[j];
                    }
                }
                for i in 0..n {
                    let di = d.row(i);
                    let xh = xhat.row(i);
                    for j in 0..dim {
                        dgamma[j] += di[j] * xh[j];
                        dbeta[j] += di[j];
                    }
                }
                let mut d_prev = DenseMatrix::zeros(n, dim);
                match trace.bn_batch[idx] {
                    None => {
                        // Frozen statistics: the normalization is affine.
                        for i in 0..n {
                            let di = d.row(i);
                            let dp = d_prev.row_mut(i);
                            for j in 0..dim {
                                dp[j] = di[j] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                    Some(_) => {
                        // Statistics depend on the batch itself.
                        let nf = n as f64;
                        let mut sum_dxhat = vec![0.0; dim];
                        let mut sum_dxhat_xhat = vec![0.0; dim];
                        for i in 0..n {
                            let di = d.row(i);
                            let xh = xhat.row(i);
                            for j in 0..dim {
                                let dxh = di[j] * gamma[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xh[j];
                            }
                        }
                        for i in 0..n {
                            let di = d.row(i);
                            let xh = xhat.row(i);
                            let dp = d_prev.row_mut(i);
                            for j in 0..dim {
                                let dxh = di[j] * gamma[j];
                                dp[j] = inv_std[j] / nf
                                    * (nf * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
                            }
                        }
                    }
                }
                grads.push(LayerGrad::BatchNorm { dgamma, dbeta });
                d = d_prev;
            }
            Layer::Relu => {
                let mut d_prev = d.clone();
                for (v, x) in d_prev.data_mut().iter_mut().zip(input.data().iter()) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                grads.push(LayerGrad::None);
                d = d_prev;
            }
            Layer::Dropout { .. } => {
                if let Some(mask) = &trace.masks[idx] {
                    let mut d_prev = d.clone();
                    for (v, m) in d_prev.data_mut().iter_mut().zip(mask.iter()) {
                        *v *= m;
                    }
                    d = d_prev;
                }
                grads.push(LayerGrad::None);
            }
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// One SGD step: `param -= lr * grad`, restricted to the network's trainable
/// mask (batch-norm scale and shift are trainable under both masks).
pub(crate) fn apply_gradients(net: &mut MicroNet, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    let train_all = net.trainable() == TrainableMask::All;
    for (layer, grad) in net.layers_mut().iter_mut().zip(grads.layers.iter()) {
        match (layer, grad) {
            (Layer::Dense { weight, bias }, LayerGrad::Dense { dweight, dbias }) => {
                if train_all {
                    for (w, g) in weight.data_mut().iter_mut().zip(dweight.data().iter()) {
                        *w -= lr * g;
                    }
                    for (b, g) in bias.iter_mut().zip(dbias.iter()) {
                        *b -= lr * g;
                    }
                }
            }
            (Layer::BatchNorm { gamma, beta, .. }, LayerGrad::BatchNorm { dgamma, dbeta }) => {
                for (g, d) in gamma.iter_mut().zip(dgamma.iter()) {
                    *g -= lr * d;
                }
                for (b, d) in beta.iter_mut().zip(dbeta.iter()) {
                    *b -= lr * d;
                }
            }
            (_, LayerGrad::None) => {}
            _ => return Err(Error::shape("gradient structure does not match network layers")),
        }
    }
    Ok(())
}

/// Fold batch statistics from a batch-mode trace into the running statistics
/// with each layer's momentum. No-op for running-mode traces.
pub(crate) fn update_running_stats(net: &mut MicroNet, trace: &ForwardTrace) {
    if trace.bn_source != BnSource::Batch {
        return;
    }
    for (idx, layer) in net.layers_mut().iter_mut().enumerate() {
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            momentum,
            ..
        } = layer
        {
            let stats = trace.bn_batch[idx]
                .as_ref()
                .expect("batch-mode trace caches stats for every batch-norm layer");
            let m = *momentum;
            for (r, b) in running_mean.iter_mut().zip(stats.mean.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in running_var.iter_mut().zip(stats.var.iter()) {
                *r = ((1.0 - m) * *r + m * b).max(BN_EPS);
            }
        }
    }
}

/// One SGD step with a caller-supplied logit-gradient function. The closure
/// receives the full forward trace and returns the loss value and its
/// gradient with respect to the logits. Returns the loss.
pub fn step_with_logit_grad<F>(
    net: &mut MicroNet,
    batch: &DenseMatrix,
    mode: ForwardMode,
    bn_source: BnSource,
    noise: &mut ChaCha8Rng,
    lr: f64,
    grad: F,
) -> Result<f64>
where
    F: FnOnce(&ForwardTrace) -> Result<(f64, DenseMatrix)>,
{
    let trace = net.forward(batch, mode, bn_source, noise)?;
    let (loss, dlogits) = grad(&trace)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss evaluated to {loss}")));
    }
    let grads = backprop(net, &trace, &dlogits)?;
    apply_gradients(net, &grads, lr)?;
    update_running_stats(net, &trace);
    Ok(loss)
}

/// One SGD step against pseudo-label targets. See
/// [`backward_and_step_masked`] for masking semantics.
#[allow(clippy::too_many_arguments)]
pub fn backward_and_step(
    net: &mut MicroNet,
    batch: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    lr: f64,
    mode: ForwardMode,
    bn_source: BnSource,
    noise: &mut ChaCha8Rng,
) -> Result<f64> {
    backward_and_step_masked(net, batch, targets, loss, None, lr, mode, bn_source, noise)?
        .ok_or_else(|| Error::data("unmasked step on an empty batch"))
}

/// One SGD step restricted to kept samples (single-column mask) or kept
/// sample/class pairs (full-width mask).
///
/// Returns `Ok(None)` without touching the network when the mask keeps
/// nothing. Batch-mode steps fold the batch statistics into the running
/// statistics after the parameter update.
#[allow(clippy::too_many_arguments)]
pub fn backward_and_step_masked(
    net: &mut MicroNet,
    batch: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    keep: Option<&KeepMask>,
    lr: f64,
    mode: ForwardMode,
    bn_source: BnSource,
    noise: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    check_loss_inputs(net, batch, targets, loss, keep)?;
    let trace = net.forward(batch, mode, bn_source, noise)?;
    match loss_and_logit_grad(&trace.logits, targets, loss, keep)? {
        None => Ok(None),
        Some((value, dlogits)) => {
            let grads = backprop(net, &trace, &dlogits)?;
            apply_gradients(net, &grads, lr)?;
            update_running_stats(net, &trace);
            Ok(Some(value))
        }
    }
}

/// Loss value only; the network is untouched. A mask keeping nothing yields
/// zero loss.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss(
    net: &MicroNet,
    batch: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    keep: Option<&KeepMask>,
    mode: ForwardMode,
    bn_source: BnSource,
    noise: &mut ChaCha8Rng,
) -> Result<f64> {
    check_loss_inputs(net, batch, targets, loss, keep)?;
    let trace = net.forward(batch, mode, bn_source, noise)?;
    Ok(loss_and_logit_grad(&trace.logits, targets, loss, keep)?
        .map(|(v, _)| v)
        .unwrap_or(0.0))
}

/// Loss and full parameter gradients without stepping; used by gradient
/// diagnostics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_and_gradients(
    net: &MicroNet,
    batch: &DenseMatrix,
    targets: &PseudoLabelBlock,
    loss: LossKind,
    keep: Option<&KeepMask>,
    mode: ForwardMode,
    bn_source: BnSource,
    noise: &mut ChaCha8Rng,
) -> Result<Option<(f64, Gradients)>> {
    check_loss_inputs(net, batch, targets, loss, keep)?;
    let trace = net.forward(batch, mode, bn_source, noise)?;
    match loss_and_logit_grad(&trace.logits, targets, loss, keep)? {
        None => Ok(None),
        Some((value, dlogits)) => {
            let grads = backprop(net, &trace, &dlogits)?;
            Ok(Some((value, grads)))
        }
    }
}
