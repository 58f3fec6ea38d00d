//! Micro dense network with batch normalization and inverted dropout.
//!
//! The network is deliberately small and fully deterministic: parameters are
//! initialized from a seeded ChaCha8 stream, dropout masks are drawn from a
//! caller-owned stream, and every forward pass is a pure function of
//! `(parameters, batch, mode, rng state)`.

pub(crate) mod train;

pub use train::{
    backward_and_step, backward_and_step_masked, cosine_decay, evaluate_loss, step_with_logit_grad,
    Gradients, LayerGrad, LossKind,
};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::TaskMode;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Variance floor inside every batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

/// Architecture description for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    BatchNorm { dim: usize, momentum: f64 },
    Relu,
    Dropout { rate: f64 },
}

/// Which parameters gradient steps may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMask {
    All,
    BatchNormOnly,
}

/// Clean forward (dropout disabled) vs noisy forward (dropout sampled).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Clean,
    Noisy,
}

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSource {
    /// Running (population) statistics accumulated during training.
    Running,
    /// Statistics of the current batch.
    Batch,
}

/// A layer together with its parameters and state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        /// `in_dim x out_dim` weight matrix.
        weight: DenseMatrix,
        bias: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weight, .. } => LayerSpec::Dense {
                in_dim: weight.rows(),
                out_dim: weight.cols(),
            },
            Layer::BatchNorm { gamma, momentum, .. } => LayerSpec::BatchNorm {
                dim: gamma.len(),
                momentum: *momentum,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
        }
    }
}

/// Per-batch-norm-layer statistics captured during a batch-mode forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[i]` is the input of layer `i`; the last entry holds the
    /// logits.
    pub activations: Vec<DenseMatrix>,
    /// Input of the final dense layer (the embedding used for graphs).
    pub features: DenseMatrix,
    /// Output of the final layer.
    pub logits: DenseMatrix,
    pub mode: ForwardMode,
    pub bn_source: BnSource,
    /// Scaled dropout masks, one entry per layer (`Some` only for dropout
    /// layers that actually sampled a mask).
    pub masks: Vec<Option<Vec<f64>>>,
    /// Batch statistics, one entry per layer (`Some` only for batch-norm
    /// layers normalized in batch mode).
    pub bn_batch: Vec<Option<BnBatchStats>>,
}

/// Dense feed-forward network: an ordered stack of [`Layer`]s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroNet {
    layers: Vec<Layer>,
    trainable: TrainableMask,
    seed: u64,
    in_dim: usize,
    out_dim: usize,
    /// Index of the final dense layer; its input is the feature embedding.
    feature_layer: usize,
}

impl MicroNet {
    /// Build a network from layer specs, initializing parameters from a
    /// ChaCha8 stream seeded with `seed`.
    ///
    /// Dense weights are uniform in `+-1/sqrt(in_dim)` with zero biases;
    /// batch-norm starts at identity (`gamma=1`, `beta=0`) with unit running
    /// variance. Layer dimensions must chain, the first layer must be dense,
    /// and at least one dense layer is required.
    pub fn new(specs: &[LayerSpec], trainable: TrainableMask, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let in_dim = match specs[0] {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            _ => return Err(Error::config("first layer must be dense")),
        };
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut dim = in_dim;
        let mut feature_layer = None;
        for (idx, spec) in specs.iter().enumerate() {
            match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if in_dim != dim {
                        return Err(Error::shape(format!(
                            "layer {idx}: dense expects input dim {dim}, spec says {in_dim}"
                        )));
                    }
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::config(format!("layer {idx}: zero-sized dense layer")));
                    }
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    let data: Vec<f64> = (0..in_dim * out_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    layers.push(Layer::Dense {
                        weight: DenseMatrix::from_vec(in_dim, out_dim, data)?,
                        bias: vec![0.0; out_dim],
                    });
                    dim = out_dim;
                    feature_layer = Some(idx);
                }
                LayerSpec::BatchNorm { dim: d, momentum } => {
                    if d != dim {
                        return Err(Error::shape(format!(
                            "layer {idx}: batch-norm expects dim {dim}, spec says {d}"
                        )));
                    }
                    if !(momentum > 0.0 && momentum <= 1.0) {
                        return Err(Error::config(format!(
                            "layer {idx}: batch-norm momentum must lie in (0, 1], got {momentum}"
                        )));
                    }
                    layers.push(Layer::BatchNorm {
                        gamma: vec![1.0; d],
                        beta: vec![0.0; d],
                        running_mean: vec![0.0; d],
                        running_var: vec![1.0; d],
                        momentum,
                    });
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::config(format!(
                            "layer {idx}: dropout rate must lie in [0, 1), got {rate}"
                        )));
                    }
                    layers.push(Layer::Dropout { rate });
                }
            }
        }
        let feature_layer =
            feature_layer.ok_or_else(|| Error::config("network needs at least one dense layer"))?;
        Ok(MicroNet {
            layers,
            trainable,
            seed,
            in_dim,
            out_dim: dim,
            feature_layer,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trainable(&self) -> TrainableMask {
        self.trainable
    }

    pub fn set_trainable(&mut self, mask: TrainableMask) {
        self.trainable = mask;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Whether the architecture contains at least one dropout layer with a
    /// positive rate.
    pub fn has_active_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Run the network on a batch (one sample per row).
    ///
    /// `Clean` mode bypasses dropout entirely; `Noisy` mode samples one
    /// inverted-dropout mask per dropout layer from `noise` (layers with rate
    /// zero draw nothing). `bn_source` selects running vs current-batch
    /// statistics for every batch-norm layer. Non-finite activations abort
    /// with a numeric error naming the offending layer.
    pub fn forward(
        &self,
        batch: &DenseMatrix,
        mode: ForwardMode,
        bn_source: BnSource,
        noise: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        if batch.cols() != self.in_dim {
            return Err(Error::shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.in_dim
            )));
        }
        if batch.rows() == 0 {
            return Err(Error::data("forward pass on an empty batch"));
        }
        batch.check_finite("network input")?;
        let n = batch.rows();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = vec![None; self.layers.len()];
        let mut bn_batch = vec![None; self.layers.len()];
        let mut x = batch.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            activations.push(x.clone());
            x = match layer {
                Layer::Dense { weight, bias } => {
                    let mut out = x.matmul(weight)?;
                    for row in 0..n {
                        let r = out.row_mut(row);
                        for (v, b) in r.iter_mut().zip(bias.iter()) {
                            *v += b;
                        }
                    }
                    out
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let dim = gamma.len();
                    let (mean, var) = match bn_source {
                        BnSource::Running => (running_mean.clone(), running_var.clone()),
                        BnSource::Batch => {
                            let stats = batch_stats(&x);
                            bn_batch[idx] = Some(stats.clone());
                            (stats.mean, stats.var)
                        }
                    };
                    let inv_std: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut out = DenseMatrix::zeros(n, dim);
                    for row in 0..n {
                        let src = x.row(row);
                        let dst = out.row_mut(row);
                        for c in 0..dim {
                            dst[c] = (src[c] - mean[c]) * inv_std[c] * gamma[c] + beta[c];
                        }
                    }
                    out
                }
                Layer::Relu => {
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    out
                }
                Layer::Dropout { rate } => {
                    if mode == ForwardMode::Noisy && *rate > 0.0 {
                        let keep_scale = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.data().len())
                            .map(|_| {
                                if noise.gen::<f64>() < *rate {
                                    0.0
                                } else {
                                    keep_scale
                                }
                            })
                            .collect();
                        let mut out = x.clone();
                        for (v, m) in out.data_mut().iter_mut().zip(mask.iter()) {
                            *v *= m;
                        }
                        masks[idx] = Some(mask);
                        out
                    } else {
                        x
                    }
                }
            };
            if !x.data().iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!(
                    "layer {idx} ({}) produced non-finite activations",
                    layer.kind_name()
                )));
            }
        }
        let features = activations[self.feature_layer].clone();
        Ok(ForwardTrace {
            activations,
            features,
            logits: x.clone(),
            mode,
            bn_source,
            masks,
            bn_batch,
        })
    }

    /// Convenience: clean forward with running statistics, probabilities out.
    pub fn predict(&self, batch: &DenseMatrix, task: TaskMode) -> Result<DenseMatrix> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let trace = self.forward(batch, ForwardMode::Clean, BnSource::Running, &mut rng)?;
        predict_probs(&trace.logits, task)
    }

    /// Replace every batch-norm layer's running statistics with statistics
    /// computed over `dataset` in one clean batch-mode pass. Weights are
    /// untouched.
    pub fn recompute_bn_stats(&mut self, dataset: &DenseMatrix) -> Result<()> {
        if dataset.rows() == 0 {
            return Err(Error::data("cannot recompute batch-norm statistics on an empty dataset"));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let trace = self.forward(dataset, ForwardMode::Clean, BnSource::Batch, &mut rng)?;
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                let stats = trace.bn_batch[idx]
                    .as_ref()
                    .expect("batch-mode forward caches stats for every batch-norm layer");
                running_mean.clone_from(&stats.mean);
                *running_var = stats.var.iter().map(|v| v.max(BN_EPS)).collect();
            }
        }
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn feature_layer(&self) -> usize {
        self.feature_layer
    }
}

/// Per-column mean and population variance of a batch.
fn batch_stats(x: &DenseMatrix) -> BnBatchStats {
    let n = x.rows() as f64;
    let dim = x.cols();
    let mut mean = vec![0.0; dim];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for row in x.iter_rows() {
        for c in 0..dim {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    BnBatchStats { mean, var }
}

/// Map logits to probabilities: row-wise softmax for single-label, an
/// element-wise logistic sigmoid for multi-label.
pub fn predict_probs(logits: &DenseMatrix, task: TaskMode) -> Result<DenseMatrix> {
    logits.check_finite("logits")?;
    let mut out = logits.clone();
    match task {
        TaskMode::SingleLabel => {
            for row in 0..out.rows() {
                let r = out.row_mut(row);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in r.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in r.iter_mut() {
                    *v /= sum;
                }
            }
        }
        TaskMode::MultiLabel => {
            for v in out.data_mut() {
                *v = sigmoid(*v);
            }
        }
    }
    Ok(out)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_net(dropout: f64) -> MicroNet {
        MicroNet::new(
            &[
                LayerSpec::Dense { in_dim: 3, out_dim: 5 },
                LayerSpec::BatchNorm { dim: 5, momentum: 0.1 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Dense { in_dim: 5, out_dim: 4 },
            ],
            TrainableMask::All,
            7,
        )
        .unwrap()
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = tiny_net(0.25);
        let b = tiny_net(0.25);
        let (Layer::Dense { weight: wa, .. }, Layer::Dense { weight: wb, .. }) =
            (&a.layers()[0], &b.layers()[0])
        else {
            panic!("expected dense layer");
        };
        assert_eq!(wa.data(), wb.data());
    }

    #[test]
    fn dimension_chain_is_validated() {
        let err = MicroNet::new(
            &[
                LayerSpec::Dense { in_dim: 3, out_dim: 5 },
                LayerSpec::Dense { in_dim: 4, out_dim: 2 },
            ],
            TrainableMask::All,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn clean_forward_ignores_dropout_and_rng() {
        let net = tiny_net(0.5);
        let x = DenseMatrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let t1 = net
            .forward(&x, ForwardMode::Clean, BnSource::Running, &mut rng(1))
            .unwrap();
        let t2 = net
            .forward(&x, ForwardMode::Clean, BnSource::Running, &mut rng(999))
            .unwrap();
        assert_eq!(t1.logits.data(), t2.logits.data());
        assert!(t1.masks.iter().all(|m| m.is_none()));
    }

    #[test]
    fn zero_rate_noisy_forward_equals_clean() {
        let net = tiny_net(0.0);
        let x = DenseMatrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let clean = net
            .forward(&x, ForwardMode::Clean, BnSource::Running, &mut rng(1))
            .unwrap();
        let noisy = net
            .forward(&x, ForwardMode::Noisy, BnSource::Running, &mut rng(1))
            .unwrap();
        assert_eq!(clean.logits.data(), noisy.logits.data());
    }

    #[test]
    fn noisy_forward_replays_with_same_stream() {
        let net = tiny_net(0.5);
        let x = DenseMatrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let t1 = net
            .forward(&x, ForwardMode::Noisy, BnSource::Running, &mut rng(11))
            .unwrap();
        let t2 = net
            .forward(&x, ForwardMode::Noisy, BnSource::Running, &mut rng(11))
            .unwrap();
        let t3 = net
            .forward(&x, ForwardMode::Noisy, BnSource::Running, &mut rng(12))
            .unwrap();
        assert_eq!(t1.logits.data(), t2.logits.data());
        assert_ne!(t1.logits.data(), t3.logits.data());
    }

    #[test]
    fn dropout_mask_values_are_scaled() {
        let net = tiny_net(0.25);
        let x = DenseMatrix::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let t = net
            .forward(&x, ForwardMode::Noisy, BnSource::Running, &mut rng(3))
            .unwrap();
        let mask = t.masks[3].as_ref().expect("dropout layer sampled a mask");
        for &m in mask {
            assert!(m == 0.0 || (m - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_mode_normalizes_current_batch() {
        let net = MicroNet::new(
            &[
                LayerSpec::Dense { in_dim: 2, out_dim: 3 },
                LayerSpec::BatchNorm { dim: 3, momentum: 0.1 },
            ],
            TrainableMask::All,
            5,
        )
        .unwrap();
        let x = DenseMatrix::from_vec(6, 2, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let t = net
            .forward(&x, ForwardMode::Clean, BnSource::Batch, &mut rng(0))
            .unwrap();
        // gamma=1, beta=0: output mean 0, output variance v/(v + eps) for
        // input variance v.
        let pre = &t.activations[1];
        for c in 0..3 {
            let col: Vec<f64> = t.logits.iter_rows().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            let pre_col: Vec<f64> = pre.iter_rows().map(|r| r[c]).collect();
            let pre_mean = pre_col.iter().sum::<f64>() / pre_col.len() as f64;
            let pre_var =
                pre_col.iter().map(|v| (v - pre_mean).powi(2)).sum::<f64>() / pre_col.len() as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, pre_var / (pre_var + BN_EPS), epsilon = 1e-9);
        }
    }

    #[test]
    fn recompute_bn_stats_matches_dataset_statistics() {
        let mut net = MicroNet::new(
            &[
                LayerSpec::Dense { in_dim: 2, out_dim: 3 },
                LayerSpec::BatchNorm { dim: 3, momentum: 0.1 },
            ],
            TrainableMask::All,
            5,
        )
        .unwrap();
        let x = DenseMatrix::from_vec(8, 2, (0..16).map(|i| (i as f64 * 0.7).cos()).collect())
            .unwrap();
        let pre = net
            .forward(&x, ForwardMode::Clean, BnSource::Batch, &mut rng(0))
            .unwrap();
        let stats = pre.bn_batch[1].as_ref().unwrap().clone();
        net.recompute_bn_stats(&x).unwrap();
        let Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &net.layers()[1]
        else {
            panic!("expected batch-norm layer");
        };
        assert_eq!(running_mean, &stats.mean);
        for (rv, v) in running_var.iter().zip(stats.var.iter()) {
            assert_abs_diff_eq!(*rv, v.max(BN_EPS), epsilon = 0.0);
        }
        let err = net.recompute_bn_stats(&DenseMatrix::zeros(0, 2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn features_are_input_of_final_dense_layer() {
        let net = tiny_net(0.0);
        let x = DenseMatrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let t = net
            .forward(&x, ForwardMode::Clean, BnSource::Running, &mut rng(0))
            .unwrap();
        assert_eq!(t.features.cols(), 5);
        assert_eq!(t.features.data(), t.activations[4].data());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant() {
        let logits =
            DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let p = predict_probs(&logits, TaskMode::SingleLabel).unwrap();
        for row in p.iter_rows() {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let shifted = logits.map(|v| v + 1000.0);
        let q = predict_probs(&shifted, TaskMode::SingleLabel).unwrap();
        for (a, b) in p.data().iter().zip(q.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let logits = DenseMatrix::from_vec(1, 4, vec![-800.0, -1.0, 1.0, 800.0]).unwrap();
        let p = predict_probs(&logits, TaskMode::MultiLabel).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.get(0, 0), 0.0, epsilon = 1e-300);
        assert_abs_diff_eq!(p.get(0, 3), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(0, 1) + p.get(0, 2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let net = tiny_net(0.25);
        let json = serde_json::to_string_pretty(&net).unwrap();
        let back: MicroNet = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
        let (Layer::Dense { weight: wa, .. }, Layer::Dense { weight: wb, .. }) =
            (&net.layers()[0], &back.layers()[0])
        else {
            panic!("expected dense layer");
        };
        assert_eq!(wa.data(), wb.data());
    }
}
