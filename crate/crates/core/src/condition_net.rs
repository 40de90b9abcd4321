//! Feedforward condition classifier whose bottleneck pre-activations serve
//! as condition embeddings for the metadata head.
//!
//! Architecture: `D -> 100` affine with batch normalization and ReLU,
//! `100 -> 10` affine (the bottleneck) with ReLU, `10 -> classes` affine and
//! softmax. The first affine map has no bias; normalization makes it
//! redundant.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

pub const HIDDEN_DIM: usize = 100;
pub const BOTTLENECK_DIM: usize = 10;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
const MIN_RUNNING_VAR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnetConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CnetConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionNet {
    /// `HIDDEN_DIM x D`.
    pub w1: DMatrix<f64>,
    pub bn_scale: DVector<f64>,
    pub bn_shift: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
    /// `BOTTLENECK_DIM x HIDDEN_DIM`.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// `classes x BOTTLENECK_DIM`.
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
    pub class_names: Vec<String>,
}

/// Gradients of the batch loss, laid out like the trainable tensors.
#[derive(Debug, Clone)]
pub struct CnetGrads {
    pub w1: DMatrix<f64>,
    pub bn_scale: DVector<f64>,
    pub bn_shift: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl CnetGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice(),
            self.bn_scale.as_slice(),
            self.bn_shift.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }
}

/// Per-feature batch statistics from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnetTrainReport {
    pub train_accuracy: f64,
    pub majority_rate: f64,
    pub epoch_loss: Vec<f64>,
}

impl ConditionNet {
    /// He-initialized network with identity normalization.
    pub fn new_random(input_dim: usize, class_names: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n1 = he(input_dim);
        let n2 = he(HIDDEN_DIM);
        let n3 = he(BOTTLENECK_DIM);
        let n_classes = class_names.len();
        Self {
            w1: DMatrix::from_fn(HIDDEN_DIM, input_dim, |_, _| n1.sample(rng)),
            bn_scale: DVector::from_element(HIDDEN_DIM, 1.0),
            bn_shift: DVector::zeros(HIDDEN_DIM),
            running_mean: DVector::zeros(HIDDEN_DIM),
            running_var: DVector::from_element(HIDDEN_DIM, 1.0),
            w2: DMatrix::from_fn(BOTTLENECK_DIM, HIDDEN_DIM, |_, _| n2.sample(rng)),
            b2: DVector::zeros(BOTTLENECK_DIM),
            w3: DMatrix::from_fn(n_classes, BOTTLENECK_DIM, |_, _| n3.sample(rng)),
            b3: DVector::zeros(n_classes),
            class_names,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            self.bn_scale.as_mut_slice(),
            self.bn_shift.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    /// Inference-mode first layer for a batch of column vectors.
    fn hidden_inference(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.w1 * xs;
        for j in 0..HIDDEN_DIM {
            let inv = 1.0 / (self.running_var[j] + BN_EPS).sqrt();
            let (mean, g, b) = (self.running_mean[j], self.bn_scale[j], self.bn_shift[j]);
            for v in h.row_mut(j).iter_mut() {
                *v = (g * (*v - mean) * inv + b).max(0.0);
            }
        }
        h
    }

    /// Bottleneck pre-activations for a batch of column vectors
    /// (`D x n` in, `10 x n` out), using the frozen statistics.
    pub fn bottleneck_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.nrows() != self.input_dim() {
            return Err(Error::invalid(format!(
                "condition net expects dimension {}, got {}",
                self.input_dim(),
                xs.nrows()
            )));
        }
        let mut out = &self.w2 * self.hidden_inference(xs);
        for mut col in out.column_iter_mut() {
            col += &self.b2;
        }
        Ok(out)
    }

    pub fn bottleneck(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.bottleneck_batch(&xs)?.column(0).into_owned())
    }

    /// Class logits in inference mode.
    pub fn logits_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut a2 = self.bottleneck_batch(xs)?;
        a2.apply(|v| *v = v.max(0.0));
        let mut out = &self.w3 * a2;
        for mut col in out.column_iter_mut() {
            col += &self.b3;
        }
        Ok(out)
    }

    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Vec<usize>> {
        let logits = self.logits_batch(xs)?;
        Ok(logits.column_iter().map(|c| c.argmax().0).collect())
    }

    /// Mean multiclass cross-entropy and its gradient for a training-mode
    /// forward pass (batch statistics). `xs` is `D x n`. Does not touch the
    /// running statistics.
    pub fn loss_and_grad(
        &self,
        xs: &DMatrix<f64>,
        labels: &[usize],
    ) -> Result<(f64, CnetGrads, BatchStats)> {
        let n = xs.ncols();
        if n == 0 || labels.len() != n {
            return Err(Error::invalid("batch and label counts differ or are empty"));
        }
        if xs.nrows() != self.input_dim() {
            return Err(Error::invalid("batch dimension does not match the network"));
        }
        let nf = n as f64;
        // forward
        let h1 = &self.w1 * xs;
        let mean = DVector::from_fn(HIDDEN_DIM, |j, _| h1.row(j).sum() / nf);
        let var = DVector::from_fn(HIDDEN_DIM, |j, _| {
            h1.row(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / nf
        });
        let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = DMatrix::from_fn(HIDDEN_DIM, n, |j, i| (h1[(j, i)] - mean[j]) * inv_std[j]);
        let y = DMatrix::from_fn(HIDDEN_DIM, n, |j, i| {
            self.bn_scale[j] * xhat[(j, i)] + self.bn_shift[j]
        });
        let a1 = y.map(|v| v.max(0.0));
        let mut h2 = &self.w2 * &a1;
        for mut col in h2.column_iter_mut() {
            col += &self.b2;
        }
        let a2 = h2.map(|v| v.max(0.0));
        let mut out = &self.w3 * &a2;
        for mut col in out.column_iter_mut() {
            col += &self.b3;
        }

        // softmax cross-entropy
        let mut loss = 0.0;
        let mut d_out = DMatrix::zeros(out.nrows(), n);
        for i in 0..n {
            let col = out.column(i);
            let max = col.max();
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if labels[i] >= out.nrows() {
                return Err(Error::invalid(format!("label {} out of range", labels[i])));
            }
            loss -= col[labels[i]] - lse;
            for k in 0..out.nrows() {
                d_out[(k, i)] = (col[k] - lse).exp() / nf;
            }
            d_out[(labels[i], i)] -= 1.0 / nf;
        }
        loss /= nf;

        // backward
        let g_w3 = &d_out * a2.transpose();
        let g_b3 = DVector::from_fn(out.nrows(), |k, _| d_out.row(k).sum());
        let mut d_h2 = self.w3.transpose() * &d_out;
        d_h2.zip_apply(&h2, |g, h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        let g_w2 = &d_h2 * a1.transpose();
        let g_b2 = DVector::from_fn(BOTTLENECK_DIM, |k, _| d_h2.row(k).sum());
        let mut d_y = self.w2.transpose() * &d_h2;
        d_y.zip_apply(&y, |g, v| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
        let g_scale = DVector::from_fn(HIDDEN_DIM, |j, _| {
            d_y.row(j)
                .iter()
                .zip(xhat.row(j).iter())
                .map(|(a, b)| a * b)
                .sum()
        });
        let g_shift = DVector::from_fn(HIDDEN_DIM, |j, _| d_y.row(j).sum());
        let mut d_h1 = DMatrix::zeros(HIDDEN_DIM, n);
        for j in 0..HIDDEN_DIM {
            let g = self.bn_scale[j];
            let sum_dx: f64 = d_y.row(j).sum() * g;
            let sum_dx_xhat: f64 = g_scale[j] * g;
            for i in 0..n {
                let dxhat = d_y[(j, i)] * g;
                d_h1[(j, i)] = inv_std[j] / nf * (nf * dxhat - sum_dx - xhat[(j, i)] * sum_dx_xhat);
            }
        }
        let g_w1 = &d_h1 * xs.transpose();
        Ok((
            loss,
            CnetGrads {
                w1: g_w1,
                bn_scale: g_scale,
                bn_shift: g_shift,
                w2: g_w2,
                b2: g_b2,
                w3: g_w3,
                b3: g_b3,
            },
            BatchStats { mean, var },
        ))
    }

    fn update_running(&mut self, stats: &BatchStats, n: usize) {
        let unbias = if n > 1 {
            n as f64 / (n as f64 - 1.0)
        } else {
            1.0
        };
        for j in 0..HIDDEN_DIM {
            self.running_mean[j] =
                BN_MOMENTUM * self.running_mean[j] + (1.0 - BN_MOMENTUM) * stats.mean[j];
            self.running_var[j] = (BN_MOMENTUM * self.running_var[j]
                + (1.0 - BN_MOMENTUM) * stats.var[j] * unbias)
                .max(MIN_RUNNING_VAR);
        }
    }
}

/// Embeddings as a `D x n` matrix, one column per record.
pub fn embedding_matrix(dataset: &Dataset) -> DMatrix<f64> {
    let d = dataset.dim();
    let mut m = DMatrix::zeros(d, dataset.len());
    for (i, r) in dataset.records().iter().enumerate() {
        m.column_mut(i).copy_from_slice(&r.embedding);
    }
    m
}

/// Trains the classifier on `condition_label` with Adam and seeded
/// shuffling; normalization statistics are frozen at the end.
pub fn train_condition_net(
    dataset: &Dataset,
    cfg: &CnetConfig,
) -> Result<(ConditionNet, CnetTrainReport)> {
    dataset.require_condition_labels()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in dataset.records() {
        *counts
            .entry(r.condition_label.as_deref().unwrap())
            .or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid(
            "condition net needs at least two distinct condition labels",
        ));
    }
    let class_names: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
    let class_of: BTreeMap<&str, usize> = counts.keys().enumerate().map(|(i, s)| (*s, i)).collect();
    let labels: Vec<usize> = dataset
        .records()
        .iter()
        .map(|r| class_of[r.condition_label.as_deref().unwrap()])
        .collect();
    let xs = embedding_matrix(dataset);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ConditionNet::new_random(dataset.dim(), class_names, &mut rng);
    let mut adam = Adam::new(AdamConfig::default(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && dataset.len() >= 2 {
                continue;
            }
            let bx = xs.select_columns(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads, stats) = net.loss_and_grad(&bx, &by)?;
            net.update_running(&stats, chunk.len());
            adam.step(&mut net.params_mut(), &grads.slices());
            total += loss;
            batches += 1;
        }
        epoch_loss.push(total / batches.max(1) as f64);
    }
    let pred = net.predict(&xs)?;
    let correct = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
    let report = CnetTrainReport {
        train_accuracy: correct as f64 / labels.len() as f64,
        majority_rate: *counts.values().max().unwrap() as f64 / labels.len() as f64,
        epoch_loss,
    };
    log::info!(
        "condition net: {} classes, training accuracy {:.4}",
        net.n_classes(),
        report.train_accuracy
    );
    Ok((net, report))
}
