//! Epsilon-prediction diffusion model and its denoising trainer.
//!
//! The network maps [x_t | time embedding | optional one-hot label] to a
//! predicted noise vector; the model score is -eps_hat / sigma_t. Training
//! minimizes the mean over the batch of ||eps_hat - eps||^2 with fresh
//! per-example times and noise each step. Fine-tuning on a different dataset
//! is the same loop started from pretrained weights.

use crate::checkpoint::{load_checkpoint, save_checkpoint, NetMetadata};
use crate::dataset::Dataset;
use crate::embed::{assemble_inputs, TimeEmbedding};
use crate::error::{Result, TgdpError};
use crate::net::DenseNetwork;
use crate::opt::AdamState;
use crate::schedule::{normal_matrix, sample_times, VpSchedule};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hidden widths used for the experiment-scale score network.
pub const SCORE_HIDDEN: &[usize] = &[512, 512, 512, 512, 256];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DsmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig { epochs: 100, batch_size: 4096, learning_rate: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub net: DenseNetwork,
    pub embedding: TimeEmbedding,
    pub schedule: VpSchedule,
    /// 0 for the unconditional model; otherwise one-hot labels are appended.
    pub num_classes: usize,
}

impl ScoreModel {
    pub fn new(dim: usize, hidden: &[usize], num_classes: usize, schedule: VpSchedule) -> Self {
        let embedding = TimeEmbedding::default();
        let net = DenseNetwork::mlp(dim + embedding.dim() + num_classes, hidden, dim);
        ScoreModel { net, embedding, schedule, num_classes }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.net.init_kaiming(rng);
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn inputs(&self, x: &Array2<f64>, times: &[f64], labels: Option<&[usize]>) -> Array2<f64> {
        assemble_inputs(x, Some(&self.embedding), Some(times), labels, self.num_classes)
    }

    /// Predicted noise with a separate time per row.
    pub fn epsilon_rows(
        &self,
        x: &Array2<f64>,
        times: &[f64],
        labels: Option<&[usize]>,
    ) -> Array2<f64> {
        self.net.forward_batch(&self.inputs(x, times, labels))
    }

    /// Predicted noise at one shared time.
    pub fn epsilon_at(&self, x: &Array2<f64>, t: f64, labels: Option<&[usize]>) -> Array2<f64> {
        let times = vec![t; x.nrows()];
        self.epsilon_rows(x, &times, labels)
    }

    /// Model score -eps_hat/sigma_t at one shared time.
    pub fn score_at(&self, x: &Array2<f64>, t: f64, labels: Option<&[usize]>) -> Array2<f64> {
        let s = self.schedule.sigma(t);
        self.epsilon_at(x, t, labels) * (-1.0 / s)
    }

    /// Model score with a separate time per row.
    pub fn score_rows(
        &self,
        x: &Array2<f64>,
        times: &[f64],
        labels: Option<&[usize]>,
    ) -> Array2<f64> {
        let mut eps = self.epsilon_rows(x, times, labels);
        for (mut row, &t) in eps.rows_mut().into_iter().zip(times) {
            row.mapv_inplace(|e| -e / self.schedule.sigma(t));
        }
        eps
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(TgdpError::argument("empty training set"));
        }
        if data.dim() != self.data_dim() {
            return Err(TgdpError::argument(format!(
                "data dimension {} does not match model dimension {}",
                data.dim(),
                self.data_dim()
            )));
        }
        if self.num_classes > 0 {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| TgdpError::argument("conditional model needs labeled data"))?;
            if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(TgdpError::argument(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Denoising training loop. Returns the mean per-example loss of each
    /// epoch. Aborts with a numeric error if a step loss is non-finite or
    /// exceeds max(1e6, 100x the first step's loss).
    pub fn train_dsm<R: Rng>(
        &mut self,
        data: &Dataset,
        cfg: &DsmConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_data(data)?;
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(TgdpError::argument("epochs and batch size must be positive"));
        }
        let n = data.len();
        let d = data.dim();
        let mut adam = AdamState::new(self.net.param_count(), cfg.learning_rate);
        let mut grad = vec![0.0; self.net.param_count()];
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut divergence_threshold: Option<f64> = None;
        let mut indices: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            indices.shuffle(rng);
            let mut total = 0.0;
            for chunk in indices.chunks(cfg.batch_size) {
                let b = chunk.len();
                let mut x0 = Array2::zeros((b, d));
                for (i, &idx) in chunk.iter().enumerate() {
                    x0.row_mut(i).assign(&data.x.row(idx));
                }
                let labels: Option<Vec<usize>> = data
                    .labels
                    .as_ref()
                    .filter(|_| self.num_classes > 0)
                    .map(|l| chunk.iter().map(|&i| l[i]).collect());
                let times = sample_times(&self.schedule, rng, b);
                let eps = normal_matrix(rng, b, d);
                let mut xt = Array2::zeros((b, d));
                for i in 0..b {
                    let (a, s) = self.schedule.alpha_sigma(times[i]);
                    for j in 0..d {
                        xt[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
                    }
                }
                let inputs = self.inputs(&xt, times.as_slice().unwrap(), labels.as_deref());
                let (out, cache) = self.net.forward_cached(&inputs);
                let resid = &out - &eps;
                let loss = resid.iter().map(|r| r * r).sum::<f64>() / b as f64;
                let threshold = *divergence_threshold
                    .get_or_insert_with(|| (100.0 * loss).max(1e6));
                if !loss.is_finite() || loss > threshold {
                    return Err(TgdpError::numeric(format!(
                        "training diverged: step loss {loss:e} (threshold {threshold:e})"
                    )));
                }
                let dout = resid * (2.0 / b as f64);
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.net.backward(&cache, &dout, Some(&mut grad), false);
                adam.step(self.net.params_mut(), &grad);
                total += loss * b as f64;
            }
            epoch_losses.push(total / n as f64);
        }
        Ok(epoch_losses)
    }

    /// Continue denoising training from this model's weights on a new dataset,
    /// leaving the original untouched. Zero epochs returns an exact copy.
    pub fn finetune<R: Rng>(
        &self,
        data: &Dataset,
        cfg: &DsmConfig,
        rng: &mut R,
    ) -> Result<(ScoreModel, Vec<f64>)> {
        let mut tuned = self.clone();
        if cfg.epochs == 0 {
            return Ok((tuned, Vec::new()));
        }
        let losses = tuned.train_dsm(data, cfg, rng)?;
        Ok((tuned, losses))
    }

    /// Monte Carlo estimate of the per-example denoising loss on held-out
    /// data, with fresh times and noise.
    pub fn heldout_dsm_loss<R: Rng>(&self, data: &Dataset, batch_size: usize, rng: &mut R) -> f64 {
        let n = data.len();
        let d = data.dim();
        assert!(n > 0 && batch_size > 0);
        let mut total = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let b = end - start;
            let x0 = data.x.slice(ndarray::s![start..end, ..]).to_owned();
            let labels: Option<Vec<usize>> = data
                .labels
                .as_ref()
                .filter(|_| self.num_classes > 0)
                .map(|l| l[start..end].to_vec());
            let times = sample_times(&self.schedule, rng, b);
            let eps = normal_matrix(rng, b, d);
            let mut xt = Array2::zeros((b, d));
            for i in 0..b {
                let (a, s) = self.schedule.alpha_sigma(times[i]);
                for j in 0..d {
                    xt[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
                }
            }
            let out = self.epsilon_rows(&xt, times.as_slice().unwrap(), labels.as_deref());
            total += out
                .iter()
                .zip(eps.iter())
                .map(|(o, e)| (o - e) * (o - e))
                .sum::<f64>();
            start = end;
        }
        total / n as f64
    }

    pub fn save(&self, path: &Path, kind: &str) -> Result<()> {
        let meta = NetMetadata {
            layer_sizes: self.net.layer_sizes().to_vec(),
            activations: self.net.activations().to_vec(),
            embedding: Some(self.embedding.clone()),
            num_classes: self.num_classes,
            kind: kind.to_string(),
        };
        save_checkpoint(path, &self.net, &meta)
    }

    pub fn load(path: &Path, schedule: VpSchedule) -> Result<Self> {
        let (net, meta) = load_checkpoint(path)?;
        let embedding = meta
            .embedding
            .ok_or_else(|| TgdpError::format("checkpoint has no time embedding"))?;
        Ok(ScoreModel { net, embedding, schedule, num_classes: meta.num_classes })
    }
}

/// Oracle noise predictor for a Gaussian mixture data distribution:
/// eps(x_t, t) = -sigma_t * (score of the perturbed mixture at x_t).
pub fn oracle_epsilon(
    gmm: &crate::gmm::IsotropicGmm,
    schedule: &VpSchedule,
    x: &Array2<f64>,
    t: f64,
) -> Array2<f64> {
    let perturbed = gmm.perturbed(schedule, t);
    perturbed.score_batch(x) * (-schedule.sigma(t))
}

/// Mean cosine similarity between matched rows of two vector fields.
pub fn mean_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let na: f64 = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na > 1e-12 && nb > 1e-12 {
            let dot: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum();
            acc += dot / (na * nb);
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { acc / count as f64 }
}

/// Row means of squared norms, used for relative field errors.
pub fn mean_relative_error(approx: &Array2<f64>, exact: &Array2<f64>) -> f64 {
    assert_eq!(approx.dim(), exact.dim());
    let mut acc = 0.0;
    for (ra, re) in approx.rows().into_iter().zip(exact.rows()) {
        let diff: f64 = ra.iter().zip(re.iter()).map(|(a, e)| (a - e) * (a - e)).sum();
        let norm: f64 = re.iter().map(|e| e * e).sum();
        acc += (diff / norm.max(1e-12)).sqrt();
    }
    acc / approx.nrows() as f64
}
