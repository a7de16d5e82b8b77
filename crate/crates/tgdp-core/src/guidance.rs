//! Guidance network: a positive scalar field h(x_t, t) trained to match the
//! density ratio between the diffused target and source marginals. Its
//! log-gradient added to the frozen source score yields the target score.
//!
//! The training loss combines three terms:
//!   guidance    - on noised source points, (h(x_t, t) - r(x_0))^2 against a
//!                 static ratio estimate at the clean point; its minimizer is
//!                 the conditional expectation of r, i.e. the diffused ratio;
//!   cycle       - on noised target points, (h(x_t', t) - r_t(x_t'))^2 against
//!                 a time-dependent ratio estimate at the noised point;
//!   consistency - on the same noised target points, the squared residual of
//!                 the guided score against the denoising regression target,
//!                 sigma_t (s_src + grad log h) + eps; differentiating it
//!                 needs second derivatives of the network, taken with a
//!                 forward-over-reverse pass.

use crate::checkpoint::{load_checkpoint, save_checkpoint, NetMetadata};
use crate::embed::{assemble_inputs, TimeEmbedding};
use crate::error::{Result, TgdpError};
use crate::gmm::IsotropicGmm;
use crate::net::{sigmoid, softplus, DenseNetwork};
use crate::opt::AdamState;
use crate::ratio::DomainClassifier;
use crate::schedule::{normal_matrix, sample_times, VpSchedule};
use crate::score::ScoreModel;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Additive floor keeping h strictly positive.
pub const H_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GuidanceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub guidance_weight: f64,
    pub cycle_weight: f64,
    pub consistency_weight: f64,
    /// Upper clamp on the ratio regression targets. The true ratio grows
    /// without bound off the source support, so unclamped squared-error
    /// targets let a single deep-tail draw dominate a batch and trip the
    /// divergence guard; the cap keeps the worst-case batch loss below it.
    pub target_cap: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            guidance_weight: 1.0,
            cycle_weight: 1.0,
            consistency_weight: 1.0,
            target_cap: 500.0,
        }
    }
}

/// Where the ratio regression targets come from.
pub enum RatioTargets<'a> {
    /// Trained domain classifiers: a static one for clean source points and a
    /// time-dependent one for noised target points.
    Learned {
        static_clf: &'a DomainClassifier,
        time_clf: &'a DomainClassifier,
    },
    /// Closed-form mixture densities (for identity-level checks).
    Oracle {
        source: &'a IsotropicGmm,
        target: &'a IsotropicGmm,
        schedule: VpSchedule,
    },
}

impl RatioTargets<'_> {
    fn static_ratio(&self, x0: &Array2<f64>) -> Array1<f64> {
        match self {
            RatioTargets::Learned { static_clf, .. } => static_clf.ratio(x0, None),
            RatioTargets::Oracle { source, target, .. } => Array1::from_iter(
                x0.rows()
                    .into_iter()
                    .map(|r| (target.log_density(r) - source.log_density(r)).exp()),
            ),
        }
    }

    fn time_ratio(&self, xt: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        match self {
            RatioTargets::Learned { time_clf, .. } => time_clf.ratio_rows(xt, times),
            RatioTargets::Oracle { source, target, schedule } => {
                Array1::from_iter(xt.rows().into_iter().zip(times).map(|(r, &t)| {
                    let qt = target.perturbed(schedule, t);
                    let pt = source.perturbed(schedule, t);
                    (qt.log_density(r) - pt.log_density(r)).exp()
                }))
            }
        }
    }
}

/// Frozen source score used inside the consistency term.
pub enum SourceScore<'a> {
    Model(&'a ScoreModel),
    Oracle {
        source: &'a IsotropicGmm,
        schedule: VpSchedule,
    },
}

impl SourceScore<'_> {
    pub fn score_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        match self {
            SourceScore::Model(m) => m.score_rows(x, times, None),
            SourceScore::Oracle { source, schedule } => {
                let mut out = Array2::zeros(x.dim());
                for ((mut o, r), &t) in out.rows_mut().into_iter().zip(x.rows()).zip(times) {
                    o.assign(&source.perturbed(schedule, t).score(r));
                }
                out
            }
        }
    }
}

/// Regression targets for the conditional guidance network: the joint density
/// ratio q(x0, y)/p(x0, y) read off a joint classifier, or its closed form
/// from the per-component conditionals of two labelled mixtures.
pub enum JointRatioTargets<'a> {
    Learned(&'a DomainClassifier),
    Oracle {
        source: &'a IsotropicGmm,
        target: &'a IsotropicGmm,
    },
}

impl JointRatioTargets<'_> {
    fn ratio(&self, x0: &Array2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        match self {
            JointRatioTargets::Learned(clf) => clf.ratio_joint(x0, labels),
            JointRatioTargets::Oracle { source, target } => {
                let vocab = source.num_components().min(target.num_components());
                if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
                    return Err(TgdpError::argument(format!(
                        "label {bad} has no component in a {vocab}-component mixture"
                    )));
                }
                let pairs: Vec<_> =
                    (0..vocab).map(|k| (source.component(k), target.component(k))).collect();
                Ok(Array1::from_iter(x0.rows().into_iter().zip(labels).map(|(r, &l)| {
                    let (p, q) = &pairs[l];
                    (q.log_density(r) - p.log_density(r)).exp()
                })))
            }
        }
    }
}

/// One noised batch: clean points, times, the noise, and the noised points.
struct PerturbedBatch {
    xt: Array2<f64>,
    times: Vec<f64>,
    eps: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct GuidanceLoss {
    /// Mean squared ratio-space residual on noised source points.
    pub guidance: f64,
    /// Mean squared log-space residual on noised target points.
    pub cycle: f64,
    /// Mean squared score residual on noised target points.
    pub consistency: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct GuidanceModel {
    pub net: DenseNetwork,
    pub embedding: TimeEmbedding,
    pub schedule: VpSchedule,
    /// Zero for the unconditional network; otherwise one-hot labels are
    /// appended and h estimates the per-class joint ratio expectation.
    pub num_classes: usize,
}

impl GuidanceModel {
    pub fn new(dim: usize, hidden: &[usize], schedule: VpSchedule) -> Self {
        let embedding = TimeEmbedding::default();
        let net = DenseNetwork::mlp(dim + embedding.dim(), hidden, 1);
        GuidanceModel { net, embedding, schedule, num_classes: 0 }
    }

    /// Conditional network h(x_t, y, t) over a finite label vocabulary.
    pub fn new_conditional(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        schedule: VpSchedule,
    ) -> Self {
        assert!(num_classes > 0, "conditional guidance needs a label vocabulary");
        let embedding = TimeEmbedding::default();
        let net = DenseNetwork::mlp(dim + embedding.dim() + num_classes, hidden, 1);
        GuidanceModel { net, embedding, schedule, num_classes }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.net.init_kaiming(rng);
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim() - self.embedding.dim() - self.num_classes
    }

    fn check_labels(&self, labels: &[usize], rows: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(TgdpError::argument(format!(
                "expected {rows} labels, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(TgdpError::argument(format!(
                "label {bad} outside vocabulary of {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn inputs(&self, x: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        assert!(!self.is_conditional(), "conditional guidance requires labels");
        assemble_inputs(x, Some(&self.embedding), Some(times), None, 0)
    }

    fn inputs_labeled(&self, x: &Array2<f64>, times: &[f64], labels: &[usize]) -> Array2<f64> {
        assemble_inputs(x, Some(&self.embedding), Some(times), Some(labels), self.num_classes)
    }

    /// Raw network output before the positivity map.
    pub fn raw_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        let out = self.net.forward_batch(&self.inputs(x, times));
        out.column(0).to_owned()
    }

    /// h = softplus(raw) + floor, one time per row.
    pub fn h_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        self.raw_rows(x, times).mapv(|r| softplus(r) + H_FLOOR)
    }

    /// h at one shared time.
    pub fn h_at(&self, x: &Array2<f64>, t: f64) -> Array1<f64> {
        self.h_rows(x, &vec![t; x.nrows()])
    }

    /// Conditional h with one label per row.
    pub fn h_rows_labeled(
        &self,
        x: &Array2<f64>,
        times: &[f64],
        labels: &[usize],
    ) -> Result<Array1<f64>> {
        if !self.is_conditional() {
            return Err(TgdpError::argument("guidance network is not label conditioned"));
        }
        self.check_labels(labels, x.nrows())?;
        let out = self.net.forward_batch(&self.inputs_labeled(x, times, labels));
        Ok(out.column(0).mapv(|r| softplus(r) + H_FLOOR))
    }

    /// grad_x log h = (sigmoid(raw)/h) grad_x raw, one time per row.
    pub fn log_h_grad_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        self.log_h_grad_from_inputs(&self.inputs(x, times))
    }

    pub fn log_h_grad_at(&self, x: &Array2<f64>, t: f64) -> Array2<f64> {
        self.log_h_grad_rows(x, &vec![t; x.nrows()])
    }

    /// Conditional grad_x log h at one shared time and label.
    pub fn log_h_grad_at_labeled(
        &self,
        x: &Array2<f64>,
        t: f64,
        label: usize,
    ) -> Result<Array2<f64>> {
        if !self.is_conditional() {
            return Err(TgdpError::argument("guidance network is not label conditioned"));
        }
        let labels = vec![label; x.nrows()];
        self.check_labels(&labels, x.nrows())?;
        let times = vec![t; x.nrows()];
        Ok(self.log_h_grad_from_inputs(&self.inputs_labeled(x, &times, &labels)))
    }

    fn log_h_grad_from_inputs(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let d = self.data_dim();
        let (raw, din) = self.net.value_and_input_grad(inputs);
        let mut out = din.slice(ndarray::s![.., ..d]).to_owned();
        for (mut row, &r) in out.rows_mut().into_iter().zip(raw.iter()) {
            let h = softplus(r) + H_FLOOR;
            let scale = sigmoid(r) / h;
            row.mapv_inplace(|g| scale * g);
        }
        out
    }

    /// Loss and parameter gradient for one prepared step. The ratio targets
    /// and the source score entries are fixed inputs here, so the loss is a
    /// pure function of the network parameters; training and the gradient
    /// checks both go through this.
    fn step_loss_and_grad(
        &self,
        cfg: &GuidanceConfig,
        src: &PerturbedBatch,
        r_static: &Array1<f64>,
        tgt: Option<&PerturbedBatch>,
        r_time: Option<&Array1<f64>>,
        src_score_rows: Option<&Array2<f64>>,
        grad: &mut [f64],
    ) -> GuidanceLoss {
        let d = self.data_dim();
        let bs = src.xt.nrows();
        let mut loss = GuidanceLoss::default();

        // source block: guidance term only
        {
            let inputs = self.inputs(&src.xt, &src.times);
            let (out, cache) = self.net.forward_cached(&inputs);
            let mut dout = Array2::zeros((bs, 1));
            for i in 0..bs {
                let raw = out[[i, 0]];
                let h = softplus(raw) + H_FLOOR;
                let diff = h - r_static[i];
                loss.guidance += diff * diff / bs as f64;
                dout[[i, 0]] =
                    cfg.guidance_weight * (2.0 / bs as f64) * diff * sigmoid(raw);
            }
            if cfg.guidance_weight != 0.0 {
                self.net.backward(&cache, &dout, Some(grad), false);
            }
        }

        // target block: cycle and consistency terms
        if let (Some(tgt), Some(r_time)) = (tgt, r_time) {
            let bt = tgt.xt.nrows();
            let inputs = self.inputs(&tgt.xt, &tgt.times);
            let (out, cache) = self.net.forward_cached(&inputs);
            let raw: Vec<f64> = (0..bt).map(|j| out[[j, 0]]).collect();
            let h: Vec<f64> = raw.iter().map(|&r| softplus(r) + H_FLOOR).collect();

            // The cycle residual lives in log space: its target is a
            // deterministic positive function of (x_t, t) spanning several
            // decades, and the quadratic on logs is what optimizes relative
            // fit. The source-block residual above must stay in ratio space:
            // its targets are stochastic conditional draws, and only the
            // plain quadratic makes the minimizer their conditional mean.
            let mut primal = Array2::zeros((bt, 1));
            for j in 0..bt {
                let diff = h[j].ln() - r_time[j].ln();
                loss.cycle += diff * diff / bt as f64;
                primal[[j, 0]] =
                    cfg.cycle_weight * (2.0 / bt as f64) * diff * sigmoid(raw[j]) / h[j];
            }

            if cfg.consistency_weight != 0.0 {
                let s_src = src_score_rows.expect("consistency needs the source score");
                // per-row input gradient of raw (rows are independent)
                let din = self
                    .net
                    .backward(&cache, &Array2::ones((bt, 1)), None, true)
                    .unwrap();
                let g = din.slice(ndarray::s![.., ..d]);

                let mut xdot = Array2::zeros(inputs.dim());
                let mut dual = Array2::zeros((bt, 1));
                for j in 0..bt {
                    let sig = sigmoid(raw[j]);
                    let s = sig / h[j];
                    let sigma_t = self.schedule.sigma(tgt.times[j]);
                    // e = sigma_t (s_src + s g) + eps
                    let mut e = vec![0.0; d];
                    let mut e_dot_g = 0.0;
                    let mut e_sq = 0.0;
                    for k in 0..d {
                        let ek = sigma_t * (s_src[[j, k]] + s * g[[j, k]]) + tgt.eps[[j, k]];
                        e[k] = ek;
                        e_dot_g += ek * g[[j, k]];
                        e_sq += ek * ek;
                    }
                    loss.consistency += e_sq / bt as f64;
                    let coeff = cfg.consistency_weight * 2.0 * sigma_t / bt as f64;
                    // d(sigmoid/h)/draw
                    let s_prime = (sig * (1.0 - sig) * h[j] - sig * sig) / (h[j] * h[j]);
                    primal[[j, 0]] += coeff * e_dot_g * s_prime;
                    dual[[j, 0]] = coeff * s;
                    for k in 0..d {
                        xdot[[j, k]] = e[k];
                    }
                }
                if cfg.cycle_weight != 0.0 || cfg.consistency_weight != 0.0 {
                    self.net.dual_backward(&inputs, &xdot, &primal, &dual, grad);
                }
            } else if cfg.cycle_weight != 0.0 {
                self.net.backward(&cache, &primal, Some(grad), false);
            }
        }

        loss.total = cfg.guidance_weight * loss.guidance
            + cfg.cycle_weight * loss.cycle
            + cfg.consistency_weight * loss.consistency;
        loss
    }

    /// Train against source samples (guidance term) and target samples (cycle
    /// and consistency terms). Returns per-epoch mean losses.
    pub fn train<R: Rng>(
        &mut self,
        source_x: &Array2<f64>,
        target_x: &Array2<f64>,
        targets: &RatioTargets,
        source_score: Option<&SourceScore>,
        cfg: &GuidanceConfig,
        rng: &mut R,
    ) -> Result<Vec<GuidanceLoss>> {
        let d = self.data_dim();
        if source_x.nrows() == 0 || source_x.ncols() != d {
            return Err(TgdpError::argument(format!(
                "source samples must be non-empty with dimension {d}"
            )));
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(TgdpError::argument("epochs and batch size must be positive"));
        }
        if cfg.guidance_weight < 0.0 || cfg.cycle_weight < 0.0 || cfg.consistency_weight < 0.0 {
            return Err(TgdpError::argument("loss weights must be non-negative"));
        }
        if !(cfg.target_cap > 0.0) {
            return Err(TgdpError::argument("target cap must be positive"));
        }
        let needs_target = cfg.cycle_weight != 0.0 || cfg.consistency_weight != 0.0;
        if needs_target && (target_x.nrows() == 0 || target_x.ncols() != d) {
            return Err(TgdpError::argument(
                "cycle/consistency terms need non-empty target samples",
            ));
        }
        if cfg.consistency_weight != 0.0 && source_score.is_none() {
            return Err(TgdpError::argument(
                "consistency term needs a source score",
            ));
        }

        let m = source_x.nrows();
        let n = target_x.nrows();
        let mut adam = AdamState::new(self.net.param_count(), cfg.learning_rate);
        let mut grad = vec![0.0; self.net.param_count()];
        let mut src_idx: Vec<usize> = (0..m).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut divergence_threshold: Option<f64> = None;
        for _ in 0..cfg.epochs {
            src_idx.shuffle(rng);
            let mut sums = GuidanceLoss::default();
            let mut steps = 0usize;
            for chunk in src_idx.chunks(cfg.batch_size) {
                let bs = chunk.len();
                let mut x0 = Array2::zeros((bs, d));
                for (i, &idx) in chunk.iter().enumerate() {
                    x0.row_mut(i).assign(&source_x.row(idx));
                }
                let r_static = targets.static_ratio(&x0).mapv(|r| r.min(cfg.target_cap));
                let times = sample_times(&self.schedule, rng, bs).to_vec();
                let eps = normal_matrix(rng, bs, d);
                let mut xt = Array2::zeros((bs, d));
                for i in 0..bs {
                    let (a, s) = self.schedule.alpha_sigma(times[i]);
                    for k in 0..d {
                        xt[[i, k]] = a * x0[[i, k]] + s * eps[[i, k]];
                    }
                }
                let src = PerturbedBatch { xt, times, eps };

                let (tgt, r_time, s_rows) = if needs_target {
                    let rows: Vec<usize> = if n <= cfg.batch_size {
                        (0..n).collect()
                    } else {
                        rand::seq::index::sample(rng, n, cfg.batch_size).into_vec()
                    };
                    let bt = rows.len();
                    let mut y0 = Array2::zeros((bt, d));
                    for (j, &idx) in rows.iter().enumerate() {
                        y0.row_mut(j).assign(&target_x.row(idx));
                    }
                    let times = sample_times(&self.schedule, rng, bt).to_vec();
                    let eps = normal_matrix(rng, bt, d);
                    let mut yt = Array2::zeros((bt, d));
                    for j in 0..bt {
                        let (a, s) = self.schedule.alpha_sigma(times[j]);
                        for k in 0..d {
                            yt[[j, k]] = a * y0[[j, k]] + s * eps[[j, k]];
                        }
                    }
                    let r_time = targets
                        .time_ratio(&yt, &times)
                        .mapv(|r| r.clamp(1.0 / cfg.target_cap, cfg.target_cap));
                    let s_rows = if cfg.consistency_weight != 0.0 {
                        Some(source_score.unwrap().score_rows(&yt, &times))
                    } else {
                        None
                    };
                    (Some(PerturbedBatch { xt: yt, times, eps }), Some(r_time), s_rows)
                } else {
                    (None, None, None)
                };

                grad.iter_mut().for_each(|g| *g = 0.0);
                let loss = self.step_loss_and_grad(
                    cfg,
                    &src,
                    &r_static,
                    tgt.as_ref(),
                    r_time.as_ref(),
                    s_rows.as_ref(),
                    &mut grad,
                );
                let threshold = *divergence_threshold
                    .get_or_insert_with(|| (100.0 * loss.total).max(1e6));
                if !loss.total.is_finite() || loss.total > threshold {
                    return Err(TgdpError::numeric(format!(
                        "guidance training diverged: step loss {:e} (threshold {threshold:e})",
                        loss.total
                    )));
                }
                adam.step(self.net.params_mut(), &grad);
                sums.guidance += loss.guidance;
                sums.cycle += loss.cycle;
                sums.consistency += loss.consistency;
                sums.total += loss.total;
                steps += 1;
            }
            let k = steps as f64;
            epoch_losses.push(GuidanceLoss {
                guidance: sums.guidance / k,
                cycle: sums.cycle / k,
                consistency: sums.consistency / k,
                total: sums.total / k,
            });
        }
        Ok(epoch_losses)
    }

    /// Train the conditional network by ratio regression on labelled source
    /// pairs: each step noises a batch and regresses h(x_t, y, t) onto the
    /// joint ratio at the clean point. Cycle and consistency terms are not
    /// part of the conditional objective, so their weights must be zero.
    /// Returns per-epoch mean losses.
    pub fn train_conditional<R: Rng>(
        &mut self,
        source_x: &Array2<f64>,
        source_labels: &[usize],
        targets: &JointRatioTargets,
        cfg: &GuidanceConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if !self.is_conditional() {
            return Err(TgdpError::argument("guidance network is not label conditioned"));
        }
        if source_x.nrows() == 0 || source_x.ncols() != d {
            return Err(TgdpError::argument(format!(
                "source samples must be non-empty with dimension {d}"
            )));
        }
        self.check_labels(source_labels, source_x.nrows())?;
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(TgdpError::argument("epochs and batch size must be positive"));
        }
        if cfg.guidance_weight <= 0.0 {
            return Err(TgdpError::argument("conditional training needs a positive weight"));
        }
        if cfg.cycle_weight != 0.0 || cfg.consistency_weight != 0.0 {
            return Err(TgdpError::argument(
                "conditional guidance trains with the ratio regression term only",
            ));
        }
        if let JointRatioTargets::Learned(clf) = targets {
            if !clf.is_label_aware() || clf.is_time_dependent() {
                return Err(TgdpError::argument(
                    "conditional targets need a static joint classifier",
                ));
            }
            if clf.num_classes != self.num_classes {
                return Err(TgdpError::argument(format!(
                    "classifier vocabulary {} does not match guidance vocabulary {}",
                    clf.num_classes, self.num_classes
                )));
            }
        }

        let m = source_x.nrows();
        let mut adam = AdamState::new(self.net.param_count(), cfg.learning_rate);
        let mut grad = vec![0.0; self.net.param_count()];
        let mut idx: Vec<usize> = (0..m).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut divergence_threshold: Option<f64> = None;
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for chunk in idx.chunks(cfg.batch_size) {
                let b = chunk.len();
                let mut x0 = Array2::zeros((b, d));
                let mut labels = Vec::with_capacity(b);
                for (i, &j) in chunk.iter().enumerate() {
                    x0.row_mut(i).assign(&source_x.row(j));
                    labels.push(source_labels[j]);
                }
                let r = targets.ratio(&x0, &labels)?.mapv(|v| v.min(cfg.target_cap));
                let times = sample_times(&self.schedule, rng, b).to_vec();
                let eps = normal_matrix(rng, b, d);
                let mut xt = Array2::zeros((b, d));
                for i in 0..b {
                    let (a, s) = self.schedule.alpha_sigma(times[i]);
                    for k in 0..d {
                        xt[[i, k]] = a * x0[[i, k]] + s * eps[[i, k]];
                    }
                }
                let inputs = self.inputs_labeled(&xt, &times, &labels);
                let (out, cache) = self.net.forward_cached(&inputs);
                let mut loss = 0.0;
                let mut dout = Array2::zeros((b, 1));
                for i in 0..b {
                    let raw = out[[i, 0]];
                    let h = softplus(raw) + H_FLOOR;
                    let diff = h - r[i];
                    loss += diff * diff / b as f64;
                    dout[[i, 0]] =
                        cfg.guidance_weight * (2.0 / b as f64) * diff * sigmoid(raw);
                }
                let threshold = *divergence_threshold
                    .get_or_insert_with(|| (100.0 * loss).max(1e6));
                if !loss.is_finite() || loss > threshold {
                    return Err(TgdpError::numeric(format!(
                        "conditional guidance diverged: step loss {loss:e} (threshold {threshold:e})"
                    )));
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.net.backward(&cache, &dout, Some(&mut grad), false);
                adam.step(self.net.params_mut(), &grad);
                total += loss;
                steps += 1;
            }
            epoch_losses.push(total / steps as f64);
        }
        Ok(epoch_losses)
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
        if net.output_dim() != 1 {
            return Err(TgdpError::format("guidance checkpoint must have scalar output"));
        }
        let embedding = meta
            .embedding
            .ok_or_else(|| TgdpError::format("guidance checkpoint has no time embedding"))?;
        Ok(GuidanceModel { net, embedding, schedule, num_classes: meta.num_classes })
    }
}

/// Baseline scalar regressor used by classifier guidance without the ratio
/// correction: a raw (unconstrained) network g(x_t, t) fit by least squares
/// to fixed per-example targets, typically log(1 - c(x_0)) from a static
/// domain classifier. Sampling subtracts its input gradient from the source
/// score.
#[derive(Debug, Clone)]
pub struct VanillaGuidance {
    pub net: DenseNetwork,
    pub embedding: TimeEmbedding,
    pub schedule: VpSchedule,
}

impl VanillaGuidance {
    pub fn new(dim: usize, hidden: &[usize], schedule: VpSchedule) -> Self {
        let embedding = TimeEmbedding::default();
        let net = DenseNetwork::mlp(dim + embedding.dim(), hidden, 1);
        VanillaGuidance { net, embedding, schedule }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.net.init_kaiming(rng);
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim() - self.embedding.dim()
    }

    fn inputs(&self, x: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        assemble_inputs(x, Some(&self.embedding), Some(times), None, 0)
    }

    pub fn value_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        self.net.forward_batch(&self.inputs(x, times)).column(0).to_owned()
    }

    /// grad_x g at one shared time.
    pub fn grad_at(&self, x: &Array2<f64>, t: f64) -> Array2<f64> {
        let d = self.data_dim();
        let inputs = self.inputs(x, &vec![t; x.nrows()]);
        let (_, din) = self.net.value_and_input_grad(&inputs);
        din.slice(ndarray::s![.., ..d]).to_owned()
    }

    /// Least-squares regression of g(x_t, t) onto fixed per-example targets,
    /// with fresh noise and times each step.
    pub fn train<R: Rng>(
        &mut self,
        source_x: &Array2<f64>,
        targets: &Array1<f64>,
        cfg: &crate::score::DsmConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if source_x.nrows() == 0 || source_x.ncols() != d {
            return Err(TgdpError::argument(format!(
                "training points must be non-empty with dimension {d}"
            )));
        }
        if targets.len() != source_x.nrows() {
            return Err(TgdpError::argument("one regression target per training point"));
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(TgdpError::argument("epochs and batch size must be positive"));
        }
        let m = source_x.nrows();
        let mut adam = AdamState::new(self.net.param_count(), cfg.learning_rate);
        let mut grad = vec![0.0; self.net.param_count()];
        let mut idx: Vec<usize> = (0..m).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut divergence_threshold: Option<f64> = None;
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            let mut total = 0.0;
            for chunk in idx.chunks(cfg.batch_size) {
                let b = chunk.len();
                let mut x0 = Array2::zeros((b, d));
                let mut y = Array1::zeros(b);
                for (i, &j) in chunk.iter().enumerate() {
                    x0.row_mut(i).assign(&source_x.row(j));
                    y[i] = targets[j];
                }
                let times = sample_times(&self.schedule, rng, b).to_vec();
                let eps = normal_matrix(rng, b, d);
                let mut xt = Array2::zeros((b, d));
                for i in 0..b {
                    let (a, s) = self.schedule.alpha_sigma(times[i]);
                    for k in 0..d {
                        xt[[i, k]] = a * x0[[i, k]] + s * eps[[i, k]];
                    }
                }
                let inputs = self.inputs(&xt, &times);
                let (out, cache) = self.net.forward_cached(&inputs);
                let mut loss = 0.0;
                let mut dout = Array2::zeros((b, 1));
                for i in 0..b {
                    let diff = out[[i, 0]] - y[i];
                    loss += diff * diff / b as f64;
                    dout[[i, 0]] = 2.0 * diff / b as f64;
                }
                let threshold = *divergence_threshold
                    .get_or_insert_with(|| (100.0 * loss).max(1e6));
                if !loss.is_finite() || loss > threshold {
                    return Err(TgdpError::numeric(format!(
                        "baseline guidance diverged: step loss {loss:e} (threshold {threshold:e})"
                    )));
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.net.backward(&cache, &dout, Some(&mut grad), false);
                adam.step(self.net.params_mut(), &grad);
                total += loss * b as f64;
            }
            epoch_losses.push(total / m as f64);
        }
        Ok(epoch_losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = NetMetadata {
            layer_sizes: self.net.layer_sizes().to_vec(),
            activations: self.net.activations().to_vec(),
            embedding: Some(self.embedding.clone()),
            num_classes: 0,
            kind: "vanilla-guidance".to_string(),
        };
        save_checkpoint(path, &self.net, &meta)
    }

    pub fn load(path: &Path, schedule: VpSchedule) -> Result<Self> {
        let (net, meta) = load_checkpoint(path)?;
        let embedding = meta
            .embedding
            .ok_or_else(|| TgdpError::format("checkpoint has no time embedding"))?;
        Ok(VanillaGuidance { net, embedding, schedule })
    }
}
