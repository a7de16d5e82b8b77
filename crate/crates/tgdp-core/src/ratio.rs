//! Domain classifiers and the density ratios they induce.
//!
//! A scalar-logit network is trained to tell source from target samples with
//! balanced batches; writing c = sigmoid(logit) for the probability of
//! "source", the ratio (1 - c)/c estimates target/source density. The static
//! variant sees clean points, the time-dependent variant sees noised points
//! alongside a time embedding and estimates the ratio of the two diffused
//! marginals at that time, and the joint variant appends a one-hot label so
//! the readout estimates the ratio of joint densities q(x, y)/p(x, y).

use crate::checkpoint::{load_checkpoint, save_checkpoint, NetMetadata};
use crate::embed::{assemble_inputs, TimeEmbedding};
use crate::error::{Result, TgdpError};
use crate::net::{sigmoid, softplus, DenseNetwork};
use crate::opt::AdamState;
use crate::schedule::{normal_matrix, VpSchedule};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Hidden widths used for the experiment-scale classifiers.
pub const CLASSIFIER_HIDDEN: &[usize] = &[512, 512, 512, 512];

/// Probabilities are clamped to [CLAMP, 1 - CLAMP] before forming ratios.
pub const CLAMP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    /// Total batch size; half is drawn from each domain.
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 20, batch_size: 4096, learning_rate: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub net: DenseNetwork,
    /// None: classify clean points. Some: classify noised points given t.
    pub embedding: Option<TimeEmbedding>,
    /// Zero for label-free classifiers; otherwise the one-hot vocabulary size.
    pub num_classes: usize,
    pub schedule: VpSchedule,
}

impl DomainClassifier {
    pub fn new_static(dim: usize, hidden: &[usize], schedule: VpSchedule) -> Self {
        DomainClassifier {
            net: DenseNetwork::mlp(dim, hidden, 1),
            embedding: None,
            num_classes: 0,
            schedule,
        }
    }

    pub fn new_time(dim: usize, hidden: &[usize], schedule: VpSchedule) -> Self {
        let embedding = TimeEmbedding::default();
        DomainClassifier {
            net: DenseNetwork::mlp(dim + embedding.dim(), hidden, 1),
            embedding: Some(embedding),
            num_classes: 0,
            schedule,
        }
    }

    /// Static classifier over (x, one-hot y) pairs; its ratio readout
    /// estimates the joint density ratio q(x, y)/p(x, y).
    pub fn new_joint(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        schedule: VpSchedule,
    ) -> Self {
        assert!(num_classes > 0, "joint classifier needs a label vocabulary");
        DomainClassifier {
            net: DenseNetwork::mlp(dim + num_classes, hidden, 1),
            embedding: None,
            num_classes,
            schedule,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.net.init_kaiming(rng);
    }

    pub fn is_time_dependent(&self) -> bool {
        self.embedding.is_some()
    }

    pub fn is_label_aware(&self) -> bool {
        self.num_classes > 0
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim() - self.embedding.as_ref().map_or(0, |e| e.dim()) - self.num_classes
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

    fn inputs(&self, x: &Array2<f64>, t: Option<f64>) -> Array2<f64> {
        assert!(!self.is_label_aware(), "joint classifier requires labels");
        match (&self.embedding, t) {
            (None, None) => x.clone(),
            (Some(emb), Some(t)) => {
                let times = vec![t; x.nrows()];
                assemble_inputs(x, Some(emb), Some(&times), None, 0)
            }
            (None, Some(_)) => panic!("static classifier does not take a time"),
            (Some(_), None) => panic!("time-dependent classifier needs a time"),
        }
    }

    pub fn logits(&self, x: &Array2<f64>, t: Option<f64>) -> Array1<f64> {
        self.net.forward_batch(&self.inputs(x, t)).index_axis(Axis(1), 0).to_owned()
    }

    /// Logits of the joint classifier with one label per row.
    pub fn logits_joint(&self, x: &Array2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        if !self.is_label_aware() {
            return Err(TgdpError::argument("classifier was not trained with labels"));
        }
        self.check_labels(labels, x.nrows())?;
        let inputs = assemble_inputs(x, None, None, Some(labels), self.num_classes);
        Ok(self.net.forward_batch(&inputs).index_axis(Axis(1), 0).to_owned())
    }

    /// Estimated joint density ratio q(x, y)/p(x, y), one label per row.
    pub fn ratio_joint(&self, x: &Array2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        Ok(self.logits_joint(x, labels)?.mapv(|l| {
            let c = sigmoid(l).clamp(CLAMP, 1.0 - CLAMP);
            (1.0 - c) / c
        }))
    }

    /// Logits of the time-dependent classifier with one time per row.
    pub fn logits_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        let emb = self.embedding.as_ref().expect("time-dependent classifier required");
        let inputs = assemble_inputs(x, Some(emb), Some(times), None, 0);
        self.net.forward_batch(&inputs).index_axis(Axis(1), 0).to_owned()
    }

    /// Ratio with one time per row.
    pub fn ratio_rows(&self, x: &Array2<f64>, times: &[f64]) -> Array1<f64> {
        self.logits_rows(x, times)
            .mapv(|l| {
                let c = sigmoid(l).clamp(CLAMP, 1.0 - CLAMP);
                (1.0 - c) / c
            })
    }

    /// Clamped probability that a point came from the source domain.
    pub fn prob_source(&self, x: &Array2<f64>, t: Option<f64>) -> Array1<f64> {
        self.logits(x, t).mapv(|l| sigmoid(l).clamp(CLAMP, 1.0 - CLAMP))
    }

    /// Estimated target/source density ratio (1 - c)/c.
    pub fn ratio(&self, x: &Array2<f64>, t: Option<f64>) -> Array1<f64> {
        self.prob_source(x, t).mapv(|c| (1.0 - c) / c)
    }

    pub fn log_ratio(&self, x: &Array2<f64>, t: Option<f64>) -> Array1<f64> {
        self.prob_source(x, t).mapv(|c| ((1.0 - c) / c).ln())
    }

    /// Balanced logistic training. Each epoch walks the shuffled source set in
    /// half-batch chunks; the target side is resampled with replacement to the
    /// same size, so small target sets are oversampled. The time-dependent
    /// variant draws one shared time per step and noises both sides with it.
    /// Returns per-epoch losses (mean source term + mean target term).
    pub fn train<R: Rng>(
        &mut self,
        source: &Array2<f64>,
        target: &Array2<f64>,
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if self.is_label_aware() {
            return Err(TgdpError::argument("joint classifier needs labelled training data"));
        }
        self.train_impl(source, None, target, None, cfg, rng)
    }

    /// Balanced logistic training on (x, one-hot y) pairs. Target labels must
    /// come from the same vocabulary as the source labels.
    pub fn train_joint<R: Rng>(
        &mut self,
        source: &Array2<f64>,
        source_labels: &[usize],
        target: &Array2<f64>,
        target_labels: &[usize],
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if !self.is_label_aware() {
            return Err(TgdpError::argument("classifier was not built with a label vocabulary"));
        }
        self.check_labels(source_labels, source.nrows())?;
        self.check_labels(target_labels, target.nrows())?;
        self.train_impl(source, Some(source_labels), target, Some(target_labels), cfg, rng)
    }

    fn train_impl<R: Rng>(
        &mut self,
        source: &Array2<f64>,
        source_labels: Option<&[usize]>,
        target: &Array2<f64>,
        target_labels: Option<&[usize]>,
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if source.ncols() != d || target.ncols() != d {
            return Err(TgdpError::argument(format!(
                "classifier expects dimension {d}, got source {} / target {}",
                source.ncols(),
                target.ncols()
            )));
        }
        if source.nrows() == 0 || target.nrows() == 0 {
            return Err(TgdpError::argument("both domains need at least one sample"));
        }
        let half = cfg.batch_size / 2;
        if half == 0 || cfg.epochs == 0 {
            return Err(TgdpError::argument("batch size must be at least 2"));
        }
        let m = source.nrows();
        let mut adam = AdamState::new(self.net.param_count(), cfg.learning_rate);
        let mut grad = vec![0.0; self.net.param_count()];
        let mut divergence_threshold: Option<f64> = None;
        let mut src_idx: Vec<usize> = (0..m).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            src_idx.shuffle(rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for chunk in src_idx.chunks(half) {
                let bs = chunk.len();
                let bt = bs;
                let mut xs = Array2::zeros((bs, d));
                let mut labels = Vec::with_capacity(if self.num_classes > 0 { bs + bt } else { 0 });
                for (i, &idx) in chunk.iter().enumerate() {
                    xs.row_mut(i).assign(&source.row(idx));
                    if let Some(ls) = source_labels {
                        labels.push(ls[idx]);
                    }
                }
                let mut xt = Array2::zeros((bt, d));
                for i in 0..bt {
                    let idx = rng.gen_range(0..target.nrows());
                    xt.row_mut(i).assign(&target.row(idx));
                    if let Some(ls) = target_labels {
                        labels.push(ls[idx]);
                    }
                }
                let shared_t = if self.is_time_dependent() {
                    let t = self.schedule.sample_t(rng);
                    let es = normal_matrix(rng, bs, d);
                    let et = normal_matrix(rng, bt, d);
                    xs = self.schedule.perturb(&xs, t, &es);
                    xt = self.schedule.perturb(&xt, t, &et);
                    Some(t)
                } else {
                    None
                };
                let mut both = Array2::zeros((bs + bt, d));
                both.slice_mut(ndarray::s![..bs, ..]).assign(&xs);
                both.slice_mut(ndarray::s![bs.., ..]).assign(&xt);
                let inputs = if self.num_classes > 0 {
                    assemble_inputs(&both, None, None, Some(&labels), self.num_classes)
                } else {
                    self.inputs(&both, shared_t)
                };
                let (out, cache) = self.net.forward_cached(&inputs);
                let mut loss = 0.0;
                let mut dout = Array2::zeros((bs + bt, 1));
                for i in 0..bs + bt {
                    let l = out[[i, 0]];
                    let c = sigmoid(l);
                    if i < bs {
                        loss += softplus(-l) / bs as f64;
                        dout[[i, 0]] = (c - 1.0) / bs as f64;
                    } else {
                        loss += softplus(l) / bt as f64;
                        dout[[i, 0]] = c / bt as f64;
                    }
                }
                let threshold =
                    *divergence_threshold.get_or_insert_with(|| (100.0 * loss).max(1e6));
                if !loss.is_finite() || loss > threshold {
                    return Err(TgdpError::numeric(format!(
                        "classifier diverged: step loss {loss:e} (threshold {threshold:e})"
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
            embedding: self.embedding.clone(),
            num_classes: self.num_classes,
            kind: kind.to_string(),
        };
        save_checkpoint(path, &self.net, &meta)
    }

    pub fn load(path: &Path, schedule: VpSchedule) -> Result<Self> {
        let (net, meta) = load_checkpoint(path)?;
        if net.output_dim() != 1 {
            return Err(TgdpError::format("classifier checkpoint must have scalar output"));
        }
        Ok(DomainClassifier {
            net,
            embedding: meta.embedding,
            num_classes: meta.num_classes,
            schedule,
        })
    }
}

/// Write a classifier's ratio landscape over a 2-D box as delimited text with
/// header "x,y,ratio", one grid point per row, x varying fastest. Pass the
/// evaluation time for a time-dependent classifier and None for a static one.
pub fn write_ratio_grid(
    clf: &DomainClassifier,
    t: Option<f64>,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
    path: &Path,
) -> Result<()> {
    if clf.data_dim() != 2 {
        return Err(TgdpError::argument("ratio grids are for 2-D classifiers"));
    }
    if clf.is_label_aware() {
        return Err(TgdpError::argument("ratio grids are for label-free classifiers"));
    }
    if clf.is_time_dependent() != t.is_some() {
        return Err(TgdpError::argument(
            "pass a time exactly when the classifier is time-dependent",
        ));
    }
    if resolution < 2 {
        return Err(TgdpError::argument("grid resolution must be at least 2"));
    }
    if !(x_range.0 < x_range.1 && y_range.0 < y_range.1) {
        return Err(TgdpError::argument("grid ranges must be increasing intervals"));
    }
    let n = resolution;
    let coord = |range: (f64, f64), i: usize| {
        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
    };
    let mut grid = Array2::zeros((n * n, 2));
    for iy in 0..n {
        for ix in 0..n {
            grid[[iy * n + ix, 0]] = coord(x_range, ix);
            grid[[iy * n + ix, 1]] = coord(y_range, iy);
        }
    }
    let ratio = clf.ratio(&grid, t);
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "x,y,ratio")?;
    for i in 0..n * n {
        writeln!(w, "{},{},{}", grid[[i, 0]], grid[[i, 1]], ratio[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 1);
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt()).max(1e-300)
}
