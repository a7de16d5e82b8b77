//! Sinusoidal time features for conditioning networks on the diffusion time.
//!
//! A scalar t is mapped to [sin(2*pi*f_k*t), cos(2*pi*f_k*t)] for geometrically
//! spaced frequencies f_k = 0.5 * max_period^(k/(K-1)). The slowest feature,
//! cos(pi*t), is monotone over [0, 1], so distinct times never collide.

use ndarray::{Array2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub num_frequencies: usize,
    pub max_period: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding { num_frequencies: 32, max_period: 1000.0 }
    }
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        2 * self.num_frequencies
    }

    fn frequency(&self, k: usize) -> f64 {
        let kk = self.num_frequencies.max(2) - 1;
        0.5 * self.max_period.powf(k as f64 / kk as f64)
    }

    /// Write the embedding of `t` into `out` (length `dim()`).
    pub fn embed_into(&self, t: f64, mut out: ArrayViewMut1<f64>) {
        assert_eq!(out.len(), self.dim(), "embedding buffer length mismatch");
        let k = self.num_frequencies;
        for j in 0..k {
            let angle = 2.0 * std::f64::consts::PI * self.frequency(j) * t;
            out[j] = angle.sin();
            out[k + j] = angle.cos();
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut v = Array2::zeros((1, self.dim()));
        self.embed_into(t, v.row_mut(0));
        v.into_raw_vec_and_offset().0
    }
}

/// Assemble network inputs [x | embed(t) | one-hot(label)] for a batch.
///
/// `times` is one t per row; `labels`/`num_classes` add one-hot columns when a
/// network is label conditioned (num_classes = 0 means unconditioned).
pub fn assemble_inputs(
    x: &Array2<f64>,
    embedding: Option<&TimeEmbedding>,
    times: Option<&[f64]>,
    labels: Option<&[usize]>,
    num_classes: usize,
) -> Array2<f64> {
    let n = x.nrows();
    let ed = embedding.map_or(0, TimeEmbedding::dim);
    if ed > 0 {
        assert_eq!(times.map(<[f64]>::len), Some(n), "one time per row required");
    }
    if num_classes > 0 {
        assert_eq!(labels.map(<[usize]>::len), Some(n), "one label per row required");
    }
    let d = x.ncols();
    let mut out = Array2::zeros((n, d + ed + num_classes));
    out.slice_mut(ndarray::s![.., 0..d]).assign(x);
    if let (Some(emb), Some(ts)) = (embedding, times) {
        for (i, &t) in ts.iter().enumerate() {
            emb.embed_into(t, out.slice_mut(ndarray::s![i, d..d + ed]));
        }
    }
    if let Some(ls) = labels {
        for (i, &l) in ls.iter().enumerate() {
            assert!(l < num_classes, "label {l} outside vocabulary of {num_classes}");
            out[[i, d + ed + l]] = 1.0;
        }
    }
    out
}
