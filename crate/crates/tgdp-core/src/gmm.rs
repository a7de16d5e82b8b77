//! Closed-form isotropic Gaussian mixtures: densities, scores, forward-process
//! marginals, posteriors over clean data given a noisy observation, and exact
//! density ratios. Ground truth for every identity-level test in the crate.

use crate::error::{Result, TgdpError};
use crate::schedule::VpSchedule;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicGmm {
    /// K x d component means.
    pub means: Array2<f64>,
    /// Shared isotropic variance.
    pub variance: f64,
    /// Mixture weights (simplex).
    pub weights: Vec<f64>,
}

impl IsotropicGmm {
    pub fn new(means: Array2<f64>, variance: f64, weights: Vec<f64>) -> Self {
        assert!(variance > 0.0, "variance must be positive");
        assert_eq!(means.nrows(), weights.len(), "one weight per component");
        assert!(!weights.is_empty(), "need at least one component");
        assert!(weights.iter().all(|&w| w >= 0.0), "weights must be non-negative");
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "weights must sum to 1, got {sum}");
        IsotropicGmm { means, variance, weights }
    }

    /// Symmetric two-component mixture 1/2 N(mu, var I) + 1/2 N(-mu, var I).
    pub fn symmetric_pair(mu: &[f64], variance: f64) -> Self {
        let d = mu.len();
        let mut means = Array2::zeros((2, d));
        for (j, &m) in mu.iter().enumerate() {
            means[[0, j]] = m;
            means[[1, j]] = -m;
        }
        IsotropicGmm::new(means, variance, vec![0.5, 0.5])
    }

    pub fn single(mu: &[f64], variance: f64) -> Self {
        let means = Array2::from_shape_vec((1, mu.len()), mu.to_vec()).unwrap();
        IsotropicGmm::new(means, variance, vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn num_components(&self) -> usize {
        self.means.nrows()
    }

    /// The k-th component as a single Gaussian (the conditional given label k).
    pub fn component(&self, k: usize) -> IsotropicGmm {
        assert!(k < self.num_components(), "component {k} out of range");
        IsotropicGmm::single(self.means.row(k).as_slice().unwrap(), self.variance)
    }

    /// Per-component log densities log(w_k N(x; mu_k, var I)).
    fn component_log_terms(&self, x: ArrayView1<f64>) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        let d = self.dim() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln();
        self.means
            .rows()
            .into_iter()
            .zip(&self.weights)
            .map(|(m, &w)| {
                let sq: f64 = x.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() + norm - sq / (2.0 * self.variance)
                }
            })
            .collect()
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let terms = self.component_log_terms(x);
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: ArrayView1<f64>) -> f64 {
        self.log_density(x).exp()
    }

    pub fn log_density_batch(&self, x: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(x.rows().into_iter().map(|r| self.log_density(r)))
    }

    /// Gradient of log density: sum_k r_k(x) (mu_k - x)/var with posterior
    /// responsibilities r_k.
    pub fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        let mut out = Array1::zeros(self.dim());
        for (k, m) in self.means.rows().into_iter().enumerate() {
            let r = (terms[k] - lse).exp();
            if r > 0.0 {
                for (o, (&mj, &xj)) in out.iter_mut().zip(m.iter().zip(x.iter())) {
                    *o += r * (mj - xj) / self.variance;
                }
            }
        }
        out
    }

    pub fn score_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (mut o, r) in out.rows_mut().into_iter().zip(x.rows()) {
            o.assign(&self.score(r));
        }
        out
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        assert!(n >= 1, "need at least one sample");
        let std = self.variance.sqrt();
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            let mut u: f64 = rng.gen();
            let mut k = 0;
            for (i, &w) in self.weights.iter().enumerate() {
                k = i;
                if u < w {
                    break;
                }
                u -= w;
            }
            let m = self.means.row(k);
            for (v, &mj) in row.iter_mut().zip(m.iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *v = mj + std * z;
            }
        }
        out
    }

    /// Labeled draws: returns samples plus the component index of each row.
    pub fn sample_labeled<R: Rng>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let std = self.variance.sqrt();
        let mut out = Array2::zeros((n, self.dim()));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let mut u: f64 = rng.gen();
            let mut k = 0;
            for (i, &w) in self.weights.iter().enumerate() {
                k = i;
                if u < w {
                    break;
                }
                u -= w;
            }
            labels.push(k);
            let m = self.means.row(k);
            for (v, &mj) in row.iter_mut().zip(m.iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *v = mj + std * z;
            }
        }
        (out, labels)
    }

    /// Marginal distribution of x_t under the forward process: means scaled by
    /// alpha_t, variance alpha_t^2 var + sigma_t^2 (linear-Gaussian pushforward).
    pub fn perturbed(&self, schedule: &VpSchedule, t: f64) -> IsotropicGmm {
        assert!(
            (0.0..=schedule.horizon).contains(&t),
            "time {t} outside [0, {}]",
            schedule.horizon
        );
        let (a, _) = schedule.alpha_sigma(t);
        IsotropicGmm {
            means: &self.means * a,
            variance: a * a * self.variance + schedule.sigma2(t),
            weights: self.weights.clone(),
        }
    }

    /// Posterior over the clean point given a noisy observation x_t: a mixture
    /// whose component k has the linear-Gaussian posterior mean/variance and
    /// weight proportional to w_k N(x_t; alpha mu_k, (alpha^2 var + sigma^2) I).
    ///
    /// At t = 0 the posterior degenerates to a point mass at x_t; this returns
    /// a tiny-variance single component there.
    pub fn posterior_given_noisy(
        &self,
        schedule: &VpSchedule,
        t: f64,
        xt: ArrayView1<f64>,
    ) -> IsotropicGmm {
        if t == 0.0 {
            return IsotropicGmm::new(
                xt.insert_axis(Axis(0)).to_owned(),
                f64::MIN_POSITIVE.max(1e-300),
                vec![1.0],
            );
        }
        let marginal = self.perturbed(schedule, t);
        let log_w = marginal.component_log_terms(xt);
        let lse = log_sum_exp(&log_w);
        let weights: Vec<f64> = log_w.iter().map(|lw| (lw - lse).exp()).collect();

        let a = schedule.alpha(t);
        let s2 = schedule.sigma2(t);
        let v = self.variance * s2 / (s2 + a * a * self.variance);
        let mut means = Array2::zeros((self.num_components(), self.dim()));
        for (k, mut row) in means.rows_mut().into_iter().enumerate() {
            let mk = self.means.row(k);
            for (j, o) in row.iter_mut().enumerate() {
                *o = v * (mk[j] / self.variance + a * xt[j] / s2);
            }
        }
        IsotropicGmm::new(means, v, weights)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// q(x)/p(x), evaluated in log space.
pub fn density_ratio(q: &IsotropicGmm, p: &IsotropicGmm, x: ArrayView1<f64>) -> f64 {
    assert_eq!(q.dim(), p.dim(), "dimension mismatch");
    (q.log_density(x) - p.log_density(x)).exp()
}

/// Mean oracle density of the samples.
pub fn avg_likelihood(samples: &Array2<f64>, gmm: &IsotropicGmm) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(TgdpError::argument("average likelihood of an empty sample set"));
    }
    let lp = gmm.log_density_batch(samples);
    Ok(lp.mapv(f64::exp).mean().unwrap())
}

/// The paper-scale simulation setup: two symmetric two-component mixtures.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimulationSpec {
    pub dim: usize,
    pub mu_source: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub sigma2: f64,
    pub m_source: usize,
    pub n_target: Vec<usize>,
    pub seeds: usize,
    pub conditional: bool,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            dim: 2,
            mu_source: vec![0.5, 0.5],
            mu_target: vec![0.5, -0.5],
            sigma2: 0.1,
            m_source: 10_000,
            n_target: vec![10, 100, 1000],
            seeds: 3,
            conditional: false,
        }
    }
}

impl SimulationSpec {
    pub fn source_gmm(&self) -> IsotropicGmm {
        IsotropicGmm::symmetric_pair(&self.mu_source, self.sigma2)
    }
    pub fn target_gmm(&self) -> IsotropicGmm {
        IsotropicGmm::symmetric_pair(&self.mu_target, self.sigma2)
    }
    /// Conditional slice of the target: component picked by label (0 -> +mu).
    pub fn target_component(&self, label: usize) -> IsotropicGmm {
        assert!(label < 2, "two-component setup has labels 0 and 1");
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let mu: Vec<f64> = self.mu_target.iter().map(|&m| sign * m).collect();
        IsotropicGmm::single(&mu, self.sigma2)
    }
    pub fn source_component(&self, label: usize) -> IsotropicGmm {
        assert!(label < 2, "two-component setup has labels 0 and 1");
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let mu: Vec<f64> = self.mu_source.iter().map(|&m| sign * m).collect();
        IsotropicGmm::single(&mu, self.sigma2)
    }
}
