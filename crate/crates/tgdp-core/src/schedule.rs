//! Variance-preserving noise schedule and forward perturbation.
//!
//! beta(t) is linear in t; the marginal coefficients satisfy
//! log alpha_t = -1/4 (beta1 - beta0) t^2 - 1/2 beta0 t and
//! sigma_t = sqrt(1 - alpha_t^2), so alpha_t^2 + sigma_t^2 = 1.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VpSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub horizon: f64,
    pub t_min: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        VpSchedule { beta0: 0.1, beta1: 20.0, horizon: 1.0, t_min: 1e-3 }
    }
}

impl VpSchedule {
    pub fn validate(&self) {
        assert!(self.beta1 > self.beta0 && self.beta0 > 0.0, "need beta1 > beta0 > 0");
        assert!(self.t_min > 0.0 && self.t_min < self.horizon, "need 0 < t_min < horizon");
    }

    #[inline]
    fn check_range(&self, t: f64) {
        assert!(
            (0.0..=self.horizon).contains(&t),
            "time {t} outside [0, {}]",
            self.horizon
        );
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        self.check_range(t);
        self.beta0 + (self.beta1 - self.beta0) * t / self.horizon
    }

    #[inline]
    pub fn log_alpha(&self, t: f64) -> f64 {
        self.check_range(t);
        let tt = t / self.horizon;
        -0.25 * (self.beta1 - self.beta0) * tt * tt * self.horizon
            - 0.5 * self.beta0 * t
    }

    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    /// sigma_t^2 computed as -expm1(2 log alpha) so it stays accurate near t = 0.
    #[inline]
    pub fn sigma2(&self, t: f64) -> f64 {
        -(2.0 * self.log_alpha(t)).exp_m1()
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).sqrt()
    }

    #[inline]
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        (self.alpha(t), self.sigma(t))
    }

    /// Drift coefficient f(x, t) = -1/2 beta(t) x acts elementwise; this
    /// returns the scalar -1/2 beta(t).
    #[inline]
    pub fn drift_coeff(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Squared diffusion coefficient g(t)^2 = beta(t).
    #[inline]
    pub fn g2(&self, t: f64) -> f64 {
        self.beta(t)
    }

    /// Log signal-to-noise ratio lambda(t) = log(alpha_t / sigma_t).
    #[inline]
    pub fn lambda(&self, t: f64) -> f64 {
        self.log_alpha(t) - 0.5 * self.sigma2(t).ln()
    }

    /// Invert lambda: alpha^2 = sigmoid(2 lambda), then solve the quadratic
    /// in t for log alpha.
    pub fn t_from_lambda(&self, l: f64) -> f64 {
        let log_alpha = -0.5 * (-2.0 * l).exp().ln_1p();
        let a = 0.25 * (self.beta1 - self.beta0) / self.horizon;
        let b = 0.5 * self.beta0;
        let t = (-b + (b * b - 4.0 * a * log_alpha).sqrt()) / (2.0 * a);
        t.clamp(0.0, self.horizon)
    }

    /// x_t = alpha_t x0 + sigma_t noise.
    pub fn perturb(&self, x0: &Array2<f64>, t: f64, noise: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x0.dim(), noise.dim(), "noise shape mismatch");
        let (a, s) = self.alpha_sigma(t);
        x0 * a + noise * s
    }

    /// Conditional score of the forward transition, -(x_t - alpha_t x0)/sigma_t^2.
    pub fn dsm_target(&self, x0: &Array2<f64>, xt: &Array2<f64>, t: f64) -> Array2<f64> {
        assert!(t >= self.t_min, "dsm target undefined below t_min (sigma -> 0)");
        let (a, s2) = (self.alpha(t), self.sigma2(t));
        (xt - &(x0 * a)) * (-1.0 / s2)
    }

    /// Uniform draw on [t_min, horizon].
    pub fn sample_t<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.t_min..self.horizon)
    }
}

/// Standard normal matrix draw.
pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Uniform times on [t_min, horizon], one per row.
pub fn sample_times<R: Rng>(schedule: &VpSchedule, rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| schedule.sample_t(rng)))
}
