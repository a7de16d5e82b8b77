//! Sample-quality metrics: k-nearest-neighbor coverage, Fréchet distance
//! between Gaussian fits, and the energy-distance two-sample permutation test.

use crate::error::{Result, TgdpError};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of real points whose k-th nearest-neighbor ball (radius measured
/// among the other real points) contains at least one generated point.
pub fn coverage(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> Result<f64> {
    let n = real.nrows();
    if n < 2 || fake.nrows() == 0 {
        return Err(TgdpError::argument("coverage needs >= 2 real and >= 1 fake points"));
    }
    if k == 0 || k >= n {
        return Err(TgdpError::argument(format!(
            "neighbor index k={k} must be in 1..{n}"
        )));
    }
    if real.ncols() != fake.ncols() {
        return Err(TgdpError::argument("dimension mismatch between sample sets"));
    }
    let mut covered = 0usize;
    let mut dists = vec![0.0; n - 1];
    for (i, xi) in real.rows().into_iter().enumerate() {
        let mut w = 0;
        for (j, xj) in real.rows().into_iter().enumerate() {
            if i != j {
                dists[w] = euclidean(xi, xj);
                w += 1;
            }
        }
        let (_, radius, _) =
            dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let radius = *radius;
        if fake.rows().into_iter().any(|y| euclidean(xi, y) <= radius) {
            covered += 1;
        }
    }
    Ok(covered as f64 / n as f64)
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 {
        return Err(TgdpError::argument("need at least two samples to fit a Gaussian"));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov = Array2::zeros((d, d));
    for row in x.rows() {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..d {
                cov[[a, b]] += da * (row[b] - mean[b]);
            }
        }
    }
    cov.mapv_inplace(|v| v / (n - 1) as f64);
    Ok((mean, cov))
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet (2-Wasserstein) distance squared between two Gaussians:
/// |m1 - m2|^2 + tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}).
pub fn frechet_gaussian(
    mean1: &Array1<f64>,
    cov1: &Array2<f64>,
    mean2: &Array1<f64>,
    cov2: &Array2<f64>,
) -> Result<f64> {
    let d = mean1.len();
    if mean2.len() != d || cov1.dim() != (d, d) || cov2.dim() != (d, d) {
        return Err(TgdpError::argument("inconsistent Gaussian dimensions"));
    }
    let to_na = |a: &Array2<f64>| {
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = a[[i, j]];
            }
        }
        // tiny diagonal jitter guards the square roots near singularity
        for i in 0..d {
            m[(i, i)] += 1e-10;
        }
        m
    };
    let c1 = to_na(cov1);
    let c2 = to_na(cov2);
    let s1 = symmetric_sqrt(&c1);
    let inner = &s1 * &c2 * &s1;
    let cross = symmetric_sqrt(&inner);
    let mean_term: f64 = mean1
        .iter()
        .zip(mean2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace = c1.trace() + c2.trace() - 2.0 * cross.trace();
    let value = mean_term + trace;
    if !value.is_finite() {
        return Err(TgdpError::numeric("non-finite Fréchet distance"));
    }
    // numerically the trace term can dip slightly below zero for equal inputs
    Ok(value.max(0.0))
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_fit(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (m1, c1) = fit_gaussian(a)?;
    let (m2, c2) = fit_gaussian(b)?;
    frechet_gaussian(&m1, &c1, &m2, &c2)
}

/// Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| with the within-set means
/// taken over distinct pairs.
pub fn energy_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let m = y.nrows();
    assert!(n >= 2 && m >= 2, "need at least two points per set");
    assert_eq!(x.ncols(), y.ncols(), "dimension mismatch");
    let mut cross = 0.0;
    for xi in x.rows() {
        for yj in y.rows() {
            cross += euclidean(xi, yj);
        }
    }
    cross /= (n * m) as f64;
    let mut within_x = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            within_x += euclidean(x.row(i), x.row(j));
        }
    }
    within_x *= 2.0 / (n as f64 * (n - 1) as f64);
    let mut within_y = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            within_y += euclidean(y.row(i), y.row(j));
        }
    }
    within_y *= 2.0 / (m as f64 * (m - 1) as f64);
    2.0 * cross - within_x - within_y
}

/// Scaled statistic nm/(n+m) * energy distance; its null distribution has a
/// size-free limit, so permuted subsamples calibrate the full-sample value.
pub fn energy_statistic(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let m = y.nrows() as f64;
    n * m / (n + m) * energy_distance(x, y)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EnergyTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Two-sample permutation test on the scaled energy statistic. The observed
/// statistic uses the full sets; the null draws `permutations` label
/// shuffles of subsampled sets (at most `subsample` points per side) to keep
/// the quadratic pair sums affordable.
pub fn energy_permutation_test<R: Rng>(
    x: &Array2<f64>,
    y: &Array2<f64>,
    permutations: usize,
    subsample: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<EnergyTestResult> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(TgdpError::argument("need at least two points per set"));
    }
    if permutations == 0 || subsample < 2 {
        return Err(TgdpError::argument("need permutations >= 1 and subsample >= 2"));
    }
    let observed = energy_statistic(x, y);

    let take = |a: &Array2<f64>, count: usize, rng: &mut R| {
        let mut idx: Vec<usize> = (0..a.nrows()).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        let mut out = Array2::zeros((count, a.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&a.row(j));
        }
        out
    };
    let nx = x.nrows().min(subsample);
    let ny = y.nrows().min(subsample);
    let sx = take(x, nx, rng);
    let sy = take(y, ny, rng);
    let mut pool = Array2::zeros((nx + ny, x.ncols()));
    pool.slice_mut(ndarray::s![..nx, ..]).assign(&sx);
    pool.slice_mut(ndarray::s![nx.., ..]).assign(&sy);

    let mut exceed = 0usize;
    let mut order: Vec<usize> = (0..nx + ny).collect();
    for _ in 0..permutations {
        order.shuffle(rng);
        let mut px = Array2::zeros((nx, x.ncols()));
        let mut py = Array2::zeros((ny, x.ncols()));
        for (i, &j) in order[..nx].iter().enumerate() {
            px.row_mut(i).assign(&pool.row(j));
        }
        for (i, &j) in order[nx..].iter().enumerate() {
            py.row_mut(i).assign(&pool.row(j));
        }
        if energy_statistic(&px, &py) >= observed {
            exceed += 1;
        }
    }
    let p_value = (1 + exceed) as f64 / (1 + permutations) as f64;
    Ok(EnergyTestResult { statistic: observed, p_value, reject: p_value <= alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::IsotropicGmm;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn coverage_reference_case() {
        let real = array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let fake = array![[0.5, 0.0]];
        assert_abs_diff_eq!(coverage(&real, &fake, 1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        // identical sets are fully covered; distant fakes cover nothing
        assert_abs_diff_eq!(coverage(&real, &real, 1).unwrap(), 1.0);
        let far = array![[100.0, 100.0]];
        assert_abs_diff_eq!(coverage(&real, &far, 1).unwrap(), 0.0);
        assert_abs_diff_eq!(coverage(&real, &fake, 2).unwrap(), 1.0);
        assert!(coverage(&real, &fake, 3).is_err());
        assert!(coverage(&real, &fake, 0).is_err());
    }

    #[test]
    fn coverage_detects_a_dropped_mode() {
        let gmm = IsotropicGmm::symmetric_pair(&[0.5, -0.5], 0.1);
        let one_mode = IsotropicGmm::single(&[0.5, -0.5], 0.1);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let real = gmm.sample(1000, &mut rng);
        let both = gmm.sample(1000, &mut rng);
        let half = one_mode.sample(1000, &mut rng);
        let c_full = coverage(&real, &both, 5).unwrap();
        let c_half = coverage(&real, &half, 5).unwrap();
        assert!(c_full > 0.9, "full coverage {c_full}");
        assert!(c_half < 0.65 && c_half > 0.3, "one-mode coverage {c_half}");
    }

    #[test]
    fn frechet_reference_values() {
        let m1 = array![0.1, -0.2];
        let c1 = array![[2.0, 0.5], [0.5, 1.0]];
        let m2 = array![1.0, 0.4];
        let c2 = array![[1.0, -0.3], [-0.3, 3.0]];
        assert_abs_diff_eq!(
            frechet_gaussian(&m1, &c1, &m2, &c2).unwrap(),
            2.0993118549677767,
            epsilon = 1e-8
        );
        assert_abs_diff_eq!(frechet_gaussian(&m1, &c1, &m1, &c1).unwrap(), 0.0, epsilon = 1e-8);
        // isotropic case: trace term (1 - 2)^2 per coordinate
        let z = array![0.0, 0.0];
        let i2 = array![[1.0, 0.0], [0.0, 1.0]];
        let i8 = array![[4.0, 0.0], [0.0, 4.0]];
        assert_abs_diff_eq!(frechet_gaussian(&z, &i2, &z, &i8).unwrap(), 2.0, epsilon = 1e-8);
    }

    #[test]
    fn gaussian_fit_recovers_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let gmm = IsotropicGmm::single(&[1.0, -2.0], 0.25);
        let x = gmm.sample(100_000, &mut rng);
        let (mean, cov) = fit_gaussian(&x).unwrap();
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 0.01);
        assert_abs_diff_eq!(mean[1], -2.0, epsilon = 0.01);
        assert_abs_diff_eq!(cov[[0, 0]], 0.25, epsilon = 0.01);
        assert_abs_diff_eq!(cov[[1, 1]], 0.25, epsilon = 0.01);
        assert_abs_diff_eq!(cov[[0, 1]], 0.0, epsilon = 0.01);
        // Fréchet of two fits of the same distribution is near zero
        let y = gmm.sample(100_000, &mut rng);
        assert!(frechet_fit(&x, &y).unwrap() < 1e-3);
    }

    #[test]
    fn energy_distance_reference_case() {
        let x = array![[0.0, 0.0], [1.0, 0.0]];
        let y = array![[0.0, 1.0], [2.0, 0.0]];
        assert_abs_diff_eq!(
            energy_distance(&x, &y),
            -0.5289611963132423,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            energy_statistic(&x, &y),
            -0.5289611963132423,
            epsilon = 1e-15
        );
    }

    #[test]
    fn energy_distance_separates_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let p = IsotropicGmm::single(&[0.0], 1.0);
        let q = IsotropicGmm::single(&[1.0], 1.0);
        let a = p.sample(800, &mut rng);
        let b = p.sample(800, &mut rng);
        let c = q.sample(800, &mut rng);
        let same = energy_distance(&a, &b);
        let diff = energy_distance(&a, &c);
        assert!(same.abs() < 0.05, "same-distribution energy {same}");
        assert!(diff > 0.2, "shifted-distribution energy {diff}");
    }

    #[test]
    fn permutation_test_calibration() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let p = IsotropicGmm::single(&[0.0], 1.0);
        let q = IsotropicGmm::single(&[0.5], 1.0);
        let a = p.sample(1500, &mut rng);
        let b = p.sample(1500, &mut rng);
        let c = q.sample(1500, &mut rng);
        let same = energy_permutation_test(&a, &b, 199, 500, 0.05, &mut rng).unwrap();
        assert!(!same.reject, "false rejection with p={}", same.p_value);
        let diff = energy_permutation_test(&a, &c, 199, 500, 0.05, &mut rng).unwrap();
        assert!(diff.reject, "missed shift with p={}", diff.p_value);
        assert_abs_diff_eq!(diff.p_value, 1.0 / 200.0, epsilon = 1e-12);
    }

    #[test]
    fn permutation_test_is_deterministic() {
        let p = IsotropicGmm::single(&[0.0, 0.0], 1.0);
        let run = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = p.sample(300, &mut rng);
            let b = p.sample(300, &mut rng);
            energy_permutation_test(&a, &b, 49, 200, 0.05, &mut rng).unwrap()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn argument_validation() {
        let x = Array2::zeros((1, 2));
        let y = Array2::zeros((5, 2));
        assert!(coverage(&x, &y, 1).is_err());
        assert!(fit_gaussian(&x).is_err());
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(energy_permutation_test(&x, &y, 10, 10, 0.05, &mut rng).is_err());
        let m = array![0.0];
        let c = array![[1.0]];
        let m2 = array![0.0, 0.0];
        let c2 = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(frechet_gaussian(&m, &c, &m2, &c2).is_err());
    }
}
