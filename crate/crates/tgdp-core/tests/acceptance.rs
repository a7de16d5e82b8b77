//! Acceptance suite: ten end-to-end criteria, one test each. Every test
//! prints a single verdict line of the form `ACCEPTANCE <k> <name>: PASS`.
//!
//! Criteria 1, 5, 8, and 9 read the full-scale study fixture, which is the
//! ordinary pipeline run under `target/acceptance_work/full`. The fixture is
//! computed on first use and reused afterwards thanks to the pipeline's
//! phase cache, so only the first invocation on a clean tree pays the
//! multi-hour single-core training cost.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tgdp_core::guidance::{GuidanceModel, RatioTargets, SourceScore};
use tgdp_core::net::{finite_difference, DenseNetwork};
use tgdp_core::ratio::DomainClassifier;
use tgdp_core::sampler::{sample_sde, solve_ode_from, OracleScore, TimeGrid};
use tgdp_core::{
    energy_permutation_test, ExperimentConfig, GuidanceConfig, IsotropicGmm, MetricRecord,
    Pipeline, VpSchedule,
};

fn verdict(k: usize, name: &str, pass: bool, detail: String) {
    println!("ACCEPTANCE {k} {name}: {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {k} ({name}): {detail}");
}

fn source_pair() -> IsotropicGmm {
    IsotropicGmm::symmetric_pair(&[0.5, 0.5], 0.1)
}

fn target_pair() -> IsotropicGmm {
    IsotropicGmm::symmetric_pair(&[0.5, -0.5], 0.1)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-300)
}

/// Lattice points carrying the top `mass` fraction of the density, greedily
/// by density, over a rectangle that contains all component means.
fn mass_grid(density: impl Fn(f64, f64) -> f64, res: usize, half_width: f64, mass: f64) -> Vec<[f64; 2]> {
    let mut cells: Vec<([f64; 2], f64)> = Vec::with_capacity(res * res);
    let mut total = 0.0;
    for i in 0..res {
        for j in 0..res {
            let x = -half_width + 2.0 * half_width * i as f64 / (res - 1) as f64;
            let y = -half_width + 2.0 * half_width * j as f64 / (res - 1) as f64;
            let d = density(x, y);
            total += d;
            cells.push(([x, y], d));
        }
    }
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for (point, d) in cells {
        kept.push(point);
        acc += d;
        if acc >= mass * total {
            break;
        }
    }
    kept
}

fn rows(points: &[[f64; 2]]) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), 2));
    for (i, p) in points.iter().enumerate() {
        out[[i, 0]] = p[0];
        out[[i, 1]] = p[1];
    }
    out
}

// ---------------------------------------------------------------------------
// full-scale fixture

struct Fixture {
    dir: PathBuf,
    records: Vec<MetricRecord>,
}

impl Fixture {
    /// Mean over seeds of one metric cell.
    fn mean(&self, method: &str, n: Option<usize>, metric: &str) -> f64 {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.n == n && r.metric == metric)
            .map(|r| r.value)
            .collect();
        assert!(!vals.is_empty(), "no records for {method}/{n:?}/{metric}");
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().to_path_buf()
}

fn fixture_config() -> ExperimentConfig {
    ExperimentConfig {
        output_dir: workspace_root().join("target/acceptance_work/full"),
        ..ExperimentConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = fixture_config();
        let dir = cfg.output_dir.clone();
        let pipe = Pipeline::new(cfg).expect("fixture config");
        pipe.run_all(false).expect("fixture pipeline");
        let text = std::fs::read_to_string(dir.join("results.jsonl")).expect("fixture results");
        let records = text
            .lines()
            .map(|l| serde_json::from_str(l).expect("fixture record"))
            .collect();
        Fixture { dir, records }
    })
}

// ---------------------------------------------------------------------------
// criteria

#[test]
fn criterion_01_method_ordering_and_magnitudes() {
    let fx = fixture();
    let mut ok = true;
    let mut detail = String::new();
    for n in [10usize, 100, 1000] {
        let tgdp = fx.mean("tgdp", Some(n), "avg_likelihood");
        let finetune = fx.mean("finetune", Some(n), "avg_likelihood");
        let vanilla = fx.mean("vanilla", Some(n), "avg_likelihood");
        detail.push_str(&format!(
            "n={n}: tgdp {tgdp:.3}, finetune {finetune:.3}, vanilla {vanilla:.3}; "
        ));
        ok &= tgdp > finetune && finetune > vanilla;
        if n >= 100 {
            ok &= tgdp - vanilla >= 0.10;
        }
        if n == 1000 {
            ok &= (0.50..=0.80).contains(&tgdp);
        }
    }
    verdict(1, "method-ordering", ok, detail);
}

#[test]
fn criterion_02_closed_form_guidance_identity() {
    // the exact guidance field: difference of diffused scores equals the
    // gradient of the diffused log ratio, checked against central differences
    let sch = VpSchedule::default();
    let p = source_pair();
    let q = target_pair();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for t in [0.1, 0.3, 0.5, 0.9] {
        let pt = p.perturbed(&sch, t);
        let qt = q.perturbed(&sch, t);
        for i in 0..10 {
            for j in 0..10 {
                // lattice kept off the symmetry axes so the field never vanishes
                let x = -1.13 + 2.4 * i as f64 / 9.0;
                let y = -1.17 + 2.4 * j as f64 / 9.0;
                let point = ndarray::array![x, y];
                let analytic = &qt.score(point.view()) - &pt.score(point.view());
                let mut fd = [0.0f64; 2];
                for (k, slot) in fd.iter_mut().enumerate() {
                    let mut up = point.clone();
                    up[k] += h;
                    let mut down = point.clone();
                    down[k] -= h;
                    let log_ratio = |z: ndarray::ArrayView1<f64>| {
                        qt.log_density(z) - pt.log_density(z)
                    };
                    *slot = (log_ratio(up.view()) - log_ratio(down.view())) / (2.0 * h);
                }
                let diff = ((analytic[0] - fd[0]).powi(2) + (analytic[1] - fd[1]).powi(2)).sqrt();
                let norm = (fd[0] * fd[0] + fd[1] * fd[1]).sqrt().max(1e-8);
                worst = worst.max(diff / norm);
            }
        }
    }
    verdict(
        2,
        "closed-form-guidance-identity",
        worst <= 1e-6,
        format!("max relative error {worst:.3e}"),
    );
}

#[test]
fn criterion_03_posterior_expectation_identity() {
    // E over the diffusion posterior of the clean-data ratio equals the
    // diffused-marginal ratio. The ratio under source-posterior draws is
    // lognormal-tailed once the noise bridges the mode gap (log-sd ~ 3 at
    // mid t), so the plain sample mean at 10^4 draws sits below the true
    // value and its empirical standard error misses the unsampled tail.
    // Drawing half the points from each domain's posterior at the same
    // (x_t, t) and importance-weighting bounds the integrand by twice the
    // true ratio, which makes the 3-standard-error band valid; the frozen
    // seed then makes the check a deterministic instance.
    let sch = VpSchedule::default();
    let p = source_pair();
    let q = target_pair();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let draws = 10_000;
    let half = draws / 2;
    let mut failures = Vec::new();
    for case in 0..100 {
        let t = sch.t_min + (sch.horizon - sch.t_min) * rand::Rng::gen::<f64>(&mut rng);
        let pt = p.perturbed(&sch, t);
        let xt = pt.sample(1, &mut rng);
        let xt = xt.row(0);
        let post_p = p.posterior_given_noisy(&sch, t, xt);
        let post_q = q.posterior_given_noisy(&sch, t, xt);
        let mut x0 = post_p.sample(half, &mut rng);
        x0.append(ndarray::Axis(0), post_q.sample(half, &mut rng).view()).unwrap();
        let weights: Vec<f64> = x0
            .rows()
            .into_iter()
            .map(|r| {
                let log_ratio = q.log_density(r) - p.log_density(r);
                let lp = post_p.log_density(r);
                let lq = post_q.log_density(r);
                let log_mix = lp.max(lq)
                    + (0.5 * (lp - lp.max(lq)).exp() + 0.5 * (lq - lp.max(lq)).exp()).ln();
                (log_ratio + lp - log_mix).exp()
            })
            .collect();
        let mean = weights.iter().sum::<f64>() / draws as f64;
        let var =
            weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
        let se = (var / draws as f64).sqrt();
        let exact = (q.perturbed(&sch, t).log_density(xt) - pt.log_density(xt)).exp();
        let dev = (mean - exact).abs();
        if dev > 3.0 * se {
            failures.push(format!(
                "case {case}: t={t:.3}, mc {mean:.4} vs exact {exact:.4}, {:.1} se",
                dev / se
            ));
        }
    }
    verdict(
        3,
        "posterior-expectation-identity",
        failures.is_empty(),
        failures.join("; "),
    );
}

#[test]
fn criterion_04_learned_guidance_fidelity() {
    // guidance network trained at full scale with exact ratio targets must
    // reproduce the diffused ratio and steer the source score to the target
    let sch = VpSchedule::default();
    let p = source_pair();
    let q = target_pair();
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let source_x = p.sample(10_000, &mut rng);
    let target_x = q.sample(1000, &mut rng);
    let mut model = GuidanceModel::new(2, &[512, 512, 512, 512], sch.clone());
    model.init(&mut rng);
    let targets = RatioTargets::Oracle { source: &p, target: &q, schedule: sch.clone() };
    let sscore = SourceScore::Oracle { source: &p, schedule: sch.clone() };
    model
        .train(&source_x, &target_x, &targets, Some(&sscore), &GuidanceConfig::default(), &mut rng)
        .unwrap();

    let mut ok = true;
    let mut detail = String::new();
    let mut rel_errs = Vec::new();
    for t in [0.1, 0.5] {
        let qt = q.perturbed(&sch, t);
        let pt = p.perturbed(&sch, t);
        let grid = mass_grid(|x, y| qt.density(ndarray::array![x, y].view()), 40, 1.6, 0.99);
        let x = rows(&grid);
        let h = model.h_at(&x, t);
        let grads = model.log_h_grad_at(&x, t);
        let mut cosines = Vec::new();
        for (i, point) in grid.iter().enumerate() {
            let pv = ndarray::array![point[0], point[1]];
            let exact = (qt.log_density(pv.view()) - pt.log_density(pv.view())).exp();
            rel_errs.push((h[i] - exact).abs() / exact);
            let guided = &pt.score(pv.view()) + &grads.row(i);
            let target_score = qt.score(pv.view());
            cosines.push(cosine(guided.as_slice().unwrap(), target_score.as_slice().unwrap()));
        }
        let med_cos = median(&mut cosines);
        detail.push_str(&format!("t={t}: median cosine {med_cos:.3}; "));
        ok &= med_cos >= 0.9;
    }
    let med_rel = median(&mut rel_errs);
    detail.push_str(&format!("median ratio relative error {med_rel:.3}"));
    ok &= med_rel <= 0.20;
    verdict(4, "learned-guidance-fidelity", ok, detail);
}

#[test]
fn criterion_05_ratio_landscape_correlation() {
    // the few-sample classifiers must rank the clean-data log ratio the way
    // the oracle does over the jointly likely region
    let fx = fixture();
    let cfg = fixture_config();
    let p = source_pair();
    let q = target_pair();
    let grid = mass_grid(
        |x, y| {
            let pv = ndarray::array![x, y];
            0.5 * p.density(pv.view()) + 0.5 * q.density(pv.view())
        },
        40,
        1.6,
        0.99,
    );
    let x = rows(&grid);
    let oracle: Vec<f64> = grid
        .iter()
        .map(|pt| {
            let pv = ndarray::array![pt[0], pt[1]];
            q.log_density(pv.view()) - p.log_density(pv.view())
        })
        .collect();
    let mut ok = true;
    let mut detail = String::new();
    for (n, bound) in [(1000usize, 0.9), (10usize, 0.6)] {
        let mut corrs = Vec::new();
        for s in 0..cfg.simulation.seeds {
            let path = fx.dir.join(format!("seed_{s}/models/classifier_{n}.ckpt"));
            let clf = DomainClassifier::load(&path, cfg.schedule).unwrap();
            let learned = clf.log_ratio(&x, None);
            corrs.push(pearson(learned.as_slice().unwrap(), &oracle));
        }
        let mean_corr = corrs.iter().sum::<f64>() / corrs.len() as f64;
        detail.push_str(&format!("n={n}: mean correlation {mean_corr:.3} {corrs:.3?}; "));
        ok &= mean_corr >= bound;
    }
    verdict(5, "ratio-landscape-correlation", ok, detail);
}

#[test]
fn criterion_06_differentiation_matches_finite_differences() {
    // parameter, input, and nested (forward-over-reverse) derivatives against
    // central differences on fifty randomized small networks
    let mut worst_param = 0.0f64;
    let mut worst_input = 0.0f64;
    let mut worst_nested = 0.0f64;
    let rel = |a: &[f64], b: &[f64]| {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-10);
        diff / norm
    };
    for instance in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(instance);
        let gen = |rng: &mut ChaCha20Rng, lo: usize, hi: usize| {
            lo + (rand::Rng::gen::<u64>(rng) as usize) % (hi - lo + 1)
        };
        let din = gen(&mut rng, 2, 5);
        let dout = gen(&mut rng, 1, 3);
        let depth = gen(&mut rng, 1, 3);
        let hidden: Vec<usize> = (0..depth).map(|_| gen(&mut rng, 3, 8)).collect();
        let b = gen(&mut rng, 2, 5);
        let mut net = DenseNetwork::mlp(din, &hidden, dout);
        net.init_kaiming(&mut rng);
        let gauss = IsotropicGmm::single(&vec![0.0; din], 1.0);
        let x = gauss.sample(b, &mut rng);
        let seed_primal = {
            let g = IsotropicGmm::single(&vec![0.0; dout], 1.0);
            g.sample(b, &mut rng)
        };
        let seed_dual = {
            let g = IsotropicGmm::single(&vec![0.0; dout], 1.0);
            g.sample(b, &mut rng)
        };
        let xdot = gauss.sample(b, &mut rng);

        // (a) parameter gradient of a weighted quadratic loss
        let loss = |y: &Array2<f64>| {
            let v = y.iter().map(|o| o * o).sum::<f64>();
            (v, y.mapv(|o| 2.0 * o))
        };
        let (_, grad) = net.param_gradient(&x, loss);
        let fd = finite_difference(net.params(), 1e-5, |params| {
            let mut probe = net.clone();
            probe.set_params(params);
            probe.forward_batch(&x).iter().map(|o| o * o).sum::<f64>()
        });
        worst_param = worst_param.max(rel(&grad, &fd));

        // (b) input gradient of a scalar readout sum_i <w_i, net(x_i)>
        let (out, cache) = net.forward_cached(&x);
        let dout_mat = if dout == 1 {
            Array2::ones((b, 1))
        } else {
            seed_primal.clone()
        };
        let _ = out;
        let din_grad = net.backward(&cache, &dout_mat, None, true).unwrap();
        let mut fd_input = Array2::zeros((b, din));
        let readout = |m: &DenseNetwork, x: &Array2<f64>| -> f64 {
            let y = m.forward_batch(x);
            y.iter().zip(dout_mat.iter()).map(|(a, w)| a * w).sum()
        };
        for i in 0..b {
            for j in 0..din {
                let mut up = x.clone();
                up[[i, j]] += 1e-5;
                let mut down = x.clone();
                down[[i, j]] -= 1e-5;
                fd_input[[i, j]] = (readout(&net, &up) - readout(&net, &down)) / 2e-5;
            }
        }
        worst_input = worst_input.max(rel(
            din_grad.as_slice().unwrap(),
            fd_input.as_slice().unwrap(),
        ));

        // (c) nested parameter gradient of a functional that includes a
        // directional input derivative
        let mut nested = vec![0.0; net.param_count()];
        net.dual_backward(&x, &xdot, &seed_primal, &seed_dual, &mut nested);
        let fd_nested = finite_difference(net.params(), 1e-5, |params| {
            let mut probe = net.clone();
            probe.set_params(params);
            let mut scratch = vec![0.0; probe.param_count()];
            let (y, ydot) = probe.dual_backward(&x, &xdot, &seed_primal, &seed_dual, &mut scratch);
            let a: f64 = y.iter().zip(seed_primal.iter()).map(|(v, s)| v * s).sum();
            let c: f64 = ydot.iter().zip(seed_dual.iter()).map(|(v, s)| v * s).sum();
            a + c
        });
        worst_nested = worst_nested.max(rel(&nested, &fd_nested));
    }
    let ok = worst_param <= 1e-5 && worst_input <= 1e-5 && worst_nested <= 1e-4;
    verdict(
        6,
        "differentiation-correctness",
        ok,
        format!("worst relative errors: param {worst_param:.2e}, input {worst_input:.2e}, nested {worst_nested:.2e}"),
    );
}

#[test]
fn criterion_07_sampler_exactness() {
    let sch = VpSchedule::default();
    // deterministic endpoint against the linear-score closed form
    let c2 = 4.0;
    let gmm = IsotropicGmm::single(&[0.0], c2);
    let field = OracleScore { gmm: &gmm, schedule: sch.clone() };
    let marginal_std = |t: f64| {
        let (a, s) = sch.alpha_sigma(t);
        (a * a * c2 + s * s).sqrt()
    };
    let exact = marginal_std(sch.t_min) / marginal_std(sch.horizon);
    let endpoint = |steps: usize| {
        let x = Array2::from_elem((1, 1), 1.0);
        solve_ode_from(&field, &sch, x, steps, &TimeGrid::default()).unwrap()[[0, 0]]
    };
    let err25 = (endpoint(25) - exact).abs();
    let errs: Vec<f64> = [10usize, 20, 40].iter().map(|&s| (endpoint(s) - exact).abs()).collect();
    let order = (errs[0] / errs[2]).log2() / 2.0;

    // distributional check for the stochastic sampler
    let q = target_pair();
    let qfield = OracleScore { gmm: &q, schedule: sch.clone() };
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let sde = sample_sde(&qfield, &sch, 10_000, 200, &mut rng).unwrap();
    let exact_draws = q.sample(10_000, &mut rng);
    let test = energy_permutation_test(&sde, &exact_draws, 199, 2000, 0.01, &mut rng).unwrap();

    let ok = err25 <= 1e-2 && order >= 1.5 && !test.reject;
    verdict(
        7,
        "sampler-exactness",
        ok,
        format!(
            "25-step endpoint error {err25:.2e}, observed order {order:.2}, \
             energy p-value {:.3} (reject: {})",
            test.p_value, test.reject
        ),
    );
}

#[test]
fn criterion_08_objective_ablation() {
    let fx = fixture();
    let n = Some(100usize);
    let full = fx.mean("tgdp", n, "avg_likelihood");
    let guidance_only = fx.mean("tgdp_guidance_only", n, "avg_likelihood");
    let guidance_cycle = fx.mean("tgdp_guidance_cycle", n, "avg_likelihood");
    let consistency_only = fx.mean("tgdp_consistency_only", n, "avg_likelihood");
    let ok = consistency_only < guidance_cycle && full >= guidance_only;
    verdict(
        8,
        "objective-ablation",
        ok,
        format!(
            "full {full:.3}, guidance_only {guidance_only:.3}, guidance_cycle {guidance_cycle:.3}, \
             consistency_only {consistency_only:.3}"
        ),
    );
}

#[test]
fn criterion_09_naive_guidance_contrast() {
    let fx = fixture();
    let tgdp = fx.mean("tgdp", Some(1000), "avg_likelihood");
    let naive = fx.mean("vanilla_guidance", Some(1000), "avg_likelihood");
    let ok = tgdp - naive >= 0.05;
    verdict(
        9,
        "naive-guidance-contrast",
        ok,
        format!("tgdp {tgdp:.3} vs vanilla guidance {naive:.3}"),
    );
}

#[test]
fn criterion_10_deterministic_reruns() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let run = |p: &Path| {
        let pipe = Pipeline::new(ExperimentConfig::smoke(p)).unwrap();
        pipe.run_all(false).unwrap();
    };
    run(dir_a.path());
    run(dir_b.path());
    let mut ok = true;
    let mut detail = String::new();
    for name in ["results.jsonl", "metrics.json", "summary.csv", "table.txt"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        if a != b {
            ok = false;
            detail.push_str(&format!("{name} differs; "));
        }
    }
    verdict(10, "deterministic-reruns", ok, detail);
}
