//! Temporary tuning probes (not part of the test suite proper); run with
//! `cargo test -p tgdp-core --test probe -- <name> --nocapture --ignored`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tgdp_core::guidance::{GuidanceModel, RatioTargets, SourceScore};
use tgdp_core::ratio::DomainClassifier;
use tgdp_core::{ClassifierConfig, GuidanceConfig, IsotropicGmm, VpSchedule};

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

#[test]
#[ignore]
fn sweep_guidance() {
    let sch = VpSchedule::default();
    let p = source_pair();
    let q = target_pair();
    let candidates = [
        ("b256-lr1e3-k03", 256usize, 1e-3, 0.3),
        ("b256-lr1e3-k10", 256, 1e-3, 1.0),
        ("b192-lr1e3-k01", 192, 1e-3, 0.1),
        ("b256-lr15e4-k01", 256, 1.5e-3, 0.1),
    ];
    for (label, batch, lr, k) in candidates {
        let start = std::time::Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let source_x = p.sample(10_000, &mut rng);
        let target_x = q.sample(1000, &mut rng);
        let mut model = GuidanceModel::new(2, &[512, 512, 512, 512], sch.clone());
        model.init(&mut rng);
        let targets = RatioTargets::Oracle { source: &p, target: &q, schedule: sch.clone() };
        let sscore = SourceScore::Oracle { source: &p, schedule: sch.clone() };
        let cfg = GuidanceConfig {
            batch_size: batch,
            learning_rate: lr,
            consistency_weight: k,
            ..GuidanceConfig::default()
        };
        let res = model.train(&source_x, &target_x, &targets, Some(&sscore), &cfg, &mut rng);
        if let Err(e) = res {
            println!("{label}: DIVERGED: {e}");
            continue;
        }
        let losses = res.unwrap();
        let last = losses.last().unwrap();
        let mut rel_errs = Vec::new();
        let mut report = format!(
            "{label}: {:.0}s, final losses g={:.3} c={:.3} k={:.3} | ",
            start.elapsed().as_secs_f64(),
            last.guidance,
            last.cycle,
            last.consistency
        );
        for t in [0.1, 0.5] {
            let qt = q.perturbed(&sch, t);
            let pt = p.perturbed(&sch, t);
            let grid = mass_grid(|x, y| qt.density(ndarray::array![x, y].view()), 40, 1.6, 0.99);
            let x = rows(&grid);
            let h = model.h_at(&x, t);
            let grads = model.log_h_grad_at(&x, t);
            let mut cosines = Vec::new();
            let mut t_rel = Vec::new();
            for (i, point) in grid.iter().enumerate() {
                let pv = ndarray::array![point[0], point[1]];
                let exact = (qt.log_density(pv.view()) - pt.log_density(pv.view())).exp();
                t_rel.push((h[i] - exact).abs() / exact);
                rel_errs.push((h[i] - exact).abs() / exact);
                let guided = &pt.score(pv.view()) + &grads.row(i);
                let target_score = qt.score(pv.view());
                cosines.push(cosine(guided.as_slice().unwrap(), target_score.as_slice().unwrap()));
            }
            report.push_str(&format!(
                "t={t}: cos {:.3} rel {:.3} | ",
                median(&mut cosines),
                median(&mut t_rel)
            ));
        }
        report.push_str(&format!("pooled rel {:.3}", median(&mut rel_errs)));
        println!("{report}");
    }
}

#[test]
#[ignore]
fn sweep_time_classifier() {
    let sch = VpSchedule::default();
    let p = source_pair();
    let q = target_pair();
    let candidates = [
        ("b4096-lr1e4", 4096usize, 1e-4),
        ("b512-lr1e3", 512, 1e-3),
        ("b128-lr1e3", 128, 1e-3),
    ];
    for (label, batch, lr) in candidates {
        let start = std::time::Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let source_x = p.sample(10_000, &mut rng);
        let target_x = q.sample(1000, &mut rng);
        let mut clf = DomainClassifier::new_time(2, &[512, 512, 512, 512], sch);
        clf.init(&mut rng);
        let cfg = ClassifierConfig { epochs: 20, batch_size: batch, learning_rate: lr };
        clf.train(&source_x, &target_x, &cfg, &mut rng).unwrap();
        let mut report = format!("{label} ({:.0}s):", start.elapsed().as_secs_f64());
        for t in [0.1, 0.5] {
            let qt = q.perturbed(&sch, t);
            let pt = p.perturbed(&sch, t);
            let grid = mass_grid(
                |x, y| {
                    let pv = ndarray::array![x, y];
                    0.5 * pt.density(pv.view()) + 0.5 * qt.density(pv.view())
                },
                40,
                1.6,
                0.99,
            );
            let x = rows(&grid);
            let learned = clf.log_ratio(&x, Some(t));
            let oracle: Vec<f64> = grid
                .iter()
                .map(|pt2| {
                    let pv = ndarray::array![pt2[0], pt2[1]];
                    qt.log_density(pv.view()) - pt.log_density(pv.view())
                })
                .collect();
            // least-squares slope of learned on oracle = magnitude calibration
            let n = oracle.len() as f64;
            let mo = oracle.iter().sum::<f64>() / n;
            let ml = learned.sum() / n;
            let mut cov = 0.0;
            let mut vo = 0.0;
            for (l, o) in learned.iter().zip(&oracle) {
                cov += (l - ml) * (o - mo);
                vo += (o - mo) * (o - mo);
            }
            report.push_str(&format!(
                " t={t}: slope {:.2} corr {:.3}",
                cov / vo,
                pearson(learned.as_slice().unwrap(), &oracle)
            ));
        }
        println!("{report}");
    }
}

#[test]
#[ignore]
fn sweep_classifier() {
    let sch = VpSchedule::default();
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
    let candidates = [
        ("b4096-lr1e4", 4096usize, 1e-4),
        ("b4096-lr3e4", 4096, 3e-4),
        ("b2048-lr3e4", 2048, 3e-4),
    ];
    for (label, batch, lr) in candidates {
        for n in [1000usize, 10] {
            let start = std::time::Instant::now();
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            let source_x = p.sample(10_000, &mut rng);
            let target_x = q.sample(n, &mut rng);
            let mut clf = DomainClassifier::new_static(2, &[512, 512, 512, 512], sch);
            clf.init(&mut rng);
            let cfg = ClassifierConfig { epochs: 20, batch_size: batch, learning_rate: lr };
            clf.train(&source_x, &target_x, &cfg, &mut rng).unwrap();
            let learned = clf.log_ratio(&x, None);
            let corr = pearson(learned.as_slice().unwrap(), &oracle);
            println!("{label} n={n}: pearson {corr:.3} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    }
}
