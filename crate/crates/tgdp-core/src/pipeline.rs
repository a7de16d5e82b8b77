//! Phase-oriented experiment driver. Each phase reads its inputs from disk,
//! writes its artifacts back, and records completion in a manifest, so a
//! finished phase is never repeated unless forced. Every random draw is
//! keyed by the master seed and a phase tag, which makes the result files
//! byte-reproducible regardless of which phases were re-run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AblationVariant, ExperimentConfig, Method};
use crate::dataset::Dataset;
use crate::error::{Result, TgdpError};
use crate::gmm::avg_likelihood;
use crate::guidance::{GuidanceModel, RatioTargets, SourceScore, VanillaGuidance};
use crate::metrics::{coverage, energy_permutation_test, frechet_fit};
use crate::ratio::{write_ratio_grid, DomainClassifier};
use crate::sampler::{sample_ode, GuidedScore, ModelScore, VanillaGuidedScore};
use crate::score::ScoreModel;

/// Pipeline phases in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    GenData,
    TrainSource,
    TrainClassifier,
    TrainTimeClassifier,
    TrainGuidance,
    TrainBaselines,
    Sample,
    Evaluate,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::GenData,
        Phase::TrainSource,
        Phase::TrainClassifier,
        Phase::TrainTimeClassifier,
        Phase::TrainGuidance,
        Phase::TrainBaselines,
        Phase::Sample,
        Phase::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GenData => "gen-data",
            Phase::TrainSource => "train-source",
            Phase::TrainClassifier => "train-classifier",
            Phase::TrainTimeClassifier => "train-time-classifier",
            Phase::TrainGuidance => "train-guidance",
            Phase::TrainBaselines => "train-baselines",
            Phase::Sample => "sample",
            Phase::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Deterministic generator for one unit of work: the stream depends only on
/// the master seed and the tag, never on execution order.
pub fn phase_rng(master_seed: u64, tag: &str) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
}

/// On-disk record of what has been computed under an output directory.
/// Wall-clock entries make it non-deterministic, so it is excluded from the
/// byte-reproducibility contract that covers the data and result files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: usize,
    pub phases: BTreeMap<String, PhaseRecord>,
}

impl RunManifest {
    fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(RunManifest {
            config_hash: cfg.hash()?,
            master_seed: cfg.master_seed,
            seeds: cfg.simulation.seeds,
            phases: BTreeMap::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| TgdpError::config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| TgdpError::format(format!("manifest {}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| TgdpError::format(format!("serializing manifest: {e}")))?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn is_done(&self, phase: Phase) -> bool {
        self.phases.contains_key(phase.name())
    }
}

/// One metric value for one (seed, method, n) cell; `n` is absent for the
/// exact-sampler reference rows, which do not depend on the target set size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: usize,
    pub method: String,
    pub n: Option<usize>,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryStat {
    mean: f64,
    per_seed: Vec<f64>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        Ok(Pipeline { cfg, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Does the configured run need this phase at all?
    pub fn requires(&self, phase: Phase) -> bool {
        let m = &self.cfg.methods;
        let tgdp = m.contains(&Method::Tgdp) || self.cfg.ablation;
        match phase {
            Phase::GenData | Phase::Sample | Phase::Evaluate => true,
            Phase::TrainSource => {
                tgdp || m.contains(&Method::Finetune) || m.contains(&Method::VanillaGuidance)
            }
            Phase::TrainClassifier => {
                tgdp || m.contains(&Method::VanillaGuidance) || self.cfg.ratio_grid.enabled
            }
            Phase::TrainTimeClassifier | Phase::TrainGuidance => tgdp,
            Phase::TrainBaselines => {
                m.contains(&Method::Vanilla)
                    || m.contains(&Method::Finetune)
                    || m.contains(&Method::VanillaGuidance)
            }
        }
    }

    /// Upstream phases that must be complete first, already filtered down to
    /// the ones this configuration uses.
    fn upstream(&self, phase: Phase) -> Vec<Phase> {
        let m = &self.cfg.methods;
        let raw: Vec<Phase> = match phase {
            Phase::GenData => vec![],
            Phase::TrainSource | Phase::TrainClassifier | Phase::TrainTimeClassifier => {
                vec![Phase::GenData]
            }
            Phase::TrainGuidance => vec![
                Phase::GenData,
                Phase::TrainSource,
                Phase::TrainClassifier,
                Phase::TrainTimeClassifier,
            ],
            Phase::TrainBaselines => {
                let mut deps = vec![Phase::GenData];
                if m.contains(&Method::Finetune) || m.contains(&Method::VanillaGuidance) {
                    deps.push(Phase::TrainSource);
                }
                if m.contains(&Method::VanillaGuidance) {
                    deps.push(Phase::TrainClassifier);
                }
                deps
            }
            Phase::Sample => {
                let mut deps = vec![Phase::GenData];
                for p in [
                    Phase::TrainSource,
                    Phase::TrainGuidance,
                    Phase::TrainBaselines,
                ] {
                    deps.push(p);
                }
                deps
            }
            Phase::Evaluate => vec![Phase::GenData, Phase::TrainClassifier, Phase::Sample],
        };
        raw.into_iter().filter(|p| self.requires(*p)).collect()
    }

    /// Run one phase. Returns false when the phase was already complete and
    /// nothing was done.
    pub fn run_phase(&self, phase: Phase, force: bool) -> Result<bool> {
        if !self.requires(phase) {
            return Ok(false);
        }
        fs::create_dir_all(&self.dir)?;
        let hash = self.cfg.hash()?;
        let mut manifest = match fs::metadata(self.dir.join("manifest.json")) {
            Ok(_) => {
                let m = RunManifest::load(&self.dir)?;
                if m.config_hash == hash {
                    m
                } else if force {
                    RunManifest::fresh(&self.cfg)?
                } else {
                    return Err(TgdpError::config(
                        "configuration does not match the existing run directory; \
                         use --force to rebuild or choose a fresh output directory",
                    ));
                }
            }
            Err(_) => RunManifest::fresh(&self.cfg)?,
        };
        let cfg_path = self.dir.join("config.toml");
        if !cfg_path.exists() || force {
            self.cfg.save(&cfg_path)?;
        }
        if manifest.is_done(phase) && !force {
            return Ok(false);
        }
        for dep in self.upstream(phase) {
            if !manifest.is_done(dep) {
                return Err(TgdpError::dependency(
                    dep.name(),
                    format!("needed by {phase}; run it first"),
                ));
            }
        }
        let start = Instant::now();
        let artifacts = self.exec(phase)?;
        manifest.phases.insert(
            phase.name().to_string(),
            PhaseRecord { wall_clock_s: start.elapsed().as_secs_f64(), artifacts },
        );
        manifest.save(&self.dir)?;
        Ok(true)
    }

    /// Run every phase the configuration needs, in dependency order.
    pub fn run_all(&self, force: bool) -> Result<Vec<(Phase, bool)>> {
        let mut out = Vec::new();
        for phase in Phase::ALL {
            if self.requires(phase) {
                let ran = self.run_phase(phase, force)?;
                out.push((phase, ran));
            }
        }
        Ok(out)
    }

    fn exec(&self, phase: Phase) -> Result<Vec<String>> {
        match phase {
            Phase::GenData => self.gen_data(),
            Phase::TrainSource => self.train_source(),
            Phase::TrainClassifier => self.train_classifiers(false),
            Phase::TrainTimeClassifier => self.train_classifiers(true),
            Phase::TrainGuidance => self.train_guidance(),
            Phase::TrainBaselines => self.train_baselines(),
            Phase::Sample => self.sample(),
            Phase::Evaluate => self.evaluate(),
        }
    }

    fn seed_dir(&self, seed: usize) -> PathBuf {
        self.dir.join(format!("seed_{seed}"))
    }

    fn data_path(&self, seed: usize, name: &str) -> PathBuf {
        self.seed_dir(seed).join("data").join(name)
    }

    fn model_path(&self, seed: usize, name: &str) -> PathBuf {
        self.seed_dir(seed).join("models").join(name)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn rng(&self, tag: &str) -> ChaCha20Rng {
        phase_rng(self.cfg.master_seed, tag)
    }

    fn load_data(&self, seed: usize, name: &str, needed_by: Phase) -> Result<Array2<f64>> {
        let path = self.data_path(seed, name);
        if !path.exists() {
            return Err(TgdpError::dependency(
                Phase::GenData.name(),
                format!("{} is missing (needed by {needed_by})", self.rel(&path)),
            ));
        }
        Ok(Dataset::load(&path)?.x)
    }

    fn load_model(&self, seed: usize, name: &str, from: Phase, needed_by: Phase) -> Result<PathBuf> {
        let path = self.model_path(seed, name);
        if !path.exists() {
            return Err(TgdpError::dependency(
                from.name(),
                format!("checkpoint {} is missing (needed by {needed_by})", self.rel(&path)),
            ));
        }
        Ok(path)
    }

    fn write_losses(&self, seed: usize, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<String> {
        let dir = self.seed_dir(seed).join("losses");
        fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        let mut out = String::from(header);
        out.push('\n');
        for row in rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(&path, out)?;
        Ok(self.rel(&path))
    }

    fn save_samples(&self, seed: usize, name: &str, x: Array2<f64>) -> Result<String> {
        let dir = self.seed_dir(seed).join("samples");
        fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        Dataset::new(x, None)?.save(&path)?;
        Ok(self.rel(&path))
    }

    fn gen_data(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let source = sim.source_gmm();
        let target = sim.target_gmm();
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            let dir = self.seed_dir(s).join("data");
            fs::create_dir_all(&dir)?;
            let mut write = |name: &str, x: Array2<f64>| -> Result<()> {
                let path = dir.join(name);
                Dataset::new(x, None)?.save(&path)?;
                artifacts.push(self.rel(&path));
                Ok(())
            };
            write("source.csv", source.sample(sim.m_source, &mut self.rng(&format!("gen/source/s{s}"))))?;
            write(
                "eval.csv",
                target.sample(self.cfg.n_eval_samples, &mut self.rng(&format!("gen/eval/s{s}"))),
            )?;
            write(
                "exact.csv",
                target.sample(self.cfg.n_eval_samples, &mut self.rng(&format!("gen/exact/s{s}"))),
            )?;
            for &n in &sim.n_target {
                write(
                    &format!("target_{n}.csv"),
                    target.sample(n, &mut self.rng(&format!("gen/target/s{s}/n{n}"))),
                )?;
            }
        }
        Ok(artifacts)
    }

    fn train_source(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            let x = self.load_data(s, "source.csv", Phase::TrainSource)?;
            let data = Dataset::new(x, None)?;
            let mut model = ScoreModel::new(
                sim.dim,
                &self.cfg.networks.score_hidden,
                0,
                self.cfg.schedule,
            );
            let mut rng = self.rng(&format!("train_source/s{s}"));
            model.init(&mut rng);
            let losses = model.train_dsm(&data, &self.cfg.source_training, &mut rng)?;
            let dir = self.seed_dir(s).join("models");
            fs::create_dir_all(&dir)?;
            let path = dir.join("source.ckpt");
            model.save(&path, "score")?;
            artifacts.push(self.rel(&path));
            let rows: Vec<Vec<f64>> = losses.into_iter().map(|l| vec![l]).collect();
            artifacts.push(self.write_losses(s, "source.csv", "loss", &rows)?);
        }
        Ok(artifacts)
    }

    fn train_classifiers(&self, time_dependent: bool) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let phase = if time_dependent { Phase::TrainTimeClassifier } else { Phase::TrainClassifier };
        let stem = if time_dependent { "time_classifier" } else { "classifier" };
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            let source = self.load_data(s, "source.csv", phase)?;
            for &n in &sim.n_target {
                let target = self.load_data(s, &format!("target_{n}.csv"), phase)?;
                let mut clf = if time_dependent {
                    DomainClassifier::new_time(
                        sim.dim,
                        &self.cfg.networks.classifier_hidden,
                        self.cfg.schedule,
                    )
                } else {
                    DomainClassifier::new_static(
                        sim.dim,
                        &self.cfg.networks.classifier_hidden,
                        self.cfg.schedule,
                    )
                };
                let mut rng = self.rng(&format!("{stem}/s{s}/n{n}"));
                clf.init(&mut rng);
                let budget = if time_dependent {
                    &self.cfg.time_classifier_training
                } else {
                    &self.cfg.classifier_training
                };
                let losses = clf.train(&source, &target, budget, &mut rng)?;
                let dir = self.seed_dir(s).join("models");
                fs::create_dir_all(&dir)?;
                let path = dir.join(format!("{stem}_{n}.ckpt"));
                clf.save(&path, if time_dependent { "time-classifier" } else { "static-classifier" })?;
                artifacts.push(self.rel(&path));
                let rows: Vec<Vec<f64>> = losses.into_iter().map(|l| vec![l]).collect();
                artifacts.push(self.write_losses(s, &format!("{stem}_{n}.csv"), "loss", &rows)?);
            }
        }
        Ok(artifacts)
    }

    fn train_guidance_cell(
        &self,
        seed: usize,
        n: usize,
        variant: Option<AblationVariant>,
        source: &Array2<f64>,
        target: &Array2<f64>,
        static_clf: &DomainClassifier,
        time_clf: &DomainClassifier,
        source_model: &ScoreModel,
        artifacts: &mut Vec<String>,
    ) -> Result<()> {
        let cfg = match variant {
            None => self.cfg.guidance_training.clone(),
            Some(v) => v.apply(&self.cfg.guidance_training),
        };
        let suffix = match variant {
            None => String::new(),
            Some(v) => format!("_{v}"),
        };
        let tag = match variant {
            None => format!("guidance/s{seed}/n{n}/full"),
            Some(v) => format!("guidance/s{seed}/n{n}/{v}"),
        };
        let mut model = GuidanceModel::new(
            self.cfg.simulation.dim,
            &self.cfg.networks.guidance_hidden,
            self.cfg.schedule,
        );
        let mut rng = self.rng(&tag);
        model.init(&mut rng);
        let targets = RatioTargets::Learned { static_clf, time_clf };
        let sscore = SourceScore::Model(source_model);
        let losses = model.train(source, target, &targets, Some(&sscore), &cfg, &mut rng)?;
        let dir = self.seed_dir(seed).join("models");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("guidance_{n}{suffix}.ckpt"));
        model.save(&path, "guidance")?;
        artifacts.push(self.rel(&path));
        let rows: Vec<Vec<f64>> = losses
            .into_iter()
            .map(|l| vec![l.guidance, l.cycle, l.consistency, l.total])
            .collect();
        artifacts.push(self.write_losses(
            seed,
            &format!("guidance_{n}{suffix}.csv"),
            "guidance,cycle,consistency,total",
            &rows,
        )?);
        Ok(())
    }

    fn train_guidance(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            let source = self.load_data(s, "source.csv", Phase::TrainGuidance)?;
            let source_model = ScoreModel::load(
                &self.load_model(s, "source.ckpt", Phase::TrainSource, Phase::TrainGuidance)?,
                self.cfg.schedule,
            )?;
            for &n in &sim.n_target {
                let target = self.load_data(s, &format!("target_{n}.csv"), Phase::TrainGuidance)?;
                let static_clf = DomainClassifier::load(
                    &self.load_model(
                        s,
                        &format!("classifier_{n}.ckpt"),
                        Phase::TrainClassifier,
                        Phase::TrainGuidance,
                    )?,
                    self.cfg.schedule,
                )?;
                let time_clf = DomainClassifier::load(
                    &self.load_model(
                        s,
                        &format!("time_classifier_{n}.ckpt"),
                        Phase::TrainTimeClassifier,
                        Phase::TrainGuidance,
                    )?,
                    self.cfg.schedule,
                )?;
                self.train_guidance_cell(
                    s, n, None, &source, &target, &static_clf, &time_clf, &source_model,
                    &mut artifacts,
                )?;
                if self.cfg.ablation && n == self.cfg.ablation_n {
                    for v in AblationVariant::ALL {
                        self.train_guidance_cell(
                            s, n, Some(v), &source, &target, &static_clf, &time_clf,
                            &source_model, &mut artifacts,
                        )?;
                    }
                }
            }
        }
        Ok(artifacts)
    }

    fn train_baselines(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let m = &self.cfg.methods;
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            for &n in &sim.n_target {
                let target_x = self.load_data(s, &format!("target_{n}.csv"), Phase::TrainBaselines)?;
                let target = Dataset::new(target_x.clone(), None)?;
                if m.contains(&Method::Vanilla) {
                    let mut model = ScoreModel::new(
                        sim.dim,
                        &self.cfg.networks.score_hidden,
                        0,
                        self.cfg.schedule,
                    );
                    let mut rng = self.rng(&format!("vanilla/s{s}/n{n}"));
                    model.init(&mut rng);
                    let losses = model.train_dsm(&target, &self.cfg.vanilla_training, &mut rng)?;
                    let dir = self.seed_dir(s).join("models");
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("vanilla_{n}.ckpt"));
                    model.save(&path, "score")?;
                    artifacts.push(self.rel(&path));
                    let rows: Vec<Vec<f64>> = losses.into_iter().map(|l| vec![l]).collect();
                    artifacts.push(self.write_losses(s, &format!("vanilla_{n}.csv"), "loss", &rows)?);
                }
                if m.contains(&Method::Finetune) {
                    let base = ScoreModel::load(
                        &self.load_model(s, "source.ckpt", Phase::TrainSource, Phase::TrainBaselines)?,
                        self.cfg.schedule,
                    )?;
                    let mut rng = self.rng(&format!("finetune/s{s}/n{n}"));
                    let (tuned, losses) = base.finetune(&target, &self.cfg.finetune_training, &mut rng)?;
                    let dir = self.seed_dir(s).join("models");
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("finetune_{n}.ckpt"));
                    tuned.save(&path, "score")?;
                    artifacts.push(self.rel(&path));
                    let rows: Vec<Vec<f64>> = losses.into_iter().map(|l| vec![l]).collect();
                    artifacts.push(self.write_losses(s, &format!("finetune_{n}.csv"), "loss", &rows)?);
                }
                if m.contains(&Method::VanillaGuidance) {
                    let source = self.load_data(s, "source.csv", Phase::TrainBaselines)?;
                    let clf = DomainClassifier::load(
                        &self.load_model(
                            s,
                            &format!("classifier_{n}.ckpt"),
                            Phase::TrainClassifier,
                            Phase::TrainBaselines,
                        )?,
                        self.cfg.schedule,
                    )?;
                    // the contrast baseline regresses on log(1 - c) of the
                    // clean source points rather than the density ratio
                    let targets: Array1<f64> =
                        clf.prob_source(&source, None).mapv(|c| (1.0 - c).ln());
                    let mut model = VanillaGuidance::new(
                        sim.dim,
                        &self.cfg.networks.guidance_hidden,
                        self.cfg.schedule,
                    );
                    let mut rng = self.rng(&format!("vanilla_guidance/s{s}/n{n}"));
                    model.init(&mut rng);
                    let losses =
                        model.train(&source, &targets, &self.cfg.vanilla_guidance_training, &mut rng)?;
                    let dir = self.seed_dir(s).join("models");
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("vanilla_guidance_{n}.ckpt"));
                    model.save(&path)?;
                    artifacts.push(self.rel(&path));
                    let rows: Vec<Vec<f64>> = losses.into_iter().map(|l| vec![l]).collect();
                    artifacts
                        .push(self.write_losses(s, &format!("vanilla_guidance_{n}.csv"), "loss", &rows)?);
                }
            }
        }
        Ok(artifacts)
    }

    fn sample(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let sp = &self.cfg.sampler;
        let mut artifacts = Vec::new();
        for s in 0..sim.seeds {
            let source_model = if self.cfg.methods.iter().any(|m| {
                matches!(m, Method::Tgdp | Method::VanillaGuidance)
            }) || self.cfg.ablation
            {
                Some(ScoreModel::load(
                    &self.load_model(s, "source.ckpt", Phase::TrainSource, Phase::Sample)?,
                    self.cfg.schedule,
                )?)
            } else {
                None
            };
            for &n in &sim.n_target {
                for &method in &self.cfg.methods {
                    let mut rng = self.rng(&format!("sample/s{s}/n{n}/{method}"));
                    let x = match method {
                        Method::Vanilla | Method::Finetune => {
                            let name = format!("{method}_{n}.ckpt");
                            let model = ScoreModel::load(
                                &self.load_model(s, &name, Phase::TrainBaselines, Phase::Sample)?,
                                self.cfg.schedule,
                            )?;
                            let field = ModelScore { model: &model, label: None };
                            sample_ode(&field, &self.cfg.schedule, self.cfg.n_eval_samples,
                                sp.steps, &sp.grid, &mut rng)?
                        }
                        Method::Tgdp => {
                            let guidance = GuidanceModel::load(
                                &self.load_model(
                                    s,
                                    &format!("guidance_{n}.ckpt"),
                                    Phase::TrainGuidance,
                                    Phase::Sample,
                                )?,
                                self.cfg.schedule,
                            )?;
                            let base = ModelScore { model: source_model.as_ref().unwrap(), label: None };
                            let field = GuidedScore { base: &base, guidance: &guidance, label: None };
                            sample_ode(&field, &self.cfg.schedule, self.cfg.n_eval_samples,
                                sp.steps, &sp.grid, &mut rng)?
                        }
                        Method::VanillaGuidance => {
                            let vanilla = VanillaGuidance::load(
                                &self.load_model(
                                    s,
                                    &format!("vanilla_guidance_{n}.ckpt"),
                                    Phase::TrainBaselines,
                                    Phase::Sample,
                                )?,
                                self.cfg.schedule,
                            )?;
                            let base = ModelScore { model: source_model.as_ref().unwrap(), label: None };
                            let field = VanillaGuidedScore { base: &base, vanilla: &vanilla };
                            sample_ode(&field, &self.cfg.schedule, self.cfg.n_eval_samples,
                                sp.steps, &sp.grid, &mut rng)?
                        }
                    };
                    artifacts.push(self.save_samples(s, &format!("{method}_{n}.csv"), x)?);
                }
                if self.cfg.ablation && n == self.cfg.ablation_n {
                    for v in AblationVariant::ALL {
                        let guidance = GuidanceModel::load(
                            &self.load_model(
                                s,
                                &format!("guidance_{n}_{v}.ckpt"),
                                Phase::TrainGuidance,
                                Phase::Sample,
                            )?,
                            self.cfg.schedule,
                        )?;
                        let base = ModelScore { model: source_model.as_ref().unwrap(), label: None };
                        let field = GuidedScore { base: &base, guidance: &guidance, label: None };
                        let mut rng = self.rng(&format!("sample/s{s}/n{n}/ablation_{v}"));
                        let x = sample_ode(&field, &self.cfg.schedule, self.cfg.n_eval_samples,
                            sp.steps, &sp.grid, &mut rng)?;
                        artifacts.push(self.save_samples(s, &format!("ablation_{v}_{n}.csv"), x)?);
                    }
                }
            }
        }
        Ok(artifacts)
    }

    fn metric_rows(
        &self,
        seed: usize,
        method: &str,
        n: Option<usize>,
        samples: &Array2<f64>,
        eval_x: &Array2<f64>,
        records: &mut Vec<MetricRecord>,
    ) -> Result<()> {
        let target = self.cfg.simulation.target_gmm();
        let ev = &self.cfg.evaluation;
        let tag = match n {
            Some(n) => format!("evaluate/s{seed}/n{n}/{method}"),
            None => format!("evaluate/s{seed}/{method}"),
        };
        let mut rng = self.rng(&tag);
        let energy = energy_permutation_test(
            eval_x,
            samples,
            ev.energy_permutations,
            ev.energy_subsample,
            ev.alpha,
            &mut rng,
        )?;
        let rows = [
            ("avg_likelihood", avg_likelihood(samples, &target)?),
            ("coverage", coverage(eval_x, samples, ev.coverage_k)?),
            ("frechet", frechet_fit(eval_x, samples)?),
            ("energy_distance", energy.statistic),
            ("energy_p_value", energy.p_value),
            ("energy_reject", if energy.reject { 1.0 } else { 0.0 }),
        ];
        for (metric, value) in rows {
            records.push(MetricRecord {
                seed,
                method: method.to_string(),
                n,
                metric: metric.to_string(),
                value,
            });
        }
        Ok(())
    }

    fn load_samples(&self, seed: usize, name: &str) -> Result<Array2<f64>> {
        let path = self.seed_dir(seed).join("samples").join(name);
        if !path.exists() {
            return Err(TgdpError::dependency(
                Phase::Sample.name(),
                format!("sample file {} is missing", self.rel(&path)),
            ));
        }
        Ok(Dataset::load(&path)?.x)
    }

    fn write_oracle_grid(&self, path: &Path) -> Result<()> {
        let sim = &self.cfg.simulation;
        let rg = &self.cfg.ratio_grid;
        let source = sim.source_gmm();
        let target = sim.target_gmm();
        let lin = |lo: f64, hi: f64, i: usize| {
            lo + (hi - lo) * i as f64 / (rg.resolution - 1) as f64
        };
        let file = fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "x,y,ratio")?;
        for j in 0..rg.resolution {
            let y = lin(rg.y_range.0, rg.y_range.1, j);
            for i in 0..rg.resolution {
                let x = lin(rg.x_range.0, rg.x_range.1, i);
                let point = ndarray::array![x, y];
                let ratio =
                    (target.log_density(point.view()) - source.log_density(point.view())).exp();
                writeln!(w, "{x},{y},{ratio}")?;
            }
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let sim = &self.cfg.simulation;
        let mut artifacts = Vec::new();
        let mut records: Vec<MetricRecord> = Vec::new();
        for s in 0..sim.seeds {
            let eval_x = self.load_data(s, "eval.csv", Phase::Evaluate)?;
            let exact = self.load_data(s, "exact.csv", Phase::Evaluate)?;
            self.metric_rows(s, "exact", None, &exact, &eval_x, &mut records)?;
            for &n in &sim.n_target {
                for &method in &self.cfg.methods {
                    let samples = self.load_samples(s, &format!("{method}_{n}.csv"))?;
                    self.metric_rows(s, method.name(), Some(n), &samples, &eval_x, &mut records)?;
                }
                if self.cfg.ablation && n == self.cfg.ablation_n {
                    for v in AblationVariant::ALL {
                        let samples = self.load_samples(s, &format!("ablation_{v}_{n}.csv"))?;
                        self.metric_rows(
                            s,
                            &format!("tgdp_{v}"),
                            Some(n),
                            &samples,
                            &eval_x,
                            &mut records,
                        )?;
                    }
                }
            }
            if self.cfg.ratio_grid.enabled {
                let rg = &self.cfg.ratio_grid;
                for &n in &sim.n_target {
                    let clf = DomainClassifier::load(
                        &self.load_model(
                            s,
                            &format!("classifier_{n}.ckpt"),
                            Phase::TrainClassifier,
                            Phase::Evaluate,
                        )?,
                        self.cfg.schedule,
                    )?;
                    let path = self.seed_dir(s).join(format!("ratio_grid_{n}.csv"));
                    write_ratio_grid(&clf, None, rg.x_range, rg.y_range, rg.resolution, &path)?;
                    artifacts.push(self.rel(&path));
                }
                let oracle_path = self.seed_dir(s).join("ratio_grid_oracle.csv");
                self.write_oracle_grid(&oracle_path)?;
                artifacts.push(self.rel(&oracle_path));
            }
        }
        artifacts.extend(self.write_results(&records)?);
        Ok(artifacts)
    }

    fn summarize(
        &self,
        records: &[MetricRecord],
    ) -> BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryStat>>> {
        let seeds = self.cfg.simulation.seeds;
        let mut out: BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryStat>>> =
            BTreeMap::new();
        for r in records {
            let n_key = r.n.map_or_else(|| "-".to_string(), |n| n.to_string());
            let stat = out
                .entry(r.method.clone())
                .or_default()
                .entry(n_key)
                .or_default()
                .entry(r.metric.clone())
                .or_insert_with(|| SummaryStat { mean: 0.0, per_seed: vec![f64::NAN; seeds] });
            stat.per_seed[r.seed] = r.value;
        }
        for per_n in out.values_mut() {
            for per_metric in per_n.values_mut() {
                for stat in per_metric.values_mut() {
                    stat.mean = stat.per_seed.iter().sum::<f64>() / stat.per_seed.len() as f64;
                }
            }
        }
        out
    }

    fn mean_of(
        &self,
        summary: &BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryStat>>>,
        method: &str,
        n_key: &str,
        metric: &str,
    ) -> Option<f64> {
        summary.get(method)?.get(n_key)?.get(metric).map(|s| s.mean)
    }

    fn write_results(&self, records: &[MetricRecord]) -> Result<Vec<String>> {
        let mut artifacts = Vec::new();

        let jsonl_path = self.dir.join("results.jsonl");
        let mut jsonl = String::new();
        for r in records {
            jsonl.push_str(
                &serde_json::to_string(r)
                    .map_err(|e| TgdpError::format(format!("serializing record: {e}")))?,
            );
            jsonl.push('\n');
        }
        fs::write(&jsonl_path, jsonl)?;
        artifacts.push(self.rel(&jsonl_path));

        let summary = self.summarize(records);
        let json_path = self.dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&summary)
            .map_err(|e| TgdpError::format(format!("serializing summary: {e}")))?;
        fs::write(&json_path, text + "\n")?;
        artifacts.push(self.rel(&json_path));

        let csv_path = self.dir.join("summary.csv");
        let seeds = self.cfg.simulation.seeds;
        let mut csv = String::from("method,n,metric,mean");
        for s in 0..seeds {
            csv.push_str(&format!(",seed{s}"));
        }
        csv.push('\n');
        for (method, per_n) in &summary {
            for (n_key, per_metric) in per_n {
                for (metric, stat) in per_metric {
                    let n_cell = if n_key == "-" { "" } else { n_key };
                    csv.push_str(&format!("{method},{n_cell},{metric},{}", stat.mean));
                    for v in &stat.per_seed {
                        csv.push_str(&format!(",{v}"));
                    }
                    csv.push('\n');
                }
            }
        }
        fs::write(&csv_path, csv)?;
        artifacts.push(self.rel(&csv_path));

        let table_path = self.dir.join("table.txt");
        fs::write(&table_path, self.render_table(&summary))?;
        artifacts.push(self.rel(&table_path));
        Ok(artifacts)
    }

    fn render_table(
        &self,
        summary: &BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryStat>>>,
    ) -> String {
        let sim = &self.cfg.simulation;
        let mut out = String::new();
        out.push_str(&format!(
            "Average likelihood under the target mixture (mean over {} seed{})\n\n",
            sim.seeds,
            if sim.seeds == 1 { "" } else { "s" }
        ));
        out.push_str(&format!("{:<22}", "Method"));
        for n in &sim.n_target {
            out.push_str(&format!("{:>10}", format!("n={n}")));
        }
        out.push('\n');
        for method in Method::ALL {
            if !self.cfg.methods.contains(&method) {
                continue;
            }
            out.push_str(&format!("{:<22}", method.table_label()));
            for n in &sim.n_target {
                match self.mean_of(summary, method.name(), &n.to_string(), "avg_likelihood") {
                    Some(v) => out.push_str(&format!("{v:>10.3}")),
                    None => out.push_str(&format!("{:>10}", "-")),
                }
            }
            out.push('\n');
        }
        if let Some(v) = self.mean_of(summary, "exact", "-", "avg_likelihood") {
            out.push_str(&format!(
                "\nExact-sampler reference (independent target draws): {v:.3}\n"
            ));
        }
        if self.cfg.ablation {
            let n_key = self.cfg.ablation_n.to_string();
            out.push_str(&format!(
                "\nGuidance objective ablation at n={} (average likelihood)\n\n",
                self.cfg.ablation_n
            ));
            let mut rows: Vec<(String, String)> = vec![("full".to_string(), "tgdp".to_string())];
            for v in AblationVariant::ALL {
                rows.push((v.name().to_string(), format!("tgdp_{v}")));
            }
            for (label, method) in rows {
                if let Some(v) = self.mean_of(summary, &method, &n_key, "avg_likelihood") {
                    out.push_str(&format!("{label:<22}{v:>10.3}\n"));
                }
            }
        }
        out
    }
}
