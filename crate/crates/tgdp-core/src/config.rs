//! Experiment configuration: a single TOML file drives data generation,
//! training, sampling, and evaluation. The defaults reproduce the
//! two-dimensional mixture study at full scale; any key omitted from a
//! config file falls back to them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TgdpError};
use crate::gmm::SimulationSpec;
use crate::guidance::GuidanceConfig;
use crate::ratio::ClassifierConfig;
use crate::sampler::TimeGrid;
use crate::schedule::VpSchedule;
use crate::score::DsmConfig;

/// Sampling methods compared by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Score model trained from scratch on the target samples alone.
    Vanilla,
    /// Source score model continued on the target samples.
    Finetune,
    /// Frozen source score plus the guidance log-gradient.
    Tgdp,
    /// Frozen source score minus the gradient of a classifier-style
    /// regression on clean-sample log-ratios; the incorrect baseline the
    /// guidance construction is contrasted against.
    VanillaGuidance,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::Vanilla, Method::Finetune, Method::Tgdp, Method::VanillaGuidance];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Finetune => "finetune",
            Method::Tgdp => "tgdp",
            Method::VanillaGuidance => "vanilla_guidance",
        }
    }

    /// Row label used in the summary table.
    pub fn table_label(self) -> &'static str {
        match self {
            Method::Vanilla => "Vanilla Diffusion",
            Method::Finetune => "Finetune Generator",
            Method::Tgdp => "TGDP",
            Method::VanillaGuidance => "Vanilla Guidance",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reduced guidance objectives for the regularization ablation. The full
/// objective is the ordinary tgdp cell and is not repeated here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    GuidanceOnly,
    GuidanceCycle,
    GuidanceConsistency,
    ConsistencyOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::GuidanceOnly,
        AblationVariant::GuidanceCycle,
        AblationVariant::GuidanceConsistency,
        AblationVariant::ConsistencyOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::GuidanceOnly => "guidance_only",
            AblationVariant::GuidanceCycle => "guidance_cycle",
            AblationVariant::GuidanceConsistency => "guidance_consistency",
            AblationVariant::ConsistencyOnly => "consistency_only",
        }
    }

    /// Zero out the loss terms this variant drops from the full objective.
    pub fn apply(self, base: &GuidanceConfig) -> GuidanceConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::GuidanceOnly => {
                cfg.cycle_weight = 0.0;
                cfg.consistency_weight = 0.0;
            }
            AblationVariant::GuidanceCycle => cfg.consistency_weight = 0.0,
            AblationVariant::GuidanceConsistency => cfg.cycle_weight = 0.0,
            AblationVariant::ConsistencyOnly => {
                cfg.guidance_weight = 0.0;
                cfg.cycle_weight = 0.0;
            }
        }
        cfg
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hidden-layer widths for the three network families.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetworkSpec {
    pub score_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub guidance_hidden: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            score_hidden: vec![512, 512, 512, 512, 256],
            classifier_hidden: vec![512, 512, 512, 512],
            guidance_hidden: vec![512, 512, 512, 512],
        }
    }
}

/// Probability-flow sampler settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub grid: TimeGrid,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { steps: 25, grid: TimeGrid::default() }
    }
}

/// Metric settings for the evaluation phase.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvaluationSettings {
    pub coverage_k: usize,
    pub energy_permutations: usize,
    pub energy_subsample: usize,
    pub alpha: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            coverage_k: 5,
            energy_permutations: 199,
            energy_subsample: 2000,
            alpha: 0.01,
        }
    }
}

/// Rectangle and resolution for the exported ratio-landscape grids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RatioGridSettings {
    pub enabled: bool,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
}

impl Default for RatioGridSettings {
    fn default() -> Self {
        RatioGridSettings {
            enabled: true,
            x_range: (-1.5, 1.5),
            y_range: (-1.5, 1.5),
            resolution: 61,
        }
    }
}

/// Everything the pipeline needs, in dependency order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub n_eval_samples: usize,
    pub output_dir: PathBuf,
    /// Run the reduced guidance objectives at `ablation_n` target samples.
    pub ablation: bool,
    pub ablation_n: usize,
    pub simulation: SimulationSpec,
    pub schedule: VpSchedule,
    pub networks: NetworkSpec,
    pub source_training: DsmConfig,
    pub vanilla_training: DsmConfig,
    pub finetune_training: DsmConfig,
    pub classifier_training: ClassifierConfig,
    /// The time-dependent classifier gets its own budget: its ratio readout
    /// feeds the guidance cycle targets, where magnitude calibration matters,
    /// while the static classifier stays gently trained for the landscape
    /// readout (hotter static training overfits the few-sample target sets).
    pub time_classifier_training: ClassifierConfig,
    pub guidance_training: GuidanceConfig,
    pub vanilla_guidance_training: DsmConfig,
    pub sampler: SamplerSettings,
    pub evaluation: EvaluationSettings,
    pub ratio_grid: RatioGridSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            methods: Method::ALL.to_vec(),
            n_eval_samples: 10_000,
            output_dir: PathBuf::from("runs"),
            ablation: true,
            ablation_n: 100,
            simulation: SimulationSpec::default(),
            schedule: VpSchedule::default(),
            networks: NetworkSpec::default(),
            source_training: DsmConfig::default(),
            vanilla_training: DsmConfig { epochs: 50, batch_size: 512, learning_rate: 1e-3 },
            finetune_training: DsmConfig { epochs: 50, batch_size: 512, learning_rate: 3e-4 },
            classifier_training: ClassifierConfig::default(),
            time_classifier_training: ClassifierConfig {
                batch_size: 128,
                learning_rate: 1e-3,
                ..ClassifierConfig::default()
            },
            guidance_training: GuidanceConfig::default(),
            vanilla_guidance_training: DsmConfig { epochs: 50, batch_size: 256, learning_rate: 1e-3 },
            sampler: SamplerSettings::default(),
            evaluation: EvaluationSettings::default(),
            ratio_grid: RatioGridSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small instance for tests: same shape, minutes of work shrunk to
    /// seconds. Statistically meaningless on purpose.
    pub fn smoke(output_dir: &Path) -> Self {
        let train = DsmConfig { epochs: 2, batch_size: 64, learning_rate: 1e-3 };
        ExperimentConfig {
            master_seed: 7,
            methods: Method::ALL.to_vec(),
            n_eval_samples: 96,
            output_dir: output_dir.to_path_buf(),
            ablation: false,
            ablation_n: 16,
            simulation: SimulationSpec {
                m_source: 192,
                n_target: vec![16],
                seeds: 1,
                ..SimulationSpec::default()
            },
            schedule: VpSchedule::default(),
            networks: NetworkSpec {
                score_hidden: vec![32, 32],
                classifier_hidden: vec![32, 32],
                guidance_hidden: vec![32, 32],
            },
            source_training: train.clone(),
            vanilla_training: train.clone(),
            finetune_training: train.clone(),
            classifier_training: ClassifierConfig {
                epochs: 2,
                batch_size: 64,
                learning_rate: 1e-3,
            },
            time_classifier_training: ClassifierConfig {
                epochs: 2,
                batch_size: 64,
                learning_rate: 1e-3,
            },
            guidance_training: GuidanceConfig {
                epochs: 2,
                batch_size: 64,
                learning_rate: 1e-3,
                ..GuidanceConfig::default()
            },
            vanilla_guidance_training: train,
            sampler: SamplerSettings { steps: 8, grid: TimeGrid::default() },
            evaluation: EvaluationSettings {
                coverage_k: 3,
                energy_permutations: 19,
                energy_subsample: 64,
                alpha: 0.01,
            },
            ratio_grid: RatioGridSettings { resolution: 5, ..RatioGridSettings::default() },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| TgdpError::config(format!("reading {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| TgdpError::config(format!("parsing {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_toml()?;
        fs::write(path, text)
            .map_err(|e| TgdpError::config(format!("writing {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| TgdpError::config(format!("serializing config: {e}")))
    }

    /// Hex digest of the serialized config; stored in the run manifest so a
    /// changed config cannot silently reuse stale artifacts.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.simulation;
        if s.dim == 0 {
            return Err(TgdpError::config("simulation.dim must be positive"));
        }
        if s.mu_source.len() != s.dim || s.mu_target.len() != s.dim {
            return Err(TgdpError::config("component means must have simulation.dim entries"));
        }
        if !(s.sigma2 > 0.0) {
            return Err(TgdpError::config("simulation.sigma2 must be positive"));
        }
        if s.m_source == 0 {
            return Err(TgdpError::config("simulation.m_source must be positive"));
        }
        if s.n_target.is_empty() || s.n_target.iter().any(|&n| n == 0) {
            return Err(TgdpError::config("simulation.n_target needs positive entries"));
        }
        if s.seeds == 0 {
            return Err(TgdpError::config("simulation.seeds must be positive"));
        }
        if s.conditional {
            return Err(TgdpError::config(
                "the pipeline runs the unlabeled study; conditional models are library-level",
            ));
        }
        if self.methods.is_empty() {
            return Err(TgdpError::config("at least one method must be selected"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(TgdpError::config(format!("method {m} listed twice")));
            }
        }
        if self.n_eval_samples == 0 {
            return Err(TgdpError::config("n_eval_samples must be positive"));
        }
        if self.ablation && !s.n_target.contains(&self.ablation_n) {
            return Err(TgdpError::config(format!(
                "ablation_n = {} must be one of simulation.n_target",
                self.ablation_n
            )));
        }
        let sch = &self.schedule;
        if !(sch.beta0 > 0.0 && sch.beta1 > sch.beta0) {
            return Err(TgdpError::config("schedule needs beta1 > beta0 > 0"));
        }
        if !(sch.t_min > 0.0 && sch.t_min < sch.horizon) {
            return Err(TgdpError::config("schedule needs 0 < t_min < horizon"));
        }
        for (name, hidden) in [
            ("score", &self.networks.score_hidden),
            ("classifier", &self.networks.classifier_hidden),
            ("guidance", &self.networks.guidance_hidden),
        ] {
            if hidden.is_empty() || hidden.iter().any(|&h| h == 0) {
                return Err(TgdpError::config(format!(
                    "networks.{name}_hidden needs positive layer widths"
                )));
            }
        }
        if self.sampler.steps == 0 {
            return Err(TgdpError::config("sampler.steps must be positive"));
        }
        let ev = &self.evaluation;
        if ev.coverage_k == 0 {
            return Err(TgdpError::config("evaluation.coverage_k must be positive"));
        }
        if ev.energy_permutations == 0 || ev.energy_subsample < 2 {
            return Err(TgdpError::config(
                "evaluation needs energy_permutations >= 1 and energy_subsample >= 2",
            ));
        }
        if !(ev.alpha > 0.0 && ev.alpha < 1.0) {
            return Err(TgdpError::config("evaluation.alpha must lie in (0, 1)"));
        }
        let rg = &self.ratio_grid;
        if rg.enabled {
            if rg.resolution < 2 {
                return Err(TgdpError::config("ratio_grid.resolution must be at least 2"));
            }
            if !(rg.x_range.0 < rg.x_range.1 && rg.y_range.0 < rg.y_range.1) {
                return Err(TgdpError::config("ratio_grid ranges must be increasing"));
            }
        }
        Ok(())
    }
}
