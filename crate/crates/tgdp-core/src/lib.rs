//! Transfer-guided diffusion on Gaussian mixtures.
//!
//! A diffusion model is fit once on a large source sample. For a related
//! target distribution with few samples, a guidance network is trained to
//! represent the time-dependent density ratio between the two forward-process
//! marginals; adding its log-gradient to the frozen source score yields a
//! sampler for the target. The crate bundles the closed-form mixture oracles,
//! the dense networks and their training loops, SDE and ODE samplers, the
//! evaluation metrics, and the end-to-end experiment pipeline.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod gmm;
pub mod guidance;
pub mod metrics;
pub mod net;
pub mod opt;
pub mod pipeline;
pub mod ratio;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use checkpoint::{load_checkpoint, save_checkpoint, NetMetadata};
pub use config::{
    AblationVariant, EvaluationSettings, ExperimentConfig, Method, NetworkSpec,
    RatioGridSettings, SamplerSettings,
};
pub use dataset::Dataset;
pub use embed::TimeEmbedding;
pub use error::{Result, TgdpError};
pub use gmm::{avg_likelihood, density_ratio, IsotropicGmm, SimulationSpec};
pub use guidance::{
    GuidanceConfig, GuidanceLoss, GuidanceModel, JointRatioTargets, RatioTargets, SourceScore,
    VanillaGuidance,
};
pub use metrics::{coverage, energy_permutation_test, frechet_fit, EnergyTestResult};
pub use net::{Activation, DenseNetwork};
pub use opt::AdamState;
pub use pipeline::{phase_rng, MetricRecord, Phase, Pipeline, RunManifest};
pub use ratio::{write_ratio_grid, ClassifierConfig, DomainClassifier};
pub use sampler::{
    sample_ode, sample_sde, GuidedScore, ModelScore, OracleScore, ScoreField, TimeGrid,
    VanillaGuidedScore,
};
pub use schedule::VpSchedule;
pub use score::{DsmConfig, ScoreModel};
