//! Versioned TOML configuration for the command-line tools.
//!
//! Every tunable that affects training, clustering, feature extraction,
//! synthetic data generation, or evaluation lives here so that runs are
//! reproducible from a single file. Unknown keys are rejected rather than
//! silently ignored.

use std::fs;
use std::path::Path;

use gface_core::cluster::{ClusterOptions, FlowOptions};
use gface_core::pipeline::Similarity;
use gface_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub beta: f64,
    pub kfda_lambda: f64,
    pub kfda_sigma: f64,
    pub low_rank_threshold: usize,
    pub n_anchors: usize,
    pub outer_rounds: usize,
    pub outer_tol: f64,
    pub scg_iters_theta: usize,
    pub scg_iters_latent: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            latent_dim: m.latent_dim,
            beta: m.beta,
            kfda_lambda: m.kfda_lambda,
            kfda_sigma: m.kfda_sigma,
            low_rank_threshold: m.low_rank_threshold,
            n_anchors: m.n_anchors,
            outer_rounds: m.outer_rounds,
            outer_tol: m.outer_tol,
            scg_iters_theta: m.scg_iters_theta,
            scg_iters_latent: m.scg_iters_latent,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub similarity: Similarity,
    pub threshold: f64,
    /// Cap on rows fed to feature-extractor training; the training set is
    /// subsampled with class balance above this size.
    pub fe_max_points: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            similarity: Similarity::Cosine,
            threshold: gface_core::pipeline::DEFAULT_THRESHOLD,
            fe_max_points: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub merge_scale: f64,
    pub threshold_margin: f64,
    pub segment_samples: usize,
    /// Cap on latent points flowed to equilibria when building a codebook.
    pub max_points: usize,
    pub flow_max_steps: usize,
    pub flow_grad_tol: f64,
    pub flow_init_step: f64,
    pub flow_min_step: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = ClusterOptions::default();
        Self {
            merge_scale: c.merge_scale,
            threshold_margin: c.threshold_margin,
            segment_samples: c.segment_samples,
            max_points: 120,
            flow_max_steps: c.flow.max_steps,
            flow_grad_tol: c.flow.grad_tol,
            flow_init_step: c.flow.init_step,
            flow_min_step: c.flow.min_step,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_matched: usize,
    pub n_mismatched: usize,
    pub n_patches: usize,
    pub feat_dim: usize,
    /// Dimension of the hidden identity vectors the features are generated from.
    pub d_true: usize,
    /// Magnitude of the per-source affine offset separating source domains
    /// from the target domain.
    pub domain_shift: f64,
    pub noise: f64,
    pub sources: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_matched: 200,
            n_mismatched: 200,
            n_patches: 16,
            feat_dim: 8,
            d_true: 2,
            domain_shift: 0.3,
            noise: 0.4,
            sources: 3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k_folds: usize,
    /// When true, `eval` first picks beta and kfda_sigma (and n_anchors when
    /// the low-rank path is active) on a held-out identity-disjoint split.
    pub grid_search: bool,
    pub beta_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub anchor_grid: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k_folds: 10,
            grid_search: false,
            beta_grid: vec![0.0, 0.05, 0.1, 0.5, 1.0],
            sigma_grid: vec![0.1, 1.0, 10.0],
            anchor_grid: vec![50, 100, 200],
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelSection::default(),
            pipeline: PipelineSection::default(),
            cluster: ClusterSection::default(),
            synth: SynthSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Config {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            latent_dim: m.latent_dim,
            beta: m.beta,
            kfda_lambda: m.kfda_lambda,
            kfda_sigma: m.kfda_sigma,
            low_rank_threshold: m.low_rank_threshold,
            n_anchors: m.n_anchors,
            outer_rounds: m.outer_rounds,
            outer_tol: m.outer_tol,
            scg_iters_theta: m.scg_iters_theta,
            scg_iters_latent: m.scg_iters_latent,
            seed: m.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cluster_options(&self) -> ClusterOptions {
        let c = &self.cluster;
        ClusterOptions {
            merge_scale: c.merge_scale,
            threshold_margin: c.threshold_margin,
            segment_samples: c.segment_samples,
            flow: FlowOptions {
                max_steps: c.flow_max_steps,
                grad_tol: c.flow_grad_tol,
                init_step: c.flow_init_step,
                min_step: c.flow_min_step,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::format(format!(
                "config version {} not supported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        self.model_config()?;
        if !(self.pipeline.threshold > 0.0 && self.pipeline.threshold < 1.0) {
            return Err(Error::contract("pipeline.threshold must lie in (0, 1)"));
        }
        if self.pipeline.fe_max_points == 0 {
            return Err(Error::contract("pipeline.fe_max_points must be positive"));
        }
        if self.cluster.max_points == 0 {
            return Err(Error::contract("cluster.max_points must be positive"));
        }
        let s = &self.synth;
        if s.n_matched == 0 || s.n_mismatched == 0 {
            return Err(Error::contract("synth pair counts must be positive"));
        }
        if s.n_patches == 0 || s.feat_dim == 0 || s.d_true == 0 {
            return Err(Error::contract("synth dimensions must be positive"));
        }
        if !(s.noise >= 0.0) || !(s.domain_shift >= 0.0) {
            return Err(Error::contract("synth noise and domain_shift must be nonnegative"));
        }
        if self.eval.k_folds < 2 {
            return Err(Error::contract("eval.k_folds must be at least 2"));
        }
        if self.eval.grid_search
            && (self.eval.beta_grid.is_empty() || self.eval.sigma_grid.is_empty())
        {
            return Err(Error::contract("grid search requires nonempty beta and sigma grids"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)?;
    let config: Config = toml::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn default_config_toml() -> String {
    toml::to_string_pretty(&Config::default()).expect("default config serializes")
}
