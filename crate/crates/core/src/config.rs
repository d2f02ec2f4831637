//! Flat TOML run configuration.
//!
//! Every key is optional and falls back to the library default; unknown
//! keys are rejected.
//!
//! ```toml
//! n_aps = 5
//! n_ues = 5
//! total_iterations = 20000
//! serve_threshold = -120.0
//! sinr_widths = [32, 32]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::MultistartConfig;
use crate::error::{Error, Result};
use crate::gnn::GnnArch;
use crate::scenario::SystemParams;
use crate::training::{NormalizationParams, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    n_aps: usize,
    n_ues: usize,
    n_antennas: usize,
    area_side: f64,
    ap_height: f64,
    pathloss_exp: f64,
    pathloss_const: f64,
    shadow_std: f64,
    noise_power: f64,
    amp_inefficiency: f64,
    static_power: f64,
    serve_threshold: Option<f64>,
    bandwidth: f64,

    total_iterations: u64,
    batch_size: usize,
    lr_init: f64,
    lr_final: f64,
    mc_samples: usize,
    kappa_delta: f64,
    kappa_window: usize,
    p_max: f64,
    seed: u64,
    mu_prime: f64,
    sigma_prime: f64,
    eval_every: u64,

    layers: usize,
    node_dim: usize,
    message_dim: usize,
    sinr_widths: Vec<usize>,

    equal_grid: usize,
    multistart_restarts: usize,
    multistart_steps: usize,
    multistart_step_init: f64,
    multistart_step_final: f64,
}

/// Everything a command needs, split by consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub system: SystemParams,
    pub train: TrainConfig,
    pub arch: GnnArch,
    /// Points of the equal-power grid search.
    pub equal_grid: usize,
    pub multistart: MultistartConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemParams::default(),
            train: TrainConfig::default(),
            arch: GnnArch::default(),
            equal_grid: 200,
            multistart: MultistartConfig::default(),
        }
    }
}

impl From<&RunConfig> for FileConfig {
    fn from(c: &RunConfig) -> Self {
        let (s, t, a, m) = (&c.system, &c.train, &c.arch, &c.multistart);
        Self {
            n_aps: s.n_aps,
            n_ues: s.n_ues,
            n_antennas: s.n_antennas,
            area_side: s.area_side,
            ap_height: s.ap_height,
            pathloss_exp: s.pathloss_exp,
            pathloss_const: s.pathloss_const,
            shadow_std: s.shadow_std,
            noise_power: s.noise_power,
            amp_inefficiency: s.amp_inefficiency,
            static_power: s.static_power,
            serve_threshold: s.serve_threshold,
            bandwidth: s.bandwidth,
            total_iterations: t.total_iterations,
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            lr_final: t.lr_final,
            mc_samples: t.mc_samples,
            kappa_delta: t.kappa_delta,
            kappa_window: t.kappa_window,
            p_max: t.p_max,
            seed: t.seed,
            mu_prime: t.norm.mu_prime,
            sigma_prime: t.norm.sigma_prime,
            eval_every: t.eval_every,
            layers: a.layers,
            node_dim: a.node_dim,
            message_dim: a.message_dim,
            sinr_widths: a.sinr_widths.clone(),
            equal_grid: c.equal_grid,
            multistart_restarts: m.restarts,
            multistart_steps: m.steps,
            multistart_step_init: m.step_init,
            multistart_step_final: m.step_final,
        }
    }
}

impl Default for FileConfig {
    fn default() -> Self {
        (&RunConfig::default()).into()
    }
}

impl From<FileConfig> for RunConfig {
    fn from(f: FileConfig) -> Self {
        Self {
            system: SystemParams {
                n_aps: f.n_aps,
                n_ues: f.n_ues,
                n_antennas: f.n_antennas,
                area_side: f.area_side,
                ap_height: f.ap_height,
                pathloss_exp: f.pathloss_exp,
                pathloss_const: f.pathloss_const,
                shadow_std: f.shadow_std,
                noise_power: f.noise_power,
                amp_inefficiency: f.amp_inefficiency,
                static_power: f.static_power,
                serve_threshold: f.serve_threshold,
                bandwidth: f.bandwidth,
            },
            train: TrainConfig {
                total_iterations: f.total_iterations,
                batch_size: f.batch_size,
                lr_init: f.lr_init,
                lr_final: f.lr_final,
                mc_samples: f.mc_samples,
                kappa_delta: f.kappa_delta,
                kappa_window: f.kappa_window,
                p_max: f.p_max,
                seed: f.seed,
                norm: NormalizationParams {
                    mu_prime: f.mu_prime,
                    sigma_prime: f.sigma_prime,
                },
                eval_every: f.eval_every,
            },
            arch: GnnArch {
                layers: f.layers,
                node_dim: f.node_dim,
                message_dim: f.message_dim,
                sinr_widths: f.sinr_widths,
            },
            equal_grid: f.equal_grid,
            multistart: MultistartConfig {
                restarts: f.multistart_restarts,
                steps: f.multistart_steps,
                step_init: f.multistart_step_init,
                step_final: f.multistart_step_final,
                seed: f.seed,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: FileConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let config = Self::from(file);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&FileConfig::from(self)).expect("flat config always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.train.validate()?;
        let a = &self.arch;
        if a.layers == 0 || a.node_dim == 0 || a.message_dim == 0 {
            return Err(Error::Config("layers, node_dim and message_dim must be ≥ 1".into()));
        }
        if a.sinr_widths.is_empty() || a.sinr_widths.contains(&0) {
            return Err(Error::Config("sinr_widths needs at least one entry, all ≥ 1".into()));
        }
        if self.equal_grid < 2 {
            return Err(Error::Config("equal_grid must be ≥ 2".into()));
        }
        if self.multistart.restarts == 0 || self.multistart.steps == 0 {
            return Err(Error::Config("multistart_restarts and multistart_steps must be ≥ 1".into()));
        }
        Ok(())
    }
}
