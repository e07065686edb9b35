//! Settings shared by every subcommand: a TOML file whose keys are the flag
//! names, overridden by whatever was given on the command line.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use bnrf::data::Split;
use bnrf::field::DensityActivation;
use bnrf::optim::TrainConfig;
use bnrf::uncertainty::LossMode;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub loss_mode: Option<String>,
    pub iterations: Option<usize>,
    pub batch_rays: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<usize>,
    pub n_samples: Option<usize>,
    pub rig: Option<String>,
    pub train_count: Option<usize>,
    pub scene: Option<String>,
    pub suite: Option<String>,
    pub tolerance: Option<f64>,
    pub normalized_depth: Option<bool>,
    pub gradient_through_t: Option<bool>,
    // File-only keys.
    pub split: Option<Split>,
    pub test_count: Option<usize>,
    pub resolution: Option<usize>,
    pub background_color: Option<[f64; 3]>,
    pub early_termination: Option<bool>,
    pub jitter: Option<bool>,
    pub density_activation: Option<DensityActivation>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values set in `flags` win over values in `self`.
    pub fn overridden_by(mut self, flags: &Settings) -> Settings {
        overlay!(self, flags;
            seed, out, dataset, loss_mode, iterations, batch_rays, lr, warmup, n_samples, rig,
            train_count, scene, suite, tolerance, normalized_depth, gradient_through_t, split,
            test_count, resolution, background_color, early_termination, jitter,
            density_activation, eval_every, checkpoint_every, adam_beta1, adam_beta2, adam_eps,
        );
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn loss_mode(&self) -> anyhow::Result<LossMode> {
        match &self.loss_mode {
            Some(name) => Ok(name.parse()?),
            None => Ok(LossMode::Baseline),
        }
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let iterations = self.iterations.unwrap_or(d.iterations);
        Ok(TrainConfig {
            iterations,
            batch_rays: self.batch_rays.unwrap_or(d.batch_rays),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            adam_beta1: self.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            warmup_iterations: self.warmup.unwrap_or(iterations / 10),
            loss_mode: self.loss_mode()?,
            seed: self.seed(),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            background_color: self.background_color.unwrap_or(d.background_color),
            resolution: self.resolution.map_or(d.resolution, |n| [n; 3]),
            density_activation: self.density_activation.unwrap_or(d.density_activation),
            jitter: self.jitter.unwrap_or(d.jitter),
            normalized_depth: self.normalized_depth.unwrap_or(d.normalized_depth),
            gradient_through_t: self.gradient_through_t.unwrap_or(d.gradient_through_t),
            early_termination: self.early_termination.unwrap_or(d.early_termination),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
        })
    }
}
