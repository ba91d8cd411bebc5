//! Run configuration: everything that produced an artifact, echoed next to
//! it as `run_config.json`.

use std::path::{Path, PathBuf};

use mtid_core::classifier::ClassifierConfig;
use mtid_core::denoiser::{StateDims, UNetConfig};
use mtid_core::interpolation::{InterpolationConfig, InterpolationStrategy};
use mtid_core::objective::{LossVariant, MaskConvention};
use mtid_core::pipeline::{MaskMode, ModelConfig, TrainConfig};
use mtid_core::synthworld::WorldSpec;
use mtid_core::Error;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mask_mode: MaskMode,
    /// Strided DDIM steps; `None` uses the training config's value.
    pub ddim_steps: Option<usize>,
    /// Samples per instance for the uncertainty report.
    pub uncertainty: Option<usize>,
    pub sample_seed: u64,
    /// Condition on ground-truth tasks instead of the classifier.
    pub oracle_tasks: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::Init,
            ddim_steps: None,
            uncertainty: None,
            sample_seed: 0,
            oracle_tasks: false,
        }
    }
}

/// Cells of an ablation sweep: one trained model per (loss, mask loss,
/// strategy), evaluated under every mask mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepMatrix {
    pub losses: Vec<LossVariant>,
    pub mask_losses: Vec<MaskConvention>,
    pub mask_modes: Vec<MaskMode>,
    pub strategies: Vec<InterpolationStrategy>,
}

impl Default for SweepMatrix {
    fn default() -> Self {
        Self {
            losses: vec![LossVariant::Mse, LossVariant::Gradient],
            mask_losses: vec![MaskConvention::RelevantPenalty],
            mask_modes: vec![MaskMode::Init, MaskMode::Iteration, MaskMode::None],
            strategies: vec![InterpolationStrategy::Learned],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub train_fraction: f64,
    pub horizon: usize,
    pub classifier: ClassifierConfig,
    pub interpolation: InterpolationConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    /// Steps between checkpoint writes during diffusion training.
    pub checkpoint_every: usize,
    pub eval: EvalOptions,
    pub sweep: SweepMatrix,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        Self {
            seed: 0,
            classifier: ClassifierConfig::new(world.obs_dim, world.num_tasks),
            interpolation: InterpolationConfig::new(world.obs_dim),
            world,
            train_fraction: 0.7,
            horizon: 3,
            unet: UNetConfig::scaled(32),
            train: TrainConfig::default(),
            checkpoint_every: 1000,
            eval: EvalOptions::default(),
            sweep: SweepMatrix::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("config {}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self.classifier.seed = seed;
        self.eval.sample_seed = seed;
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.world.validate()?;
        self.train.validate()?;
        if !(3..=6).contains(&self.horizon) {
            return Err(Error::config(format!("horizon {} outside 3..=6", self.horizon)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }

    /// The planner architecture for a dataset with the given world.
    pub fn model_config(&self, world: &WorldSpec) -> Result<ModelConfig, Error> {
        if self.interpolation.obs_dim != world.obs_dim {
            return Err(Error::config(format!(
                "interpolation obs_dim {} does not match the dataset's {}",
                self.interpolation.obs_dim, world.obs_dim
            )));
        }
        Ok(ModelConfig {
            dims: StateDims {
                num_tasks: world.num_tasks,
                num_actions: world.num_actions,
                obs_dim: world.obs_dim,
                horizon: self.horizon,
            },
            interpolation: self.interpolation.clone(),
            unet: self.unet.clone(),
        })
    }

    /// The classifier config sized to the dataset's world.
    pub fn classifier_config(&self, world: &WorldSpec) -> ClassifierConfig {
        ClassifierConfig {
            obs_dim: world.obs_dim,
            num_tasks: world.num_tasks,
            ..self.classifier.clone()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
