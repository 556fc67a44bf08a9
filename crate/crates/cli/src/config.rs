//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use invedit_core::denoiser::TrainOptions;
use invedit_core::latent_codec::AutoencoderTrainOptions;
use invedit_core::pipeline::DEFAULT_EDGE_THRESHOLD;
use invedit_core::{
    AnalyticGaussian, CodecMode, ControllerPolicy, DenoiserConfig, Error, LatentCodec, LatentTensor, NoisePredictor,
    Result, ScheduleConfig, ToyDenoiser,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// A directory written by `train`.
    Checkpoint { path: PathBuf },
    /// Closed-form predictor for a `N(mean, s²)` latent prior.
    Analytic { mean: f64, s: f64 },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Checkpoint {
            path: PathBuf::from("run/model"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSpec {
    pub mode: CodecMode,
    /// A codec directory written by `train`; overrides `mode` when set.
    pub path: Option<PathBuf>,
    pub image_shape: [usize; 3],
    pub autoencoder: AutoencoderTrainOptions,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            mode: CodecMode::default(),
            path: None,
            image_shape: [1, 32, 32],
            autoencoder: AutoencoderTrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub enabled: bool,
    pub edge_threshold: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 1024,
            n_test: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub model: DenoiserConfig,
    pub model_seed: u64,
    pub options: TrainOptions,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            model: DenoiserConfig {
                widths: [16, 32, 64],
                ..Default::default()
            },
            model_seed: 0,
            options: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelSpec,
    pub codec: CodecSpec,
    pub policy: ControllerPolicy,
    /// Guidance scale; 7.5 for `edit` and 1 for reconstruction when unset.
    pub cfg_scale: Option<f64>,
    pub control_unconditional: bool,
    pub layout: LayoutSpec,
    pub output_dir: PathBuf,
    pub image: Option<PathBuf>,
    pub prompt: Option<String>,
    pub data: DataSpec,
    pub train: TrainSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: ModelSpec::default(),
            codec: CodecSpec::default(),
            policy: ControllerPolicy::default(),
            cfg_scale: None,
            control_unconditional: true,
            layout: LayoutSpec::default(),
            output_dir: PathBuf::from("run"),
            image: None,
            prompt: None,
            data: DataSpec::default(),
            train: TrainSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        if let Some(w) = self.cfg_scale {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("cfg_scale {w} must be finite and ≥ 0")));
            }
        }
        if !(self.layout.edge_threshold > 0.0 && self.layout.edge_threshold < 1.0) {
            return Err(Error::Config(format!(
                "edge threshold {} outside (0, 1)",
                self.layout.edge_threshold
            )));
        }
        if let ModelSpec::Analytic { s, mean } = self.model {
            if !(s > 0.0) || !mean.is_finite() {
                return Err(Error::Config("analytic model needs s > 0 and a finite mean".into()));
            }
        }
        self.train.model.validate()?;
        self.policy
            .validate(schedule.steps(), invedit_core::denoiser::NUM_ATTENTION_LAYERS)
    }

    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn build_codec(&self) -> Result<LatentCodec> {
        if let Some(path) = &self.codec.path {
            return LatentCodec::load(path);
        }
        let shape = (self.codec.image_shape[0], self.codec.image_shape[1], self.codec.image_shape[2]);
        match self.codec.mode {
            CodecMode::SpaceToDepth { block } => LatentCodec::space_to_depth(shape, block),
            CodecMode::Identity => Ok(LatentCodec::identity(shape)),
            CodecMode::TrainedAutoencoder { .. } => Err(Error::Config(
                "a trained autoencoder codec needs codec.path (run `train` first)".into(),
            )),
        }
    }

    pub fn build_model(&self, codec: &LatentCodec) -> Result<Box<dyn NoisePredictor + Send + Sync>> {
        match &self.model {
            ModelSpec::Checkpoint { path } => Ok(Box::new(ToyDenoiser::load(path)?)),
            ModelSpec::Analytic { mean, s } => {
                let (c, h, w) = codec.latent_shape();
                let mu = LatentTensor::from_vec((c, h, w), vec![*mean; c * h * w])?;
                Ok(Box::new(AnalyticGaussian::new(mu, *s)?))
            }
        }
    }
}
