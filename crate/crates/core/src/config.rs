//! Run configuration: sectioned `key = value` text with `[section]` headers.
//! Every key is optional and falls back to the desk-scale default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{BoxNormalization, DEFAULT_TEXT_DIM};
use crate::diffusion::{make_schedule, scaled_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::SensorConfig;
use crate::networks::object::ObjectDenoiserConfig;
use crate::networks::scene::SceneNetConfig;
use crate::networks::train::TrainConfig;
use crate::pipeline::{default_priors, CategoryPrior, PlacementArea};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sensor: SensorSection,
    pub object_sensor: SensorSection,
    pub diffusion: DiffusionSection,
    pub object: ObjectSection,
    pub scene: SceneSection,
    pub object_train: TrainSection,
    pub scene_train: TrainSection,
    pub synth: SynthSection,
    pub text: TextSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sensor: SensorSection::default(),
            object_sensor: SensorSection {
                height: 64,
                width: 1024,
                ..SensorSection::default()
            },
            diffusion: DiffusionSection::default(),
            object: ObjectSection::default(),
            scene: SceneSection::default(),
            object_train: TrainSection::default(),
            scene_train: TrainSection::default(),
            synth: SynthSection::default(),
            text: TextSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub height: usize,
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub r_max: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        Self {
            height: 32,
            width: 256,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            r_max: 80.0,
        }
    }
}

impl SensorSection {
    pub fn sensor(&self) -> Result<SensorConfig> {
        let cfg = SensorConfig {
            height: self.height,
            width: self.width,
            fov_up: self.fov_up_deg.to_radians(),
            fov_down: self.fov_down_deg.to_radians(),
            r_max: self.r_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Betas default to the 1000-step DDPM range rescaled to `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: None,
            beta_end: None,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match (self.beta_start, self.beta_end) {
            (None, None) => scaled_schedule(self.steps),
            (Some(a), Some(b)) => make_schedule(self.steps, a, b),
            _ => Err(Error::Config(
                "set both beta_start and beta_end or neither".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectSection {
    pub voxel_res: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub cond_dim: usize,
    pub fourier_freqs: usize,
    pub num_points: usize,
    pub scaled_attention: bool,
    pub scene_half_extent: f64,
    pub size_scale: f64,
}

impl Default for ObjectSection {
    fn default() -> Self {
        let d = ObjectDenoiserConfig::default();
        let n = BoxNormalization::default();
        Self {
            voxel_res: d.voxel_res,
            patch: d.patch,
            dim: d.dim,
            blocks: d.blocks,
            ffn_hidden: d.ffn_hidden,
            head_hidden: d.head_hidden,
            cond_dim: d.cond_dim,
            fourier_freqs: d.fourier_freqs,
            num_points: d.num_points,
            scaled_attention: d.scaled_attention,
            scene_half_extent: n.scene_half_extent,
            size_scale: n.size_scale,
        }
    }
}

impl ObjectSection {
    pub fn model(&self, text_dim: usize) -> Result<ObjectDenoiserConfig> {
        let cfg = ObjectDenoiserConfig {
            voxel_res: self.voxel_res,
            patch: self.patch,
            dim: self.dim,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            cond_dim: self.cond_dim,
            text_dim,
            fourier_freqs: self.fourier_freqs,
            num_points: self.num_points,
            scaled_attention: self.scaled_attention,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn norm(&self) -> BoxNormalization {
        BoxNormalization {
            scene_half_extent: self.scene_half_extent,
            size_scale: self.size_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub base_width: usize,
    pub depth: usize,
    pub temb_dim: usize,
    pub osa_lambda: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let d = SceneNetConfig::default();
        Self {
            base_width: d.base_width,
            depth: d.depth,
            temb_dim: d.temb_dim,
            osa_lambda: 1.0,
        }
    }
}

impl SceneSection {
    pub fn model(&self) -> Result<SceneNetConfig> {
        let cfg = SceneNetConfig {
            base_width: self.base_width,
            depth: self.depth,
            temb_dim: self.temb_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorySection {
    pub name: String,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scenes: usize,
    pub objects: usize,
    pub objects_per_scene: usize,
    pub ground_z: f64,
    pub half_extent: f64,
    pub keep_out: f64,
    /// Empty means the built-in car / pedestrian / cyclist priors.
    pub categories: Vec<CategorySection>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            scenes: 32,
            objects: 64,
            objects_per_scene: 6,
            ground_z: -1.73,
            half_extent: 30.0,
            keep_out: 5.0,
            categories: Vec::new(),
        }
    }
}

impl SynthSection {
    pub fn priors(&self) -> Vec<CategoryPrior> {
        if self.categories.is_empty() {
            return default_priors();
        }
        self.categories
            .iter()
            .map(|c| CategoryPrior::new(&c.name, [c.width, c.length, c.height], c.jitter))
            .collect()
    }

    pub fn area(&self) -> PlacementArea {
        PlacementArea {
            x_range: (-self.half_extent, self.half_extent),
            y_range: (-self.half_extent, self.half_extent),
            ground_z: self.ground_z,
            keep_out: self.keep_out,
        }
    }
}

impl Default for CategorySection {
    fn default() -> Self {
        Self {
            name: String::new(),
            width: 1.0,
            length: 1.0,
            height: 1.0,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    /// Precomputed `prompt<TAB>values` file; the hash encoder is used when unset.
    pub embeddings: Option<PathBuf>,
    pub dim: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            embeddings: None,
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bev_grid: usize,
    pub bev_extent: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bev_grid: 100,
            bev_extent: 50.0,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical text of the resolved configuration.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`Config::render`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}
