//! Validated JSON configuration covering every tunable in the engine.
//!
//! Unknown keys are rejected, every value is range-checked before any work
//! starts, and the validated document is echoed into checkpoints. CLI flags
//! override keys with dotted paths (`--set train.seed=7`).

use serde::{Deserialize, Serialize};

use crate::decoders::QueryGranularity;
use crate::error::{Error, Result};
use crate::lifecycle::LifecycleConfig;
use crate::rasterizer::{CompositeMode, RenderOptions};
use crate::real::{rl, Real};
use crate::scaffold::Dims;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scene: SceneConfig,
    pub synth: SynthConfig,
    pub bank: BankConfig,
    pub raster: RasterConfig,
    pub train: TrainConfig,
    pub lifecycle: LifecycleConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: SceneConfig::default(),
            synth: SynthConfig::default(),
            bank: BankConfig::default(),
            raster: RasterConfig::default(),
            train: TrainConfig::default(),
            lifecycle: LifecycleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Voxel cell size l, world units.
    pub voxel_size: f64,
    /// Gaussians per anchor (N).
    pub gaussians_per_anchor: usize,
    /// Anchor latent width d_f.
    pub feat_dim: usize,
    /// Per-camera appearance embedding width d_c.
    pub appear_dim: usize,
    /// Shared semantic query width d_q.
    pub query_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            voxel_size: 0.01,
            gaussians_per_anchor: 10,
            feat_dim: 32,
            appear_dim: 32,
            query_dim: 160,
        }
    }
}

impl SceneConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            feat: self.feat_dim,
            appear: self.appear_dim,
            query: self.query_dim,
        }
    }
}

/// One emulated feature provider: a tag, its feature width, and the seed
/// that fixes its per-semantic-id unit vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub tag: String,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub objects: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub points: usize,
    pub cam_radius: f64,
    pub cam_height: f64,
    pub fov_deg: f64,
    pub models: Vec<ModelSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 3,
            cameras: 8,
            width: 64,
            height: 64,
            points: 1000,
            cam_radius: 0.8,
            cam_height: 0.3,
            fov_deg: 35.0,
            models: vec![
                ModelSpec { tag: "m0".into(), dim: 16, seed: 1101 },
                ModelSpec { tag: "m1".into(), dim: 16, seed: 1102 },
                ModelSpec { tag: "m2".into(), dim: 32, seed: 1103 },
                ModelSpec { tag: "m3".into(), dim: 16, seed: 1104 },
                ModelSpec { tag: "m4".into(), dim: 32, seed: 1105 },
                ModelSpec { tag: "m5".into(), dim: 160, seed: 1106 },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Similarity threshold γ for greedy selection.
    pub gamma: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { gamma: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub znear: f64,
    pub dilation: f64,
    pub early_stop: f64,
    pub hit_threshold: f64,
    /// Divide rendered query pixels by alpha before attention (off by
    /// default; unnormalized composited queries are the reference behavior).
    pub normalize_qmap: bool,
    pub reference_mode: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            znear: 0.01,
            dilation: 0.3,
            early_stop: 1e-4,
            hit_threshold: 1.0 / 255.0,
            normalize_qmap: false,
            reference_mode: false,
        }
    }
}

impl RasterConfig {
    pub fn options<T: Real>(&self) -> RenderOptions<T> {
        RenderOptions {
            tile_size: self.tile_size,
            znear: rl(self.znear),
            dilation: rl(self.dilation),
            early_stop: rl(self.early_stop),
            hit_threshold: rl(self.hit_threshold),
            mode: if self.reference_mode {
                CompositeMode::Reference
            } else {
                CompositeMode::Tiled
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Start/end pairs decay exponentially over the schedule horizon.
    pub offsets: f64,
    pub offsets_final: f64,
    pub latents: f64,
    pub latents_final: f64,
    pub anchor_scale: f64,
    pub mlp: f64,
    pub appearance: f64,
    pub adapt: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            offsets: 1e-2,
            offsets_final: 1.6e-4,
            latents: 7.5e-3,
            latents_final: 1.2e-4,
            anchor_scale: 7e-3,
            mlp: 2e-3,
            appearance: 5e-2,
            adapt: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ_{l,n}, photometric L1.
    pub l1: f64,
    /// λ_{l,ssim}.
    pub ssim: f64,
    /// λ_{l,s}, anchor-scale (volume) regularizer.
    pub scale: f64,
    /// λ_{l,e}, multimodal feature alignment.
    pub feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.8,
            ssim: 0.2,
            scale: 0.01,
            feature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub rates: LearningRates,
    /// Horizon for exponential LR decay; 0 means "use `iterations`".
    pub lr_horizon: u64,
    pub weights: LossWeights,
    pub query_granularity: QueryGranularity,
    pub eval_every: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Camera ids held out from training and reported separately.
    pub holdout_cameras: Vec<u32>,
    /// Held-out views decode with the mean trained embedding ("mean") or
    /// their own untrained one ("own").
    pub holdout_embed: HoldoutEmbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutEmbed {
    Mean,
    Own,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            seed: 0,
            rates: LearningRates::default(),
            lr_horizon: 0,
            weights: LossWeights::default(),
            query_granularity: QueryGranularity::PerAnchor,
            eval_every: 500,
            log_every: 10,
            checkpoint_every: 0,
            holdout_cameras: vec![3, 7],
            holdout_embed: HoldoutEmbed::Mean,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        c(self.scene.voxel_size > 0.0, "scene.voxel_size must be > 0")?;
        c(
            self.scene.gaussians_per_anchor >= 1,
            "scene.gaussians_per_anchor must be ≥ 1",
        )?;
        c(self.scene.feat_dim >= 1, "scene.feat_dim must be ≥ 1")?;
        c(self.scene.query_dim >= 1, "scene.query_dim must be ≥ 1")?;
        c(self.synth.objects >= 1, "synth.objects must be ≥ 1")?;
        c(self.synth.cameras >= 1, "synth.cameras must be ≥ 1")?;
        c(
            self.synth.width >= 8 && self.synth.height >= 8,
            "synth image size must be ≥ 8",
        )?;
        c(self.synth.points >= 1, "synth.points must be ≥ 1")?;
        c(!self.synth.models.is_empty(), "synth.models must not be empty")?;
        for m in &self.synth.models {
            c(m.dim >= 2, "model dims must be ≥ 2")?;
            c(!m.tag.is_empty(), "model tags must not be empty")?;
        }
        {
            let mut tags: Vec<&str> = self.synth.models.iter().map(|m| m.tag.as_str()).collect();
            tags.sort_unstable();
            tags.dedup();
            c(tags.len() == self.synth.models.len(), "model tags must be unique")?;
        }
        c(
            0.0 < self.bank.gamma && self.bank.gamma < 1.0,
            "bank.gamma must be in (0, 1)",
        )?;
        c(self.raster.tile_size >= 1, "raster.tile_size must be ≥ 1")?;
        c(self.raster.znear > 0.0, "raster.znear must be > 0")?;
        c(self.raster.dilation >= 0.0, "raster.dilation must be ≥ 0")?;
        c(self.train.iterations >= 1, "train.iterations must be ≥ 1")?;
        let w = &self.train.weights;
        c(
            w.l1 >= 0.0 && w.ssim >= 0.0 && w.scale >= 0.0 && w.feature >= 0.0,
            "loss weights must be ≥ 0",
        )?;
        let r = &self.train.rates;
        c(
            r.offsets > 0.0
                && r.offsets_final > 0.0
                && r.latents > 0.0
                && r.latents_final > 0.0
                && r.anchor_scale > 0.0
                && r.mlp > 0.0
                && r.appearance > 0.0
                && r.adapt > 0.0,
            "learning rates must be > 0",
        )?;
        c(self.train.log_every >= 1, "train.log_every must be ≥ 1")?;
        self.lifecycle.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Config> {
        let cfg: Config = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file (or defaults when `path` is `None`) and apply dotted
    /// `key.path=value` overrides before validation.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Config> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Config::default()).expect("default config"),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Self::from_value(value)
    }

    /// Effective LR decay horizon.
    pub fn lr_horizon(&self) -> u64 {
        if self.train.lr_horizon == 0 {
            self.train.iterations
        } else {
            self.train.lr_horizon
        }
    }
}

/// Apply one `path.to.key=value` override onto a JSON document. The path must
/// already exist (config keys are fixed); the value parses as JSON when
/// possible and falls back to a string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override `{path}`: `{seg}` is not an object"))
        })?;
        if i + 1 == segments.len() {
            if !map.contains_key(*seg) {
                return Err(Error::Config(format!(
                    "override `{path}`: unknown key `{seg}`"
                )));
            }
            map.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        cursor = map.get_mut(*seg).ok_or_else(|| {
            Error::Config(format!("override `{path}`: unknown section `{seg}`"))
        })?;
    }
    unreachable!("split produced no segments")
}
