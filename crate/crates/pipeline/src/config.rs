//! Run configuration: one TOML file, every field defaulted, overridable
//! from the command line with `--set section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use talkgen_core::backbone::{DitConfig, DropoutProbs, AUDIO_FEATURES};
use talkgen_core::codec::{pixel_frames_for, LATENT_CHANNELS};
use talkgen_core::flow::SamplerConfig;
use talkgen_core::params::AdamConfig;
use talkgen_core::pose::DEFAULT_SIGMA;
use talkgen_core::refiner::{refiner_dit_config, ChunkPlan, DegradationConfig, LongSamplers};
use talkgen_core::reward::{ReflConfig, ReflGradient};
use talkgen_core::train::{RefinerTrainConfig, TrainConfig};
use talkgen_core::world::Layout;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub lr_model: ModelConfig,
    pub refiner_model: ModelConfig,
    pub train_lr: PhaseConfig,
    pub train_refiner: RefinerPhaseConfig,
    pub refl: ReflPhaseConfig,
    pub sampler: SamplerPair,
    pub degradation: DegradationConfig,
    pub dropout: DropoutProbs,
    pub eval: EvalConfig,
    pub provenance: Provenance,
}

/// Frame geometry. A chunk spans `f + 1` latents, i.e. `4f + 1` pixel
/// frames, on an `h × w` LR frame; HR frames are `hr_factor` times larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub hr_factor: usize,
    /// Latents shared between consecutive chunks.
    pub overlap: usize,
    /// Scene length in pixel frames for datasets.
    pub duration: usize,
    pub num_scenes: usize,
    pub pose_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Text embedding width (LR generator only).
    pub text_dim: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerPhaseConfig {
    #[serde(flatten)]
    pub phase: PhaseConfig,
    pub pose_dropout: f64,
    pub max_drift_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflPhaseConfig {
    #[serde(flatten)]
    pub phase: PhaseConfig,
    pub threshold: f64,
    pub weight: f64,
    pub clamp: bool,
    pub sample_steps: usize,
    pub gradient: ReflGradient,
    pub reward: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub cfg_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerPair {
    pub lr: SamplerSettings,
    pub refiner: SamplerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Window length in pixel frames.
    pub window: usize,
}

/// Published constants that the toy configuration departs from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Provenance {
    pub published_learning_rate: f64,
    pub note: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            lr_model: ModelConfig::default(),
            refiner_model: ModelConfig {
                text_dim: 0,
                init_seed: 2,
                ..ModelConfig::default()
            },
            train_lr: PhaseConfig::default(),
            train_refiner: RefinerPhaseConfig::default(),
            refl: ReflPhaseConfig::default(),
            sampler: SamplerPair::default(),
            degradation: DegradationConfig::default(),
            dropout: DropoutProbs::default(),
            eval: EvalConfig::default(),
            provenance: Provenance::default(),
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            f: 3,
            h: 32,
            w: 32,
            hr_factor: 4,
            overlap: 1,
            duration: 37,
            num_scenes: 200,
            pose_sigma: DEFAULT_SIGMA,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 2,
            text_dim: 32,
            init_seed: 1,
        }
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 4000,
            batch: 4,
            seed: 0,
            clip_norm: Some(1.0),
            checkpoint_every: 500,
        }
    }
}

impl Default for RefinerPhaseConfig {
    fn default() -> Self {
        let r = RefinerTrainConfig::default();
        Self {
            phase: PhaseConfig {
                steps: 1500,
                ..PhaseConfig::default()
            },
            pose_dropout: r.pose_dropout,
            max_drift_gain: r.max_drift_gain,
        }
    }
}

impl Default for ReflPhaseConfig {
    fn default() -> Self {
        let r = ReflConfig::default();
        Self {
            phase: PhaseConfig {
                steps: 200,
                batch: 2,
                seed: 100,
                checkpoint_every: 50,
                ..PhaseConfig::default()
            },
            threshold: r.threshold,
            weight: r.weight,
            clamp: r.clamp,
            sample_steps: r.sample_steps,
            gradient: r.gradient,
            reward: "synthetic-hand".into(),
        }
    }
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let s = SamplerConfig::lr_default(0);
        Self {
            steps: s.steps,
            cfg_scale: s.cfg_scale,
        }
    }
}

impl Default for SamplerPair {
    fn default() -> Self {
        let r = SamplerConfig::refiner_default(0);
        Self {
            lr: SamplerSettings::default(),
            refiner: SamplerSettings {
                steps: r.steps,
                cfg_scale: r.cfg_scale,
            },
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { window: 4 }
    }
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            published_learning_rate: 5e-5,
            note: "the published rate targets billion-parameter models; the toy models train at 1e-3".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Loads `path` (or the defaults) and applies `key.path=value` overrides.
    /// Values are parsed as TOML scalars, falling back to a bare string.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), parsed)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let layout = Layout::default();
        let w = &self.world;
        if (w.h, w.w) != (layout.lr_size(), layout.lr_size()) || w.h * w.hr_factor != layout.hr_size {
            return bad(format!(
                "world geometry {}×{} (HR ×{}) does not match the synthetic layout {}×{} (HR {})",
                w.h,
                w.w,
                w.hr_factor,
                layout.lr_size(),
                layout.lr_size(),
                layout.hr_size
            ));
        }
        if w.f == 0 {
            return bad("world.f must be at least 1".into());
        }
        if w.overlap > w.f {
            return bad(format!("world.overlap {} must be below the chunk length {}", w.overlap, w.f + 1));
        }
        if !talkgen_core::world::valid_duration(w.duration) {
            return bad(format!("world.duration {} is not of the form 4k+1", w.duration));
        }
        if w.duration < pixel_frames_for(self.chunk_len()) {
            return bad(format!(
                "world.duration {} is shorter than one chunk ({} frames)",
                w.duration,
                pixel_frames_for(self.chunk_len())
            ));
        }
        self.degradation.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.dropout.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.lr_dit().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.refiner_dit().validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, p) in [
            ("train_lr", &self.train_lr),
            ("train_refiner", &self.train_refiner.phase),
            ("refl", &self.refl.phase),
        ] {
            if p.batch == 0 || !(p.lr > 0.0) || p.checkpoint_every == 0 {
                return bad(format!("{name}: batch, lr and checkpoint_every must be positive"));
            }
        }
        for (name, s) in [("lr", self.sampler.lr), ("refiner", self.sampler.refiner)] {
            SamplerConfig::new(s.steps, s.cfg_scale, 0).map_err(|e| CliError::Config(format!("sampler.{name}: {e}")))?;
        }
        for (name, p) in [
            ("train_refiner.pose_dropout", self.train_refiner.pose_dropout),
            ("refl.threshold", self.refl.threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.refl.sample_steps == 0 {
            return bad("refl.sample_steps must be at least 1".into());
        }
        if self.eval.window == 0 {
            return bad("eval.window must be at least 1".into());
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.world.f + 1
    }

    pub fn lr_dit(&self) -> DitConfig {
        let m = &self.lr_model;
        DitConfig {
            width: m.width,
            heads: m.heads,
            layers: m.layers,
            mlp_ratio: m.mlp_ratio,
            text_dim: m.text_dim,
            audio_dim: AUDIO_FEATURES,
            ref_channels: LATENT_CHANNELS,
            ..DitConfig::lr_default()
        }
    }

    pub fn refiner_dit(&self) -> DitConfig {
        let m = &self.refiner_model;
        DitConfig {
            width: m.width,
            heads: m.heads,
            layers: m.layers,
            mlp_ratio: m.mlp_ratio,
            ..refiner_dit_config()
        }
    }

    pub fn train_config(&self, p: &PhaseConfig) -> TrainConfig {
        TrainConfig {
            steps: p.steps,
            batch: p.batch,
            adam: AdamConfig {
                lr: p.lr,
                clip_norm: p.clip_norm,
                ..AdamConfig::default()
            },
            seed: p.seed,
            dropout: self.dropout,
        }
    }

    pub fn refiner_train(&self) -> RefinerTrainConfig {
        RefinerTrainConfig {
            chunk_len: self.chunk_len(),
            overlap: self.world.overlap,
            degradation: self.degradation,
            pose_sigma: self.world.pose_sigma,
            pose_dropout: self.train_refiner.pose_dropout,
            max_drift_gain: self.train_refiner.max_drift_gain,
        }
    }

    pub fn refl_config(&self) -> ReflConfig {
        ReflConfig {
            threshold: self.refl.threshold,
            weight: self.refl.weight,
            clamp: self.refl.clamp,
            sample_steps: self.refl.sample_steps,
            cfg_scale: self.sampler.lr.cfg_scale,
            gradient: self.refl.gradient,
        }
    }

    pub fn samplers(&self, seed: u64) -> LongSamplers {
        LongSamplers {
            lr: SamplerConfig {
                steps: self.sampler.lr.steps,
                cfg_scale: self.sampler.lr.cfg_scale,
                seed,
            },
            refiner: SamplerConfig {
                steps: self.sampler.refiner.steps,
                cfg_scale: self.sampler.refiner.cfg_scale,
                seed: seed.wrapping_add(0x5151),
            },
            degradation: self.degradation,
            pose_sigma: self.world.pose_sigma,
        }
    }

    /// Chunk plan for a duration in pixel frames; durations off the chunk
    /// grid are rejected with the nearest valid one.
    pub fn plan_for(&self, duration: usize) -> Result<ChunkPlan, CliError> {
        let len = self.chunk_len();
        let stride = len - self.world.overlap;
        let frames_for = |k: usize| pixel_frames_for(len + k * stride);
        let first = frames_for(0);
        let k = if duration <= first { 0 } else { (duration - first) / (4 * stride) };
        let (lo, hi) = (frames_for(k), frames_for(k + 1));
        if duration == lo {
            return ChunkPlan::new(len + k * stride, len, self.world.overlap).map_err(|e| CliError::Config(e.to_string()));
        }
        let nearest = if duration < lo || duration - lo <= hi - duration { lo } else { hi };
        Err(CliError::Config(format!(
            "duration {duration} is not a whole number of chunks; nearest valid duration is {nearest}"
        )))
    }
}

fn set_path(root: &mut toml::Value, key: &str, v: toml::Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not inside a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*p) && !is_optional_key(p) {
                return Err(CliError::Config(format!("unknown config key `{key}`")));
            }
            table.insert(p.to_string(), v);
            return Ok(());
        }
        cur = table
            .get_mut(*p)
            .ok_or_else(|| CliError::Config(format!("unknown config section in `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

/// Keys that are omitted from serialized TOML when unset.
fn is_optional_key(k: &str) -> bool {
    k == "clip_norm"
}
