//! Long-video generation from trained checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use talkgen_core::backbone::{embed_prompt, Dit};
use talkgen_core::codec::{downsample, LatentKind};
use talkgen_core::io::{write_frames_png, write_tensor};
use talkgen_core::params::Checkpoint;
use talkgen_core::refiner::{generate_long, pixel_span, seam_audit, ChunkPlan, LongConditions, RefinerModel, SeamCheck};
use talkgen_core::world::{aperture_of, envelope, make_scene, render_frame, Layout, Scene, SyntheticDetector};

use crate::config::RunConfig;
use crate::dataset::{prepare_output_dir, read_json, write_json};
use crate::error::{CliError, Result};
use crate::train::{LR_PREFIX, REFINER_PREFIX};

pub const GENERATION_FORMAT: &str = "talkgen-generation";

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub lr_checkpoint: PathBuf,
    pub refiner_checkpoint: PathBuf,
    /// Scene providing the character and reference frame.
    pub scene_seed: u64,
    /// Per-frame amplitudes replacing the scene's audio.
    pub audio: Option<PathBuf>,
    pub duration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub index: usize,
    pub latent_start: usize,
    pub latents: usize,
    pub pixel_start: usize,
    pub pixel_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub format: String,
    pub version: u32,
    pub scene_seed: u64,
    pub audio_file: Option<String>,
    pub duration: usize,
    pub seed: u64,
    pub lr_sampler_seed: u64,
    pub refiner_sampler_seed: u64,
    pub lr_checkpoint: String,
    pub refiner_checkpoint: String,
    pub plan: ChunkPlan,
    pub chunks: Vec<ChunkEntry>,
    pub seams: Vec<SeamCheck>,
    pub audio: Vec<f64>,
    pub frames: Vec<String>,
    pub lr_latents: String,
    pub hr_latents: String,
    pub config: String,
}

impl GenerationManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = read_json(&dir.join("manifest.json"))?;
        if m.format != GENERATION_FORMAT {
            return Err(CliError::Config(format!("{} is not a generation manifest", dir.display())));
        }
        Ok(m)
    }
}

fn read_audio(path: &Path, frames: usize) -> Result<Vec<f64>> {
    let v: serde_json::Value = read_json(path)?;
    let arr = v.get("amplitudes").unwrap_or(&v);
    let audio: Vec<f64> = serde_json::from_value(arr.clone())
        .map_err(|e| CliError::Config(format!("{}: expected a list of amplitudes: {e}", path.display())))?;
    if audio.len() != frames {
        return Err(CliError::Config(format!(
            "{} has {} amplitudes for a {frames}-frame video",
            path.display(),
            audio.len()
        )));
    }
    if audio.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(CliError::Config(format!("{}: amplitudes must lie in [0, 1]", path.display())));
    }
    Ok(audio)
}

/// Frame 0 of `scene` at LR and HR resolution.
pub fn reference_frames(scene: &Scene) -> (Array3<f64>, Array3<f64>) {
    let layout = Layout::default();
    let env = envelope(&scene.audio);
    let hr = render_frame(&layout, scene, aperture_of(scene.audio[0]), env[0]);
    let lr = downsample(&hr.clone().insert_axis(Axis(0)), layout.lr_factor).index_axis_move(Axis(0), 0);
    (lr, hr)
}

/// Runs a generation and writes frames, latents and the manifest to `out`.
pub fn generate(cfg: &RunConfig, req: &GenerateRequest, out: &Path, force: bool) -> Result<GenerationManifest> {
    let plan = cfg.plan_for(req.duration)?;
    for p in [&req.lr_checkpoint, &req.refiner_checkpoint] {
        if !p.exists() {
            return Err(CliError::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let lr_model = Dit::read_from(&Checkpoint::load(&req.lr_checkpoint)?, LR_PREFIX)?;
    let refiner = RefinerModel::read_from(&Checkpoint::load(&req.refiner_checkpoint)?, REFINER_PREFIX)?;
    if lr_model.config.text_dim != cfg.lr_model.text_dim {
        return Err(CliError::Config(format!(
            "LR checkpoint uses {}-wide text embeddings, config says {}",
            lr_model.config.text_dim, cfg.lr_model.text_dim
        )));
    }
    let scene = make_scene(req.scene_seed, req.duration, None)?;
    let audio = match &req.audio {
        Some(p) => read_audio(p, req.duration)?,
        None => scene.audio.clone(),
    };
    let (ref_lr, ref_hr) = reference_frames(&scene);
    let detector = SyntheticDetector::new(scene.palette.clone());
    let conds = LongConditions {
        text_emb: embed_prompt(&scene.prompt, cfg.lr_model.text_dim),
        audio: audio.clone(),
        ref_lr,
        ref_hr,
        detector: &detector,
    };
    let samplers = cfg.samplers(req.seed);
    let video = generate_long(&lr_model, &refiner, &conds, plan, &samplers)?;
    let seams = seam_audit(&plan, &video.hr_chunks)?;

    prepare_output_dir(out, force)?;
    let frames = write_frames_png(&out.join("frames"), &video.frames)?
        .into_iter()
        .map(|f| format!("frames/{f}"))
        .collect();
    write_tensor(&out.join("lr_latents.tensor"), &video.lr_latents.clone().into_dyn(), LatentKind::Lr)?;
    write_tensor(&out.join("hr_latents.tensor"), &video.hr_latents.clone().into_dyn(), LatentKind::Hr)?;
    let chunks = video
        .chunks
        .iter()
        .map(|c| {
            let span = pixel_span(c.start, c.valid);
            ChunkEntry {
                index: c.index,
                latent_start: c.start,
                latents: c.valid,
                pixel_start: span.start,
                pixel_end: span.end,
            }
        })
        .collect();
    let manifest = GenerationManifest {
        format: GENERATION_FORMAT.into(),
        version: 1,
        scene_seed: req.scene_seed,
        audio_file: req.audio.as_ref().map(|p| p.display().to_string()),
        duration: req.duration,
        seed: req.seed,
        lr_sampler_seed: samplers.lr.seed,
        refiner_sampler_seed: samplers.refiner.seed,
        lr_checkpoint: req.lr_checkpoint.display().to_string(),
        refiner_checkpoint: req.refiner_checkpoint.display().to_string(),
        plan,
        chunks,
        seams,
        audio,
        frames,
        lr_latents: "lr_latents.tensor".into(),
        hr_latents: "hr_latents.tensor".into(),
        config: cfg.to_toml(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(CliError::io("config.toml"))?;
    Ok(manifest)
}
