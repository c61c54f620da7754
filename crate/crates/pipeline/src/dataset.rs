//! Synthetic datasets on disk: one directory per scene holding the scene
//! description, LR and HR renders in the tensor format, and the pose file,
//! indexed by `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Ix4};
use serde::{Deserialize, Serialize};
use talkgen_core::codec::LatentKind;
use talkgen_core::io::{read_tensor, write_tensor};
use talkgen_core::pose::PoseSequence;
use talkgen_core::world::{aperture_of, hand_templates, make_scene, render, DriftSpec, Layout, Scene, SceneRender};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DATASET_FORMAT: &str = "talkgen-dataset";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
    pub duration: usize,
    pub drift: Option<DriftSpec>,
    pub scene: String,
    pub lr: String,
    pub hr: String,
    pub pose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub duration: usize,
    pub lr_size: usize,
    pub hr_size: usize,
    pub drift: Option<DriftSpec>,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub duration: usize,
    pub drift: Option<DriftSpec>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            num_scenes: cfg.world.num_scenes,
            duration: cfg.world.duration,
            drift: None,
            seed: cfg.seed,
        }
    }
}

/// Scene seeds are spaced by the dataset seed so that datasets built with
/// different seeds do not share scenes.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Rejects an existing non-empty directory unless `force`, in which case it
/// is cleared.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(CliError::io(dir.display().to_string()))?.next().is_some();
        if nonempty {
            if !force {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(talkgen_core::Error::from)? + "\n";
    fs::write(path, text).map_err(CliError::io(path.display().to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Renders and writes `spec.num_scenes` scenes into `dir`.
pub fn build_dataset(dir: &Path, spec: &DatasetSpec, force: bool) -> Result<DatasetManifest> {
    if !talkgen_core::world::valid_duration(spec.duration) {
        return Err(CliError::Config(format!("duration {} is not of the form 4k+1", spec.duration)));
    }
    prepare_output_dir(dir, force)?;
    let layout = Layout::default();
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    for i in 0..spec.num_scenes {
        let seed = scene_seed(spec.seed, i);
        let scene = make_scene(seed, spec.duration, spec.drift)?;
        let r = render(&scene);
        let id = format!("scene_{i:05}");
        let rel = |f: &str| format!("scenes/{id}/{f}");
        let sdir = dir.join("scenes").join(&id);
        fs::create_dir_all(&sdir).map_err(CliError::io(sdir.display().to_string()))?;
        write_json(&dir.join(rel("scene.json")), &scene)?;
        write_tensor(&dir.join(rel("lr.tensor")), &r.lr.clone().into_dyn(), LatentKind::Lr)?;
        write_tensor(&dir.join(rel("hr.tensor")), &r.hr.clone().into_dyn(), LatentKind::Hr)?;
        r.pose.save(&dir.join(rel("pose.json")))?;
        scenes.push(SceneEntry {
            id: id.clone(),
            seed,
            duration: spec.duration,
            drift: spec.drift,
            scene: rel("scene.json"),
            lr: rel("lr.tensor"),
            hr: rel("hr.tensor"),
            pose: rel("pose.json"),
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        seed: spec.seed,
        duration: spec.duration,
        lr_size: layout.lr_size(),
        hr_size: layout.hr_size,
        drift: spec.drift,
        scenes,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A dataset opened for training or evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST))?;
        if manifest.format != DATASET_FORMAT {
            return Err(CliError::Config(format!("{} is not a dataset manifest", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Rejects datasets whose geometry the configured models cannot consume.
    pub fn check_geometry(&self, cfg: &RunConfig) -> Result<()> {
        let m = &self.manifest;
        let hr = cfg.world.h * cfg.world.hr_factor;
        if m.lr_size != cfg.world.h || m.hr_size != hr {
            return Err(CliError::Config(format!(
                "dataset frames are {}/{} px (LR/HR) but the config expects {}/{}",
                m.lr_size, m.hr_size, cfg.world.h, hr
            )));
        }
        let chunk = talkgen_core::codec::pixel_frames_for(cfg.chunk_len());
        if m.duration < chunk {
            return Err(CliError::Config(format!(
                "dataset scenes have {} frames, fewer than one {chunk}-frame chunk",
                m.duration
            )));
        }
        if m.scenes.is_empty() {
            return Err(CliError::Config("dataset has no scenes".into()));
        }
        Ok(())
    }

    /// Loads one scene with its stored renders. Hand templates and
    /// apertures are derived from the scene description.
    pub fn load(&self, entry: &SceneEntry) -> Result<(Scene, SceneRender)> {
        let scene: Scene = read_json(&self.root.join(&entry.scene))?;
        let lr = load_frames(&self.root.join(&entry.lr))?;
        let hr = load_frames(&self.root.join(&entry.hr))?;
        let pose = PoseSequence::load(&self.root.join(&entry.pose))?;
        let layout = Layout::default();
        let render = SceneRender {
            aperture: scene.audio.iter().map(|a| aperture_of(*a)).collect(),
            hands: hand_templates(&layout, &scene),
            hr,
            lr,
            pose,
        };
        Ok((scene, render))
    }

    pub fn load_all(&self) -> Result<Vec<(Scene, SceneRender)>> {
        self.manifest.scenes.iter().map(|e| self.load(e)).collect()
    }
}

pub fn load_frames(path: &Path) -> Result<Array4<f64>> {
    let (_, a) = read_tensor(path)?;
    a.into_dimensionality::<Ix4>()
        .map_err(|e| CliError::Runtime(format!("{}: expected (frames, h, w, 3): {e}", path.display())))
}
