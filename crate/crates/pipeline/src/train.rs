//! The three training phases with periodic checkpoints, JSON-lines loss
//! logs and exact resumption.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use talkgen_core::backbone::Dit;
use talkgen_core::codec::Codec;
use talkgen_core::params::Checkpoint;
use talkgen_core::refiner::RefinerModel;
use talkgen_core::reward::{refl_example, refl_step, RewardRegistry};
use talkgen_core::train::{lr_examples, lr_step, refiner_step, refiner_windows, RefinerScene, StepLog, TrainState};

use crate::config::{PhaseConfig, RunConfig};
use crate::dataset::Dataset;
use crate::error::{CliError, Result};

pub const LR_PREFIX: &str = "lr";
pub const REFINER_PREFIX: &str = "refiner";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Lr,
    Refiner,
    Refl,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Lr => "train-lr",
            Phase::Refiner => "train-refiner",
            Phase::Refl => "refl",
        }
    }
}

/// Where a phase writes: the checkpoint and its loss log beside it.
#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl PhaseOutput {
    pub fn new(checkpoint: &Path) -> Self {
        let mut log = checkpoint.as_os_str().to_owned();
        log.push(".log.jsonl");
        Self {
            checkpoint: checkpoint.to_path_buf(),
            log: PathBuf::from(log),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub last_loss: Option<f64>,
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(CliError::io(path.display().to_string()))
}

fn checkpoint_with(cfg: &RunConfig, phase: Phase, state: &TrainState, write: impl Fn(&mut Checkpoint) -> talkgen_core::Result<()>) -> Result<Checkpoint> {
    let mut ck = Checkpoint {
        metadata: serde_json::json!({
            "phase": phase.name(),
            "config": cfg.to_toml(),
        }),
        arrays: Default::default(),
    };
    write(&mut ck)?;
    state.write_into(&mut ck)?;
    Ok(ck)
}

/// Loads a checkpoint written by `phase` for resumption.
fn resume_state(path: &Path, phase: Phase) -> Result<(Checkpoint, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let got = ck.metadata["phase"].as_str().unwrap_or("");
    if got != phase.name() {
        return Err(CliError::Config(format!(
            "{} was written by `{got}`, cannot resume `{}` from it",
            path.display(),
            phase.name()
        )));
    }
    let state = TrainState::read_from(&ck)?;
    Ok((ck, state))
}

struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    /// Opens the log, dropping entries at or after `from_step` so that a
    /// resumed run rewrites them.
    fn open(path: &Path, from_step: u64) -> Result<Self> {
        let kept: Vec<String> = if from_step > 0 && path.exists() {
            fs::read_to_string(path)
                .map_err(CliError::io(path.display().to_string()))?
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v["step"].as_u64())
                        .is_some_and(|s| s < from_step)
                })
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
        }
        let mut file = fs::File::create(path).map_err(CliError::io(path.display().to_string()))?;
        for l in kept {
            writeln!(file, "{l}").map_err(CliError::io(path.display().to_string()))?;
        }
        Ok(Self { file })
    }

    fn write<T: Serialize>(&mut self, entry: &T) -> Result<()> {
        let line = serde_json::to_string(entry).map_err(talkgen_core::Error::from)?;
        writeln!(self.file, "{line}").map_err(CliError::io("loss log"))
    }
}

/// Drives `step` to `phase.steps`, checkpointing every `checkpoint_every`
/// steps and at the end.
fn drive<L: Serialize>(
    phase_cfg: &PhaseConfig,
    state: &mut TrainState,
    out: &PhaseOutput,
    mut step: impl FnMut(&mut TrainState) -> Result<(L, f64)>,
    save: impl Fn(&TrainState) -> Result<Checkpoint>,
    mut progress: impl FnMut(u64, f64),
) -> Result<PhaseSummary> {
    let mut log = LogWriter::open(&out.log, state.step)?;
    let start = state.step;
    let mut last = None;
    while state.step < phase_cfg.steps {
        let (entry, loss) = step(state)?;
        if !loss.is_finite() {
            return Err(CliError::Runtime(format!("non-finite loss at step {}", state.step - 1)));
        }
        log.write(&entry)?;
        last = Some(loss);
        progress(state.step, loss);
        if state.step % phase_cfg.checkpoint_every == 0 && state.step < phase_cfg.steps {
            save_atomic(&save(state)?, &out.checkpoint)?;
        }
    }
    save_atomic(&save(state)?, &out.checkpoint)?;
    Ok(PhaseSummary {
        steps_run: state.step - start,
        final_step: state.step,
        last_loss: last,
    })
}

fn no_progress(_: u64, _: f64) {}

/// LR generator training on every chunk window of the dataset.
pub fn train_lr(cfg: &RunConfig, data: &Dataset, out: &PhaseOutput, resume: Option<&Path>, progress: Option<&mut dyn FnMut(u64, f64)>) -> Result<PhaseSummary> {
    data.check_geometry(cfg)?;
    let tc = cfg.train_config(&cfg.train_lr);
    let codec = Codec::lr();
    let mut examples = Vec::new();
    for (scene, render) in data.load_all()? {
        examples.extend(lr_examples(&scene, &render, &codec, cfg.lr_model.text_dim, cfg.chunk_len(), cfg.world.overlap)?);
    }
    let (mut model, mut state) = match resume {
        Some(p) => {
            let (ck, st) = resume_state(p, Phase::Lr)?;
            (Dit::read_from(&ck, LR_PREFIX)?, st)
        }
        None => (Dit::init(cfg.lr_dit(), cfg.lr_model.init_seed)?, TrainState::new(tc.adam)),
    };
    let model_cell = std::cell::RefCell::new(&mut model);
    let mut fallback = no_progress;
    let progress = progress.unwrap_or(&mut fallback);
    drive(
        &cfg.train_lr,
        &mut state,
        out,
        |st| {
            let log: StepLog = lr_step(&mut model_cell.borrow_mut(), &examples, &tc, st)?;
            Ok((log, log.loss))
        },
        |st| checkpoint_with(cfg, Phase::Lr, st, |ck| model_cell.borrow().write_into(ck, LR_PREFIX)),
        progress,
    )
}

/// Refiner training on the dataset's undrifted scenes.
pub fn train_refiner(cfg: &RunConfig, data: &Dataset, out: &PhaseOutput, resume: Option<&Path>, progress: Option<&mut dyn FnMut(u64, f64)>) -> Result<PhaseSummary> {
    data.check_geometry(cfg)?;
    if data.manifest.drift.is_some() {
        return Err(CliError::Config("refiner training needs a dataset rendered without drift".into()));
    }
    let tc = cfg.train_config(&cfg.train_refiner.phase);
    let rcfg = cfg.refiner_train();
    let scenes = data
        .load_all()?
        .iter()
        .map(|(s, r)| RefinerScene::new(s, r))
        .collect::<talkgen_core::Result<Vec<_>>>()?;
    let windows = refiner_windows(&scenes, &rcfg)?;
    let (mut model, mut state) = match resume {
        Some(p) => {
            let (ck, st) = resume_state(p, Phase::Refiner)?;
            (RefinerModel::read_from(&ck, REFINER_PREFIX)?, st)
        }
        None => (RefinerModel::init(cfg.refiner_dit(), cfg.refiner_model.init_seed)?, TrainState::new(tc.adam)),
    };
    let model_cell = std::cell::RefCell::new(&mut model);
    let mut fallback = no_progress;
    let progress = progress.unwrap_or(&mut fallback);
    drive(
        &cfg.train_refiner.phase,
        &mut state,
        out,
        |st| {
            let log = refiner_step(&mut model_cell.borrow_mut(), &scenes, &windows, &tc, &rcfg, st)?;
            Ok((log, log.loss))
        },
        |st| checkpoint_with(cfg, Phase::Refiner, st, |ck| model_cell.borrow().write_into(ck, REFINER_PREFIX)),
        progress,
    )
}

/// Reward fine-tuning of an LR checkpoint. A fresh run starts from
/// `lr_checkpoint` with new optimiser state; `resume` continues a REFL run.
pub fn refl(
    cfg: &RunConfig,
    data: &Dataset,
    lr_checkpoint: &Path,
    out: &PhaseOutput,
    resume: Option<&Path>,
    registry: &RewardRegistry,
    progress: Option<&mut dyn FnMut(u64, f64)>,
) -> Result<PhaseSummary> {
    data.check_geometry(cfg)?;
    let reward = registry.get(&cfg.refl.reward).map_err(|e| CliError::Config(e.to_string()))?;
    if !reward.differentiable() {
        return Err(CliError::Config(format!("reward `{}` is not differentiable", cfg.refl.reward)));
    }
    let tc = cfg.train_config(&cfg.refl.phase);
    let rc = cfg.refl_config();
    let examples = data
        .load_all()?
        .iter()
        .map(|(s, r)| refl_example(s, r, cfg.lr_model.text_dim, cfg.chunk_len()))
        .collect::<talkgen_core::Result<Vec<_>>>()?;
    let (mut model, mut state) = match resume {
        Some(p) => {
            let (ck, st) = resume_state(p, Phase::Refl)?;
            (Dit::read_from(&ck, LR_PREFIX)?, st)
        }
        None => {
            let ck = Checkpoint::load(lr_checkpoint)?;
            (Dit::read_from(&ck, LR_PREFIX)?, TrainState::new(tc.adam))
        }
    };
    let model_cell = std::cell::RefCell::new(&mut model);
    let mut fallback = no_progress;
    let progress = progress.unwrap_or(&mut fallback);
    drive(
        &cfg.refl.phase,
        &mut state,
        out,
        |st| {
            let log = refl_step(&mut model_cell.borrow_mut(), reward.as_ref(), st, &examples, &tc, &rc)?;
            Ok((log, log.fm_loss + rc.weight * log.refl_loss))
        },
        |st| checkpoint_with(cfg, Phase::Refl, st, |ck| model_cell.borrow().write_into(ck, LR_PREFIX)),
        progress,
    )
}
