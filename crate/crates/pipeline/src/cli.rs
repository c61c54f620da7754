//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use talkgen_core::reward::RewardRegistry;
use talkgen_core::world::DriftSpec;

use crate::config::RunConfig;
use crate::dataset::{build_dataset, Dataset, DatasetSpec};
use crate::error::{CliError, Result};
use crate::evaluate::{run_evaluate, EvalInput};
use crate::generate::{generate, GenerateRequest};
use crate::train::{self, PhaseOutput};

pub const DATA_ROOT_ENV: &str = "TALKGEN_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "talkgen", version, about = "Toy coarse-to-fine talking-character video pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root for relative data paths.
    #[arg(long, global = true, env = DATA_ROOT_ENV, default_value = "data")]
    pub data_root: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Dataset {
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long)]
        num_scenes: Option<usize>,
        /// Scene length in pixel frames (4k+1).
        #[arg(long)]
        duration: Option<usize>,
        /// Injected drift `GAIN[,HUE]` per frame.
        #[arg(long, value_parser = parse_drift)]
        drift: Option<DriftSpec>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the LR audio-to-video generator.
    TrainLr(TrainArgs),
    /// Train the pose-guided refiner.
    TrainRefiner(TrainArgs),
    /// Reward fine-tuning of an LR checkpoint.
    Refl {
        #[command(flatten)]
        train: TrainArgs,
        /// LR checkpoint to start from.
        #[arg(long, default_value = "checkpoints/lr.ckpt")]
        lr_checkpoint: PathBuf,
    },
    /// Generate a long video.
    Generate {
        #[arg(long, default_value = "checkpoints/lr.ckpt")]
        lr_checkpoint: PathBuf,
        #[arg(long, default_value = "checkpoints/refiner.ckpt")]
        refiner_checkpoint: PathBuf,
        /// Scene that supplies the character, reference frame and audio.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// JSON list of per-frame amplitudes replacing the scene audio.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Length in pixel frames; must be a whole number of chunks.
        #[arg(long)]
        duration: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "generation")]
        out: PathBuf,
    },
    /// Evaluate a generation, a frame file or a ground-truth render.
    Evaluate {
        /// Generation directory written by `generate`.
        #[arg(long, conflicts_with_all = ["frames", "render"])]
        generation: Option<PathBuf>,
        /// Frame tensor file or PNG directory.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Evaluate the ground-truth render of `--scene-seed`.
        #[arg(long, conflicts_with = "frames")]
        render: bool,
        #[arg(long)]
        scene_seed: Option<u64>,
        #[arg(long)]
        duration: Option<usize>,
        #[arg(long, value_parser = parse_drift)]
        drift: Option<DriftSpec>,
        /// Window length in pixel frames.
        #[arg(long)]
        window: Option<usize>,
        /// REFL loss log to plot reward against step.
        #[arg(long)]
        refl_log: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        report_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "dataset")]
    pub dataset: PathBuf,
    /// Checkpoint to write; the loss log goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by the same phase.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
}

fn parse_drift(s: &str) -> std::result::Result<DriftSpec, String> {
    let mut it = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")));
    let gain = it.next().ok_or("empty drift spec")??;
    let hue = it.next().transpose()?.unwrap_or(0.0);
    if it.next().is_some() {
        return Err("drift is GAIN[,HUE]".into());
    }
    Ok(DriftSpec { gain, hue })
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn progress_printer(quiet: bool, phase: &'static str, total: u64) -> impl FnMut(u64, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if !quiet && (step % every == 0 || step == total) {
            eprintln!("{phase} step {step}/{total} loss {loss:.5}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut overrides = c.overrides.clone();
    let root = &c.data_root;
    // subcommand flags are applied as overrides so they are archived too
    match &cli.command {
        Command::Dataset {
            num_scenes, duration, seed, ..
        } => {
            if let Some(n) = num_scenes {
                overrides.push(format!("world.num_scenes={n}"));
            }
            if let Some(d) = duration {
                overrides.push(format!("world.duration={d}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
        }
        Command::TrainLr(a) => push_steps(&mut overrides, "train_lr", a.steps),
        Command::TrainRefiner(a) => push_steps(&mut overrides, "train_refiner", a.steps),
        Command::Refl { train, .. } => push_steps(&mut overrides, "refl", train.steps),
        Command::Evaluate { window: Some(w), .. } => overrides.push(format!("eval.window={w}")),
        _ => {}
    }
    let cfg = RunConfig::resolve(c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Dataset { out, drift, .. } => {
            let spec = DatasetSpec {
                drift,
                ..DatasetSpec::from_config(&cfg)
            };
            let out = under(root, &out);
            let m = build_dataset(&out, &spec, c.force)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(CliError::io("config.toml"))?;
            if !c.quiet {
                eprintln!("wrote {} scenes to {}", m.scenes.len(), out.display());
            }
        }
        Command::TrainLr(a) => {
            let (data, out) = open_train(root, &a, "checkpoints/lr.ckpt")?;
            let mut p = progress_printer(c.quiet, "train-lr", cfg.train_lr.steps);
            train::train_lr(&cfg, &data, &out, a.resume.map(|r| under(root, &r)).as_deref(), Some(&mut p))?;
        }
        Command::TrainRefiner(a) => {
            let (data, out) = open_train(root, &a, "checkpoints/refiner.ckpt")?;
            let mut p = progress_printer(c.quiet, "train-refiner", cfg.train_refiner.phase.steps);
            train::train_refiner(&cfg, &data, &out, a.resume.map(|r| under(root, &r)).as_deref(), Some(&mut p))?;
        }
        Command::Refl { train: a, lr_checkpoint } => {
            let (data, out) = open_train(root, &a, "checkpoints/refl.ckpt")?;
            let lr = under(root, &lr_checkpoint);
            if !lr.exists() {
                return Err(CliError::Config(format!("LR checkpoint {} does not exist", lr.display())));
            }
            let mut p = progress_printer(c.quiet, "refl", cfg.refl.phase.steps);
            let registry = RewardRegistry::with_defaults();
            train::refl(&cfg, &data, &lr, &out, a.resume.map(|r| under(root, &r)).as_deref(), &registry, Some(&mut p))?;
        }
        Command::Generate {
            lr_checkpoint,
            refiner_checkpoint,
            scene_seed,
            audio,
            duration,
            seed,
            out,
        } => {
            let req = GenerateRequest {
                lr_checkpoint: under(root, &lr_checkpoint),
                refiner_checkpoint: under(root, &refiner_checkpoint),
                scene_seed,
                audio,
                duration: duration.unwrap_or(cfg.world.duration),
                seed: seed.unwrap_or(cfg.seed),
            };
            let out = under(root, &out);
            let m = generate(&cfg, &req, &out, c.force)?;
            if !c.quiet {
                eprintln!("wrote {} frames in {} chunks to {}", m.frames.len(), m.chunks.len(), out.display());
            }
        }
        Command::Evaluate {
            generation,
            frames,
            render,
            scene_seed,
            duration,
            drift,
            refl_log,
            report_dir,
            ..
        } => {
            let input = match (generation, frames, render) {
                (Some(g), _, _) => EvalInput::Generation(under(root, &g)),
                (None, Some(f), _) => EvalInput::Frames {
                    path: under(root, &f),
                    scene_seed,
                },
                (None, None, true) => EvalInput::Render {
                    scene_seed: scene_seed.ok_or_else(|| CliError::Config("--render needs --scene-seed".into()))?,
                    duration: duration.unwrap_or(cfg.world.duration),
                    drift,
                },
                (None, None, false) => {
                    return Err(CliError::Config("pass one of --generation, --frames or --render".into()));
                }
            };
            let dir = under(root, &report_dir);
            let refl_log = refl_log.map(|p| under(root, &p));
            let report = run_evaluate(&cfg, &input, &dir, refl_log.as_deref(), c.force)?;
            if !c.quiet {
                for (k, v) in &report.metrics {
                    eprintln!("{k}: {}", serde_json::to_string(v).unwrap_or_default());
                }
            }
        }
    }
    Ok(())
}

fn push_steps(overrides: &mut Vec<String>, section: &str, steps: Option<u64>) {
    if let Some(s) = steps {
        overrides.push(format!("{section}.steps={s}"));
    }
}

fn open_train(root: &Path, a: &TrainArgs, default_out: &str) -> Result<(Dataset, PhaseOutput)> {
    let data = Dataset::open(&under(root, &a.dataset))?;
    let out = under(root, a.out.as_deref().unwrap_or(Path::new(default_out)));
    Ok((data, PhaseOutput::new(&out)))
}
