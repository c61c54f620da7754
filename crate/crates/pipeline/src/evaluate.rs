//! Evaluation of generated or rendered videos into a metrics report.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use talkgen_core::eval::{
    cumulative_windows, hand_tracks, hkc, hkv, identity_drift, lipsync_corr, plot_bars, plot_lines, Correlation, MetricValue, MetricsReport,
};
use talkgen_core::io::read_frames_png;
use talkgen_core::pose::PoseDetector;
use talkgen_core::reward::ReflLog;
use talkgen_core::world::{make_scene, render, DriftSpec, Layout, Palette, SyntheticDetector};

use crate::config::RunConfig;
use crate::dataset::{load_frames, prepare_output_dir, write_json};
use crate::error::{CliError, Result};
use crate::generate::GenerationManifest;

/// Ground truth available for oracle metrics.
#[derive(Debug, Clone)]
pub struct Truth {
    pub palette: Palette,
    pub audio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum EvalInput {
    /// A generation directory; its scene supplies the ground truth.
    Generation(std::path::PathBuf),
    /// A frame tensor or PNG directory, with an optional scene for truth.
    Frames { path: std::path::PathBuf, scene_seed: Option<u64> },
    /// The ground-truth render of a scene itself.
    Render { scene_seed: u64, duration: usize, drift: Option<DriftSpec> },
}

/// Loads the frames and the ground truth (if any) for `input`.
pub fn load_input(input: &EvalInput) -> Result<(Array4<f64>, Option<Truth>)> {
    match input {
        EvalInput::Generation(dir) => {
            let m = GenerationManifest::load(dir)?;
            let frames = read_frames_png(&dir.join("frames"))?;
            let scene = make_scene(m.scene_seed, m.duration, None)?;
            Ok((
                frames,
                Some(Truth {
                    palette: scene.palette,
                    audio: m.audio,
                }),
            ))
        }
        EvalInput::Frames { path, scene_seed } => {
            let frames = if path.is_dir() { read_frames_png(path)? } else { load_frames(path)? };
            let truth = match scene_seed {
                Some(seed) => {
                    let scene = make_scene(*seed, frames.dim().0, None)?;
                    Some(Truth {
                        palette: scene.palette,
                        audio: scene.audio,
                    })
                }
                None => None,
            };
            Ok((frames, truth))
        }
        EvalInput::Render {
            scene_seed,
            duration,
            drift,
        } => {
            let scene = make_scene(*scene_seed, *duration, *drift)?;
            let r = render(&scene);
            Ok((
                r.hr,
                Some(Truth {
                    palette: scene.palette,
                    audio: scene.audio,
                }),
            ))
        }
    }
}

fn put(report: &mut MetricsReport, name: &str, v: f64) {
    report.metrics.insert(name.into(), MetricValue::Scalar(v));
}

/// Computes every metric the inputs allow; the rest are listed as unavailable.
pub fn evaluate_video(cfg: &RunConfig, frames: &Array4<f64>, truth: Option<&Truth>) -> Result<MetricsReport> {
    let layout = Layout::default();
    let window = cfg.eval.window;
    let t = frames.dim().0;
    if t < window {
        return Err(CliError::Config(format!("video has {t} frames, fewer than the {window}-frame window")));
    }
    let mut report = MetricsReport {
        window,
        config: serde_json::to_value(cfg).map_err(talkgen_core::Error::from)?,
        ..Default::default()
    };
    let reference = frames.index_axis(Axis(0), 0).to_owned();
    let drift = identity_drift(frames, &reference, window, &layout)?;
    put(&mut report, "identity_drift_final", *drift.last().expect("at least one window"));
    let cumulative_drift: Vec<f64> = (1..=drift.len())
        .map(|k| drift[..k].iter().sum::<f64>() / k as f64)
        .collect();
    report.series.insert("identity_drift".into(), drift);
    report.series.insert("identity_drift_cumulative".into(), cumulative_drift);

    match truth {
        Some(truth) => {
            if truth.audio.len() != t {
                return Err(CliError::Config(format!("{} audio amplitudes for {t} frames", truth.audio.len())));
            }
            let corr = lipsync_corr(frames, &truth.audio, &layout, &truth.palette)?;
            report.metrics.insert("lipsync".into(), MetricValue::Correlation(corr));
            // frame 0 is the given reference image, so the generated part starts at 1
            let generated = frames.slice(s![1.., .., .., ..]).to_owned();
            let corr = lipsync_corr(&generated, &truth.audio[1..], &layout, &truth.palette)?;
            report.metrics.insert("lipsync_generated".into(), MetricValue::Correlation(corr));

            let detector = SyntheticDetector::new(truth.palette.clone());
            let seq = detector.detect(frames)?;
            put(&mut report, "hkc", hkc(&seq)?);
            let tracks = hand_tracks(&seq);
            if t >= 2 {
                put(&mut report, "hkv", hkv(&tracks)?);
            }
            let det = &detector;
            let cum_hkc = cumulative_windows(|v| Ok(hkc(&det.detect(v)?)?), frames, window)?;
            report.series.insert("hkc_cumulative".into(), cum_hkc);
            if window >= 2 {
                let cum_hkv = cumulative_windows(|v| hkv(&hand_tracks(&det.detect(v)?)), frames, window)?;
                report.series.insert("hkv_cumulative".into(), cum_hkv);
            }
        }
        None => {
            report.unavailable = vec!["lipsync".into(), "lipsync_generated".into(), "hkc".into(), "hkv".into()];
        }
    }
    Ok(report)
}

/// Evaluates `input`, writes `report.json` and the plots into `dir`.
pub fn run_evaluate(cfg: &RunConfig, input: &EvalInput, dir: &Path, refl_log: Option<&Path>, force: bool) -> Result<MetricsReport> {
    let (frames, truth) = load_input(input)?;
    let mut report = evaluate_video(cfg, &frames, truth.as_ref())?;
    prepare_output_dir(dir, force)?;
    let drift = &report.series["identity_drift"];
    let cum = &report.series["identity_drift_cumulative"];
    plot_lines(&dir.join("drift.svg"), "identity drift", "window", &[("per window", drift), ("cumulative", cum)])?;
    report.plots.push("drift.svg".into());
    if let Some(h) = report.series.get("hkc_cumulative") {
        plot_lines(&dir.join("hkc.svg"), "hand keypoint confidence", "cumulative windows", &[("HKC", h)])?;
        report.plots.push("hkc.svg".into());
    }
    let bars: Vec<(&str, f64)> = ["lipsync", "lipsync_generated"]
        .iter()
        .filter_map(|k| match report.metrics.get(*k) {
            Some(MetricValue::Correlation(Correlation::Defined { value })) => Some((*k, *value)),
            _ => None,
        })
        .collect();
    if !bars.is_empty() {
        plot_bars(&dir.join("lipsync.svg"), "aperture-audio correlation", &bars)?;
        report.plots.push("lipsync.svg".into());
    }
    if let Some(p) = refl_log {
        let text = std::fs::read_to_string(p).map_err(CliError::io(p.display().to_string()))?;
        let logs: Vec<ReflLog> = text
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        let reward: Vec<f64> = logs.iter().map(|l| l.mean_reward).collect();
        plot_lines(&dir.join("reward.svg"), "mean reward", "step", &[("reward", &reward)])?;
        report.series.insert("refl_reward".into(), reward);
        report.plots.push("reward.svg".into());
    }
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
