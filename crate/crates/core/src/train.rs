//! Training loops. Every step draws from its own RNG stream derived from
//! `(seed, step)`, so a run resumed from a checkpoint replays exactly.

use ndarray::{concatenate, s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{audio_features, condition_dropout, embed_prompt, ConditionBundle, Dit, DropFlags, DropoutProbs};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::flow::{prefix_fm_loss, FlowSample};
use crate::params::{Adam, AdamConfig, Checkpoint};
use crate::pose::DEFAULT_SIGMA;
use crate::refiner::{chunk_refiner_cond, pixel_span, refiner_batch_loss, ChunkPlan, DegradationConfig, RefinerModel, RefinerSample};
use crate::world::{apply_drift, DriftSpec, Palette, Scene, SceneRender, SyntheticDetector};

/// RNG for one optimisation step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dropout: DropoutProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Optimiser state plus the step counter, saved next to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(adam: AdamConfig) -> Self {
        Self {
            step: 0,
            adam: Adam::new(adam),
        }
    }

    pub fn write_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_section("adam.m", &self.adam.m);
        ck.put_section("adam.v", &self.adam.v);
        if !ck.metadata.is_object() {
            ck.metadata = serde_json::json!({});
        }
        ck.metadata["train"] = serde_json::json!({
            "step": self.step,
            "adam_step": self.adam.step,
            "adam": serde_json::to_value(self.adam.config)?,
        });
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata["train"];
        let config: AdamConfig = serde_json::from_value(meta["adam"].clone())?;
        let get = |k: &str| {
            meta[k]
                .as_u64()
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks train.{k}")))
        };
        let mut adam = Adam::new(config);
        adam.step = get("adam_step")?;
        adam.m = ck.section("adam.m");
        adam.v = ck.section("adam.v");
        Ok(Self { step: get("step")?, adam })
    }
}

/// LR training windows of one rendered scene: `window` latents starting at
/// multiples of `window − overlap`. The first window keeps latent 0 (the
/// reference frame) as its clean prefix; later windows keep the `overlap`
/// latents shared with the previous window.
pub fn lr_examples(
    scene: &Scene,
    render: &SceneRender,
    codec: &Codec,
    text_dim: usize,
    window: usize,
    overlap: usize,
) -> Result<Vec<FlowSample<ConditionBundle>>> {
    if overlap >= window {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be below window {window}")));
    }
    let z = codec.encode_frames(&render.lr, true)?;
    let feats = audio_features(&scene.audio, true)?;
    let ref_latent = codec.encode_still(&render.lr.index_axis(ndarray::Axis(0), 0).to_owned())?;
    let text = embed_prompt(&scene.prompt, text_dim);
    let n = z.dim().0;
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= n {
        out.push(FlowSample {
            z1: z.slice(s![start..start + window, .., .., ..]).to_owned(),
            cond: ConditionBundle {
                text_emb: text.clone(),
                audio_feats: feats.slice(s![start..start + window, ..]).to_owned(),
                ref_latent: ref_latent.clone(),
                prefix: if start == 0 { 1 } else { overlap },
                routing: None,
                dropped: DropFlags::default(),
            },
        });
        start += window - overlap;
    }
    Ok(out)
}

fn pick_batch<R: Rng, C: Clone>(data: &[FlowSample<C>], batch: usize, rng: &mut R) -> Vec<FlowSample<C>> {
    (0..batch).map(|_| data[rng.random_range(0..data.len())].clone()).collect()
}

/// One LR flow-matching step with condition dropout.
pub fn lr_step(
    model: &mut Dit,
    data: &[FlowSample<ConditionBundle>],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = step_rng(cfg.seed, state.step);
    let mut batch = pick_batch(data, cfg.batch, &mut rng);
    for b in &mut batch {
        b.cond = condition_dropout(&b.cond, &mut rng, &cfg.dropout)?;
    }
    let report = prefix_fm_loss(&*model, &batch, &mut rng, |c| c.effective_prefix())?;
    let grad_norm = state.adam.update(&mut model.params, &report.grads)?;
    let log = StepLog {
        step: state.step,
        loss: report.loss,
        grad_norm,
    };
    state.step += 1;
    Ok(log)
}

/// Runs `step` until `state.step == cfg.steps`, calling `on_log` after each.
pub fn run_steps<F>(cfg: &TrainConfig, state: &mut TrainState, mut step: F, mut on_log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>>
where
    F: FnMut(&mut TrainState) -> Result<StepLog>,
{
    let mut logs = Vec::new();
    while state.step < cfg.steps {
        let log = step(state)?;
        if !log.loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
                detail: format!("step {}", log.step),
            });
        }
        on_log(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Refiner training data of one scene: clean HR latents plus the LR pixel
/// frames from which degraded, optionally drifted conditions are built per
/// step.
#[derive(Debug, Clone)]
pub struct RefinerScene {
    pub hr_latents: Array4<f64>,
    pub lr_frames: Array4<f64>,
    pub hr_first: Array4<f64>,
    pub reference: Array4<f64>,
    pub palette: Palette,
}

impl RefinerScene {
    pub fn new(scene: &Scene, render: &SceneRender) -> Result<Self> {
        if scene.drift.is_some() {
            return Err(Error::InvalidArgument("refiner targets must be rendered without drift".into()));
        }
        let hr = Codec::hr();
        let ref_hr = render.hr.index_axis(Axis(0), 0).to_owned();
        Ok(Self {
            hr_latents: hr.encode_frames(&render.hr, true)?,
            lr_frames: render.lr.clone(),
            hr_first: hr.encode_image(&ref_hr)?,
            reference: hr.encode_still(&ref_hr)?,
            palette: scene.palette.clone(),
        })
    }
}

/// A refiner training window: chunk `start` of `scene` with `chunk_len`
/// generated latents. `start == 0` is a first chunk; later starts carry the
/// reference slot and `overlap` motion latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerWindow {
    pub scene: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerTrainConfig {
    pub chunk_len: usize,
    pub overlap: usize,
    pub degradation: DegradationConfig,
    pub pose_sigma: f64,
    /// Probability of replacing the pose tokens with the learned null token.
    pub pose_dropout: f64,
    /// Gain drift slopes are drawn uniformly from `[0, max_drift_gain]` per
    /// example and applied to the LR condition only.
    pub max_drift_gain: f64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            chunk_len: 4,
            overlap: 1,
            degradation: DegradationConfig::default(),
            pose_sigma: DEFAULT_SIGMA,
            pose_dropout: 0.1,
            max_drift_gain: 0.02,
        }
    }
}

/// All chunk windows of the scenes, laid out as at generation time.
pub fn refiner_windows(scenes: &[RefinerScene], cfg: &RefinerTrainConfig) -> Result<Vec<RefinerWindow>> {
    let mut out = Vec::new();
    for (i, sc) in scenes.iter().enumerate() {
        let n = sc.hr_latents.dim().0;
        let plan = ChunkPlan::new(n, cfg.chunk_len, cfg.overlap)?;
        out.extend(
            plan.chunks()
                .into_iter()
                .filter(|c| c.valid == cfg.chunk_len)
                .map(|c| RefinerWindow { scene: i, start: c.start }),
        );
    }
    Ok(out)
}

/// Builds one training sample; `gain` is the drift slope applied to the LR
/// pixel frames by absolute frame index.
pub fn refiner_sample<R: Rng>(
    sc: &RefinerScene,
    win: RefinerWindow,
    cfg: &RefinerTrainConfig,
    gain: f64,
    rng: &mut R,
) -> Result<RefinerSample> {
    let lr = Codec::lr();
    let len = cfg.chunk_len;
    let first = win.start == 0;
    let span = pixel_span(win.start, len);
    let mut lr_frames = sc.lr_frames.clone();
    if gain != 0.0 {
        apply_drift(&mut lr_frames, DriftSpec::gain(gain));
    }
    let clip = lr_frames.slice(s![span.clone(), .., .., ..]).to_owned();
    let lr_chunk = lr.encode_frames(&clip, first)?;
    let ref_lr = sc.lr_frames.index_axis(Axis(0), 0).to_owned();
    let detector = SyntheticDetector::new(sc.palette.clone());
    let k = usize::from(!first);
    let mut cond = chunk_refiner_cond(
        k,
        cfg.overlap,
        &lr_chunk,
        &ref_lr,
        &sc.reference,
        &detector,
        &cfg.degradation,
        cfg.pose_sigma,
        rng,
    )?;
    let body = sc.hr_latents.slice(s![win.start..win.start + len, .., .., ..]);
    let z_hr = if first {
        body.to_owned()
    } else {
        concatenate(Axis(0), &[sc.hr_first.view(), body]).expect("same grid")
    };
    if rng.random::<f64>() < cfg.pose_dropout {
        cond.pose_dropped = true;
    }
    Ok(RefinerSample { z_hr, cond })
}

/// One refiner step: a batch of windows with fresh degradation noise, drift
/// slope and pose dropout, then the masked velocity loss.
pub fn refiner_step(
    model: &mut RefinerModel,
    scenes: &[RefinerScene],
    windows: &[RefinerWindow],
    cfg: &TrainConfig,
    rcfg: &RefinerTrainConfig,
    state: &mut TrainState,
) -> Result<StepLog> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = step_rng(cfg.seed, state.step);
    let mut batch = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let win = windows[rng.random_range(0..windows.len())];
        let gain = rng.random_range(0.0..=rcfg.max_drift_gain);
        batch.push(refiner_sample(&scenes[win.scene], win, rcfg, gain, &mut rng)?);
    }
    let report = refiner_batch_loss(&*model, &batch, &mut rng)?;
    let grad_norm = state.adam.update(&mut model.dit.params, &report.grads)?;
    let log = StepLog {
        step: state.step,
        loss: report.loss,
        grad_norm,
    };
    state.step += 1;
    Ok(log)
}
