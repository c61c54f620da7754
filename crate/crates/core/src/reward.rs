//! Hand reward models and reward-feedback fine-tuning of the LR generator.
//!
//! A training step decodes one random pixel frame of a sampled LR latent
//! video, scores it with a reward model and adds `weight · (T − r)` to the
//! flow-matching loss. Only the final sampler step is differentiated by
//! default; the rest of the trajectory is treated as a constant.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{condition_dropout, ConditionBundle, Dit};
use crate::codec::{from_tokens, pixel_frames_for, to_tokens, Codec};
use crate::error::{shape_err, Error, Result};
use crate::flow::{add_grads, eval_velocity, gaussian_like, guided_velocity, prefix_fm_loss, FlowSample, Grid, Guidance};
use crate::train::{lr_examples, step_rng, TrainConfig, TrainState};
use crate::world::{glove_likeness, HandTemplate, Layout, Rgb, Scene, SceneRender, GLOVE_TAU};

/// Default reward threshold `T`.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub frame_index: usize,
}

/// What a reward model may know about the frame it scores: the prompt, the
/// ground-truth hand templates, and the template render they identify.
#[derive(Debug, Clone, PartialEq)]
pub struct HandContext {
    pub prompt: String,
    pub template_id: String,
    pub glove: Rgb,
    pub hands: [HandTemplate; 2],
    pub expected: Array3<f64>,
}

/// Per-video context; [`VideoContext::frame`] selects one frame's entry.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoContext {
    pub prompt: String,
    pub scene_id: String,
    pub glove: Rgb,
    pub hands: Vec<[HandTemplate; 2]>,
    pub expected: Array4<f64>,
}

impl VideoContext {
    pub fn frames(&self) -> usize {
        self.hands.len()
    }

    pub fn frame(&self, i: usize) -> Result<HandContext> {
        if i >= self.frames() || i >= self.expected.dim().0 {
            return Err(shape_err("frames", format!("frame {i} of {}", self.frames())));
        }
        Ok(HandContext {
            prompt: self.prompt.clone(),
            template_id: format!("{}/{}", self.scene_id, i),
            glove: self.glove,
            hands: self.hands[i],
            expected: self.expected.index_axis(Axis(0), i).to_owned(),
        })
    }
}

/// A frame-level reward. Scores are deterministic and lie in [`RewardModel::range`].
pub trait RewardModel {
    fn name(&self) -> &str;
    fn differentiable(&self) -> bool;
    fn range(&self) -> (f64, f64);
    fn score(&self, frame: &Array3<f64>, ctx: &HandContext) -> Result<f64>;

    /// The score on the tape, for a frame given as `(h·w, 3)` rows.
    fn score_var(&self, _g: &mut Graph, _frame: Var, _hw: (usize, usize), _ctx: &HandContext) -> Result<Var> {
        Err(Error::NotDifferentiable(self.name().to_string()))
    }
}

/// Agreement between the glove-likeness maps of a frame and of the template
/// render, inside a box of 1.5 hand radii around each template hand:
/// `exp(−k·Σ(l − m)² / Σ m²)` per hand, averaged over both hands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticHandReward {
    pub sharpness: f64,
    pub box_radii: f64,
}

impl Default for SyntheticHandReward {
    fn default() -> Self {
        Self {
            sharpness: 3.0,
            box_radii: 1.5,
        }
    }
}

impl SyntheticHandReward {
    /// Pixel indices `(i, j)` of the crop around one hand on an `h×w` frame.
    pub fn crop(&self, hand: &HandTemplate, h: usize, w: usize) -> Vec<(usize, usize)> {
        let s = w as f64 / Layout::default().hr_size as f64;
        let r = self.box_radii * hand.radius;
        let lo = |c: f64, n: usize| (((c - r) * s).floor().max(0.0) as usize).min(n);
        let hi = |c: f64, n: usize| (((c + r) * s).ceil().max(0.0) as usize).min(n);
        let (i0, i1) = (lo(hand.center[1], h), hi(hand.center[1], h));
        let (j0, j1) = (lo(hand.center[0], w), hi(hand.center[0], w));
        (i0..i1).flat_map(|i| (j0..j1).map(move |j| (i, j))).collect()
    }

    fn check(&self, frame_dim: (usize, usize, usize), ctx: &HandContext) -> Result<()> {
        if frame_dim != ctx.expected.dim() || frame_dim.2 != 3 {
            return Err(shape_err(
                "reward frame",
                format!("{frame_dim:?} vs template {:?}", ctx.expected.dim()),
            ));
        }
        Ok(())
    }
}

fn pixel(a: &Array3<f64>, i: usize, j: usize) -> [f64; 3] {
    [a[[i, j, 0]], a[[i, j, 1]], a[[i, j, 2]]]
}

impl RewardModel for SyntheticHandReward {
    fn name(&self) -> &str {
        "synthetic-hand"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, frame: &Array3<f64>, ctx: &HandContext) -> Result<f64> {
        self.check(frame.dim(), ctx)?;
        let (h, w, _) = frame.dim();
        let mut total = 0.0;
        for hand in &ctx.hands {
            let (mut err, mut norm) = (0.0, 0.0);
            for (i, j) in self.crop(hand, h, w) {
                let l = glove_likeness(pixel(frame, i, j), ctx.glove);
                let m = glove_likeness(pixel(&ctx.expected, i, j), ctx.glove);
                err += (l - m) * (l - m);
                norm += m * m;
            }
            total += (-self.sharpness * err / norm.max(1e-12)).exp();
        }
        Ok(total / ctx.hands.len() as f64)
    }

    fn score_var(&self, g: &mut Graph, frame: Var, hw: (usize, usize), ctx: &HandContext) -> Result<Var> {
        let (h, w) = hw;
        self.check((h, w, 3), ctx)?;
        if g.value(frame).dim() != (h * w, 3) {
            return Err(shape_err("reward frame", format!("{:?} for {h}x{w}", g.value(frame).dim())));
        }
        let neg_glove = g.constant(Array2::from_shape_fn((1, 3), |(_, k)| -ctx.glove[k]));
        let ones = g.constant(Array2::ones((3, 1)));
        let mut parts = Vec::with_capacity(2);
        for hand in &ctx.hands {
            let crop = self.crop(hand, h, w);
            let idx: Vec<usize> = crop.iter().flat_map(|&(i, j)| (0..3).map(move |k| (i * w + j) * 3 + k)).collect();
            let px = g.gather(frame, idx, crop.len(), 3)?;
            let d = g.add_row(px, neg_glove)?;
            let d2 = g.square(d);
            let d2 = g.matmul(d2, ones)?;
            let e = g.scale(d2, -1.0 / (GLOVE_TAU * GLOVE_TAU));
            let l = g.exp(e);
            let m: Vec<f64> = crop
                .iter()
                .map(|&(i, j)| glove_likeness(pixel(&ctx.expected, i, j), ctx.glove))
                .collect();
            let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().max(1e-12);
            let mv = g.constant(Array2::from_shape_vec((crop.len(), 1), m).expect("one per pixel"));
            let diff = g.sub(l, mv)?;
            let sq = g.square(diff);
            let err = g.sum(sq);
            let e = g.scale(err, -self.sharpness / norm);
            parts.push(g.exp(e));
        }
        let sum = g.add(parts[0], parts[1])?;
        Ok(g.scale(sum, 0.5))
    }
}

/// Reward computed by an external program speaking one JSON line in, one
/// JSON line out per frame:
///
/// - request: `{"frame": [[[r, g, b], ...], ...], "prompt": "...", "template_id": "..."}`
/// - response: `{"score": 0.73}`
///
/// The process is started once per score. Such rewards are for evaluation
/// only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub program: String,
    pub args: Vec<String>,
    pub range: (f64, f64),
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    frame: Vec<Vec<[f64; 3]>>,
    prompt: &'a str,
    template_id: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl RewardModel for ExternalScorer {
    fn name(&self) -> &str {
        "external"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn range(&self) -> (f64, f64) {
        self.range
    }

    fn score(&self, frame: &Array3<f64>, ctx: &HandContext) -> Result<f64> {
        let (h, w, _) = frame.dim();
        let req = ScoreRequest {
            frame: (0..h).map(|i| (0..w).map(|j| pixel(frame, i, j)).collect()).collect(),
            prompt: &ctx.prompt,
            template_id: &ctx.template_id,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{}`: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped");
            serde_json::to_writer(&mut stdin, &req)?;
            stdin.write_all(b"\n")?;
        }
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("piped")).read_line(&mut line)?;
        let status = child.wait()?;
        if !status.success() {
            return Err(Error::External(format!("`{}` exited with {status}", self.program)));
        }
        let resp: ScoreResponse =
            serde_json::from_str(line.trim()).map_err(|e| Error::External(format!("bad response {line:?}: {e}")))?;
        let (lo, hi) = self.range;
        if !resp.score.is_finite() || resp.score < lo || resp.score > hi {
            return Err(Error::External(format!("score {} outside [{lo}, {hi}]", resp.score)));
        }
        Ok(resp.score)
    }
}

type Factory = Box<dyn Fn() -> Box<dyn RewardModel> + Send + Sync>;

/// Reward models by name.
pub struct RewardRegistry {
    entries: BTreeMap<String, Factory>,
}

impl RewardRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding `synthetic-hand`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("synthetic-hand", || Box::new(SyntheticHandReward::default()));
        r
    }

    pub fn register(&mut self, name: &str, factory: impl Fn() -> Box<dyn RewardModel> + Send + Sync + 'static) {
        self.entries.insert(name.to_string(), Box::new(factory));
    }

    pub fn get(&self, name: &str) -> Result<Box<dyn RewardModel>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownReward(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Decodes the whole LR latent video and returns one uniformly chosen frame.
pub fn decode_random_frame<R: Rng>(z_lr: &Array4<f64>, rng: &mut R) -> Result<(Array3<f64>, usize)> {
    let frames = Codec::lr().decode_frames(z_lr, true)?;
    let i = rng.random_range(0..frames.dim().0);
    Ok((frames.index_axis(Axis(0), i).to_owned(), i))
}

/// [`decode_random_frame`] on the tape: `z` holds latent tokens; the frame
/// comes back as `(H·W, 3)` rows gathered from them.
pub fn decode_random_frame_var<R: Rng>(g: &mut Graph, z: Var, grid: Grid, rng: &mut R) -> Result<(Var, usize)> {
    let t = pixel_frames_for(grid.frames);
    let i = rng.random_range(0..t);
    let idx = Codec::lr().frame_gather_index(grid.frames, grid.h, grid.w, i)?;
    let (hp, wp) = (grid.h * 4, grid.w * 4);
    Ok((g.gather(z, idx, hp * wp, 3)?, i))
}

/// Eq. 9 for one latent video on the tape: `T − r(X_i)` for a random frame
/// `i`, optionally clamped at zero (a clamped term has no gradient).
#[allow(clippy::too_many_arguments)]
pub fn refl_loss_var<R: Rng>(
    g: &mut Graph,
    z: Var,
    grid: Grid,
    reward: &dyn RewardModel,
    ctx: &VideoContext,
    threshold: f64,
    clamp: bool,
    rng: &mut R,
) -> Result<(Var, RewardScore)> {
    if !reward.differentiable() {
        return Err(Error::NotDifferentiable(reward.name().to_string()));
    }
    let (frame, i) = decode_random_frame_var(g, z, grid, rng)?;
    let r = reward.score_var(g, frame, (grid.h * 4, grid.w * 4), &ctx.frame(i)?)?;
    let value = g.scalar(r);
    let loss = if clamp && value >= threshold {
        g.constant(Array2::zeros((1, 1)))
    } else {
        g.affine(r, -1.0, threshold)
    };
    Ok((loss, RewardScore { value, frame_index: i }))
}

/// Eq. 9 evaluated without gradients, averaged over a batch of latent videos.
pub fn refl_loss<R: Rng>(
    videos: &[(Array4<f64>, VideoContext)],
    reward: &dyn RewardModel,
    threshold: f64,
    clamp: bool,
    rng: &mut R,
) -> Result<(f64, Vec<RewardScore>)> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("refl_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(videos.len());
    for (z, ctx) in videos {
        let (frame, i) = decode_random_frame(z, rng)?;
        let r = reward.score(&frame, &ctx.frame(i)?)?;
        total += if clamp { (threshold - r).max(0.0) } else { threshold - r };
        scores.push(RewardScore { value: r, frame_index: i });
    }
    Ok((total / videos.len() as f64, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflGradient {
    /// Differentiate the last sampler step only.
    Truncated,
    /// Differentiate the whole sampling trajectory.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflConfig {
    pub threshold: f64,
    pub weight: f64,
    pub clamp: bool,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub gradient: ReflGradient,
}

impl Default for ReflConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            weight: 0.1,
            clamp: false,
            sample_steps: 10,
            cfg_scale: 6.5,
            gradient: ReflGradient::Truncated,
        }
    }
}

/// A REFL training example: conditions of a first window plus the reward
/// context of its frames. `sample.z1` is used by the flow-matching term.
#[derive(Debug, Clone)]
pub struct ReflExample {
    pub sample: FlowSample<ConditionBundle>,
    pub context: VideoContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflLog {
    pub step: u64,
    pub fm_loss: f64,
    pub refl_loss: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

fn clamp_rows(g: &mut Graph, z: Var, clean: &Array2<f64>) -> Result<Var> {
    let k = clean.nrows();
    if k == 0 {
        return Ok(z);
    }
    let n = g.value(z).nrows();
    let head = g.constant(clean.clone());
    let tail = g.slice_rows(z, k, n - k)?;
    g.concat_rows(&[head, tail])
}

/// Samples `cond` on the tape from `init` and returns the final latent
/// tokens; only the steps from `grad_from` on are differentiated.
fn sample_on_tape(
    g: &mut Graph,
    model: &Dit,
    cond: &ConditionBundle,
    cfg: &ReflConfig,
    init: Array4<f64>,
    clean: &Array4<f64>,
) -> Result<Var> {
    let uncond = cond.without_text_audio();
    let guidance = if cfg.cfg_scale == 1.0 {
        Guidance::Plain(cond)
    } else {
        Guidance::Joint {
            cond,
            uncond: &uncond,
            scale: cfg.cfg_scale,
        }
    };
    let steps = cfg.sample_steps;
    if steps == 0 {
        return Err(Error::InvalidArgument("REFL sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let grid = Grid::of(&init);
    let m = clean.dim().0;
    let clamp4 = |z: &mut Array4<f64>| z.slice_mut(s![..m, .., .., ..]).assign(clean);
    let clean_rows = to_tokens(clean);
    let grad_from = match cfg.gradient {
        ReflGradient::Truncated => steps - 1,
        ReflGradient::Full => 0,
    };
    let mut z = init;
    clamp4(&mut z);
    for k in 0..grad_from {
        let v = eval_velocity(model, &guidance, &z, k as f64 * dt)?;
        z.scaled_add(dt, &v);
        clamp4(&mut z);
    }
    let mut zv = g.constant(to_tokens(&z));
    for k in grad_from..steps {
        let v = guided_velocity(g, model, &guidance, zv, grid, k as f64 * dt)?;
        let dv = g.scale(v, dt);
        let next = g.add(zv, dv)?;
        zv = clamp_rows(g, next, &clean_rows)?;
    }
    Ok(zv)
}

/// REFL data of one scene: its first LR window (reference frame as clean
/// prefix) with the matching ground-truth hand context.
pub fn refl_example(scene: &Scene, render: &SceneRender, text_dim: usize, window: usize) -> Result<ReflExample> {
    let sample = lr_examples(scene, render, &Codec::lr(), text_dim, window, 0)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("scene {} is shorter than one window", scene.seed)))?;
    let frames = pixel_frames_for(window);
    Ok(ReflExample {
        sample,
        context: VideoContext {
            prompt: scene.prompt.clone(),
            scene_id: format!("scene-{}", scene.seed),
            glove: scene.palette.glove,
            hands: render.hands[..frames].to_vec(),
            expected: render.lr.slice(s![..frames, .., .., ..]).to_owned(),
        },
    })
}

/// One fine-tuning step on `fm_loss + weight · refl_loss`. The
/// flow-matching half consumes the step's random stream exactly as
/// [`crate::train::lr_step`] does, so `weight = 0` reproduces that step.
pub fn refl_step(
    model: &mut Dit,
    reward: &dyn RewardModel,
    state: &mut TrainState,
    data: &[ReflExample],
    train: &TrainConfig,
    cfg: &ReflConfig,
) -> Result<ReflLog> {
    if !reward.differentiable() {
        return Err(Error::NotDifferentiable(reward.name().to_string()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty REFL set".into()));
    }
    let mut rng = step_rng(train.seed, state.step);
    let picks: Vec<usize> = (0..train.batch).map(|_| rng.random_range(0..data.len())).collect();
    let mut batch: Vec<FlowSample<ConditionBundle>> = picks.iter().map(|&i| data[i].sample.clone()).collect();
    for b in &mut batch {
        b.cond = condition_dropout(&b.cond, &mut rng, &train.dropout)?;
    }
    let fm = prefix_fm_loss(&*model, &batch, &mut rng, |c| c.effective_prefix())?;

    let inv = 1.0 / picks.len() as f64;
    let mut refl = 0.0;
    let mut reward_sum = 0.0;
    let mut grads = BTreeMap::new();
    for &i in &picks {
        let ex = &data[i];
        let dim = ex.sample.z1.dim();
        let init = gaussian_like(dim, &mut rng);
        let prefix = ex.sample.cond.prefix;
        let clean = ex.sample.z1.slice(s![..prefix, .., .., ..]).to_owned();
        let mut g = Graph::new();
        let z = sample_on_tape(&mut g, model, &ex.sample.cond, cfg, init, &clean)?;
        let (loss, score) = refl_loss_var(&mut g, z, Grid::of(&ex.sample.z1), reward, &ex.context, cfg.threshold, cfg.clamp, &mut rng)?;
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                context: "refl_loss",
                detail: format!("step {}", state.step),
            });
        }
        refl += lv * inv;
        reward_sum += score.value * inv;
        add_grads(&mut grads, g.backward(loss)?.params(&g), inv);
    }
    let mut total = fm.grads;
    add_grads(&mut total, grads, cfg.weight);
    let grad_norm = state.adam.update(&mut model.params, &total)?;
    let log = ReflLog {
        step: state.step,
        fm_loss: fm.loss,
        refl_loss: refl,
        mean_reward: reward_sum,
        grad_norm,
    };
    state.step += 1;
    Ok(log)
}

/// Samples the first window of `ex` (for evaluation) with `steps` Euler
/// steps at `scale`, from noise drawn with `rng`.
pub fn sample_window<R: Rng>(model: &Dit, cond: &ConditionBundle, z_clean: &Array4<f64>, steps: usize, scale: f64, rng: &mut R) -> Result<Array4<f64>> {
    let init = gaussian_like(z_clean.dim(), rng);
    let prefix = cond.prefix;
    let clean = z_clean.slice(s![..prefix, .., .., ..]).to_owned();
    let uncond = cond.without_text_audio();
    let guidance = if scale == 1.0 {
        Guidance::Plain(cond)
    } else {
        Guidance::Joint { cond, uncond: &uncond, scale }
    };
    let clamp = |z: &mut Array4<f64>| z.slice_mut(s![..prefix, .., .., ..]).assign(&clean);
    crate::flow::euler_integrate(model, &guidance, steps, init, &clamp)
}

/// Token rows back to a latent grid, for callers holding tape values.
pub fn tokens_to_latents(tokens: Array2<f64>, grid: Grid) -> Result<Array4<f64>> {
    from_tokens(tokens, grid.frames, grid.h, grid.w)
}
