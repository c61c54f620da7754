//! Pose-guided refiner: degradation of LR latents, prefix-latent noising,
//! the masked velocity loss, clamped refinement sampling and chunked
//! long-video generation.
//!
//! A refiner sequence starts with the reference-image latent at index 0,
//! followed by `m` clean motion latents and the latents to generate. The
//! first chunk of a video has no motion prefix: its index 0 is frame 0,
//! which is the reference image itself.

use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{audio_features, ConditionBundle, Dit, DitConfig, DitInputs, DropFlags};
use crate::codec::{to_tokens, Codec, LATENT_CHANNELS, TEMPORAL_FACTOR};
use crate::error::{shape_err, Error, Result};
use crate::flow::{
    add_grads, check_finite, euler_integrate, gaussian_like, target_velocity, weighted_mse, Grid, Guidance,
    LossReport, SamplerConfig, TimeSample, VelocityModel,
};
use crate::params::Checkpoint;
use crate::pose::{patchify, rasterize, PoseDetector, PoseSequence, POSE_TOKEN_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowPass {
    /// Keeps spatial frequencies `|k| ≤ cutoff·n/2` per axis, drops the rest.
    Ideal,
    /// Gaussian frequency response with standard deviation `cutoff·n/2`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub cutoff_frac: f64,
    pub alpha_deg: f64,
    pub sigma: f64,
    pub filter: LowPass,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            cutoff_frac: 0.5,
            alpha_deg: 0.7,
            sigma: 1.0,
            filter: LowPass::Ideal,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_frac > 0.0 && self.cutoff_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("cutoff_frac {} outside (0, 1]", self.cutoff_frac)));
        }
        if !(self.alpha_deg >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_deg {} and sigma {} must be nonnegative",
                self.alpha_deg, self.sigma
            )));
        }
        Ok(())
    }
}

/// Signed frequency magnitude of DFT bin `k` on an axis of length `n`.
pub fn frequency(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64
}

/// Response of the low-pass filter at bin `(ky, kx)`.
pub fn lpf_gain(filter: LowPass, cutoff_frac: f64, ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let (fy, fx) = (frequency(ky, h), frequency(kx, w));
    let (cy, cx) = (cutoff_frac * h as f64 / 2.0, cutoff_frac * w as f64 / 2.0);
    match filter {
        LowPass::Ideal => f64::from(u8::from(fy <= cy + 1e-9 && fx <= cx + 1e-9)),
        LowPass::Gaussian => (-(fy * fy) / (2.0 * cy * cy) - (fx * fx) / (2.0 * cx * cx)).exp(),
    }
}

/// 2-D DFT of every `(frame, channel)` plane, returned as `(f, h, w, c)`.
pub fn spectrum(z: &Array4<f64>) -> Array4<Complex<f64>> {
    let (f, h, w, c) = z.dim();
    let mut planner = FftPlanner::new();
    let (fw, fh) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut out = z.mapv(|v| Complex::new(v, 0.0));
    for fi in 0..f {
        for ch in 0..c {
            transform_plane(&mut out, fi, ch, h, w, &*fh, &*fw);
        }
    }
    out
}

fn transform_plane(
    a: &mut Array4<Complex<f64>>,
    fi: usize,
    ch: usize,
    h: usize,
    w: usize,
    fh: &dyn rustfft::Fft<f64>,
    fw: &dyn rustfft::Fft<f64>,
) {
    let mut row = vec![Complex::new(0.0, 0.0); w];
    for y in 0..h {
        for x in 0..w {
            row[x] = a[[fi, y, x, ch]];
        }
        fw.process(&mut row);
        for x in 0..w {
            a[[fi, y, x, ch]] = row[x];
        }
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = a[[fi, y, x, ch]];
        }
        fh.process(&mut col);
        for y in 0..h {
            a[[fi, y, x, ch]] = col[y];
        }
    }
}

/// Spatial low-pass filter applied independently to every latent frame and
/// channel.
pub fn low_pass(z: &Array4<f64>, cutoff_frac: f64, filter: LowPass) -> Array4<f64> {
    let (f, h, w, c) = z.dim();
    let mut spec = spectrum(z);
    for ((_, y, x, _), v) in spec.indexed_iter_mut() {
        *v *= lpf_gain(filter, cutoff_frac, y, x, h, w);
    }
    let mut planner = FftPlanner::new();
    let (iw, ih) = (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h));
    for fi in 0..f {
        for ch in 0..c {
            transform_plane(&mut spec, fi, ch, h, w, &*ih, &*iw);
        }
    }
    let norm = 1.0 / (h * w) as f64;
    spec.mapv(|v| v.re * norm)
}

/// `LPF(z) + α_deg·ε` with `ε ~ N(0, σ²)`.
pub fn degrade<R: Rng>(z_lr: &Array4<f64>, cfg: &DegradationConfig, rng: &mut R) -> Result<Array4<f64>> {
    cfg.validate()?;
    check_finite4("degrade input", z_lr)?;
    let mut out = low_pass(z_lr, cfg.cutoff_frac, cfg.filter);
    if cfg.alpha_deg > 0.0 {
        let eps = gaussian_like(z_lr.dim(), rng);
        out.scaled_add(cfg.alpha_deg * cfg.sigma, &eps);
    }
    Ok(out)
}

fn check_finite4(ctx: &'static str, a: &Array4<f64>) -> Result<()> {
    if let Some(v) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: ctx,
            detail: format!("value {v}"),
        });
    }
    Ok(())
}

/// Clean prefix: index 0 is the reference latent, indices `1..=m` motion latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub m: usize,
}

impl PrefixSpec {
    pub fn check(&self, f: usize) -> Result<()> {
        if self.m > f {
            return Err(Error::InvalidArgument(format!("prefix m={} exceeds f={f}", self.m)));
        }
        Ok(())
    }
}

/// Per-latent loss weights, `w_i = 1` iff `i > m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMask {
    pub w: Vec<f64>,
}

pub fn loss_mask(f: usize, m: usize) -> Result<LossMask> {
    PrefixSpec { m }.check(f)?;
    Ok(LossMask {
        w: (0..=f).map(|i| f64::from(u8::from(i > m))).collect(),
    })
}

/// Eq. 6 with an explicit noise tensor: indices `0..=m` are copied, later
/// ones become `(1−t)·ε + t·z`.
pub fn prefix_noise_with(z: &Array4<f64>, t: TimeSample, spec: PrefixSpec, eps: &Array4<f64>) -> Result<Array4<f64>> {
    let n = z.dim().0;
    if n == 0 {
        return Err(shape_err("frames", "empty latent sequence"));
    }
    spec.check(n - 1)?;
    if eps.dim() != z.dim() {
        return Err(shape_err("noise", format!("{:?} vs {:?}", eps.dim(), z.dim())));
    }
    let t = t.get();
    let mut out = z.clone();
    let future = s![spec.m + 1.., .., .., ..];
    let noised = &eps.slice(future) * (1.0 - t) + &z.slice(future) * t;
    out.slice_mut(future).assign(&noised);
    Ok(out)
}

/// Eq. 6: noise only the latents after the clean prefix. Draws a full-size
/// `ε` so the random stream does not depend on `m`.
pub fn prefix_noise<R: Rng>(z: &Array4<f64>, t: TimeSample, spec: PrefixSpec, rng: &mut R) -> Result<Array4<f64>> {
    let eps = gaussian_like(z.dim(), rng);
    prefix_noise_with(z, t, spec, &eps)
}

/// Refiner conditioning for one sequence on a shared token grid.
#[derive(Debug, Clone)]
pub struct RefinerCond {
    /// Degraded LR latents, `(n, h, w, 192)`.
    pub z_deglr: Array4<f64>,
    /// Pose tokens, `(n, h, w, 512)`.
    pub pose_tokens: Array4<f64>,
    /// HR latent of the reference image held still, `(1, h, w, 192)`.
    pub reference: Array4<f64>,
    pub m: usize,
    pub pose_dropped: bool,
}

impl RefinerCond {
    pub fn without_pose(&self) -> Self {
        Self {
            pose_dropped: true,
            ..self.clone()
        }
    }
}

/// The refiner backbone over `[z_hr + pose; z_deglr]` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    pub dit: Dit,
}

pub fn refiner_dit_config() -> DitConfig {
    DitConfig {
        in_channels: 2 * LATENT_CHANNELS,
        out_channels: LATENT_CHANNELS,
        width: 64,
        heads: 4,
        layers: 2,
        mlp_ratio: 2,
        text_dim: 0,
        audio_dim: 0,
        ref_channels: LATENT_CHANNELS,
        audio_window: 0,
        positional: true,
        audio_mask: true,
    }
}

const POSE_PARAMS: [&str; 3] = ["pose.w", "pose.b", "pose.null"];

impl RefinerModel {
    pub fn init(config: DitConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 2 * config.out_channels {
            return Err(Error::InvalidArgument(format!(
                "refiner input must be twice the output width, got {} → {}",
                config.in_channels, config.out_channels
            )));
        }
        let c = config.out_channels;
        let mut dit = Dit::init(config, seed)?;
        // zero projection: pose starts as a no-op
        dit.params.zeros("pose.w", (POSE_TOKEN_CHANNELS, c));
        dit.params.zeros("pose.b", (1, c));
        dit.params.zeros("pose.null", (1, c));
        Ok(Self { dit })
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        self.dit.write_into(ck, prefix)
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let dit = Dit::read_from(ck, prefix)?;
        for name in POSE_PARAMS {
            if !dit.params.0.contains_key(name) {
                return Err(shape_err("checkpoint", format!("`{prefix}.{name}` missing")));
            }
        }
        Ok(Self { dit })
    }

    fn channels(&self) -> usize {
        self.dit.config.out_channels
    }
}

impl VelocityModel for RefinerModel {
    type Cond = RefinerCond;

    fn velocity(&self, g: &mut Graph, z_t: Var, grid: Grid, cond: &RefinerCond, t: f64) -> Result<Var> {
        let c = self.channels();
        let want = (grid.frames, grid.h, grid.w);
        let (f, h, w, cc) = cond.z_deglr.dim();
        if (f, h, w) != want || cc != c {
            return Err(shape_err("z_deglr", format!("{:?} on grid {want:?}", cond.z_deglr.dim())));
        }
        let (f, h, w, pc) = cond.pose_tokens.dim();
        if (f, h, w) != want || pc != POSE_TOKEN_CHANNELS {
            return Err(shape_err("pose tokens", format!("{:?} on grid {want:?}", cond.pose_tokens.dim())));
        }
        let n = grid.tokens();
        let pose = if cond.pose_dropped {
            let ones = g.constant(Array2::ones((n, 1)));
            let null = g.param("pose.null", self.dit.params.get("pose.null"));
            g.matmul(ones, null)?
        } else {
            let p = g.constant(to_tokens(&cond.pose_tokens));
            let wv = g.param("pose.w", self.dit.params.get("pose.w"));
            let bv = g.param("pose.b", self.dit.params.get("pose.b"));
            let y = g.matmul(p, wv)?;
            g.add_row(y, bv)?
        };
        let fused = g.add(z_t, pose)?;
        let lr = g.constant(to_tokens(&cond.z_deglr));
        let x = g.concat_cols(&[fused, lr])?;
        let inputs = DitInputs {
            reference: Some(&cond.reference),
            prefix: (cond.m + 1).min(grid.frames),
            ..Default::default()
        };
        self.dit.forward(g, x, grid, &inputs, t)
    }
}

/// One refiner training example: the clean HR sequence and its conditions.
#[derive(Debug, Clone)]
pub struct RefinerSample {
    pub z_hr: Array4<f64>,
    pub cond: RefinerCond,
}

/// Eqs. 7–8 for one pre-noised sequence: mask-weighted mean squared
/// velocity error on the tape. Rows of latents `≤ m` carry weight 0.
pub fn masked_velocity_loss(g: &mut Graph, pred: Var, target: Var, grid: Grid, mask: &LossMask) -> Result<Var> {
    if mask.w.len() != grid.frames {
        return Err(shape_err("loss mask", format!("{} weights for {} latents", mask.w.len(), grid.frames)));
    }
    let hw = grid.tokens_per_frame();
    let rows: Vec<f64> = (0..grid.tokens()).map(|r| mask.w[r / hw]).collect();
    weighted_mse(g, pred, target, Some(&rows))
}

/// Refiner loss for one sample: draw `t` then `ε`, noise the future latents,
/// and regress the velocity there.
pub fn refiner_loss<M, R>(model: &M, sample: &RefinerSample, rng: &mut R) -> Result<LossReport>
where
    M: VelocityModel<Cond = RefinerCond>,
    R: Rng,
{
    let n = sample.z_hr.dim().0;
    if n == 0 {
        return Err(shape_err("frames", "empty latent sequence"));
    }
    let spec = PrefixSpec { m: sample.cond.m };
    let mask = loss_mask(n - 1, spec.m)?;
    let t: f64 = rng.random();
    let eps = gaussian_like(sample.z_hr.dim(), rng);
    let z_t = prefix_noise_with(&sample.z_hr, TimeSample::new(t)?, spec, &eps)?;
    let target = target_velocity(&sample.z_hr, &eps)?;
    let grid = Grid::of(&sample.z_hr);
    let mut g = Graph::new();
    let zv = g.constant(to_tokens(&z_t));
    let pred = model.velocity(&mut g, zv, grid, &sample.cond, t)?;
    check_finite("refiner velocity", g.value(pred))?;
    let tv = g.constant(to_tokens(&target.v));
    let l = masked_velocity_loss(&mut g, pred, tv, grid, &mask)?;
    let loss = g.scalar(l);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "refiner_loss",
            detail: format!("loss {loss} at t={t}"),
        });
    }
    let grads = g.backward(l)?.params(&g);
    Ok(LossReport { loss, grads })
}

/// Batch mean of [`refiner_loss`].
pub fn refiner_batch_loss<M, R>(model: &M, batch: &[RefinerSample], rng: &mut R) -> Result<LossReport>
where
    M: VelocityModel<Cond = RefinerCond>,
    R: Rng,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument("refiner_loss needs a nonempty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = std::collections::BTreeMap::new();
    for s in batch {
        let r = refiner_loss(model, s, rng)?;
        loss += r.loss * inv;
        add_grads(&mut grads, r.grads, inv);
    }
    Ok(LossReport { loss, grads })
}

/// Euler-samples latents `m+1..` while clamping `0..=m` to `prefix` at every
/// step, with pose guidance at `cfg.cfg_scale`.
pub fn refine_chunk<M>(model: &M, cond: &RefinerCond, prefix: &Array4<f64>, cfg: &SamplerConfig) -> Result<Array4<f64>>
where
    M: VelocityModel<Cond = RefinerCond>,
{
    let dim = cond.z_deglr.dim();
    let p = prefix.dim();
    if p.0 == 0 {
        return Err(Error::InvalidArgument("refinement needs at least the reference latent as prefix".into()));
    }
    if p.0 != cond.m + 1 || (p.1, p.2, p.3) != (dim.1, dim.2, dim.3) || p.0 > dim.0 {
        return Err(shape_err(
            "prefix",
            format!("{:?} for m={} on a {:?} sequence", p, cond.m, dim),
        ));
    }
    let uncond = cond.without_pose();
    let guidance = if cfg.cfg_scale == 1.0 {
        Guidance::Plain(cond)
    } else {
        Guidance::Joint {
            cond,
            uncond: &uncond,
            scale: cfg.cfg_scale,
        }
    };
    let init = gaussian_like(dim, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let clamp = |z: &mut Array4<f64>| z.slice_mut(s![..p.0, .., .., ..]).assign(prefix);
    euler_integrate(model, &guidance, cfg.steps, init, &clamp)
}

/// Chunk boundaries over a latent video of `total` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total: usize,
    pub chunk_len: usize,
    pub overlap: usize,
}

/// One chunk: latents `start..start + valid` of the video. A short final
/// chunk has `valid < chunk_len` and is padded during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub index: usize,
    pub start: usize,
    pub valid: usize,
}

impl ChunkPlan {
    pub fn new(total: usize, chunk_len: usize, overlap: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidArgument("a video needs at least one latent".into()));
        }
        if chunk_len < 2 {
            return Err(Error::InvalidArgument(format!("chunk length {chunk_len} below 2")));
        }
        if overlap >= chunk_len {
            return Err(Error::InvalidArgument(format!("overlap {overlap} must be below chunk length {chunk_len}")));
        }
        Ok(Self { total, chunk_len, overlap })
    }

    /// Latent count of a plan with `chunks` full chunks.
    pub fn latents_for(chunks: usize, chunk_len: usize, overlap: usize) -> usize {
        if chunks == 0 {
            0
        } else {
            chunk_len + (chunks - 1) * (chunk_len - overlap)
        }
    }

    pub fn chunks(&self) -> Vec<ChunkSpan> {
        let stride = self.chunk_len - self.overlap;
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let valid = self.chunk_len.min(self.total - start);
            out.push(ChunkSpan {
                index: out.len(),
                start,
                valid,
            });
            if start + self.chunk_len >= self.total {
                break;
            }
            start += stride;
        }
        out
    }
}

/// Conditions for a long generation.
pub struct LongConditions<'a> {
    pub text_emb: Array2<f64>,
    /// Audio amplitude per pixel frame, `4(N−1)+1` values.
    pub audio: Vec<f64>,
    /// Reference image at LR and HR resolution; it is also frame 0.
    pub ref_lr: Array3<f64>,
    pub ref_hr: Array3<f64>,
    pub detector: &'a dyn PoseDetector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongSamplers {
    pub lr: SamplerConfig,
    pub refiner: SamplerConfig,
    pub degradation: DegradationConfig,
    pub pose_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct LongVideo {
    pub plan: ChunkPlan,
    pub chunks: Vec<ChunkSpan>,
    pub lr_latents: Array4<f64>,
    pub hr_latents: Array4<f64>,
    /// HR latents of each chunk as sampled, reference slot removed.
    pub hr_chunks: Vec<Array4<f64>>,
    pub frames: Array4<f64>,
}

/// Repeats the last row block of `a` along axis 0 until it has `len` rows.
pub fn pad_repeat_last<D: ndarray::RemoveAxis>(a: &ndarray::Array<f64, D>, len: usize) -> ndarray::Array<f64, D> {
    let n = a.len_of(Axis(0));
    if n >= len {
        return a.slice_axis(Axis(0), (0..len).into()).to_owned();
    }
    let last = a.slice_axis(Axis(0), (n - 1..n).into());
    let mut parts = vec![a.view()];
    for _ in n..len {
        parts.push(last.clone());
    }
    concatenate(Axis(0), &parts).expect("same trailing shape")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Pose tokens of a pixel clip of `4f+1` frames via `detector`.
pub fn pose_tokens_from_frames(detector: &dyn PoseDetector, frames: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
    let seq: PoseSequence = detector.detect(frames)?;
    let raster = rasterize(&seq, frames.dim().0, seq.height, seq.width, sigma)?;
    patchify(&raster)
}

/// Builds the refiner conditions of chunk `k`. `lr_chunk` holds the chunk's
/// LR latents (padded to full length) and `reference` the HR still latent;
/// for `k > 0` the reference slot is prepended to both the LR latents and the
/// pose clip.
#[allow(clippy::too_many_arguments)]
pub fn chunk_refiner_cond<R: Rng>(
    k: usize,
    m: usize,
    lr_chunk: &Array4<f64>,
    ref_lr: &Array3<f64>,
    reference: &Array4<f64>,
    detector: &dyn PoseDetector,
    degradation: &DegradationConfig,
    pose_sigma: f64,
    rng: &mut R,
) -> Result<RefinerCond> {
    let lr = Codec::lr();
    let (lr_seq, clip) = if k == 0 {
        (lr_chunk.clone(), lr.decode_frames(lr_chunk, true)?)
    } else {
        let r = lr.encode_image(ref_lr)?;
        let seq = concatenate(Axis(0), &[r.view(), lr_chunk.view()]).expect("same grid");
        let frames = lr.decode_frames(lr_chunk, false)?;
        let first = ref_lr.clone().insert_axis(Axis(0));
        (seq, concatenate(Axis(0), &[first.view(), frames.view()]).expect("same frame size"))
    };
    Ok(RefinerCond {
        z_deglr: degrade(&lr_seq, degradation, rng)?,
        pose_tokens: pose_tokens_from_frames(detector, &clip, pose_sigma)?,
        reference: reference.clone(),
        m: if k == 0 { 0 } else { m },
        pose_dropped: false,
    })
}

/// Generates LR chunks autoregressively and refines each into HR latents,
/// then decodes the assembled HR latent video.
pub fn generate_long(
    lr_model: &Dit,
    refiner: &RefinerModel,
    conds: &LongConditions<'_>,
    plan: ChunkPlan,
    cfgs: &LongSamplers,
) -> Result<LongVideo> {
    let lr_latents = generate_lr_long(lr_model, conds, plan, &cfgs.lr)?;
    let refined = refine_long(refiner, &lr_latents, conds, plan, cfgs)?;
    Ok(LongVideo {
        plan,
        chunks: plan.chunks(),
        lr_latents,
        hr_latents: refined.hr_latents,
        hr_chunks: refined.hr_chunks,
        frames: refined.frames,
    })
}

fn chunk_err(k: usize, stage: &'static str) -> impl Fn(Error) -> Error {
    move |e: Error| Error::Chunk {
        chunk: k,
        stage,
        source: Box::new(e),
    }
}

/// LR stage of [`generate_long`]: chunk 0 starts from the reference image,
/// later chunks continue from the last `overlap` latents of the previous one.
pub fn generate_lr_long(lr_model: &Dit, conds: &LongConditions<'_>, plan: ChunkPlan, cfg: &SamplerConfig) -> Result<Array4<f64>> {
    let lr = Codec::lr();
    let n = plan.total;
    let pixel = crate::codec::pixel_frames_for(n);
    if conds.audio.len() != pixel {
        return Err(shape_err("audio", format!("{} amplitudes for {pixel} frames", conds.audio.len())));
    }
    let (lh, lw, _) = conds.ref_lr.dim();
    let (h, w) = (lh / 4, lw / 4);
    let c = LATENT_CHANNELS;
    let feats = audio_features(&conds.audio, true)?;
    let ref_latent = lr.encode_still(&conds.ref_lr)?;
    let lr_first = lr.encode_image(&conds.ref_lr)?;
    let mut lr_video = Array4::zeros((n, h, w, c));
    let m = plan.overlap;
    let len = plan.chunk_len;
    for ch in plan.chunks() {
        let k = ch.index;
        let prefix_count = if k == 0 { 1 } else { m };
        let prefix_lr = if k == 0 {
            lr_first.clone()
        } else {
            lr_video.slice(s![ch.start..ch.start + m, .., .., ..]).to_owned()
        };
        let end = (ch.start + len).min(n);
        let cond = ConditionBundle {
            text_emb: conds.text_emb.clone(),
            audio_feats: pad_repeat_last(&feats.slice(s![ch.start..end, ..]).to_owned(), len),
            ref_latent: ref_latent.clone(),
            prefix: prefix_count,
            routing: None,
            dropped: DropFlags::default(),
        };
        let uncond = cond.without_text_audio();
        let guidance = if cfg.cfg_scale == 1.0 {
            Guidance::Plain(&cond)
        } else {
            Guidance::Joint {
                cond: &cond,
                uncond: &uncond,
                scale: cfg.cfg_scale,
            }
        };
        let init = gaussian_like((len, h, w, c), &mut stream_rng(cfg.seed, k as u64));
        let clamp = |z: &mut Array4<f64>| z.slice_mut(s![..prefix_count, .., .., ..]).assign(&prefix_lr);
        let lr_chunk = euler_integrate(lr_model, &guidance, cfg.steps, init, &clamp).map_err(chunk_err(k, "lr"))?;
        lr_video
            .slice_mut(s![ch.start..end, .., .., ..])
            .assign(&lr_chunk.slice(s![..ch.valid, .., .., ..]));
    }
    Ok(lr_video)
}

/// Output of [`refine_long`].
#[derive(Debug, Clone)]
pub struct RefinedVideo {
    pub hr_latents: Array4<f64>,
    /// HR latents of each chunk as sampled, reference slot removed.
    pub hr_chunks: Vec<Array4<f64>>,
    pub frames: Array4<f64>,
}

/// Refinement stage of [`generate_long`] over a complete LR latent video.
/// Chunk 0 is anchored on the HR reference latent; later chunks carry the
/// reference slot plus the last `overlap` refined latents as clean prefix.
pub fn refine_long(
    refiner: &RefinerModel,
    lr_video: &Array4<f64>,
    conds: &LongConditions<'_>,
    plan: ChunkPlan,
    cfgs: &LongSamplers,
) -> Result<RefinedVideo> {
    let hr = Codec::hr();
    let (n, h, w, c) = lr_video.dim();
    if n != plan.total {
        return Err(shape_err("lr video", format!("{n} latents for a plan over {}", plan.total)));
    }
    let hr_first = hr.encode_image(&conds.ref_hr)?;
    let reference = hr.encode_still(&conds.ref_hr)?;
    let mut hr_video = Array4::zeros((n, h, w, c));
    let m = plan.overlap;
    let len = plan.chunk_len;
    let mut hr_chunks = Vec::new();
    for ch in plan.chunks() {
        let k = ch.index;
        let end = ch.start + ch.valid;
        let lr_cond = pad_repeat_last(&lr_video.slice(s![ch.start..end, .., .., ..]).to_owned(), len);
        let mut rng = stream_rng(cfgs.refiner.seed ^ 0x0de9_7ade, k as u64);
        let rcond = chunk_refiner_cond(
            k,
            m,
            &lr_cond,
            &conds.ref_lr,
            &reference,
            conds.detector,
            &cfgs.degradation,
            cfgs.pose_sigma,
            &mut rng,
        )
        .map_err(chunk_err(k, "conditioning"))?;
        let prefix_hr = if k == 0 {
            hr_first.clone()
        } else {
            let motion = hr_video.slice(s![ch.start..ch.start + m, .., .., ..]);
            concatenate(Axis(0), &[hr_first.view(), motion]).expect("same grid")
        };
        let sampler = SamplerConfig {
            seed: cfgs.refiner.seed.wrapping_add(k as u64),
            ..cfgs.refiner
        };
        let out = refine_chunk(refiner, &rcond, &prefix_hr, &sampler).map_err(chunk_err(k, "refine"))?;
        let body = if k == 0 { out } else { out.slice(s![1.., .., .., ..]).to_owned() };
        let body = body.slice(s![..ch.valid, .., .., ..]).to_owned();
        hr_video.slice_mut(s![ch.start..end, .., .., ..]).assign(&body);
        hr_chunks.push(body);
    }
    let frames = hr.decode_frames(&hr_video, true)?;
    Ok(RefinedVideo {
        hr_latents: hr_video,
        hr_chunks,
        frames,
    })
}

/// Decodes one chunk's HR latents on their own (leading single frame for
/// chunk 0, four-frame packing otherwise).
pub fn decode_chunk(hr_chunk: &Array4<f64>, first: bool) -> Result<Array4<f64>> {
    Codec::hr().decode_frames(hr_chunk, first)
}

/// Pixel-frame range covered by latents `start..start + len`.
pub fn pixel_span(start: usize, len: usize) -> std::ops::Range<usize> {
    let lo = if start == 0 { 0 } else { (start - 1) * TEMPORAL_FACTOR + 1 };
    let hi = (start + len - 1) * TEMPORAL_FACTOR + 1;
    lo..hi
}

/// Agreement of two consecutive chunks on the latents they share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeamCheck {
    /// Index of the later chunk.
    pub chunk: usize,
    pub latent_start: usize,
    pub latents: usize,
    /// Largest absolute difference between the two chunks' copies.
    pub latent_diff: f64,
    /// Largest absolute difference between the pixel frames each chunk
    /// decodes for the shared latents on its own.
    pub frame_diff: f64,
}

/// Compares every pair of consecutive chunks on their `overlap` shared
/// latents, in latent space and after decoding each chunk separately.
pub fn seam_audit(plan: &ChunkPlan, hr_chunks: &[Array4<f64>]) -> Result<Vec<SeamCheck>> {
    let spans = plan.chunks();
    if spans.len() != hr_chunks.len() {
        return Err(shape_err("chunks", format!("{} chunks for a {}-chunk plan", hr_chunks.len(), spans.len())));
    }
    let m = plan.overlap;
    let max_diff = |a: ndarray::ArrayView4<f64>, b: ndarray::ArrayView4<f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let mut out = Vec::new();
    for k in 1..spans.len() {
        let (prev, cur) = (&spans[k - 1], &spans[k]);
        let off = cur.start - prev.start;
        let a = hr_chunks[k - 1].slice(s![off..off + m, .., .., ..]);
        let b = hr_chunks[k].slice(s![..m, .., .., ..]);
        let fa = decode_chunk(&hr_chunks[k - 1], k == 1)?;
        let fb = decode_chunk(&hr_chunks[k], false)?;
        // pixel frames of latent j within a chunk
        let span_in = |first: bool, j: usize| {
            if first {
                pixel_span(j, 1)
            } else {
                j * TEMPORAL_FACTOR..(j + 1) * TEMPORAL_FACTOR
            }
        };
        let mut frame_diff: f64 = 0.0;
        for j in 0..m {
            let ra = span_in(k == 1, off + j);
            let rb = span_in(false, j);
            let (pa, pb) = (fa.slice(s![ra, .., .., ..]), fb.slice(s![rb, .., .., ..]));
            if pa.dim() != pb.dim() {
                return Err(shape_err("seam frames", format!("{:?} vs {:?}", pa.dim(), pb.dim())));
            }
            frame_diff = frame_diff.max(max_diff(pa, pb));
        }
        out.push(SeamCheck {
            chunk: k,
            latent_start: cur.start,
            latents: m,
            latent_diff: max_diff(a, b),
            frame_diff,
        });
    }
    Ok(out)
}
