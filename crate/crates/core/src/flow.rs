//! Flow-matching interpolation, velocity targets, training loss, Euler
//! sampling and classifier-free guidance.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{from_tokens, to_tokens};
use crate::error::{shape_err, Error, Result};

/// A time in `[0, 1]`; 0 is pure noise, 1 is data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimeSample(f64);

impl TimeSample {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLatent {
    pub z_t: Array4<f64>,
    pub t: TimeSample,
    pub epsilon: Array4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTarget {
    pub v: Array4<f64>,
}

/// Latent grid dimensions `(frames, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn of(z: &Array4<f64>) -> Self {
        let (frames, h, w, _) = z.dim();
        Self { frames, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }
}

fn same_shape(ctx: &'static str, a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(ctx, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `(1 − t)·ε + t·z1`
pub fn diffuse(z1: &Array4<f64>, epsilon: &Array4<f64>, t: TimeSample) -> Result<NoisyLatent> {
    same_shape("diffuse", z1, epsilon)?;
    let t_ = t.get();
    let z_t = Zip::from(z1)
        .and(epsilon)
        .map_collect(|&z, &e| if t_ == 1.0 { z } else if t_ == 0.0 { e } else { (1.0 - t_) * e + t_ * z });
    Ok(NoisyLatent {
        z_t,
        t,
        epsilon: epsilon.clone(),
    })
}

/// `z1 − ε`
pub fn target_velocity(z1: &Array4<f64>, epsilon: &Array4<f64>) -> Result<VelocityTarget> {
    same_shape("target_velocity", z1, epsilon)?;
    Ok(VelocityTarget { v: z1 - epsilon })
}

/// `v_uncond + scale · (v_cond − v_uncond)`
pub fn cfg_combine(v_uncond: &Array4<f64>, v_cond: &Array4<f64>, scale: f64) -> Result<Array4<f64>> {
    same_shape("cfg_combine", v_uncond, v_cond)?;
    Ok(Zip::from(v_uncond)
        .and(v_cond)
        .map_collect(|&u, &c| (1.0 - scale) * u + scale * c))
}

pub fn gaussian_like<R: Rng>(dim: (usize, usize, usize, usize), rng: &mut R) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// A conditional velocity predictor evaluated on a tape. `z_t` arrives as
/// `(frames·h·w, c)` token rows and the output must have the same shape.
pub trait VelocityModel {
    type Cond;

    fn velocity(&self, g: &mut Graph, z_t: Var, grid: Grid, cond: &Self::Cond, t: f64) -> Result<Var>;
}

/// One training example for [`fm_loss`].
#[derive(Debug, Clone)]
pub struct FlowSample<C> {
    pub z1: Array4<f64>,
    pub cond: C,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub grads: BTreeMap<String, Array2<f64>>,
}

pub(crate) fn add_grads(into: &mut BTreeMap<String, Array2<f64>>, from: BTreeMap<String, Array2<f64>>, weight: f64) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.scaled_add(weight, &g),
            None => {
                into.insert(k, if weight == 1.0 { g } else { g * weight });
            }
        }
    }
}

pub(crate) fn check_finite(ctx: &'static str, a: &Array2<f64>) -> Result<()> {
    if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: ctx,
            detail: format!("element {i} is {v}"),
        });
    }
    Ok(())
}

/// Mean squared error between predicted and target token rows, with an
/// optional per-row weight. The mean runs over weighted elements only; when
/// every weight is zero the loss is an exact zero.
pub fn weighted_mse(g: &mut Graph, pred: Var, target: Var, row_weights: Option<&[f64]>) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    match row_weights {
        None => Ok(g.mean(sq)),
        Some(w) => {
            let (n, c) = g.value(sq).dim();
            if w.len() != n {
                return Err(shape_err("loss weights", format!("{} weights for {n} rows", w.len())));
            }
            let total: f64 = w.iter().sum::<f64>() * c as f64;
            let wm = Array2::from_shape_fn((n, c), |(i, _)| w[i]);
            let wv = g.constant(wm);
            let weighted = g.mul(sq, wv)?;
            let s = g.sum(weighted);
            Ok(g.scale(s, if total > 0.0 { 1.0 / total } else { 0.0 }))
        }
    }
}

/// Flow-matching loss: per example draw `t ~ U(0,1)` and `ε ~ N(0, I)`, then
/// regress the model's velocity at `z_t` onto `z1 − ε` over all frames.
/// Returns the batch-mean loss and its parameter gradients.
pub fn fm_loss<M: VelocityModel, R: Rng>(
    model: &M,
    batch: &[FlowSample<M::Cond>],
    rng: &mut R,
) -> Result<LossReport> {
    prefix_fm_loss(model, batch, rng, |_| 0)
}

/// [`fm_loss`] where the first `clean(cond)` latent frames of each example
/// stay clean in `z_t` and carry zero loss weight. Random draws are the same
/// as in `fm_loss`, so `clean ≡ 0` reproduces it exactly.
pub fn prefix_fm_loss<M: VelocityModel, R: Rng>(
    model: &M,
    batch: &[FlowSample<M::Cond>],
    rng: &mut R,
    clean: impl Fn(&M::Cond) -> usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("fm_loss needs a nonempty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for sample in batch {
        let t: f64 = rng.random();
        let eps = gaussian_like(sample.z1.dim(), rng);
        let mut z_t = diffuse(&sample.z1, &eps, TimeSample(t))?.z_t;
        let target = target_velocity(&sample.z1, &eps)?;
        let grid = Grid::of(&sample.z1);
        let m = clean(&sample.cond);
        if m > grid.frames {
            return Err(Error::InvalidArgument(format!("{m} clean frames of {}", grid.frames)));
        }
        for i in 0..m {
            z_t.index_axis_mut(ndarray::Axis(0), i).assign(&sample.z1.index_axis(ndarray::Axis(0), i));
        }
        let weights: Option<Vec<f64>> =
            (m > 0).then(|| (0..grid.tokens()).map(|r| f64::from(u8::from(r >= m * grid.tokens_per_frame()))).collect());

        let mut g = Graph::new();
        let zv = g.constant(to_tokens(&z_t));
        let pred = model.velocity(&mut g, zv, grid, &sample.cond, t)?;
        check_finite("model velocity", g.value(pred))?;
        let tv = g.constant(to_tokens(&target.v));
        let l = weighted_mse(&mut g, pred, tv, weights.as_deref())?;
        let lv = g.scalar(l);
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                context: "fm_loss",
                detail: format!("loss {lv} at t={t}"),
            });
        }
        loss += lv * inv_b;
        let gr = g.backward(l)?;
        add_grads(&mut grads, gr.params(&g), inv_b);
    }
    Ok(LossReport { loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, cfg_scale: f64, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        if !(cfg_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("cfg scale {cfg_scale} must be nonnegative")));
        }
        Ok(Self { steps, cfg_scale, seed })
    }

    /// Audio+text guidance for the LR generator: scale 6.5, 30 steps.
    pub fn lr_default(seed: u64) -> Self {
        Self { steps: 30, cfg_scale: 6.5, seed }
    }

    /// Pose guidance for the refiner: scale 1.5, 20 steps.
    pub fn refiner_default(seed: u64) -> Self {
        Self { steps: 20, cfg_scale: 1.5, seed }
    }
}

/// How conditional predictions are combined at each sampling step.
pub enum Guidance<'a, C> {
    /// Conditional prediction only.
    Plain(&'a C),
    /// `v_u + s·(v_c − v_u)`.
    Joint { cond: &'a C, uncond: &'a C, scale: f64 },
    /// Separate text and audio branches:
    /// `v_u + s_text·(v_text − v_u) + s_audio·(v_full − v_text)`.
    TwoBranch {
        full: &'a C,
        text_only: &'a C,
        uncond: &'a C,
        text_scale: f64,
        audio_scale: f64,
    },
}

/// Guided velocity on the tape, so gradients can flow through guidance.
pub fn guided_velocity<M: VelocityModel>(
    g: &mut Graph,
    model: &M,
    guidance: &Guidance<'_, M::Cond>,
    z: Var,
    grid: Grid,
    t: f64,
) -> Result<Var> {
    match guidance {
        Guidance::Plain(c) => model.velocity(g, z, grid, c, t),
        Guidance::Joint { cond, uncond, scale } => {
            let vu = model.velocity(g, z, grid, uncond, t)?;
            if *scale == 1.0 {
                return model.velocity(g, z, grid, cond, t);
            }
            let vc = model.velocity(g, z, grid, cond, t)?;
            let a = g.scale(vu, 1.0 - *scale);
            let b = g.scale(vc, *scale);
            g.add(a, b)
        }
        Guidance::TwoBranch {
            full,
            text_only,
            uncond,
            text_scale,
            audio_scale,
        } => {
            let vu = model.velocity(g, z, grid, uncond, t)?;
            let vt = model.velocity(g, z, grid, text_only, t)?;
            let vf = model.velocity(g, z, grid, full, t)?;
            let dt = g.sub(vt, vu)?;
            let dt = g.scale(dt, *text_scale);
            let da = g.sub(vf, vt)?;
            let da = g.scale(da, *audio_scale);
            let s = g.add(vu, dt)?;
            g.add(s, da)
        }
    }
}

/// Velocity at one state, combined per `guidance`, outside any training graph.
pub fn eval_velocity<M: VelocityModel>(
    model: &M,
    guidance: &Guidance<'_, M::Cond>,
    z: &Array4<f64>,
    t: f64,
) -> Result<Array4<f64>> {
    let grid = Grid::of(z);
    let mut g = Graph::new();
    let zv = g.constant(to_tokens(z));
    let v = guided_velocity(&mut g, model, guidance, zv, grid, t)?;
    from_tokens(g.value(v).clone(), grid.frames, grid.h, grid.w)
}

/// Uniform-step Euler integration of `dz/dt = v(z, t)` from `t = 0` to 1.
/// `project` runs on the initial state and after every step (used to clamp
/// clean prefix latents).
pub fn euler_integrate<M: VelocityModel>(
    model: &M,
    guidance: &Guidance<'_, M::Cond>,
    steps: usize,
    init: Array4<f64>,
    project: &dyn Fn(&mut Array4<f64>),
) -> Result<Array4<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = init;
    project(&mut z);
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = eval_velocity(model, guidance, &z, t)?;
        z.scaled_add(dt, &v);
        project(&mut z);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged { step: k, steps });
        }
    }
    Ok(z)
}

/// Euler sampling with joint classifier-free guidance at `cfg.cfg_scale`.
/// When `init_noise` is `None` it is drawn from `cfg.seed`.
pub fn euler_sample<M: VelocityModel>(
    model: &M,
    cond: &M::Cond,
    uncond: Option<&M::Cond>,
    cfg: &SamplerConfig,
    shape: (usize, usize, usize, usize),
    init_noise: Option<Array4<f64>>,
) -> Result<Array4<f64>> {
    let init = match init_noise {
        Some(n) => {
            if n.dim() != shape {
                return Err(shape_err("init noise", format!("{:?} vs {:?}", n.dim(), shape)));
            }
            n
        }
        None => gaussian_like(shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let guidance = match uncond {
        Some(u) => Guidance::Joint {
            cond,
            uncond: u,
            scale: cfg.cfg_scale,
        },
        None => Guidance::Plain(cond),
    };
    euler_integrate(model, &guidance, cfg.steps, init, &|_| {})
}
