//! Acceptance suite. Each test checks one criterion, prints a PASS/FAIL
//! line and appends it to `acceptance_report.txt` in the test tmp dir.
//! Tests share trained models and run one at a time.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use talkgen::dataset::scene_seed;
use talkgen::RunConfig;
use talkgen_core::autodiff::{Graph, Var};
use talkgen_core::backbone::{embed_prompt, ConditionBundle, Dit, DitConfig, DropFlags, AUDIO_FEATURES};
use talkgen_core::codec::{from_tokens, to_tokens, Codec};
use talkgen_core::eval::{aperture_track, cumulative_windows, hand_tracks, hkc, hkv, identity_drift, pearson, Correlation};
use talkgen_core::flow::{
    diffuse, euler_integrate, euler_sample, fm_loss, gaussian_like, target_velocity, FlowSample, Grid, Guidance,
    SamplerConfig, TimeSample, VelocityModel,
};
use talkgen_core::pose::{fuse, patchify, rasterize, unpatchify, Keypoint, PoseDetector, PoseFrame, PoseSequence, LEFT_HAND, RIGHT_HAND};
use talkgen_core::refiner::{
    degrade, generate_long, loss_mask, low_pass, masked_velocity_loss, prefix_noise_with, refine_chunk, refine_long,
    refiner_loss, seam_audit, ChunkPlan, DegradationConfig, LongConditions, LowPass, PrefixSpec, RefinerCond,
    RefinerModel, RefinerSample,
};
use talkgen_core::reward::{refl_example, refl_step, sample_window, ReflExample, RewardModel, SyntheticHandReward};
use talkgen_core::train::{
    lr_examples, lr_step, refiner_step, refiner_windows, RefinerScene, TrainState,
};
use talkgen_core::world::{make_scene, render, DriftSpec, Layout, Scene, SceneRender, SyntheticDetector};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, pass: bool, detail: &str) {
    let line = format!("AC{id:<2} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.txt");
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn finish(id: u32, pass: bool, detail: String) {
    report(id, pass, &detail);
    assert!(pass, "AC{id}: {detail}");
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() < limit
}

fn randn(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    gaussian_like(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Perturbs every parameter so zero-initialised paths carry gradient too.
fn randomise(params: &mut talkgen_core::params::ParamSet, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in params.0.values_mut() {
        let noise = gaussian_like((1, 1, a.nrows(), a.ncols()), &mut rng);
        for (v, e) in a.iter_mut().zip(noise.iter()) {
            *v += scale * e;
        }
    }
}

// ---------------------------------------------------------------- AC1

#[test]
fn ac01_flow_identities() {
    let _g = serial();
    let start = Instant::now();
    let dim = (3, 4, 4, 5);
    let (z1, eps) = (randn(dim, 1), randn(dim, 2));
    let at0 = diffuse(&z1, &eps, TimeSample::new(0.0).unwrap()).unwrap().z_t;
    let at1 = diffuse(&z1, &eps, TimeSample::new(1.0).unwrap()).unwrap().z_t;
    let endpoints = at0 == eps && at1 == z1;
    let v = target_velocity(&z1, &eps).unwrap().v;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &t in &[0.1, 0.25, 0.5, 0.75, 0.9] {
        let hi = diffuse(&z1, &eps, TimeSample::new(t + h).unwrap()).unwrap().z_t;
        let lo = diffuse(&z1, &eps, TimeSample::new(t - h).unwrap()).unwrap().z_t;
        let fd = (&hi - &lo) / (2.0 * h);
        worst = worst.max((&fd - &v).iter().map(|d| d.abs()).fold(0.0, f64::max));
    }
    let fast = within(start, Duration::from_secs(10));
    finish(
        1,
        endpoints && worst < 1e-6 && fast,
        format!("endpoints exact={endpoints} max|fd-v|={worst:.2e} (<1e-6) time={:.2?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- AC2

fn tiny_dit() -> DitConfig {
    DitConfig {
        in_channels: 2,
        out_channels: 2,
        width: 6,
        heads: 2,
        layers: 1,
        mlp_ratio: 1,
        text_dim: 2,
        audio_dim: AUDIO_FEATURES,
        ref_channels: 2,
        audio_window: 0,
        positional: true,
        audio_mask: true,
    }
}

fn tiny_refiner_config(out: usize) -> DitConfig {
    DitConfig {
        in_channels: 2 * out,
        out_channels: out,
        width: 4,
        heads: 1,
        layers: 1,
        mlp_ratio: 1,
        text_dim: 0,
        audio_dim: 0,
        ref_channels: out,
        audio_window: 0,
        positional: true,
        audio_mask: true,
    }
}

/// Relative error of 20 sampled coordinates against central differences.
fn gradient_check(
    params: &talkgen_core::params::ParamSet,
    analytic: &std::collections::BTreeMap<String, Array2<f64>>,
    loss_at: &dyn Fn(&talkgen_core::params::ParamSet) -> f64,
    seed: u64,
) -> (f64, usize) {
    let coords: Vec<(String, usize)> =
        params.0.iter().flat_map(|(k, a)| (0..a.len()).map(move |i| (k.clone(), i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<_> = coords.choose_multiple(&mut rng, 20).cloned().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, i) in &picks {
        let ix = (*i / params.0[name].ncols(), *i % params.0[name].ncols());
        let mut p = params.clone();
        let base = p.0[name][ix];
        p.0.get_mut(name).unwrap()[ix] = base + h;
        let up = loss_at(&p);
        p.0.get_mut(name).unwrap()[ix] = base - h;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * h);
        let a: f64 = analytic.get(name).map_or(0.0, |g| g[ix]);
        let err = if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            0.0
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        worst = worst.max(err);
    }
    (worst, picks.len())
}

#[test]
fn ac02_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();

    let mut dit = Dit::init(tiny_dit(), 3).unwrap();
    randomise(&mut dit.params, 0.3, 4);
    let (f, h, w) = (3, 2, 2);
    let batch: Vec<FlowSample<ConditionBundle>> = (0..2)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + i);
            FlowSample {
                z1: gaussian_like((f, h, w, 2), &mut rng),
                cond: ConditionBundle {
                    text_emb: embed_prompt("a person talking", 2),
                    audio_feats: Array2::from_shape_simple_fn((f, AUDIO_FEATURES), || rng.random()),
                    ref_latent: gaussian_like((1, h, w, 2), &mut rng),
                    prefix: 1,
                    routing: None,
                    dropped: DropFlags::default(),
                },
            }
        })
        .collect();
    let fm_count = dit.params.count();
    let fm_at = |p: &talkgen_core::params::ParamSet| {
        let mut m = dit.clone();
        m.params = p.clone();
        fm_loss(&m, &batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    };
    let fm_grads = fm_at(&dit.params).grads;
    let (fm_err, n1) = gradient_check(&dit.params, &fm_grads, &|p| fm_at(p).loss, 6);

    let mut refiner = RefinerModel::init(tiny_refiner_config(1), 7).unwrap();
    randomise(&mut refiner.dit.params, 0.3, 8);
    let grid = (4, 2, 2);
    let sample = RefinerSample {
        z_hr: randn((grid.0, grid.1, grid.2, 1), 20),
        cond: RefinerCond {
            z_deglr: randn((grid.0, grid.1, grid.2, 1), 21),
            pose_tokens: randn((grid.0, grid.1, grid.2, 512), 22).mapv(|v| 0.1 * v),
            reference: randn((1, grid.1, grid.2, 1), 23),
            m: 1,
            pose_dropped: false,
        },
    };
    let ref_count = refiner.dit.params.count();
    let ref_at = |p: &talkgen_core::params::ParamSet| {
        let mut m = refiner.clone();
        m.dit.params = p.clone();
        refiner_loss(&m, &sample, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    };
    let ref_grads = ref_at(&refiner.dit.params).grads;
    let (ref_err, n2) = gradient_check(&refiner.dit.params, &ref_grads, &|p| ref_at(p).loss, 10);

    let pass = fm_count <= 1000 && ref_count <= 1000 && fm_err < 1e-3 && ref_err < 1e-3 && within(start, Duration::from_secs(120));
    finish(
        2,
        pass,
        format!(
            "fm_loss: {fm_count} params, max rel err {fm_err:.2e} over {n1}; refiner_loss: {ref_count} params, max rel err {ref_err:.2e} over {n2} (<1e-3) time={:.2?}",
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- AC3

struct ConstantField(Array2<f64>);

impl VelocityModel for ConstantField {
    type Cond = ();

    fn velocity(&self, g: &mut Graph, _z: Var, _grid: Grid, _c: &(), _t: f64) -> talkgen_core::Result<Var> {
        Ok(g.constant(self.0.clone()))
    }
}

/// Marginal velocity of `z_t = (1−t)ε + t·z1` with `z1 ~ N(μ, σ²)`.
struct GaussianField {
    mu: f64,
    sigma: f64,
}

impl VelocityModel for GaussianField {
    type Cond = ();

    fn velocity(&self, g: &mut Graph, z: Var, _grid: Grid, _c: &(), t: f64) -> talkgen_core::Result<Var> {
        let s2 = self.sigma * self.sigma;
        let var = (1.0 - t).powi(2) + t * t * s2;
        let gain = (t * s2 - (1.0 - t)) / var;
        let v = g.value(z).mapv(|z| self.mu + (z - t * self.mu) * gain);
        Ok(g.constant(v))
    }
}

#[test]
fn ac03_sampler_oracle() {
    let _g = serial();
    let start = Instant::now();
    let dim = (2, 3, 3, 4);
    let c = randn(dim, 30);
    let field = ConstantField(to_tokens(&c));
    let init = randn(dim, 31);
    let mut const_err: f64 = 0.0;
    for steps in [1, 5, 30] {
        let cfg = SamplerConfig::new(steps, 1.0, 0).unwrap();
        let out = euler_sample(&field, &(), None, &cfg, dim, Some(init.clone())).unwrap();
        let expect = &init + &c;
        const_err = const_err.max((&out - &expect).iter().map(|d| d.abs()).fold(0.0, f64::max));
    }

    let (mu, sigma) = (1.5, 0.8);
    let n = 10_000;
    let cfg = SamplerConfig::new(30, 1.0, 32).unwrap();
    let out = euler_sample(&GaussianField { mu, sigma }, &(), None, &cfg, (n, 1, 1, 1), None).unwrap();
    let mean = out.sum() / n as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mean_rel = (mean - mu).abs() / mu.abs();
    let var_rel = (var - sigma * sigma).abs() / (sigma * sigma);
    let pass = const_err < 1e-9 && mean_rel < 0.05 && var_rel < 0.05 && within(start, Duration::from_secs(120));
    finish(
        3,
        pass,
        format!(
            "constant-field err {const_err:.2e} (<1e-9); gaussian mean {mean:.4} vs {mu} ({:.1}%), variance {var:.4} vs {:.4} ({:.1}%) (5% each) time={:.2?}",
            100.0 * mean_rel,
            sigma * sigma,
            100.0 * var_rel,
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- AC4

#[test]
fn ac04_prefix_contract() {
    let _g = serial();
    let start = Instant::now();
    let dim = (5, 2, 2, 2);
    let z = randn(dim, 40);
    let eps = randn(dim, 41);
    let mut noising_ok = true;
    for m in 0..dim.0 {
        for &t in &[0.0, 0.3, 0.7, 1.0] {
            let out = prefix_noise_with(&z, TimeSample::new(t).unwrap(), PrefixSpec { m }, &eps).unwrap();
            noising_ok &= out.slice(s![..=m, .., .., ..]) == z.slice(s![..=m, .., .., ..]);
        }
    }

    let mut refiner = RefinerModel::init(tiny_refiner_config(2), 42).unwrap();
    randomise(&mut refiner.dit.params, 0.3, 43);
    let mut sampling_ok = true;
    for m in 0..3 {
        let cond = RefinerCond {
            z_deglr: randn(dim, 44),
            pose_tokens: randn((dim.0, dim.1, dim.2, 512), 45).mapv(|v| 0.1 * v),
            reference: randn((1, dim.1, dim.2, 2), 46),
            m,
            pose_dropped: false,
        };
        let prefix = z.slice(s![..=m, .., .., ..]).to_owned();
        let out = refine_chunk(&refiner, &cond, &prefix, &SamplerConfig::new(6, 1.5, 47).unwrap()).unwrap();
        sampling_ok &= out.slice(s![..=m, .., .., ..]) == prefix;
    }

    let mut grad_zero = true;
    let mut later_live = true;
    let grid = Grid::of(&z);
    for m in 0..dim.0 - 1 {
        let mut g = Graph::new();
        let pred = g.param("pred", &to_tokens(&randn(dim, 48)));
        let target = g.constant(to_tokens(&z));
        let mask = loss_mask(dim.0 - 1, m).unwrap();
        let l = masked_velocity_loss(&mut g, pred, target, grid, &mask).unwrap();
        let grads = g.backward(l).unwrap().params(&g);
        let gp = from_tokens(grads["pred"].clone(), dim.0, dim.1, dim.2).unwrap();
        grad_zero &= gp.slice(s![..=m, .., .., ..]).iter().all(|&v| v == 0.0);
        later_live &= gp.slice(s![m + 1.., .., .., ..]).iter().any(|&v| v != 0.0);
    }

    let mut sums_ok = true;
    for f in 0..=8usize {
        for m in 0..=f {
            let w = loss_mask(f, m).unwrap().w;
            sums_ok &= w.len() == f + 1 && w.iter().sum::<f64>() == (f - m) as f64;
        }
        sums_ok &= loss_mask(f, f + 1).is_err();
    }
    let pass = noising_ok && sampling_ok && grad_zero && later_live && sums_ok && within(start, Duration::from_secs(60));
    finish(
        4,
        pass,
        format!(
            "noising prefix exact={noising_ok} sampling prefix exact={sampling_ok} prefix grad zero={grad_zero} (later rows live={later_live}) mask sums={sums_ok} time={:.2?}",
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- AC5

#[test]
fn ac05_pose_shapes() {
    let _g = serial();
    let start = Instant::now();
    let scene = make_scene(50, 13, None).unwrap();
    let r = render(&scene);
    let raster = rasterize(&r.pose, 13, 32, 32, 1.5).unwrap();
    let tokens = patchify(&raster).unwrap();
    let shapes = raster.dim() == (13, 32, 32, 8) && tokens.dim() == (4, 8, 8, 512);

    let noise = randn((13, 32, 32, 8), 51);
    let back = unpatchify(&patchify(&noise).unwrap()).unwrap();
    let round_trip = back.dim() == noise.dim() && back.slice(s![1..13, .., .., ..]) == noise.slice(s![1..13, .., .., ..]);

    let z = randn((4, 8, 8, 192), 52);
    let fused = fuse(&z, &tokens, &Array2::zeros((512, 192)), &Array2::zeros((1, 192))).unwrap();
    let identity = fused == z;
    finish(
        5,
        shapes && round_trip && identity && within(start, Duration::from_secs(60)),
        format!(
            "raster {:?} -> tokens {:?}; round trip frames 1..12 exact={round_trip}; zero fuse identity={identity} time={:.2?}",
            raster.dim(),
            tokens.dim(),
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- AC6

/// Spectral energy of every plane by a direct O(n²) DFT.
fn dft_energy(z: &Array4<f64>, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let (f, h, w, c) = z.dim();
    let mut total = 0.0;
    for fi in 0..f {
        for ch in 0..c {
            for ky in 0..h {
                for kx in 0..w {
                    if !keep(ky, kx) {
                        continue;
                    }
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = -2.0 * std::f64::consts::PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                            re += z[[fi, y, x, ch]] * ang.cos();
                            im += z[[fi, y, x, ch]] * ang.sin();
                        }
                    }
                    total += re * re + im * im;
                }
            }
        }
    }
    total
}

#[test]
fn ac06_degradation_spectrum() {
    let _g = serial();
    let start = Instant::now();
    let z = randn((2, 8, 8, 16), 60);
    let clean = DegradationConfig { alpha_deg: 0.0, ..DegradationConfig::default() };
    let out = degrade(&z, &clean, &mut ChaCha8Rng::seed_from_u64(61)).unwrap();
    let (h, w) = (8usize, 8usize);
    let cut = clean.cutoff_frac * h as f64 / 2.0;
    let fold = |k: usize, n: usize| k.min(n - k) as f64;
    let above = dft_energy(&out, |ky, kx| fold(ky, h) > cut || fold(kx, w) > cut);
    let total = dft_energy(&out, |_, _| true);
    let ratio = above / total;

    let big = randn((5, 16, 16, 80), 62);
    let noisy = DegradationConfig { alpha_deg: 0.7, sigma: 1.0, ..DegradationConfig::default() };
    let deg = degrade(&big, &noisy, &mut ChaCha8Rng::seed_from_u64(63)).unwrap();
    let residual = &deg - &low_pass(&big, noisy.cutoff_frac, LowPass::Ideal);
    let n = residual.len() as f64;
    let mean = residual.sum() / n;
    let var = residual.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let var_rel = (var - 0.49).abs() / 0.49;
    finish(
        6,
        ratio < 1e-10 && var_rel < 0.05 && n >= 1e5 && within(start, Duration::from_secs(60)),
        format!(
            "energy above cutoff {ratio:.2e} of total (<1e-10); residual variance {var:.4} vs 0.49 ({:.2}%) over {n} elements time={:.2?}",
            100.0 * var_rel,
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- AC7

#[test]
fn ac07_chunk_seams() {
    let _g = serial();
    let start = Instant::now();
    let cfg = RunConfig::default();
    let mut lr = Dit::init(cfg.lr_dit(), 70).unwrap();
    randomise(&mut lr.params, 0.05, 71);
    let mut refiner = RefinerModel::init(cfg.refiner_dit(), 72).unwrap();
    randomise(&mut refiner.dit.params, 0.05, 73);
    let plan = ChunkPlan::new(ChunkPlan::latents_for(3, 4, 1), 4, 1).unwrap();
    let frames = talkgen_core::codec::pixel_frames_for(plan.total);
    let scene = make_scene(74, frames, None).unwrap();
    let r = render(&scene);
    let det = SyntheticDetector::new(scene.palette.clone());
    let conds = LongConditions {
        text_emb: embed_prompt(&scene.prompt, cfg.lr_model.text_dim),
        audio: scene.audio.clone(),
        ref_lr: r.lr.index_axis(Axis(0), 0).to_owned(),
        ref_hr: r.hr.index_axis(Axis(0), 0).to_owned(),
        detector: &det,
    };
    let video = generate_long(&lr, &refiner, &conds, plan, &cfg.samplers(75)).unwrap();
    let seams = seam_audit(&plan, &video.hr_chunks).unwrap();
    let latent = seams.iter().map(|c| c.latent_diff).fold(0.0, f64::max);
    let pixel = seams.iter().map(|c| c.frame_diff).fold(0.0, f64::max);
    let pass = plan.chunks().len() == 3 && seams.len() == 2 && latent == 0.0 && pixel == 0.0 && within(start, Duration::from_secs(300));
    finish(
        7,
        pass,
        format!(
            "{} chunks, {} seams, max shared-latent diff {latent:e}, max overlap frame diff {pixel:e} time={:.2?}",
            plan.chunks().len(),
            seams.len(),
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- shared training

struct Trained {
    lr: Dit,
    lr_time: Duration,
    refiner: RefinerModel,
    refiner_time: Duration,
    scenes: Vec<(Scene, SceneRender)>,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let cfg = RunConfig::default();
        let scenes: Vec<(Scene, SceneRender)> = (0..cfg.world.num_scenes)
            .map(|i| {
                let s = make_scene(scene_seed(cfg.seed, i), cfg.world.duration, None).unwrap();
                let r = render(&s);
                (s, r)
            })
            .collect();

        let start = Instant::now();
        let codec = Codec::lr();
        let mut data = Vec::new();
        for (s, r) in &scenes {
            data.extend(lr_examples(s, r, &codec, cfg.lr_model.text_dim, cfg.chunk_len(), cfg.world.overlap).unwrap());
        }
        let tc = cfg.train_config(&cfg.train_lr);
        let mut lr = Dit::init(cfg.lr_dit(), cfg.lr_model.init_seed).unwrap();
        let mut st = TrainState::new(tc.adam);
        while st.step < tc.steps {
            lr_step(&mut lr, &data, &tc, &mut st).unwrap();
        }
        let lr_time = start.elapsed();

        let start = Instant::now();
        let rscenes: Vec<RefinerScene> = scenes.iter().map(|(s, r)| RefinerScene::new(s, r).unwrap()).collect();
        let rcfg = cfg.refiner_train();
        let windows = refiner_windows(&rscenes, &rcfg).unwrap();
        let tc = cfg.train_config(&cfg.train_refiner.phase);
        let mut refiner = RefinerModel::init(cfg.refiner_dit(), cfg.refiner_model.init_seed).unwrap();
        let mut st = TrainState::new(tc.adam);
        while st.step < tc.steps {
            refiner_step(&mut refiner, &rscenes, &windows, &tc, &rcfg, &mut st).unwrap();
        }
        let refiner_time = start.elapsed();
        Trained { lr, lr_time, refiner, refiner_time, scenes }
    })
}

// ---------------------------------------------------------------- AC8

fn defined(c: Correlation) -> Option<f64> {
    c.value()
}

#[test]
fn ac08_lipsync_direction() {
    let _g = serial();
    let cfg = RunConfig::default();
    let models = trained();
    let codec = Codec::lr();
    let layout = Layout::default();
    let mut per_seed = Vec::new();
    let mut skipped = 0;
    for seed in 0..5u64 {
        let (mut true_sum, mut shuf_sum, mut n) = (0.0, 0.0, 0);
        for i in 0..8u64 {
            let scene = make_scene(10_000 + 100 * seed + i, 13, None).unwrap();
            let r = render(&scene);
            let ex = &lr_examples(&scene, &r, &codec, cfg.lr_model.text_dim, cfg.chunk_len(), cfg.world.overlap).unwrap()[0];
            let z0 = ex.z1.slice(s![0..1, .., .., ..]).to_owned();
            let uncond = ex.cond.without_text_audio();
            let guidance = Guidance::Joint { cond: &ex.cond, uncond: &uncond, scale: cfg.sampler.lr.cfg_scale };
            let init = randn(ex.z1.dim(), 1000 * seed + i);
            let clamp = |z: &mut Array4<f64>| z.slice_mut(s![0..1, .., .., ..]).assign(&z0);
            let out = euler_integrate(&models.lr, &guidance, cfg.sampler.lr.steps, init, &clamp).unwrap();
            let frames = codec.decode_frames(&out, true).unwrap();
            let ap = aperture_track(&frames, &layout, &scene.palette);
            let Some(c_true) = defined(pearson(&ap[1..], &scene.audio[1..]).unwrap()) else {
                skipped += 1;
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + 1000 * seed + i);
            let mut shuffled = Vec::new();
            for _ in 0..10 {
                let mut a = scene.audio[1..].to_vec();
                a.shuffle(&mut rng);
                if let Some(c) = defined(pearson(&ap[1..], &a).unwrap()) {
                    shuffled.push(c);
                }
            }
            true_sum += c_true;
            shuf_sum += shuffled.iter().sum::<f64>() / shuffled.len() as f64;
            n += 1;
        }
        per_seed.push(if n == 0 { f64::NAN } else { (true_sum - shuf_sum) / n as f64 });
    }
    let wins = per_seed.iter().filter(|d| **d >= 0.2).count();
    let budget = models.lr_time < Duration::from_secs(20 * 60);
    finish(
        8,
        wins == 5 && budget,
        format!(
            "true-minus-shuffled correlation per seed {:?} (>=0.2 in {wins}/5, {skipped} constant-aperture scenes skipped); training {:.0?} (<=20 min)",
            per_seed.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            models.lr_time
        ),
    );
}

// ---------------------------------------------------------------- AC9

#[test]
fn ac09_refiner_drift() {
    let _g = serial();
    let cfg = RunConfig::default();
    let models = trained();
    let start = Instant::now();
    let layout = Layout::default();
    let window = cfg.eval.window;
    let mut ratios = Vec::new();
    for i in 0..20u64 {
        let scene = make_scene(20_000 + i, cfg.world.duration, Some(DriftSpec::gain(0.01))).unwrap();
        let r = render(&scene);
        let ref_lr = r.lr.index_axis(Axis(0), 0).to_owned();
        let ref_hr = r.hr.index_axis(Axis(0), 0).to_owned();
        let det = SyntheticDetector::new(scene.palette.clone());
        let conds = LongConditions {
            text_emb: embed_prompt(&scene.prompt, cfg.lr_model.text_dim),
            audio: scene.audio.clone(),
            ref_lr: ref_lr.clone(),
            ref_hr: ref_hr.clone(),
            detector: &det,
        };
        let lrz = Codec::lr().encode_frames(&r.lr, true).unwrap();
        let plan = ChunkPlan::new(lrz.dim().0, cfg.chunk_len(), cfg.world.overlap).unwrap();
        let out = refine_long(&models.refiner, &lrz, &conds, plan, &cfg.samplers(i)).unwrap();
        let din = *identity_drift(&r.lr, &ref_lr, window, &layout).unwrap().last().unwrap();
        let dout = *identity_drift(&out.frames, &ref_hr, window, &layout).unwrap().last().unwrap();
        ratios.push(dout / din);
    }
    let ok = ratios.iter().filter(|r| **r <= 0.5).count();
    let total = models.refiner_time + start.elapsed();
    let pass = ok * 10 >= 9 * ratios.len() && total < Duration::from_secs(30 * 60);
    finish(
        9,
        pass,
        format!(
            "final-window drift ratio <=0.5 in {ok}/{} scenes (need 90%), ratios {:?}; training+eval {:.0?} (<=30 min)",
            ratios.len(),
            ratios.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            total
        ),
    );
}

// ---------------------------------------------------------------- AC10

/// Held-out mean reward and detector HKC over frames after the reference.
fn refl_eval(model: &Dit, held: &[(Scene, ReflExample)], reward: &SyntheticHandReward, cfg: &RunConfig, seed: u64) -> (f64, f64) {
    let codec = Codec::lr();
    let (mut rs, mut hs) = (0.0, 0.0);
    for (i, (scene, ex)) in held.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(777 + 1000 * seed + i as u64);
        let z = sample_window(model, &ex.sample.cond, &ex.sample.z1, cfg.sampler.lr.steps, cfg.sampler.lr.cfg_scale, &mut rng).unwrap();
        let frames = codec.decode_frames(&z, true).unwrap();
        let n = frames.dim().0;
        let mut r = 0.0;
        for t in 1..n {
            let frame: Array3<f64> = frames.index_axis(Axis(0), t).to_owned();
            r += reward.score(&frame, &ex.context.frame(t).unwrap()).unwrap();
        }
        rs += r / (n - 1) as f64;
        let det = SyntheticDetector::new(scene.palette.clone());
        hs += hkc(&det.detect(&frames.slice(s![1.., .., .., ..]).to_owned()).unwrap()).unwrap();
    }
    (rs / held.len() as f64, hs / held.len() as f64)
}

#[test]
fn ac10_refl_improvement() {
    let _g = serial();
    let cfg = RunConfig::default();
    let models = trained();
    let reward = SyntheticHandReward::default();
    let train: Vec<ReflExample> = models
        .scenes
        .iter()
        .map(|(s, r)| refl_example(s, r, cfg.lr_model.text_dim, cfg.chunk_len()).unwrap())
        .collect();
    let samples: Vec<_> = train.iter().map(|e| e.sample.clone()).collect();
    let held: Vec<(Scene, ReflExample)> = (30_000..30_008u64)
        .map(|seed| {
            let s = make_scene(seed, 13, None).unwrap();
            let r = render(&s);
            let ex = refl_example(&s, &r, cfg.lr_model.text_dim, cfg.chunk_len()).unwrap();
            (s, ex)
        })
        .collect();
    let rc = cfg.refl_config();
    let mut lines = Vec::new();
    let (mut reward_wins, mut hkc_wins) = (0, 0);
    for seed in 0..5u64 {
        let mut phase = cfg.refl.phase.clone();
        phase.seed += seed;
        let tc = cfg.train_config(&phase);
        let (r0, _) = refl_eval(&models.lr, &held, &reward, &cfg, seed);

        let mut tuned = models.lr.clone();
        let mut st = TrainState::new(tc.adam);
        while st.step < tc.steps {
            refl_step(&mut tuned, &reward, &mut st, &train, &tc, &rc).unwrap();
        }
        let (r1, h1) = refl_eval(&tuned, &held, &reward, &cfg, seed);

        let mut plain = models.lr.clone();
        let mut st = TrainState::new(tc.adam);
        while st.step < tc.steps {
            lr_step(&mut plain, &samples, &tc, &mut st).unwrap();
        }
        let (_, h2) = refl_eval(&plain, &held, &reward, &cfg, seed);

        reward_wins += usize::from(r1 > r0);
        hkc_wins += usize::from(h1 > h2);
        lines.push(format!("seed {seed}: reward {r1:.3} vs base {r0:.3}, hkc {h1:.3} vs {h2:.3}"));
    }
    finish(
        10,
        reward_wins >= 4 && hkc_wins == 5,
        format!("reward above baseline in {reward_wins}/5 (need 4), HKC above no-REFL in {hkc_wins}/5; {}", lines.join("; ")),
    );
}

// ---------------------------------------------------------------- AC11

fn random_pose(seed: u64, frames: usize, missing: bool) -> PoseSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..frames)
        .map(|_| {
            let mut f = PoseFrame::empty();
            for g in [LEFT_HAND, RIGHT_HAND] {
                f.groups[g] = (0..5)
                    .map(|_| {
                        (!missing || rng.random::<f64>() > 0.2).then(|| Keypoint {
                            x: rng.random_range(0.0..31.0),
                            y: rng.random_range(0.0..31.0),
                            confidence: rng.random(),
                        })
                    })
                    .collect();
            }
            f
        })
        .collect();
    PoseSequence::new(32, 32, frames)
}

#[test]
fn ac11_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let seq = random_pose(seed, 12, true);
        let confs: Vec<f64> = seq
            .frames
            .iter()
            .flat_map(|f| f.groups[LEFT_HAND].iter().chain(&f.groups[RIGHT_HAND]))
            .map(|k| k.map_or(0.0, |k| k.confidence))
            .collect();
        let naive_hkc = confs.iter().sum::<f64>() / confs.len() as f64;
        worst = worst.max((hkc(&seq).unwrap() - naive_hkc).abs());

        let full = random_pose(100 + seed, 12, false);
        let tracks = hand_tracks(&full);
        let mut naive_hkv = 0.0;
        for k in 0..10 {
            for c in 0..2 {
                let xs: Vec<f64> = full
                    .frames
                    .iter()
                    .map(|f| {
                        let kp = if k < 5 { f.groups[LEFT_HAND][k] } else { f.groups[RIGHT_HAND][k - 5] }.unwrap();
                        if c == 0 { kp.x } else { kp.y }
                    })
                    .collect();
                let t = xs.len() as f64;
                let pairs: f64 = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).powi(2))).sum();
                naive_hkv += pairs / (2.0 * t * t);
            }
        }
        worst = worst.max((hkv(&tracks).unwrap() - naive_hkv).abs() / naive_hkv.max(1.0));
    }

    let video = randn((10, 4, 4, 3), 110);
    let metric = |v: &Array4<f64>| Ok(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64);
    let series = cumulative_windows(metric, &video, 3).unwrap();
    let mut naive = Vec::new();
    for k in 1..=3 {
        let frames: Vec<_> = (0..3 * k).map(|t| video.index_axis(Axis(0), t).to_owned()).collect();
        let (mut sum, mut n) = (0.0, 0.0);
        for f in &frames {
            for x in f {
                sum += x * x;
                n += 1.0;
            }
        }
        naive.push(sum / n);
    }
    let cum_ok = series.len() == 3;
    for (a, b) in series.iter().zip(&naive) {
        worst = worst.max((a - b).abs());
    }

    let mut still = random_pose(120, 1, false);
    let first = still.frames[0].clone();
    still.frames = vec![first; 9];
    let static_hkv = hkv(&hand_tracks(&still)).unwrap();
    let pass = worst < 1e-12 && cum_ok && static_hkv == 0.0 && within(start, Duration::from_secs(60));
    finish(
        11,
        pass,
        format!("max deviation from brute force {worst:.2e} (<1e-12); static-hand HKV {static_hkv:e}; time={:.2?}", start.elapsed()),
    );
}

// ---------------------------------------------------------------- AC12

fn talkgen(root: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_talkgen"))
        .arg("--data-root")
        .arg(root)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("run talkgen");
    assert!(out.status.success(), "talkgen {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn ac12_reproducible_generation() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    talkgen(root, &["dataset", "--num-scenes", "2", "--duration", "13"]);
    talkgen(root, &["--set", "world.duration=13", "train-lr", "--steps", "3"]);
    talkgen(root, &["--set", "world.duration=13", "train-refiner", "--steps", "3"]);
    let gen = ["generate", "--duration", "25", "--scene-seed", "7", "--seed", "11", "--out"];
    talkgen(root, &[&gen[..], &["gen_a"]].concat());
    talkgen(root, &[&gen[..], &["gen_b"]].concat());
    let first = snapshot(&root.join("gen_a"));
    talkgen(root, &[&["--force"][..], &gen[..], &["gen_a"]].concat());
    let again = snapshot(&root.join("gen_a"));
    let other = snapshot(&root.join("gen_b"));
    let frames = first.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count();
    let has_manifest = first.iter().any(|(p, _)| p == Path::new("manifest.json"));
    let pass = frames == 25 && has_manifest && first == again && first == other;
    finish(
        12,
        pass,
        format!(
            "{} files ({frames} frames, manifest={has_manifest}); rerun in place identical={}; separate directory identical={}",
            first.len(),
            first == again,
            first == other
        ),
    );
}
