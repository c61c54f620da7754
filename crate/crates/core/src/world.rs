//! Procedural talking-character scenes with exact ground truth.
//!
//! Geometry lives in HR pixel units on a 128×128 canvas, where pixel `(i, j)`
//! covers `[j, j+1) × [i, i+1)`. LR frames are the HR render box-averaged by
//! 4. Keypoints are reported in LR raster coordinates (pixel centres at
//! integers), which is the grid the pose raster uses.

use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{downsample, TEMPORAL_FACTOR};
use crate::error::{Error, Result};
use crate::pose::{Keypoint, PoseFrame, PoseSequence};

pub type Rgb = [f64; 3];

/// Fixed body layout in HR pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub hr_size: usize,
    pub lr_factor: usize,
    pub head_center: [f64; 2],
    pub head_radius: f64,
    pub mouth_center: [f64; 2],
    pub mouth_width: f64,
    pub mouth_min: f64,
    pub mouth_max: f64,
    /// `x0, y0, x1, y1`
    pub torso: [f64; 4],
    pub shoulders: [[f64; 2]; 2],
    pub arm_length: f64,
    pub arm_radius: f64,
    pub hand_radius: f64,
    /// Region used for identity-drift histograms, `x0, y0, x1, y1`.
    pub character_box: [f64; 4],
    pub anchors: Vec<[f64; 2]>,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            hr_size: 128,
            lr_factor: 4,
            head_center: [64.0, 40.0],
            head_radius: 26.0,
            mouth_center: [64.0, 48.0],
            mouth_width: 24.0,
            mouth_min: 2.0,
            mouth_max: 20.0,
            torso: [34.0, 62.0, 94.0, 128.0],
            shoulders: [[40.0, 76.0], [88.0, 76.0]],
            arm_length: 30.0,
            arm_radius: 5.0,
            hand_radius: 8.0,
            character_box: [32.0, 12.0, 96.0, 128.0],
            anchors: vec![
                [10.0, 10.0],
                [118.0, 10.0],
                [10.0, 38.0],
                [118.0, 38.0],
                [22.0, 118.0],
                [106.0, 118.0],
                [30.0, 4.0],
                [98.0, 4.0],
            ],
        }
    }
}

impl Layout {
    pub fn lr_size(&self) -> usize {
        self.hr_size / self.lr_factor
    }

    /// Mouth-bar height in HR pixels for an aperture in `[0, 1]`.
    pub fn mouth_height(&self, aperture: f64) -> f64 {
        self.mouth_min + aperture.clamp(0.0, 1.0) * (self.mouth_max - self.mouth_min)
    }

    /// HR continuous point → LR raster coordinate.
    pub fn to_lr(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.lr_factor as f64;
        [p[0] / s - 0.5, p[1] / s - 0.5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: Rgb,
    pub mouth: Rgb,
    pub shirt: Rgb,
    pub glove: Rgb,
    pub background: Rgb,
    pub accent: Rgb,
    pub marker: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Brightness gain per frame: frame `k` is scaled by `1 + gain·k`.
    pub gain: f64,
    /// Hue rotation per frame in radians about the grey axis.
    pub hue: f64,
}

impl DriftSpec {
    pub fn gain(gain: f64) -> Self {
        Self { gain, hue: 0.0 }
    }
}

/// Hand angles follow `θ(t) = θ0 + κ·env(t)`, where `env` smooths the audio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gesture {
    pub theta0: [f64; 2],
    pub kappa: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub freq: [f64; 2],
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub frames: usize,
    pub palette: Palette,
    pub audio: Vec<f64>,
    pub gesture: Gesture,
    pub texture: Texture,
    pub prompt: String,
    pub drift: Option<DriftSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandTemplate {
    /// Centre in HR continuous coordinates.
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub hr: Array4<f64>,
    pub lr: Array4<f64>,
    pub pose: PoseSequence,
    pub aperture: Vec<f64>,
    pub hands: Vec<[HandTemplate; 2]>,
}

const SHIRTS: [(&str, Rgb); 5] = [
    ("red", [0.75, 0.2, 0.2]),
    ("green", [0.2, 0.65, 0.25]),
    ("blue", [0.2, 0.3, 0.8]),
    ("purple", [0.55, 0.25, 0.7]),
    ("teal", [0.15, 0.6, 0.6]),
];
const GLOVES: [(&str, Rgb); 3] = [
    ("white", [0.85, 0.85, 0.85]),
    ("yellow", [0.85, 0.8, 0.1]),
    ("orange", [0.85, 0.5, 0.1]),
];

fn jitter<R: Rng>(rng: &mut R, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.05, 0.85))
}

/// Smoothed audio envelope driving the gestures.
pub fn envelope(audio: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(audio.len());
    let mut e = audio.first().copied().unwrap_or(0.0);
    for &a in audio {
        e = 0.5 * e + 0.5 * a;
        out.push(e);
    }
    out
}

/// A band-limited amplitude track in `[0, 1]`: three random low-frequency
/// sinusoids, offset and clipped.
pub fn audio_track<R: Rng>(rng: &mut R, frames: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.04..0.22), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)))
        .collect();
    let total: f64 = comps.iter().map(|c| c.2).sum();
    (0..frames)
        .map(|t| {
            let raw: f64 = comps.iter().map(|(f, p, w)| w * (2.0 * PI * f * t as f64 + p).sin()).sum::<f64>() / total;
            (0.5 + 0.6 * raw).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn valid_duration(frames: usize) -> bool {
    frames >= 1 && (frames - 1) % TEMPORAL_FACTOR == 0
}

pub fn make_scene(seed: u64, frames: usize, drift: Option<DriftSpec>) -> Result<Scene> {
    if !valid_duration(frames) {
        return Err(Error::InvalidArgument(format!("scene duration {frames} is not 4f+1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shirt_name, shirt) = SHIRTS[rng.random_range(0..SHIRTS.len())];
    let (glove_name, glove) = GLOVES[rng.random_range(0..GLOVES.len())];
    let grey = rng.random_range(0.3..0.45);
    let palette = Palette {
        skin: jitter(&mut rng, [0.8, 0.62, 0.48], 0.04),
        mouth: jitter(&mut rng, [0.35, 0.08, 0.1], 0.02),
        shirt: jitter(&mut rng, shirt, 0.04),
        glove,
        background: jitter(&mut rng, [grey, grey, grey + 0.03], 0.03),
        accent: jitter(&mut rng, [0.08, 0.08, 0.06], 0.02),
        marker: jitter(&mut rng, [0.15, 0.15, 0.2], 0.03),
    };
    let gesture = Gesture {
        theta0: [rng.random_range(1.75..2.25), rng.random_range(1.75..2.25)],
        kappa: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
    };
    let texture = Texture {
        freq: [rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)],
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let audio = audio_track(&mut rng, frames);
    Ok(Scene {
        seed,
        frames,
        palette,
        audio,
        gesture,
        texture,
        prompt: format!("{shirt_name} shirt {glove_name} gloves"),
        drift,
    })
}

fn rect_coverage(px: f64, py: f64, r: [f64; 4]) -> f64 {
    let ox = ((px + 1.0).min(r[2]) - px.max(r[0])).max(0.0);
    let oy = ((py + 1.0).min(r[3]) - py.max(r[1])).max(0.0);
    ox * oy
}

fn sdf_coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p[0] - a[0] - u * dx).powi(2) + (p[1] - a[1] - u * dy).powi(2)).sqrt()
}

fn blend(dst: &mut Rgb, src: Rgb, cov: f64) {
    if cov > 0.0 {
        for c in 0..3 {
            dst[c] = cov * src[c] + (1.0 - cov) * dst[c];
        }
    }
}

/// Rotation about the grey axis; preserves the channel sum.
pub fn hue_rotate(c: Rgb, angle: f64) -> Rgb {
    let (s, co) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let axis = [k, k, k];
    let dot: f64 = c.iter().zip(axis).map(|(a, b)| a * b).sum();
    let cross = [
        axis[1] * c[2] - axis[2] * c[1],
        axis[2] * c[0] - axis[0] * c[2],
        axis[0] * c[1] - axis[1] * c[0],
    ];
    [0, 1, 2].map(|i| c[i] * co + cross[i] * s + axis[i] * dot * (1.0 - co))
}

/// Applies a drift spec to frame index `k` of an HR or LR video in place.
pub fn apply_drift(frames: &mut Array4<f64>, drift: DriftSpec) {
    let (n, h, w, _) = frames.dim();
    for k in 0..n {
        let g = 1.0 + drift.gain * k as f64;
        let angle = drift.hue * k as f64;
        for i in 0..h {
            for j in 0..w {
                let c = [frames[[k, i, j, 0]] * g, frames[[k, i, j, 1]] * g, frames[[k, i, j, 2]] * g];
                let c = if angle != 0.0 { hue_rotate(c, angle) } else { c };
                for ch in 0..3 {
                    frames[[k, i, j, ch]] = c[ch].clamp(0.0, 1.0);
                }
            }
        }
    }
}

pub struct Pose2 {
    pub hands: [[f64; 2]; 2],
    pub elbows: [[f64; 2]; 2],
    pub dirs: [[f64; 2]; 2],
}

/// Hand positions at frame `t` (HR continuous coordinates).
pub fn arm_pose(layout: &Layout, gesture: &Gesture, env: f64) -> Pose2 {
    let mut hands = [[0.0; 2]; 2];
    let mut elbows = [[0.0; 2]; 2];
    let mut dirs = [[0.0; 2]; 2];
    for side in 0..2 {
        let theta = gesture.theta0[side] + gesture.kappa[side] * env;
        // left arm swings out to −x, right arm mirrors it
        let dx = if side == 0 { theta.cos() } else { -theta.cos() };
        let dir = [dx, theta.sin()];
        let s = layout.shoulders[side];
        hands[side] = [s[0] + layout.arm_length * dir[0], s[1] + layout.arm_length * dir[1]];
        elbows[side] = [s[0] + 0.5 * layout.arm_length * dir[0], s[1] + 0.5 * layout.arm_length * dir[1]];
        dirs[side] = dir;
    }
    Pose2 { hands, elbows, dirs }
}

fn darker(c: Rgb) -> Rgb {
    c.map(|v| v * 0.8)
}

/// Renders one undrifted HR frame with mouth aperture `aperture` and gesture
/// envelope `env`.
pub fn render_frame(layout: &Layout, scene: &Scene, aperture: f64, env: f64) -> Array3<f64> {
    let n = layout.hr_size;
    let p = &scene.palette;
    let arms = arm_pose(layout, &scene.gesture, env);
    let mh = layout.mouth_height(aperture);
    let mouth = [
        layout.mouth_center[0] - layout.mouth_width / 2.0,
        layout.mouth_center[1] - mh / 2.0,
        layout.mouth_center[0] + layout.mouth_width / 2.0,
        layout.mouth_center[1] + mh / 2.0,
    ];
    let mut out = Array3::zeros((n, n, 3));
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64, i as f64);
            let c = [x + 0.5, y + 0.5];
            let wave = 0.5
                + 0.5 * (scene.texture.freq[0] * c[0] + scene.texture.freq[1] * c[1] + scene.texture.phase).sin()
                    * (0.07 * c[1] - scene.texture.phase).cos();
            let mut px = [0, 1, 2].map(|k| p.background[k] + p.accent[k] * wave);
            for a in &layout.anchors {
                blend(&mut px, p.marker, rect_coverage(x, y, [a[0] - 2.0, a[1] - 2.0, a[0] + 2.0, a[1] + 2.0]));
            }
            blend(&mut px, p.shirt, rect_coverage(x, y, layout.torso));
            for side in 0..2 {
                let d = seg_dist(c, layout.shoulders[side], arms.hands[side]) - layout.arm_radius;
                blend(&mut px, darker(p.shirt), sdf_coverage(d));
            }
            let dh = ((c[0] - layout.head_center[0]).powi(2) + (c[1] - layout.head_center[1]).powi(2)).sqrt();
            blend(&mut px, p.skin, sdf_coverage(dh - layout.head_radius));
            blend(&mut px, p.mouth, rect_coverage(x, y, mouth));
            for side in 0..2 {
                let h = arms.hands[side];
                let d = ((c[0] - h[0]).powi(2) + (c[1] - h[1]).powi(2)).sqrt();
                blend(&mut px, p.glove, sdf_coverage(d - layout.hand_radius));
            }
            for k in 0..3 {
                out[[i, j, k]] = px[k];
            }
        }
    }
    out
}

fn lr_kp(layout: &Layout, p: [f64; 2]) -> Option<Keypoint> {
    let q = layout.to_lr(p);
    let max = layout.lr_size() as f64 - 1.0;
    Some(Keypoint {
        x: q[0].clamp(0.0, max),
        y: q[1].clamp(0.0, max),
        confidence: 1.0,
    })
}

pub fn pose_frame(layout: &Layout, gesture: &Gesture, aperture: f64, env: f64) -> PoseFrame {
    let arms = arm_pose(layout, gesture, env);
    let mh = layout.mouth_height(aperture);
    let [mx, my] = layout.mouth_center;
    let t = layout.torso;
    let kp = |p| lr_kp(layout, p);
    let mut f = PoseFrame::empty();
    f.groups[0] = vec![kp(layout.head_center), kp([mx, my - mh / 2.0]), kp([mx, my + mh / 2.0])];
    f.groups[1] = vec![
        kp([(t[0] + t[2]) / 2.0, t[1]]),
        kp([(t[0] + t[2]) / 2.0, (t[1] + t[3]) / 2.0]),
        kp([t[0] + 10.0, t[3] - 6.0]),
        kp([t[2] - 10.0, t[3] - 6.0]),
    ];
    for side in 0..2 {
        f.groups[2 + side] = vec![kp(layout.shoulders[side]), kp(arms.elbows[side])];
        let h = arms.hands[side];
        let d = arms.dirs[side];
        f.groups[4 + side] = vec![kp(h), kp([h[0] + layout.hand_radius * d[0], h[1] + layout.hand_radius * d[1]])];
    }
    f.groups[6] = vec![kp([t[0] + 14.0, t[3] - 2.0]), kp([t[2] - 14.0, t[3] - 2.0])];
    f.background = layout.anchors.iter().map(|a| layout.to_lr(*a)).collect();
    f
}

/// Mouth aperture as a function of audio amplitude (monotone, `g(0) = 0`).
pub fn aperture_of(amplitude: f64) -> f64 {
    amplitude.clamp(0.0, 1.0)
}

pub fn render(scene: &Scene) -> SceneRender {
    render_with(&Layout::default(), scene)
}

pub fn render_with(layout: &Layout, scene: &Scene) -> SceneRender {
    let n = layout.hr_size;
    let env = envelope(&scene.audio);
    let aperture: Vec<f64> = scene.audio.iter().map(|a| aperture_of(*a)).collect();
    let mut hr = Array4::zeros((scene.frames, n, n, 3));
    let mut poses = Vec::with_capacity(scene.frames);
    let mut hands = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let frame = render_frame(layout, scene, aperture[t], env[t]);
        hr.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
        poses.push(pose_frame(layout, &scene.gesture, aperture[t], env[t]));
    }
    hands.extend(hand_templates(layout, scene));
    if let Some(d) = scene.drift {
        apply_drift(&mut hr, d);
    }
    let lr = downsample(&hr, layout.lr_factor);
    SceneRender {
        hr,
        lr,
        pose: PoseSequence::new(layout.lr_size(), layout.lr_size(), poses),
        aperture,
        hands,
    }
}

/// Ground-truth hand templates of every frame.
pub fn hand_templates(layout: &Layout, scene: &Scene) -> Vec<[HandTemplate; 2]> {
    envelope(&scene.audio)
        .iter()
        .map(|e| {
            arm_pose(layout, &scene.gesture, *e).hands.map(|c| HandTemplate {
                center: c,
                radius: layout.hand_radius,
            })
        })
        .collect()
}

/// Reads the mouth-bar height back from a frame of any size `k·32`: each
/// pixel in the mouth window is projected onto the skin→mouth colour axis,
/// weighted by its closeness to that axis, and the per-row means are summed.
pub fn aperture_from_frame(frame: &Array3<f64>, layout: &Layout, palette: &Palette) -> f64 {
    let (h, w, _) = frame.dim();
    let s = w as f64 / layout.hr_size as f64;
    let axis: Vec<f64> = (0..3).map(|k| palette.mouth[k] - palette.skin[k]).collect();
    let norm2: f64 = axis.iter().map(|a| a * a).sum();
    let tau2 = 0.15f64.powi(2);
    let x0 = ((layout.mouth_center[0] - layout.mouth_width / 2.0) * s).round() as usize;
    let x1 = ((layout.mouth_center[0] + layout.mouth_width / 2.0) * s).round() as usize;
    let reach = layout.mouth_max / 2.0 + 1.0;
    let y0 = ((layout.mouth_center[1] - reach) * s).floor().max(0.0) as usize;
    let y1 = (((layout.mouth_center[1] + reach) * s).ceil() as usize).min(h);
    let mut rows = 0.0;
    for i in y0..y1 {
        let mut acc = 0.0;
        for j in x0..x1.min(w) {
            let d: Vec<f64> = (0..3).map(|k| frame[[i, j, k]] - palette.skin[k]).collect();
            let u = d.iter().zip(&axis).map(|(a, b)| a * b).sum::<f64>() / norm2;
            let perp2: f64 = d.iter().zip(&axis).map(|(a, b)| (a - u * b).powi(2)).sum();
            acc += u.clamp(0.0, 1.0) * (-perp2 / tau2).exp();
        }
        rows += acc / (x1 - x0) as f64;
    }
    let height = rows / s;
    ((height - layout.mouth_min) / (layout.mouth_max - layout.mouth_min)).clamp(0.0, 1.0)
}

/// Colour distance scale of [`glove_likeness`].
pub const GLOVE_TAU: f64 = 0.15;

/// `exp(−|c − glove|² / τ²)`: 1 on pure glove colour, falling off smoothly.
pub fn glove_likeness(c: [f64; 3], glove: Rgb) -> f64 {
    let d2: f64 = (0..3).map(|k| (c[k] - glove[k]).powi(2)).sum();
    (-d2 / (GLOVE_TAU * GLOVE_TAU)).exp()
}

/// Keypoint detector for this world's characters, working from colour
/// alone on frames of any size `k·32`. Hands are glove-coloured blobs; a
/// hand's confidence is the blob mass within one hand radius (plus one LR
/// pixel) of its centroid, relative to an ideal disc, times the fraction of
/// the blob's mass that lies there. Smeared or missing hands score low.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    pub layout: Layout,
    pub palette: Palette,
}

impl SyntheticDetector {
    pub fn new(palette: Palette) -> Self {
        Self {
            layout: Layout::default(),
            palette,
        }
    }

    /// Hand centre (HR coordinates) and confidence per side.
    pub fn hands(&self, frame: &ndarray::ArrayView3<f64>) -> [Option<([f64; 2], f64)>; 2] {
        let l = &self.layout;
        let (h, w, _) = frame.dim();
        let s = w as f64 / l.hr_size as f64;
        let area = 1.0 / (s * s);
        let mid = l.hr_size as f64 / 2.0;
        let mut pts: [Vec<([f64; 2], f64)>; 2] = [Vec::new(), Vec::new()];
        for i in 0..h {
            for j in 0..w {
                let c = [frame[[i, j, 0]], frame[[i, j, 1]], frame[[i, j, 2]]];
                let v = glove_likeness(c, self.palette.glove);
                if v > 1e-6 {
                    let p = [(j as f64 + 0.5) / s, (i as f64 + 0.5) / s];
                    pts[usize::from(p[0] >= mid)].push((p, v * area));
                }
            }
        }
        let ideal = PI * l.hand_radius * l.hand_radius;
        let reach = l.hand_radius + l.lr_factor as f64;
        pts.map(|side| {
            let mass: f64 = side.iter().map(|(_, m)| m).sum();
            if mass < 0.1 * ideal {
                return None;
            }
            let cx = side.iter().map(|(p, m)| p[0] * m).sum::<f64>() / mass;
            let cy = side.iter().map(|(p, m)| p[1] * m).sum::<f64>() / mass;
            let inner: f64 = side
                .iter()
                .filter(|(p, _)| (p[0] - cx).powi(2) + (p[1] - cy).powi(2) <= reach * reach)
                .map(|(_, m)| m)
                .sum();
            let conf = (inner / ideal).min(1.0) * (inner / mass);
            Some(([cx, cy], conf))
        })
    }
}

impl crate::pose::PoseDetector for SyntheticDetector {
    fn detect(&self, frames: &Array4<f64>) -> Result<PoseSequence> {
        let l = &self.layout;
        let (n, h, w, c) = frames.dim();
        if c != 3 || h != w || w % l.lr_size() != 0 {
            return Err(Error::Shape {
                context: "detector input",
                detail: format!("{:?}", frames.dim()),
            });
        }
        let kp = |p: [f64; 2], conf: f64| {
            let q = l.to_lr(p);
            let max = l.lr_size() as f64 - 1.0;
            Some(Keypoint {
                x: q[0].clamp(0.0, max),
                y: q[1].clamp(0.0, max),
                confidence: conf,
            })
        };
        let t = l.torso;
        let [mx, my] = l.mouth_center;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let frame = frames.index_axis(ndarray::Axis(0), k);
            let mh = l.mouth_height(aperture_from_frame(&frame.to_owned(), l, &self.palette));
            let mut f = PoseFrame::empty();
            f.groups[0] = vec![kp(l.head_center, 1.0), kp([mx, my - mh / 2.0], 1.0), kp([mx, my + mh / 2.0], 1.0)];
            f.groups[1] = vec![
                kp([(t[0] + t[2]) / 2.0, t[1]], 1.0),
                kp([(t[0] + t[2]) / 2.0, (t[1] + t[3]) / 2.0], 1.0),
                kp([t[0] + 10.0, t[3] - 6.0], 1.0),
                kp([t[2] - 10.0, t[3] - 6.0], 1.0),
            ];
            for (side, hand) in self.hands(&frame).into_iter().enumerate() {
                let sh = l.shoulders[side];
                match hand {
                    Some((p, conf)) => {
                        let d = [p[0] - sh[0], p[1] - sh[1]];
                        let len = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
                        let u = [d[0] / len, d[1] / len];
                        let elbow = [sh[0] + 0.5 * len * u[0], sh[1] + 0.5 * len * u[1]];
                        f.groups[2 + side] = vec![kp(sh, 1.0), kp(elbow, conf)];
                        let tip = [p[0] + l.hand_radius * u[0], p[1] + l.hand_radius * u[1]];
                        f.groups[4 + side] = vec![kp(p, conf), kp(tip, conf)];
                    }
                    None => {
                        f.groups[2 + side] = vec![kp(sh, 1.0), None];
                        f.groups[4 + side] = vec![None, None];
                    }
                }
            }
            f.groups[6] = vec![kp([t[0] + 14.0, t[3] - 2.0], 1.0), kp([t[2] - 14.0, t[3] - 2.0], 1.0)];
            f.background = l.anchors.iter().map(|a| l.to_lr(*a)).collect();
            out.push(f);
        }
        Ok(PoseSequence::new(l.lr_size(), l.lr_size(), out))
    }
}
