//! Pose conditioning: keypoints → 8-channel raster → 512-wide tokens → additive
//! fusion into HR latents.
//!
//! Raster pixel `(row i, col j)` has its centre at coordinate `(x=j, y=i)`.
//! Token layout: each token flattens a `4×4×4×8` block in `(t, y, x, channel)`
//! order, i.e. element `((dt·4 + dy)·4 + dx)·8 + ch`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::codec::{from_tokens, to_tokens, TEMPORAL_FACTOR};
use crate::error::{shape_err, Error, Result};

pub const GROUP_NAMES: [&str; 7] = ["head", "torso", "left_arm", "right_arm", "left_hand", "right_hand", "lower_body"];
pub const LEFT_HAND: usize = 4;
pub const RIGHT_HAND: usize = 5;
pub const POSE_CHANNELS: usize = 8;
pub const BACKGROUND_CHANNEL: usize = 7;
pub const MAX_BACKGROUND_POINTS: usize = 20;
/// Spatial patch edge; equals the LR codec's spatial factor.
pub const PATCH: usize = 4;
pub const POSE_TOKEN_CHANNELS: usize = TEMPORAL_FACTOR * PATCH * PATCH * POSE_CHANNELS;
pub const POSE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// One pixel frame: `groups[g]` lists the keypoints of group `GROUP_NAMES[g]`,
/// `None` marking an absent keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub groups: Vec<Vec<Option<Keypoint>>>,
    pub background: Vec<[f64; 2]>,
}

impl PoseFrame {
    pub fn empty() -> Self {
        Self {
            groups: vec![Vec::new(); GROUP_NAMES.len()],
            background: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub schema_version: u32,
    pub group_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<PoseFrame>,
}

impl PoseSequence {
    pub fn new(width: usize, height: usize, frames: Vec<PoseFrame>) -> Self {
        Self {
            schema_version: POSE_SCHEMA_VERSION,
            group_names: GROUP_NAMES.iter().map(|s| s.to_string()).collect(),
            width,
            height,
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != POSE_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!("pose schema version {}", self.schema_version)));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, f) in self.frames.iter().enumerate() {
            if f.groups.len() != GROUP_NAMES.len() {
                return Err(shape_err("pose groups", format!("frame {i} has {} groups", f.groups.len())));
            }
            if f.background.len() > MAX_BACKGROUND_POINTS {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} has {} background points (max {MAX_BACKGROUND_POINTS})",
                    f.background.len()
                )));
            }
            let in_bounds = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
            for k in f.groups.iter().flatten().flatten() {
                if !in_bounds(k.x, k.y) || !(0.0..=1.0).contains(&k.confidence) {
                    return Err(Error::InvalidArgument(format!("frame {i}: keypoint {k:?} out of range")));
                }
            }
            if let Some(p) = f.background.iter().find(|p| !in_bounds(p[0], p[1])) {
                return Err(Error::InvalidArgument(format!("frame {i}: background point {p:?} out of bounds")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let seq: Self = serde_json::from_slice(&fs::read(path)?)?;
        seq.validate()?;
        Ok(seq)
    }
}

/// Anything that turns pixel frames into keypoints.
pub trait PoseDetector {
    fn detect(&self, frames: &Array4<f64>) -> Result<PoseSequence>;
}

fn paint(out: &mut Array4<f64>, frame: usize, ch: usize, x: f64, y: f64, amp: f64, sigma: f64) {
    let (_, h, w, _) = out.dim();
    if sigma <= 0.0 {
        let (j, i) = (x.round() as usize, y.round() as usize);
        if i < h && j < w {
            out[[frame, i, j, ch]] += amp;
        }
        return;
    }
    let r = 4.0 * sigma;
    let lo = |c: f64| (c - r).ceil().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + r).floor() + 1.0).clamp(0.0, n as f64) as usize;
    for i in lo(y)..hi(y, h) {
        for j in lo(x)..hi(x, w) {
            let d2 = (j as f64 - x).powi(2) + (i as f64 - y).powi(2);
            if d2 <= r * r {
                out[[frame, i, j, ch]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

/// Paints every keypoint as a confidence-scaled Gaussian (truncated at 4σ)
/// into its group channel, background points into channel 7, then clamps.
pub fn rasterize(seq: &PoseSequence, frames: usize, height: usize, width: usize, sigma: f64) -> Result<Array4<f64>> {
    seq.validate()?;
    if seq.frames.len() != frames || seq.width != width || seq.height != height {
        return Err(shape_err(
            "frames",
            format!(
                "pose sequence {}x{}x{} for a {frames}x{height}x{width} raster",
                seq.frames.len(),
                seq.height,
                seq.width
            ),
        ));
    }
    let mut out = Array4::zeros((frames, height, width, POSE_CHANNELS));
    for (t, f) in seq.frames.iter().enumerate() {
        for (g, pts) in f.groups.iter().enumerate() {
            for k in pts.iter().flatten() {
                paint(&mut out, t, g, k.x, k.y, k.confidence, sigma);
            }
        }
        for p in &f.background {
            paint(&mut out, t, BACKGROUND_CHANNEL, p[0], p[1], 1.0, sigma);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// `(4f+1, 4h, 4w, 8)` → `(f+1, h, w, 512)`; segment 0 repeats frame 0 four times.
pub fn patchify(pt: &Array4<f64>) -> Result<Array4<f64>> {
    let (n, hh, ww, c) = pt.dim();
    if c != POSE_CHANNELS {
        return Err(shape_err("channels", format!("pose tensor has {c} channels, expected {POSE_CHANNELS}")));
    }
    if n == 0 || (n - 1) % TEMPORAL_FACTOR != 0 {
        return Err(shape_err("frames", format!("{n} frames is not 4f+1")));
    }
    if hh % PATCH != 0 || ww % PATCH != 0 {
        return Err(shape_err("height", format!("{hh}x{ww} not divisible by {PATCH}")));
    }
    let seg = (n - 1) / TEMPORAL_FACTOR + 1;
    let (h, w) = (hh / PATCH, ww / PATCH);
    Ok(Array4::from_shape_fn((seg, h, w, POSE_TOKEN_CHANNELS), |(s, y, x, k)| {
        let ch = k % POSE_CHANNELS;
        let dx = (k / POSE_CHANNELS) % PATCH;
        let dy = (k / (POSE_CHANNELS * PATCH)) % PATCH;
        let dt = k / (POSE_CHANNELS * PATCH * PATCH);
        let frame = if s == 0 { 0 } else { (s - 1) * TEMPORAL_FACTOR + 1 + dt };
        pt[[frame, y * PATCH + dy, x * PATCH + dx, ch]]
    }))
}

/// Inverse of [`patchify`]; frame 0 is read from the `dt = 0` slot of segment 0.
pub fn unpatchify(tokens: &Array4<f64>) -> Result<Array4<f64>> {
    let (seg, h, w, c) = tokens.dim();
    if c != POSE_TOKEN_CHANNELS {
        return Err(shape_err("channels", format!("pose tokens have {c} channels, expected {POSE_TOKEN_CHANNELS}")));
    }
    if seg == 0 {
        return Err(shape_err("frames", "no segments"));
    }
    let n = (seg - 1) * TEMPORAL_FACTOR + 1;
    Ok(Array4::from_shape_fn((n, h * PATCH, w * PATCH, POSE_CHANNELS), |(f, yy, xx, ch)| {
        let (s, dt) = if f == 0 { (0, 0) } else { ((f - 1) / TEMPORAL_FACTOR + 1, (f - 1) % TEMPORAL_FACTOR) };
        let k = ((dt * PATCH + yy % PATCH) * PATCH + xx % PATCH) * POSE_CHANNELS + ch;
        tokens[[s, yy / PATCH, xx / PATCH, k]]
    }))
}

/// `z'_hr = z_hr + tokens·W + b`, with `W` of shape `(512, c_hr)` and `b` `(1, c_hr)`.
pub fn fuse(z_hr: &Array4<f64>, tokens: &Array4<f64>, weight: &Array2<f64>, bias: &Array2<f64>) -> Result<Array4<f64>> {
    let (f, h, w, c) = z_hr.dim();
    let (tf, th, tw, tc) = tokens.dim();
    if (tf, th, tw) != (f, h, w) {
        return Err(shape_err("grid", format!("pose tokens {:?} vs latents {:?}", (tf, th, tw), (f, h, w))));
    }
    if weight.dim() != (tc, c) || bias.dim() != (1, c) {
        return Err(shape_err(
            "channels",
            format!("projection {:?} + {:?} for {tc} → {c}", weight.dim(), bias.dim()),
        ));
    }
    let proj = to_tokens(tokens).dot(weight) + bias;
    let out = to_tokens(z_hr) + proj;
    from_tokens(out, f, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(x: f64, y: f64, group: usize, c: f64, size: usize) -> PoseSequence {
        let mut f = PoseFrame::empty();
        f.groups[group].push(Some(Keypoint { x, y, confidence: c }));
        PoseSequence::new(size, size, vec![f])
    }

    #[test]
    fn empty_sequence_rasterizes_to_zero() {
        let seq = PoseSequence::new(8, 8, vec![PoseFrame::empty(); 5]);
        assert!(rasterize(&seq, 5, 8, 8, DEFAULT_SIGMA).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_limit_paints_one_pixel() {
        let r = rasterize(&single(3.0, 2.0, 1, 1.0, 8), 1, 8, 8, 1e-3).unwrap();
        assert_eq!(r[[0, 2, 3, 1]], 1.0);
        assert_eq!(r.sum(), 1.0);
    }

    #[test]
    fn gaussian_profile_matches_kernel() {
        let sigma = 1.5;
        let r = rasterize(&single(5.0, 5.0, 0, 1.0, 16), 1, 16, 16, sigma).unwrap();
        let peak = r[[0, 5, 5, 0]];
        assert_eq!(peak, 1.0);
        let want = (-9.0 / (2.0 * sigma * sigma)).exp();
        for (i, j) in [(8, 5), (2, 5), (5, 8), (5, 2)] {
            assert!((r[[0, i, j, 0]] / peak - want).abs() < 1e-6);
        }
    }

    #[test]
    fn influence_is_local_and_channel_separated() {
        let sigma = 1.5;
        let r = rasterize(&single(10.3, 9.7, LEFT_HAND, 0.8, 24), 1, 24, 24, sigma).unwrap();
        for ((_, i, j, ch), v) in r.indexed_iter() {
            if ch != LEFT_HAND {
                assert_eq!(*v, 0.0);
            }
            let d = ((j as f64 - 10.3).powi(2) + (i as f64 - 9.7).powi(2)).sqrt();
            if d > 4.0 * sigma {
                assert!(*v < 1e-6 * 0.8);
            }
        }
    }

    #[test]
    fn too_many_background_points_rejected() {
        let mut f = PoseFrame::empty();
        f.background = vec![[1.0, 1.0]; 21];
        let seq = PoseSequence::new(8, 8, vec![f]);
        assert!(rasterize(&seq, 1, 8, 8, 1.5).is_err());
    }

    #[test]
    fn patchify_shapes_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pt = Array::from_shape_simple_fn((13, 32, 32, 8), || rng.random::<f64>());
        let tok = patchify(&pt).unwrap();
        assert_eq!(tok.dim(), (4, 8, 8, 512));
        let back = unpatchify(&tok).unwrap();
        assert_eq!(back, pt);
        for dt in 0..4 {
            for k in 0..128 {
                assert_eq!(tok[[0, 3, 5, dt * 128 + k]], tok[[0, 3, 5, k]]);
            }
        }
        assert!(patchify(&Array4::zeros((12, 32, 32, 8))).is_err());
        assert!(unpatchify(&Array4::zeros((2, 2, 2, 511))).is_err());
    }

    #[test]
    fn single_token_element_maps_to_one_pixel() {
        let mut tok = Array4::zeros((2, 2, 2, 512));
        tok[[1, 1, 0, 3 * 128 + 2 * 32 + 1 * 8 + 6]] = 1.0;
        let pt = unpatchify(&tok).unwrap();
        assert_eq!(pt.sum(), 1.0);
        assert_eq!(pt[[4, 6, 1, 6]], 1.0);
    }

    #[test]
    fn fuse_is_additive_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand4 = |d| Array4::from_shape_simple_fn(d, || rng.random::<f64>() - 0.5);
        let z = rand4((2, 2, 2, 6));
        let a = rand4((2, 2, 2, 512));
        let b = rand4((2, 2, 2, 512));
        let w = Array2::from_shape_fn((512, 6), |(i, j)| ((i * 7 + j) % 11) as f64 * 0.01);
        let zero_b = Array2::zeros((1, 6));
        assert_eq!(fuse(&z, &a, &Array2::zeros((512, 6)), &zero_b).unwrap(), z);
        assert_eq!(fuse(&z, &Array4::zeros((2, 2, 2, 512)), &w, &zero_b).unwrap(), z);
        let lhs = fuse(&z, &a, &w, &zero_b).unwrap() + fuse(&z, &b, &w, &zero_b).unwrap() - &z;
        let rhs = fuse(&z, &(&a + &b), &w, &zero_b).unwrap();
        assert!(lhs.iter().zip(rhs.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(fuse(&z, &rand4((2, 2, 3, 512)), &w, &zero_b).is_err());
    }

    #[test]
    fn json_round_trip_with_absent_points() {
        let mut f = PoseFrame::empty();
        f.groups[2] = vec![Some(Keypoint { x: 1.0, y: 2.0, confidence: 0.5 }), None];
        f.background = vec![[0.0, 3.0]];
        let seq = PoseSequence::new(4, 4, vec![f]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pose.json");
        seq.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(PoseSequence::load(&p).unwrap(), seq);
    }
}
