//! Invertible space-to-depth video codec.
//!
//! Pixel videos have `4f+1` frames. Latent frame 0 packs pixel frame 0 alone
//! (spatial packing only, zero-padded up to the channel width); latent frames
//! `1..=f` each pack four consecutive pixel frames.
//!
//! The LR codec uses a 4×4 spatial factor and is a pure permutation, so it is
//! lossless. The HR codec uses a 16×16 spatial factor, which lands HR latents
//! on the same token grid as LR ones; its raw 3072 values per token are
//! projected onto the 192-dimensional span of 4×4 box averages and then
//! rotated by a seeded orthonormal matrix. HR decode is the pseudo-inverse.
//!
//! Channel order within a token is `(dt, dy, dx, rgb)`, row-major, where `dy`
//! and `dx` index pixels (LR) or 4×4 sub-blocks (HR).

use ndarray::{s, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Latent channel width shared by both codecs.
pub const LATENT_CHANNELS: usize = 192;
/// Temporal packing factor for latent frames after the first.
pub const TEMPORAL_FACTOR: usize = 4;
/// Channels occupied by the uncompressed first frame (4·4·3).
pub const FIRST_FRAME_CHANNELS: usize = 48;
/// Seed of the HR rotation used by [`Codec::hr`].
pub const DEFAULT_HR_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "HR")]
    Hr,
}

impl LatentKind {
    pub fn spatial_factor(self) -> usize {
        match self {
            LatentKind::Lr => 4,
            LatentKind::Hr => 16,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LatentKind::Lr => "LR",
            LatentKind::Hr => "HR",
        }
    }
}

/// Number of latent frames for a pixel frame count `4f+1`.
pub fn latent_frames_for(pixel_frames: usize) -> Result<usize> {
    if pixel_frames == 0 || (pixel_frames - 1) % TEMPORAL_FACTOR != 0 {
        return Err(shape_err(
            "frames",
            format!("{pixel_frames} pixel frames is not of the form 4f+1"),
        ));
    }
    Ok((pixel_frames - 1) / TEMPORAL_FACTOR + 1)
}

pub fn pixel_frames_for(latent_frames: usize) -> usize {
    TEMPORAL_FACTOR * latent_frames.saturating_sub(1) + 1
}

/// RGB video with values in `[0, 1]`, shaped `(frames, H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub frames: Array4<f64>,
    pub fps: f64,
}

impl PixelVideo {
    pub fn new(frames: Array4<f64>, fps: f64) -> Result<Self> {
        let (t, _, _, c) = frames.dim();
        latent_frames_for(t)?;
        if c != 3 {
            return Err(shape_err("channels", format!("expected 3 colour channels, got {c}")));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { frames, fps })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn frame(&self, i: usize) -> Array3<f64> {
        self.frames.slice(s![i, .., .., ..]).to_owned()
    }
}

/// `(f+1, h, w, c)` latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub latents: Array4<f64>,
    pub kind: LatentKind,
    pub codec_id: String,
}

impl LatentVideo {
    pub fn frames(&self) -> usize {
        self.latents.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w, _) = self.latents.dim();
        (h, w)
    }
}

/// Flattens a `(f, h, w, c)` grid to `(f·h·w, c)` token rows.
pub fn to_tokens(grid: &Array4<f64>) -> Array2<f64> {
    let (f, h, w, c) = grid.dim();
    grid.as_standard_layout()
        .into_owned()
        .into_shape_with_order((f * h * w, c))
        .expect("standard layout reshape")
}

pub fn from_tokens(tokens: Array2<f64>, f: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let c = tokens.ncols();
    if tokens.nrows() != f * h * w {
        return Err(shape_err(
            "tokens",
            format!("{} rows for a {f}x{h}x{w} grid", tokens.nrows()),
        ));
    }
    Ok(tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((f, h, w, c))
        .expect("row count checked"))
}

#[derive(Debug, Clone)]
pub struct Codec {
    kind: LatentKind,
    id: String,
    /// HR only: orthonormal rotations for the packed (192) and first-frame (48) blocks.
    rotation: Option<(Array2<f64>, Array2<f64>)>,
}

fn random_orthonormal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    // Modified Gram-Schmidt over rows.
    for i in 0..n {
        for j in 0..i {
            let d = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-d, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

impl Codec {
    pub fn lr() -> Self {
        Self {
            kind: LatentKind::Lr,
            id: "s2d-lr-x4".to_string(),
            rotation: None,
        }
    }

    pub fn hr() -> Self {
        Self::hr_seeded(DEFAULT_HR_SEED)
    }

    pub fn hr_seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let packed = random_orthonormal(LATENT_CHANNELS, &mut rng);
        let first = random_orthonormal(FIRST_FRAME_CHANNELS, &mut rng);
        Self {
            kind: LatentKind::Hr,
            id: format!("s2d-hr-x16-rot{seed:x}"),
            rotation: Some((packed, first)),
        }
    }

    pub fn for_kind(kind: LatentKind) -> Self {
        match kind {
            LatentKind::Lr => Self::lr(),
            LatentKind::Hr => Self::hr(),
        }
    }

    pub fn kind(&self) -> LatentKind {
        self.kind
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn check_spatial(&self, h_px: usize, w_px: usize) -> Result<(usize, usize)> {
        let sf = self.kind.spatial_factor();
        if h_px == 0 || h_px % sf != 0 {
            return Err(shape_err(
                "height",
                format!("{h_px} px is not a positive multiple of {sf} ({} codec)", self.kind.as_str()),
            ));
        }
        if w_px == 0 || w_px % sf != 0 {
            return Err(shape_err(
                "width",
                format!("{w_px} px is not a positive multiple of {sf} ({} codec)", self.kind.as_str()),
            ));
        }
        Ok((h_px / sf, w_px / sf))
    }

    /// Raw 4×4-unit packing of `frames` pixel frames at token `(y, x)`.
    fn pack_token(&self, video: &Array4<f64>, t0: usize, frames: usize, y: usize, x: usize, out: &mut [f64]) {
        let sf = self.kind.spatial_factor();
        let sub = sf / 4;
        let norm = sub as f64; // sqrt(sub·sub) for an orthonormal box basis
        let mut k = 0;
        for dt in 0..frames {
            for dy in 0..4 {
                for dx in 0..4 {
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        for yy in 0..sub {
                            for xx in 0..sub {
                                acc += video[[t0 + dt, y * sf + dy * sub + yy, x * sf + dx * sub + xx, ch]];
                            }
                        }
                        out[k] = if sub == 1 { acc } else { acc / norm };
                        k += 1;
                    }
                }
            }
        }
    }

    fn unpack_token(&self, coeffs: &[f64], t0: usize, frames: usize, y: usize, x: usize, video: &mut Array4<f64>) {
        let sf = self.kind.spatial_factor();
        let sub = sf / 4;
        let norm = sub as f64;
        let mut k = 0;
        for dt in 0..frames {
            for dy in 0..4 {
                for dx in 0..4 {
                    for ch in 0..3 {
                        let v = if sub == 1 { coeffs[k] } else { coeffs[k] / norm };
                        for yy in 0..sub {
                            for xx in 0..sub {
                                video[[t0 + dt, y * sf + dy * sub + yy, x * sf + dx * sub + xx, ch]] = v;
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
    }

    fn rotate(&self, coeffs: &mut [f64], first: bool) {
        if let Some((packed, first_rot)) = &self.rotation {
            let r = if first { first_rot } else { packed };
            let v = ndarray::ArrayView1::from(&coeffs[..r.nrows()]).to_owned();
            let rotated = r.dot(&v);
            coeffs[..r.nrows()].copy_from_slice(rotated.as_slice().expect("contiguous"));
        }
    }

    fn unrotate(&self, coeffs: &mut [f64], first: bool) {
        if let Some((packed, first_rot)) = &self.rotation {
            let r = if first { first_rot } else { packed };
            let v = ndarray::ArrayView1::from(&coeffs[..r.nrows()]).to_owned();
            let back = r.t().dot(&v);
            coeffs[..r.nrows()].copy_from_slice(back.as_slice().expect("contiguous"));
        }
    }

    /// Encodes a raw frame array. When `leading_single` is set, frame 0 is
    /// packed alone; otherwise the frame count must be a multiple of 4 and
    /// every latent packs four frames (continuation segments).
    pub fn encode_frames(&self, frames: &Array4<f64>, leading_single: bool) -> Result<Array4<f64>> {
        let (t, hp, wp, c) = frames.dim();
        if c != 3 {
            return Err(shape_err("channels", format!("expected 3 colour channels, got {c}")));
        }
        let (h, w) = self.check_spatial(hp, wp)?;
        let (lead, rest) = if leading_single {
            let n = latent_frames_for(t)?;
            (1, n - 1)
        } else {
            if t == 0 || t % TEMPORAL_FACTOR != 0 {
                return Err(shape_err("frames", format!("{t} frames is not a positive multiple of 4")));
            }
            (0, t / TEMPORAL_FACTOR)
        };
        let mut out = Array4::zeros((lead + rest, h, w, LATENT_CHANNELS));
        let mut buf = vec![0.0; LATENT_CHANNELS];
        for y in 0..h {
            for x in 0..w {
                if lead == 1 {
                    buf.iter_mut().for_each(|v| *v = 0.0);
                    self.pack_token(frames, 0, 1, y, x, &mut buf);
                    self.rotate(&mut buf, true);
                    out.slice_mut(s![0, y, x, ..]).assign(&ndarray::ArrayView1::from(&buf[..]));
                }
                for j in 0..rest {
                    let t0 = lead + j * TEMPORAL_FACTOR;
                    self.pack_token(frames, t0, TEMPORAL_FACTOR, y, x, &mut buf);
                    self.rotate(&mut buf, false);
                    out.slice_mut(s![lead + j, y, x, ..]).assign(&ndarray::ArrayView1::from(&buf[..]));
                }
            }
        }
        Ok(out)
    }

    pub fn decode_frames(&self, latents: &Array4<f64>, leading_single: bool) -> Result<Array4<f64>> {
        let (n, h, w, c) = latents.dim();
        if c != LATENT_CHANNELS {
            return Err(shape_err(
                "channels",
                format!("{c} latent channels; codec `{}` expects {LATENT_CHANNELS}", self.id),
            ));
        }
        if n == 0 {
            return Err(shape_err("frames", "empty latent sequence"));
        }
        let sf = self.kind.spatial_factor();
        let lead = usize::from(leading_single);
        let t = lead + (n - lead) * TEMPORAL_FACTOR;
        let mut out = Array4::zeros((t, h * sf, w * sf, 3));
        let mut buf = vec![0.0; LATENT_CHANNELS];
        for y in 0..h {
            for x in 0..w {
                for j in 0..n {
                    for (b, v) in buf.iter_mut().zip(latents.slice(s![j, y, x, ..])) {
                        *b = *v;
                    }
                    if j == 0 && leading_single {
                        self.unrotate(&mut buf, true);
                        self.unpack_token(&buf, 0, 1, y, x, &mut out);
                    } else {
                        self.unrotate(&mut buf, false);
                        let t0 = lead + (j - lead) * TEMPORAL_FACTOR;
                        self.unpack_token(&buf, t0, TEMPORAL_FACTOR, y, x, &mut out);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        Ok(LatentVideo {
            latents: self.encode_frames(&video.frames, true)?,
            kind: self.kind,
            codec_id: self.id.clone(),
        })
    }

    /// Encodes a single image `(H, W, 3)` as a one-frame latent `(1, h, w, c)`.
    pub fn encode_image(&self, image: &Array3<f64>) -> Result<Array4<f64>> {
        let v = image.clone().insert_axis(ndarray::Axis(0));
        self.encode_frames(&v, true)
    }

    /// Encodes an image held still for four frames: one latent frame in the
    /// same packing as every non-leading latent, `(1, h, w, c)`.
    pub fn encode_still(&self, image: &Array3<f64>) -> Result<Array4<f64>> {
        let v = image.clone().insert_axis(ndarray::Axis(0));
        let clip = ndarray::concatenate(ndarray::Axis(0), &[v.view(); TEMPORAL_FACTOR]).expect("same shape");
        self.encode_frames(&clip, false)
    }

    pub fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo> {
        if latent.codec_id != self.id {
            return Err(Error::InvalidArgument(format!(
                "latent produced by codec `{}`, not `{}`",
                latent.codec_id, self.id
            )));
        }
        let frames = self.decode_frames(&latent.latents, true)?;
        Ok(PixelVideo { frames, fps: 0.0 })
    }

    /// For the LR codec, the flat latent index of every element of pixel frame
    /// `frame` (row-major `(H, W, 3)`), given a latent grid of `n` frames.
    /// Decoding a frame is then a gather, which keeps it differentiable.
    pub fn frame_gather_index(&self, n: usize, h: usize, w: usize, frame: usize) -> Result<Vec<usize>> {
        if self.kind != LatentKind::Lr {
            return Err(Error::InvalidArgument(
                "frame gather is defined for the LR codec only".into(),
            ));
        }
        let t = pixel_frames_for(n);
        if frame >= t {
            return Err(shape_err("frames", format!("frame {frame} of {t}")));
        }
        let (j, dt) = if frame == 0 { (0, 0) } else { ((frame - 1) / 4 + 1, (frame - 1) % 4) };
        let (hp, wp) = (h * 4, w * 4);
        let mut idx = Vec::with_capacity(hp * wp * 3);
        for py in 0..hp {
            for px in 0..wp {
                for ch in 0..3 {
                    let (y, dy, x, dx) = (py / 4, py % 4, px / 4, px % 4);
                    let chan = ((dt * 4 + dy) * 4 + dx) * 3 + ch;
                    idx.push(((j * h + y) * w + x) * LATENT_CHANNELS + chan);
                }
            }
        }
        Ok(idx)
    }
}

/// Box-average downsampling by an integer factor, `(T, H, W, C)`.
pub fn downsample(frames: &Array4<f64>, factor: usize) -> Array4<f64> {
    let (t, h, w, c) = frames.dim();
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Array4::zeros((t, ho, wo, c));
    let inv = 1.0 / (factor * factor) as f64;
    for ti in 0..t {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for yy in 0..factor {
                        for xx in 0..factor {
                            acc += frames[[ti, y * factor + yy, x * factor + xx, ch]];
                        }
                    }
                    out[[ti, y, x, ch]] = acc * inv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn random_video(t: usize, hp: usize, wp: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((t, hp, wp, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn lr_shape_and_channel_count() {
        let v = PixelVideo::new(random_video(13, 32, 32, 1), 25.0).unwrap();
        let z = Codec::lr().encode(&v).unwrap();
        assert_eq!(z.latents.dim(), (4, 8, 8, 192));
        // frames 1..f hold exactly 12·32·32·3 pixel values.
        assert_eq!(3 * 8 * 8 * 192, 12 * 32 * 32 * 3);
        let back = Codec::lr().decode(&z).unwrap();
        assert_eq!(back.frames.dim(), (13, 32, 32, 3));
        assert_eq!(back.frames, v.frames);
    }

    #[test]
    fn lr_frame_zero_is_padded() {
        let v = PixelVideo::new(random_video(5, 8, 8, 2), 25.0).unwrap();
        let z = Codec::lr().encode(&v).unwrap();
        assert!(z.latents.slice(s![0, .., .., FIRST_FRAME_CHANNELS..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_maps_to_zero() {
        let v = PixelVideo::new(Array4::zeros((9, 16, 16, 3)), 25.0).unwrap();
        for codec in [Codec::lr(), Codec::hr()] {
            if codec.kind() == LatentKind::Hr {
                let hv = PixelVideo::new(Array4::zeros((9, 64, 64, 3)), 25.0).unwrap();
                let z = codec.encode(&hv).unwrap();
                assert!(z.latents.iter().all(|v| *v == 0.0));
                assert!(codec.decode(&z).unwrap().frames.iter().all(|v| *v == 0.0));
            } else {
                let z = codec.encode(&v).unwrap();
                assert!(z.latents.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let bad_t = Codec::lr().encode_frames(&Array4::zeros((12, 32, 32, 3)), true);
        assert!(bad_t.unwrap_err().to_string().contains("frames"));
        let bad_h = Codec::lr().encode_frames(&Array4::zeros((13, 30, 32, 3)), true);
        assert!(bad_h.unwrap_err().to_string().contains("height"));
        let bad_w = Codec::hr().encode_frames(&Array4::zeros((13, 128, 40, 3)), true);
        assert!(bad_w.unwrap_err().to_string().contains("width"));
        let bad_c = Codec::lr().decode_frames(&Array4::zeros((4, 8, 8, 100)), true);
        assert!(bad_c.unwrap_err().to_string().contains("channels"));
    }

    #[test]
    fn hr_shares_token_grid_and_is_a_projection() {
        let v = random_video(9, 64, 64, 3);
        let codec = Codec::hr();
        let z = codec.encode_frames(&v, true).unwrap();
        assert_eq!(z.dim(), (3, 4, 4, 192));
        let back = codec.decode_frames(&z, true).unwrap();
        // Decoded video is the 4×4 box average of the input.
        let lr = downsample(&v, 4);
        for ((t, y, x, c), val) in back.indexed_iter() {
            assert!((val - lr[[t, y / 4, x / 4, c]]).abs() < 1e-12);
        }
        // encode ∘ decode is the identity on latents.
        let again = codec.encode_frames(&back, true).unwrap();
        for (a, b) in again.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_gather_matches_decode() {
        let v = random_video(9, 16, 16, 4);
        let codec = Codec::lr();
        let z = codec.encode_frames(&v, true).unwrap();
        let flat = z.as_slice().unwrap();
        for f in [0, 1, 4, 8] {
            let idx = codec.frame_gather_index(3, 4, 4, f).unwrap();
            let frame: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
            let expect: Vec<f64> = v.slice(s![f, .., .., ..]).iter().copied().collect();
            assert_eq!(frame, expect);
        }
    }

    #[test]
    fn continuation_segments_round_trip() {
        let v = random_video(8, 16, 16, 5);
        let codec = Codec::lr();
        let z = codec.encode_frames(&v, false).unwrap();
        assert_eq!(z.dim().0, 2);
        assert_eq!(codec.decode_frames(&z, false).unwrap(), v);
    }

    #[test]
    fn pixel_video_validation() {
        assert!(PixelVideo::new(Array4::from_elem((5, 4, 4, 3), 1.5), 1.0).is_err());
        assert!(PixelVideo::new(Array4::zeros((5, 4, 4, 1)), 1.0).is_err());
    }
}
