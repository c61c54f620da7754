//! Transformer velocity predictor.
//!
//! Tokens of the noisy latent grid (rows `frame·h·w + y·w + x`) are embedded,
//! offset by a factorised sinusoidal `(frame, row, col)` encoding and a
//! timestep embedding, and joined by reference-image tokens. Each block runs
//! global self-attention over the whole sequence, then the decoupled
//! condition attention `CA(x, c_text) + CA(x, c_audio)` on the video tokens,
//! then an MLP. The output adds time-gated per-channel skips from the input
//! latents, from the reference latent (broadcast over frames) and, when the
//! input carries extra conditioning channels, from a learned map of those;
//! a narrow trunk could not otherwise carry them. The output projection and
//! every gate start at zero.
//!
//! Audio keys are the per-frame audio embeddings followed by the embeddings
//! of silent audio, so speaker routing and temporal locality are both a
//! boolean mask over those keys.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{to_tokens, TEMPORAL_FACTOR};
use crate::error::{shape_err, Error, Result};
use crate::flow::{Grid, VelocityModel};
use crate::params::{Checkpoint, ParamSet};

/// Per-pixel-frame amplitudes packed into one latent frame.
pub const AUDIO_FEATURES: usize = TEMPORAL_FACTOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Width of text token embeddings; 0 disables the text branch.
    pub text_dim: usize,
    /// Audio features per latent frame; 0 disables the audio branch.
    pub audio_dim: usize,
    /// Channels of the reference latent; 0 disables reference tokens.
    pub ref_channels: usize,
    /// A token in latent frame `i` sees audio frames `j` with `|i − j| ≤ audio_window`.
    pub audio_window: usize,
    pub positional: bool,
    /// When false, audio attention ignores temporal locality and routing.
    pub audio_mask: bool,
}

impl DitConfig {
    /// Generator over 192-channel LR latents.
    pub fn lr_default() -> Self {
        Self {
            in_channels: 192,
            out_channels: 192,
            width: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 2,
            text_dim: 32,
            audio_dim: AUDIO_FEATURES,
            ref_channels: 192,
            audio_window: 0,
            positional: true,
            audio_mask: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible into {} heads", self.width, self.heads));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.mlp_ratio == 0 {
            return bad("channel counts and mlp ratio must be positive".into());
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropFlags {
    pub text: bool,
    pub audio: bool,
    pub reference: bool,
    pub first_frame: bool,
}

impl DropFlags {
    pub const ALL: Self = Self {
        text: true,
        audio: true,
        reference: true,
        first_frame: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutProbs {
    pub text: f64,
    pub audio: f64,
    pub reference: f64,
    pub first_frame: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        Self {
            text: 0.10,
            audio: 0.10,
            reference: 0.20,
            first_frame: 0.20,
        }
    }
}

impl DropoutProbs {
    pub const NONE: Self = Self {
        text: 0.0,
        audio: 0.0,
        reference: 0.0,
        first_frame: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("text", self.text),
            ("audio", self.audio),
            ("reference", self.reference),
            ("first_frame", self.first_frame),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("dropout probability {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Which audio stream a spatial token position listens to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AudioSource {
    Speech,
    Silent,
}

/// Conditions for the generator. Audio arrives as raw per-latent-frame
/// features `(frames, 4)`; the model embeds them, and embeds all-zero
/// features as the silent stream. `ref_latent` is the reference image held
/// still, in the packing of a four-frame latent (see `Codec::encode_still`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub text_emb: Array2<f64>,
    pub audio_feats: Array2<f64>,
    pub ref_latent: Array4<f64>,
    /// Leading latents of `z_t` that are clean conditioning (first frame or
    /// motion prefix). Treated as 0 when `dropped.first_frame` is set.
    pub prefix: usize,
    /// Per spatial position `y·w + x`; `None` routes every token to speech.
    pub routing: Option<Vec<AudioSource>>,
    pub dropped: DropFlags,
}

impl ConditionBundle {
    pub fn effective_prefix(&self) -> usize {
        if self.dropped.first_frame {
            0
        } else {
            self.prefix
        }
    }

    /// Text and audio replaced by their null embeddings; the image
    /// conditions are kept, which is the contrast used for guidance.
    pub fn without_text_audio(&self) -> Self {
        let mut c = self.clone();
        c.dropped.text = true;
        c.dropped.audio = true;
        c
    }

    pub fn without_audio(&self) -> Self {
        let mut c = self.clone();
        c.dropped.audio = true;
        c
    }
}

/// Independently drops each condition with its probability. Always draws four
/// uniforms in the order text, audio, reference, first frame.
pub fn condition_dropout<R: Rng>(bundle: &ConditionBundle, rng: &mut R, probs: &DropoutProbs) -> Result<ConditionBundle> {
    probs.validate()?;
    let mut out = bundle.clone();
    let mut draw = |p: f64| rng.random::<f64>() < p;
    out.dropped.text |= draw(probs.text);
    out.dropped.audio |= draw(probs.audio);
    out.dropped.reference |= draw(probs.reference);
    out.dropped.first_frame |= draw(probs.first_frame);
    Ok(out)
}

/// Speaker box in token coordinates, half-open: `x0 ≤ x < x1`, `y0 ≤ y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub active: bool,
}

impl SpeakerRegion {
    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    fn overlaps(&self, o: &Self) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// Per-token audio source for an `h×w` grid: positions inside an active box
/// hear the speech embedding, everything else hears the silent embedding.
pub fn route_multispeaker_audio(regions: &[SpeakerRegion], h: usize, w: usize) -> Result<Vec<AudioSource>> {
    for (i, r) in regions.iter().enumerate() {
        if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > w || r.y1 > h {
            return Err(Error::InvalidArgument(format!(
                "speaker region {i} ({},{})-({},{}) is empty or outside the {h}x{w} grid",
                r.x0, r.y0, r.x1, r.y1
            )));
        }
        for (j, o) in regions.iter().enumerate().skip(i + 1) {
            if r.overlaps(o) {
                return Err(Error::OverlappingRegions(i, j));
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let speaking = regions.iter().any(|r| r.active && r.contains(x, y));
            out.push(if speaking { AudioSource::Speech } else { AudioSource::Silent });
        }
    }
    Ok(out)
}

/// Groups per-pixel-frame amplitudes into per-latent-frame features. With
/// `leading_single`, latent 0 holds frame 0 repeated and later latents hold
/// four consecutive frames; otherwise every latent holds four frames.
pub fn audio_features(amplitudes: &[f64], leading_single: bool) -> Result<Array2<f64>> {
    let n = amplitudes.len();
    let k = TEMPORAL_FACTOR;
    let (lead, rest) = if leading_single { (1, n.saturating_sub(1)) } else { (0, n) };
    if n == 0 || rest % k != 0 {
        return Err(shape_err("frames", format!("{n} audio frames do not pack into latents")));
    }
    let latents = lead + rest / k;
    Ok(Array2::from_shape_fn((latents, k), |(i, j)| {
        if leading_single && i == 0 {
            amplitudes[0]
        } else {
            amplitudes[lead + (i - lead) * k + j]
        }
    }))
}

fn hash_word(word: &str) -> u64 {
    // FNV-1a
    word.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Fixed hashed word embeddings: one row per lower-cased whitespace token,
/// each a seeded Gaussian vector of norm about 1.
pub fn embed_prompt(prompt: &str, dim: usize) -> Array2<f64> {
    let lowered = prompt.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if words.is_empty() {
        words.push("<empty>");
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Array2::zeros((words.len(), dim));
    for (i, w) in words.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_word(w));
        for j in 0..dim {
            let v: f64 = StandardNormal.sample(&mut rng);
            out[[i, j]] = v * scale;
        }
    }
    out
}

fn sinusoid(pos: f64, dim: usize, base: f64, out: &mut [f64]) {
    let half = dim / 2;
    for j in 0..half {
        let freq = base.powf(-(j as f64) / half.max(1) as f64);
        out[2 * j] = (pos * freq).sin();
        out[2 * j + 1] = (pos * freq).cos();
    }
}

/// Sinusoidal embedding of `1000·t`.
pub fn timestep_embedding(t: f64, dim: usize) -> Array2<f64> {
    let mut row = vec![0.0; dim];
    sinusoid(1000.0 * t, dim, 10_000.0, &mut row);
    Array2::from_shape_vec((1, dim), row).expect("dim entries")
}

/// Factorised absolute encoding: the width is split into three contiguous
/// bands holding sinusoids of the frame, row and column index.
pub fn positional_encoding(frames: usize, h: usize, w: usize, dim: usize, frame_offset: f64) -> Array2<f64> {
    let b = dim / 3;
    let bands = [(0, dim - 2 * b), (dim - 2 * b, b), (dim - b, b)];
    let mut out = Array2::zeros((frames * h * w, dim));
    let mut buf = vec![0.0; dim];
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let row = (f * h + y) * w + x;
                for (k, pos) in [f as f64 + frame_offset, y as f64, x as f64].into_iter().enumerate() {
                    let (start, len) = bands[k];
                    buf[..len].fill(0.0);
                    sinusoid(pos, len, 64.0, &mut buf[..len]);
                    for j in 0..len {
                        out[[row, start + j]] = buf[j];
                    }
                }
            }
        }
    }
    out
}

/// Conditioning inputs to [`Dit::forward`] after dropout has been resolved:
/// `None` selects the learned null embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct DitInputs<'a> {
    pub text: Option<&'a Array2<f64>>,
    pub audio: Option<&'a Array2<f64>>,
    pub reference: Option<&'a Array4<f64>>,
    pub prefix: usize,
    pub routing: Option<&'a [AudioSource]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dit {
    pub config: DitConfig,
    pub params: ParamSet,
}

impl Dit {
    pub fn init(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let d = config.width;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        p.normal("in.w", (config.in_channels, d), inv(config.in_channels), &mut rng);
        p.zeros("in.b", (1, d));
        p.normal("t.w1", (d, d), inv(d), &mut rng);
        p.zeros("t.b1", (1, d));
        p.normal("t.w2", (d, d), inv(d), &mut rng);
        p.zeros("t.b2", (1, d));
        p.normal("prefix.emb", (1, d), 0.5, &mut rng);
        if config.ref_channels > 0 {
            p.normal("ref.w", (config.ref_channels, d), inv(config.ref_channels), &mut rng);
            p.zeros("ref.b", (1, d));
            p.normal("ref.type", (1, d), 0.5, &mut rng);
            p.normal("ref.null", (1, d), 0.5, &mut rng);
        }
        if config.text_dim > 0 {
            p.normal("text.null", (1, config.text_dim), inv(config.text_dim), &mut rng);
        }
        if config.audio_dim > 0 {
            p.normal("audio.w1", (config.audio_dim, d), 1.0, &mut rng);
            p.normal("audio.b1", (1, d), 0.5, &mut rng);
            p.normal("audio.w2", (d, d), inv(d), &mut rng);
            p.zeros("audio.b2", (1, d));
            p.normal("audio.null", (1, d), 0.5, &mut rng);
        }
        for l in 0..config.layers {
            let attn = |p: &mut ParamSet, name: &str, kv: usize, rng: &mut ChaCha8Rng| {
                p.normal(&format!("b{l}.{name}.q"), (d, d), inv(d), rng);
                p.normal(&format!("b{l}.{name}.k"), (kv, d), inv(kv), rng);
                p.normal(&format!("b{l}.{name}.v"), (kv, d), inv(kv), rng);
                p.normal(&format!("b{l}.{name}.o"), (d, d), 0.5 * inv(d), rng);
                p.zeros(&format!("b{l}.{name}.ob"), (1, d));
            };
            let norm = |p: &mut ParamSet, name: &str| {
                p.ones(&format!("b{l}.{name}.g"), (1, d));
                p.zeros(&format!("b{l}.{name}.b"), (1, d));
            };
            norm(&mut p, "ln1");
            attn(&mut p, "sa", d, &mut rng);
            if config.text_dim > 0 || config.audio_dim > 0 {
                norm(&mut p, "ln2");
            }
            if config.text_dim > 0 {
                attn(&mut p, "ta", config.text_dim, &mut rng);
            }
            if config.audio_dim > 0 {
                attn(&mut p, "aa", d, &mut rng);
            }
            norm(&mut p, "ln3");
            let hidden = d * config.mlp_ratio;
            p.normal(&format!("b{l}.mlp.w1"), (d, hidden), inv(d), &mut rng);
            p.zeros(&format!("b{l}.mlp.b1"), (1, hidden));
            p.normal(&format!("b{l}.mlp.w2"), (hidden, d), 0.5 * inv(hidden), &mut rng);
            p.zeros(&format!("b{l}.mlp.b2"), (1, d));
        }
        p.ones("out.g", (1, d));
        p.zeros("out.b", (1, d));
        p.zeros("out.w", (d, config.out_channels));
        p.zeros("out.ob", (1, config.out_channels));
        p.zeros("skip.w", (d, config.out_channels));
        p.zeros("skip.b", (1, config.out_channels));
        if config.ref_channels == config.out_channels {
            p.zeros("rskip.w", (d, config.out_channels));
            p.zeros("rskip.b", (1, config.out_channels));
        }
        if config.in_channels > config.out_channels {
            let extra = config.in_channels - config.out_channels;
            p.normal("cskip.a", (extra, config.out_channels), inv(extra), &mut rng);
            p.zeros("cskip.w", (d, config.out_channels));
            p.zeros("cskip.b", (1, config.out_channels));
        }
        Ok(Self { config, params: p })
    }

    /// Stores parameters under `prefix.` and the config under `metadata[prefix]`.
    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.put_section(prefix, &self.params);
        if !ck.metadata.is_object() {
            ck.metadata = serde_json::json!({});
        }
        ck.metadata[prefix] = serde_json::json!({ "config": serde_json::to_value(&self.config)? });
        Ok(())
    }

    /// Inverse of [`Dit::write_into`]; rejects missing, misshapen or
    /// non-finite parameters.
    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config: DitConfig = serde_json::from_value(ck.metadata[prefix]["config"].clone())?;
        let reference = Self::init(config.clone(), 0)?;
        let params = ck.section(prefix);
        params.check_finite()?;
        for (name, a) in &reference.params.0 {
            match params.0.get(name) {
                Some(b) if b.dim() == a.dim() => {}
                Some(b) => {
                    return Err(shape_err("checkpoint", format!("`{prefix}.{name}` is {:?}, expected {:?}", b.dim(), a.dim())))
                }
                None => return Err(shape_err("checkpoint", format!("`{prefix}.{name}` missing"))),
            }
        }
        Ok(Self { config, params })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(name, self.params.get(name))
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.p(g, w);
        let bv = self.p(g, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{name}.g"));
        let bias = self.p(g, &format!("{name}.b"));
        let n = g.layer_norm(x, 1e-5);
        let n = g.mul_row(n, gain)?;
        g.add_row(n, bias)
    }

    /// Multi-head attention of `q_src` rows over `kv_src` rows using the
    /// projections stored under `name`.
    fn attend(&self, g: &mut Graph, name: &str, q_src: Var, kv_src: Var, mask: Option<&Array2<bool>>) -> Result<Var> {
        let wq = self.p(g, &format!("{name}.q"));
        let wk = self.p(g, &format!("{name}.k"));
        let wv = self.p(g, &format!("{name}.v"));
        let q = g.matmul(q_src, wq)?;
        let k = g.matmul(kv_src, wk)?;
        let v = g.matmul(kv_src, wv)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, mask)?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, cat, &format!("{name}.o"), &format!("{name}.ob"))
    }

    /// Text keys: the prompt embedding or the learned null token.
    pub fn text_keys(&self, g: &mut Graph, text: Option<&Array2<f64>>) -> Result<Var> {
        match text {
            Some(t) => {
                if t.ncols() != self.config.text_dim || t.nrows() == 0 {
                    return Err(shape_err("channels", format!("text embedding {:?}, width {}", t.dim(), self.config.text_dim)));
                }
                Ok(g.constant(t.clone()))
            }
            None => Ok(self.p(g, "text.null")),
        }
    }

    fn embed_audio(&self, g: &mut Graph, feats: &Array2<f64>) -> Result<Var> {
        let x = g.constant(feats.clone());
        let h = self.linear(g, x, "audio.w1", "audio.b1")?;
        let h = g.silu(h);
        self.linear(g, h, "audio.w2", "audio.b2")
    }

    /// Audio keys `[audio_emb; silent_emb]`, `2·frames` rows. A dropped audio
    /// stream uses the learned null embedding for every frame.
    pub fn audio_keys(&self, g: &mut Graph, audio: Option<&Array2<f64>>, frames: usize) -> Result<Var> {
        let speech = match audio {
            Some(a) => {
                if a.dim() != (frames, self.config.audio_dim) {
                    return Err(shape_err(
                        "frames",
                        format!("audio features {:?} for {frames} latent frames", a.dim()),
                    ));
                }
                self.embed_audio(g, a)?
            }
            None => {
                let ones = g.constant(Array2::ones((frames, 1)));
                let null = self.p(g, "audio.null");
                g.matmul(ones, null)?
            }
        };
        let silent = self.embed_audio(g, &Array2::zeros((frames, self.config.audio_dim)))?;
        g.concat_rows(&[speech, silent])
    }

    /// Which audio keys each video token may attend to.
    pub fn audio_attention_mask(&self, grid: Grid, routing: Option<&[AudioSource]>) -> Result<Array2<bool>> {
        let hw = grid.tokens_per_frame();
        let f = grid.frames;
        if let Some(r) = routing {
            if r.len() != hw {
                return Err(shape_err("routing", format!("{} entries for {hw} positions", r.len())));
            }
        }
        let win = self.config.audio_window;
        Ok(Array2::from_shape_fn((grid.tokens(), 2 * f), |(row, col)| {
            if !self.config.audio_mask {
                return true;
            }
            let frame = row / hw;
            let src = routing.map_or(AudioSource::Speech, |r| r[row % hw]);
            let (half, j) = if col < f { (AudioSource::Speech, col) } else { (AudioSource::Silent, col - f) };
            half == src && frame.abs_diff(j) <= win
        }))
    }

    /// Eq. 4 for block `layer`: `CA(x, c_text) + CA(x, c_audio)` with
    /// independent projections. Either branch may be absent from the config.
    pub fn mm_cross_attention(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        c_text: Option<Var>,
        c_audio: Option<Var>,
        audio_mask: Option<&Array2<bool>>,
    ) -> Result<Var> {
        let text = match c_text {
            Some(c) => Some(self.attend(g, &format!("b{layer}.ta"), x, c, None)?),
            None => None,
        };
        let audio = match c_audio {
            Some(c) => Some(self.attend(g, &format!("b{layer}.aa"), x, c, audio_mask)?),
            None => None,
        };
        match (text, audio) {
            (Some(a), Some(b)) => g.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::InvalidArgument("cross-attention without any condition stream".into())),
        }
    }

    /// Velocity for `x` (`grid.tokens()` rows of `in_channels`).
    pub fn forward(&self, g: &mut Graph, x: Var, grid: Grid, inputs: &DitInputs<'_>, t: f64) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.width;
        let n = grid.tokens();
        let hw = grid.tokens_per_frame();
        if g.value(x).dim() != (n, cfg.in_channels) {
            return Err(shape_err(
                "channels",
                format!("input {:?}, expected ({n}, {})", g.value(x).dim(), cfg.in_channels),
            ));
        }
        if inputs.prefix > grid.frames {
            return Err(Error::InvalidArgument(format!("prefix {} exceeds {} frames", inputs.prefix, grid.frames)));
        }

        let mut h = self.linear(g, x, "in.w", "in.b")?;
        if cfg.positional {
            let pe = g.constant(positional_encoding(grid.frames, grid.h, grid.w, d, 0.0));
            h = g.add(h, pe)?;
        }
        let te = g.constant(timestep_embedding(t, d));
        let te = self.linear(g, te, "t.w1", "t.b1")?;
        let te = g.silu(te);
        let te = self.linear(g, te, "t.w2", "t.b2")?;
        h = g.add_row(h, te)?;
        if inputs.prefix > 0 {
            let sel = g.constant(Array2::from_shape_fn((n, 1), |(r, _)| f64::from(u8::from(r < inputs.prefix * hw))));
            let emb = self.p(g, "prefix.emb");
            let add = g.matmul(sel, emb)?;
            h = g.add(h, add)?;
        }

        let mut rows = n;
        let mut ref_tokens = None;
        if cfg.ref_channels > 0 {
            let r = match inputs.reference {
                Some(z) => {
                    if z.dim() != (1, grid.h, grid.w, cfg.ref_channels) {
                        return Err(shape_err("reference", format!("{:?} on a {}x{} grid", z.dim(), grid.h, grid.w)));
                    }
                    let rt = g.constant(to_tokens(z));
                    ref_tokens = Some(rt);
                    let r = self.linear(g, rt, "ref.w", "ref.b")?;
                    let ty = self.p(g, "ref.type");
                    g.add_row(r, ty)?
                }
                None => {
                    let ones = g.constant(Array2::ones((hw, 1)));
                    let null = self.p(g, "ref.null");
                    g.matmul(ones, null)?
                }
            };
            let r = if cfg.positional {
                let pe = g.constant(positional_encoding(1, grid.h, grid.w, d, -1.0));
                g.add(r, pe)?
            } else {
                r
            };
            let r = g.add_row(r, te)?;
            h = g.concat_rows(&[h, r])?;
            rows += hw;
        }

        let c_text = if cfg.text_dim > 0 { Some(self.text_keys(g, inputs.text)?) } else { None };
        let (c_audio, mask) = if cfg.audio_dim > 0 {
            (
                Some(self.audio_keys(g, inputs.audio, grid.frames)?),
                Some(self.audio_attention_mask(grid, inputs.routing)?),
            )
        } else {
            (None, None)
        };

        for l in 0..cfg.layers {
            let a = self.norm(g, h, &format!("b{l}.ln1"))?;
            let a = self.attend(g, &format!("b{l}.sa"), a, a, None)?;
            h = g.add(h, a)?;
            if c_text.is_some() || c_audio.is_some() {
                let (hv, hr) = if rows > n {
                    (g.slice_rows(h, 0, n)?, Some(g.slice_rows(h, n, rows - n)?))
                } else {
                    (h, None)
                };
                let a = self.norm(g, hv, &format!("b{l}.ln2"))?;
                let ca = self.mm_cross_attention(g, l, a, c_text, c_audio, mask.as_ref())?;
                let hv = g.add(hv, ca)?;
                h = match hr {
                    Some(hr) => g.concat_rows(&[hv, hr])?,
                    None => hv,
                };
            }
            let a = self.norm(g, h, &format!("b{l}.ln3"))?;
            let a = self.linear(g, a, &format!("b{l}.mlp.w1"), &format!("b{l}.mlp.b1"))?;
            let a = g.silu(a);
            let a = self.linear(g, a, &format!("b{l}.mlp.w2"), &format!("b{l}.mlp.b2"))?;
            h = g.add(h, a)?;
        }

        let hv = if rows > n { g.slice_rows(h, 0, n)? } else { h };
        let o = self.norm(g, hv, "out")?;
        let o = self.linear(g, o, "out.w", "out.ob")?;
        // time-dependent per-channel skip from the input latents
        let gate = self.linear(g, te, "skip.w", "skip.b")?;
        let xs = if cfg.in_channels == cfg.out_channels { x } else { g.slice_cols(x, 0, cfg.out_channels)? };
        let skip = g.mul_row(xs, gate)?;
        let mut out = g.add(o, skip)?;
        if let (Some(r), true) = (ref_tokens, cfg.ref_channels == cfg.out_channels) {
            // the same reference tokens broadcast to every frame
            let tiled = g.concat_rows(&vec![r; grid.frames])?;
            let gate = self.linear(g, te, "rskip.w", "rskip.b")?;
            let rs = g.mul_row(tiled, gate)?;
            out = g.add(out, rs)?;
        }
        if cfg.in_channels > cfg.out_channels {
            // extra conditioning channels through a learned map, gated by time
            let xc = g.slice_cols(x, cfg.out_channels, cfg.in_channels - cfg.out_channels)?;
            let a = self.p(g, "cskip.a");
            let mapped = g.matmul(xc, a)?;
            let gate = self.linear(g, te, "cskip.w", "cskip.b")?;
            let cs = g.mul_row(mapped, gate)?;
            out = g.add(out, cs)?;
        }
        Ok(out)
    }
}

impl VelocityModel for Dit {
    type Cond = ConditionBundle;

    fn velocity(&self, g: &mut Graph, z_t: Var, grid: Grid, cond: &ConditionBundle, t: f64) -> Result<Var> {
        let inputs = DitInputs {
            text: (!cond.dropped.text).then_some(&cond.text_emb),
            audio: (!cond.dropped.audio).then_some(&cond.audio_feats),
            reference: (!cond.dropped.reference).then_some(&cond.ref_latent),
            prefix: cond.effective_prefix(),
            routing: cond.routing.as_deref(),
        };
        self.forward(g, z_t, grid, &inputs, t)
    }
}
