//! Metrics: hand keypoint confidence and variance, identity drift, lip-sync
//! correlation, cumulative windowed evaluation, and JSON/SVG reports.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::pose::{PoseSequence, LEFT_HAND, RIGHT_HAND};
use crate::world::{aperture_from_frame, Layout, Palette};

/// Mean confidence over every hand keypoint slot of every frame; absent
/// keypoints count as 0.
pub fn hkc(seq: &PoseSequence) -> Result<f64> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("HKC of an empty sequence".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for f in &seq.frames {
        for g in [LEFT_HAND, RIGHT_HAND] {
            let slots = f.groups.get(g).map(Vec::as_slice).unwrap_or(&[]);
            for k in slots {
                sum += k.map_or(0.0, |k| k.confidence);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sequence has no hand keypoint slots".into()));
    }
    Ok(sum / count as f64)
}

/// Hand keypoint positions `(frames, keypoints, 2)`. Keypoints missing in
/// some frames take the mean of their detected positions, so absence adds
/// no variance; a keypoint never detected is left out.
pub fn hand_tracks(seq: &PoseSequence) -> Array3<f64> {
    let slots = seq
        .frames
        .iter()
        .map(|f| f.groups[LEFT_HAND].len() + f.groups[RIGHT_HAND].len())
        .max()
        .unwrap_or(0);
    let get = |f: &crate::pose::PoseFrame, k: usize| {
        let left = &f.groups[LEFT_HAND];
        if k < left.len() {
            left[k]
        } else {
            f.groups[RIGHT_HAND].get(k - left.len()).copied().flatten()
        }
    };
    let mut cols = Vec::new();
    for k in 0..slots {
        let present: Vec<[f64; 2]> = seq.frames.iter().filter_map(|f| get(f, k)).map(|p| [p.x, p.y]).collect();
        if present.is_empty() {
            continue;
        }
        let n = present.len() as f64;
        let mean = [present.iter().map(|p| p[0]).sum::<f64>() / n, present.iter().map(|p| p[1]).sum::<f64>() / n];
        cols.push(seq.frames.iter().map(|f| get(f, k).map_or(mean, |p| [p.x, p.y])).collect::<Vec<_>>());
    }
    Array3::from_shape_fn((seq.frames.len(), cols.len(), 2), |(t, k, c)| cols[k][t][c])
}

/// Sum over keypoint coordinates of their population variance over time.
pub fn hkv(tracks: &Array3<f64>) -> Result<f64> {
    let (t, k, c) = tracks.dim();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("HKV needs at least 2 frames, got {t}")));
    }
    let mut total = 0.0;
    for kp in 0..k {
        for ch in 0..c {
            // shift by the first sample so a constant track gives exactly 0
            let col = tracks.slice(s![.., kp, ch]);
            let shifted: Vec<f64> = col.iter().map(|v| v - col[0]).collect();
            let mean = shifted.iter().sum::<f64>() / t as f64;
            total += shifted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        }
    }
    Ok(total)
}

/// Bins per colour channel of the identity histograms.
pub const HIST_BINS: usize = 16;

/// Per-channel soft histogram (linear interpolation between bin centres) of
/// the layout's character box, each channel normalised to sum 1.
pub fn character_histogram(frame: &ArrayView3<f64>, layout: &Layout) -> Vec<f64> {
    let (h, w, _) = frame.dim();
    let sc = w as f64 / layout.hr_size as f64;
    let b = layout.character_box;
    let (x0, y0) = ((b[0] * sc).floor() as usize, (b[1] * sc).floor() as usize);
    let (x1, y1) = (((b[2] * sc).ceil() as usize).min(w), ((b[3] * sc).ceil() as usize).min(h));
    let mut hist = vec![0.0; 3 * HIST_BINS];
    for i in y0..y1 {
        for j in x0..x1 {
            for ch in 0..3 {
                let pos = frame[[i, j, ch]].clamp(0.0, 1.0) * HIST_BINS as f64 - 0.5;
                let lo = pos.floor();
                let frac = pos - lo;
                let lo = lo as isize;
                for (bin, wgt) in [(lo, 1.0 - frac), (lo + 1, frac)] {
                    let bin = bin.clamp(0, HIST_BINS as isize - 1) as usize;
                    hist[ch * HIST_BINS + bin] += wgt;
                }
            }
        }
    }
    let count = ((y1 - y0) * (x1 - x0)) as f64;
    hist.iter_mut().for_each(|v| *v /= count);
    hist
}

/// Mean absolute difference between the per-channel cumulative forms of two
/// histograms (the 1-D earth mover's distance in bin units, averaged over
/// bins). Unlike a bin-wise difference it keeps growing as colours move
/// further apart instead of saturating once bins stop overlapping.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (ca, cb) in a.chunks(HIST_BINS).zip(b.chunks(HIST_BINS)) {
        let (mut sa, mut sb) = (0.0, 0.0);
        for (x, y) in ca.iter().zip(cb) {
            sa += x;
            sb += y;
            total += (sa - sb).abs();
        }
    }
    total / a.len() as f64
}

/// Per window of `window` frames, the mean histogram distance of its frames'
/// character regions to the reference frame's. A trailing partial window
/// is dropped.
pub fn identity_drift(video: &Array4<f64>, reference: &Array3<f64>, window: usize, layout: &Layout) -> Result<Vec<f64>> {
    let (t, h, w, c) = video.dim();
    if reference.dim() != (h, w, c) {
        return Err(shape_err("reference", format!("{:?} for frames of {:?}", reference.dim(), (h, w, c))));
    }
    if window == 0 || window > t {
        return Err(Error::InvalidArgument(format!("window {window} for {t} frames")));
    }
    let r = character_histogram(&reference.view(), layout);
    let per_frame: Vec<f64> = (0..t)
        .map(|k| histogram_distance(&character_histogram(&video.index_axis(Axis(0), k), layout), &r))
        .collect();
    Ok(per_frame
        .chunks_exact(window)
        .map(|ch| ch.iter().sum::<f64>() / window as f64)
        .collect())
}

/// A correlation that may be undefined (zero variance on either side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Correlation {
    Defined { value: f64 },
    Undefined { reason: String },
}

impl Correlation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Correlation::Defined { value } => Some(*value),
            Correlation::Undefined { .. } => None,
        }
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(shape_err("correlation", format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Ok(Correlation::Undefined {
            reason: "fewer than two samples".into(),
        });
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 1e-24 || vb <= 1e-24 {
        return Ok(Correlation::Undefined {
            reason: if va <= 1e-24 { "constant first series" } else { "constant second series" }.into(),
        });
    }
    Ok(Correlation::Defined {
        value: (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
    })
}

/// Measured mouth aperture per frame.
pub fn aperture_track(video: &Array4<f64>, layout: &Layout, palette: &Palette) -> Vec<f64> {
    video
        .axis_iter(Axis(0))
        .map(|f| aperture_from_frame(&f.to_owned(), layout, palette))
        .collect()
}

/// Pearson correlation between measured aperture and audio amplitude.
pub fn lipsync_corr(video: &Array4<f64>, audio: &[f64], layout: &Layout, palette: &Palette) -> Result<Correlation> {
    if video.dim().0 != audio.len() {
        return Err(shape_err("audio", format!("{} amplitudes for {} frames", audio.len(), video.dim().0)));
    }
    pearson(&aperture_track(video, layout, palette), audio)
}

/// `metric` on the first `k·window` frames for `k = 1, 2, …`.
pub fn cumulative_windows<F>(metric: F, video: &Array4<f64>, window: usize) -> Result<Vec<f64>>
where
    F: Fn(&Array4<f64>) -> Result<f64>,
{
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let t = video.dim().0;
    (1..=t / window)
        .map(|k| metric(&video.slice(s![..k * window, .., .., ..]).to_owned()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Correlation(Correlation),
}

/// One evaluation run: scalars, per-window series, the config it ran with
/// and the plots it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub window: usize,
    pub metrics: BTreeMap<String, MetricValue>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub unavailable: Vec<String>,
    pub config: serde_json::Value,
    pub plots: Vec<String>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Line plot of one or more series against their index (1-based).
pub fn plot_lines(path: &Path, title: &str, x_label: &str, series: &[(&str, &[f64])]) -> Result<()> {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.1).max(1e-6);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(1f64..n as f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (k, (name, v)) in series.iter().enumerate() {
        let color = <Palette99 as plotters::style::Palette>::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(v.iter().enumerate().map(|(i, y)| ((i + 1) as f64, *y)), color))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Bar chart of named values.
pub fn plot_bars(path: &Path, title: &str, bars: &[(&str, f64)]) -> Result<()> {
    let lo = bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..bars.len().max(1) as f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    let names: Vec<String> = bars.iter().map(|b| b.0.to_string()).collect();
    chart
        .configure_mesh()
        .x_labels(bars.len().max(1))
        .x_label_formatter(&|x| names.get(x.floor() as usize).cloned().unwrap_or_default())
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            bars.iter()
                .enumerate()
                .map(|(i, b)| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.1)], BLUE.filled())),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Keypoint, PoseFrame};
    use crate::world::{make_scene, render, DriftSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_with(conf: impl Fn(usize, usize) -> Option<f64>, frames: usize) -> PoseSequence {
        let fr = (0..frames)
            .map(|t| {
                let mut f = PoseFrame::empty();
                for (gi, g) in [LEFT_HAND, RIGHT_HAND].into_iter().enumerate() {
                    f.groups[g] = (0..2)
                        .map(|k| {
                            conf(t, gi * 2 + k).map(|c| Keypoint {
                                x: 1.0,
                                y: 2.0,
                                confidence: c,
                            })
                        })
                        .collect();
                }
                f
            })
            .collect();
        PoseSequence::new(32, 32, fr)
    }

    #[test]
    fn hkc_examples() {
        assert_eq!(hkc(&seq_with(|_, _| Some(1.0), 3)).unwrap(), 1.0);
        assert_eq!(hkc(&seq_with(|_, k| (k % 2 == 0).then_some(1.0), 4)).unwrap(), 0.5);
        assert!(hkc(&PoseSequence::new(32, 32, vec![])).is_err());
    }

    #[test]
    fn hkv_examples() {
        let static_tracks = Array3::from_elem((5, 3, 2), 0.7);
        assert_eq!(hkv(&static_tracks).unwrap(), 0.0);
        let osc = Array3::from_shape_fn((4, 1, 2), |(t, _, c)| if c == 0 { if t % 2 == 0 { -1.0 } else { 1.0 } } else { 0.0 });
        assert_eq!(hkv(&osc).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = Array3::from_shape_fn((6, 4, 2), |_| rng.random::<f64>());
        let a = hkv(&tr).unwrap();
        let b = hkv(&(&tr * 2.0)).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
        assert!(hkv(&Array3::zeros((1, 2, 2))).is_err());
    }

    #[test]
    fn drift_series_examples() {
        let layout = Layout::default();
        let clean = render(&make_scene(3, 37, None).unwrap());
        let f0 = clean.lr.index_axis(Axis(0), 0).to_owned();
        let still = Array4::from_shape_fn((8, 32, 32, 3), |(_, i, j, c)| f0[[i, j, c]]);
        assert!(identity_drift(&still, &f0, 4, &layout).unwrap().iter().all(|v| *v == 0.0));
        let drifted = render(&make_scene(3, 37, Some(DriftSpec::gain(0.01))).unwrap());
        let series = identity_drift(&drifted.lr, &f0, 4, &layout).unwrap();
        assert_eq!(series.len(), 9);
        assert!(series.windows(2).all(|p| p[1] > p[0]), "{series:?}");
        assert!(identity_drift(&still, &Array3::zeros((16, 16, 3)), 4, &layout).is_err());
    }

    #[test]
    fn lipsync_examples() {
        let layout = Layout::default();
        let sc = make_scene(11, 25, None).unwrap();
        let r = render(&sc);
        let c = lipsync_corr(&r.hr, &sc.audio, &layout, &sc.palette).unwrap();
        assert!(c.value().unwrap() >= 0.95, "{c:?}");
        let flat = vec![0.5; 25];
        assert!(matches!(lipsync_corr(&r.hr, &flat, &layout, &sc.palette).unwrap(), Correlation::Undefined { .. }));
        assert!(lipsync_corr(&r.hr, &flat[..3], &layout, &sc.palette).is_err());
    }

    #[test]
    fn cumulative_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Array4::from_shape_fn((10, 2, 2, 3), |_| rng.random::<f64>());
        let mean = |x: &Array4<f64>| Ok(x.mean().unwrap());
        let one = cumulative_windows(mean, &v, 10).unwrap();
        assert_eq!(one, vec![v.mean().unwrap()]);
        assert_eq!(cumulative_windows(|_| Ok(2.5), &v, 3).unwrap(), vec![2.5; 3]);
        let s = cumulative_windows(mean, &v, 3).unwrap();
        for (k, val) in s.iter().enumerate() {
            assert_eq!(*val, v.slice(s![..3 * (k + 1), .., .., ..]).mean().unwrap());
        }
    }

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.svg");
        plot_lines(&p, "drift", "window", &[("x", &[1.0, 2.0, 1.5])]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<svg"));
        let q = dir.path().join("b.svg");
        plot_bars(&q, "corr", &[("true", 0.6), ("shuffled", -0.1)]).unwrap();
        assert!(std::fs::metadata(&q).unwrap().len() > 0);
    }
}
