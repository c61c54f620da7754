//! Tensor files and frame directories.
//!
//! A tensor file is one line of JSON, `{"shape":[...],"dtype":"f32","kind":"LR"}`,
//! a `\n`, then the row-major payload as little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, Array4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::codec::LatentKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: LatentKind,
}

pub fn write_tensor(path: &Path, data: &ArrayD<f64>, kind: LatentKind) -> Result<()> {
    let header = TensorHeader {
        shape: data.shape().to_vec(),
        dtype: "f32".into(),
        kind,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(data.len() * 4);
    for v in data.as_standard_layout().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(TensorHeader, ArrayD<f64>)> {
    let format_err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: TensorHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| format_err(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(format_err(format!("unsupported dtype {}", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(format_err(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&header.shape), values)
        .map_err(|e| format_err(e.to_string()))?;
    Ok((header, arr))
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn write_frames_png(dir: &Path, frames: &Array4<f64>) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let (t, h, w, c) = frames.dim();
    let mut names = Vec::with_capacity(t);
    for i in 0..t {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| {
                    let v = frames[[i, y, x, ch.min(c - 1)]];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let name = format!("frame_{i:05}.png");
        let mut file = fs::File::create(dir.join(&name))?;
        let mut encoded = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut encoded), image::ImageFormat::Png)?;
        file.write_all(&encoded)?;
        names.push(name);
    }
    Ok(names)
}

pub fn read_frames_png(dir: &Path) -> Result<Array4<f64>> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: "no frame_*.png files".into(),
        });
    }
    let mut frames: Option<Array4<f64>> = None;
    for (i, name) in names.iter().enumerate() {
        let img = image::open(dir.join(name))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let arr = frames.get_or_insert_with(|| Array4::zeros((names.len(), h, w, 3)));
        if arr.dim().1 != h || arr.dim().2 != w {
            return Err(Error::Format {
                path: dir.join(name),
                detail: "frame size differs from frame 0".into(),
            });
        }
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                arr[[i, y as usize, x as usize, ch]] = p[ch] as f64 / 255.0;
            }
        }
    }
    Ok(frames.expect("at least one frame"))
}
