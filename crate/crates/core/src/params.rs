//! Named parameter sets, the Adam optimizer, and the checkpoint container.
//!
//! Checkpoint layout: one line of JSON
//! `{"format":"talkgen-checkpoint","version":1,"metadata":{..},"arrays":[{"name","shape","offset"}]}`,
//! a `\n`, then every array as little-endian `f64` in header order. `offset`
//! counts elements from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "talkgen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet(pub BTreeMap<String, Array2<f64>>);

impl ParamSet {
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from set"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.0.insert(name.into(), value);
    }

    pub fn count(&self) -> usize {
        self.0.values().map(|a| a.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, a) in &self.0 {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "parameters",
                    detail: format!("`{name}` has non-finite entries"),
                });
            }
        }
        Ok(())
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        self.insert(name, Array2::from_shape_simple_fn(shape, || dist.sample(rng)));
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Array2::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Array2::ones(shape));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamSet::default(),
            v: ParamSet::default(),
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array2<f64>>) -> Result<f64> {
        let norm = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient",
                detail: format!("norm {norm}"),
            });
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")));
            };
            let m = self.m.0.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.0.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(norm)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: [a.nrows(), a.ncols()],
                    offset,
                };
                offset += a.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            metadata: self.metadata.clone(),
            arrays,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for a in self.arrays.values() {
            for v in a.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| err("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| err(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(err(format!("format `{}`", header.format)));
        }
        if header.version > CHECKPOINT_VERSION {
            return Err(err(format!("version {} is newer than {CHECKPOINT_VERSION}", header.version)));
        }
        let payload = &bytes[nl + 1..];
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(err(format!("array `{}` runs past the payload", e.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let a = Array2::from_shape_vec((e.shape[0], e.shape[1]), data).map_err(|x| err(x.to_string()))?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "checkpoint",
                    detail: format!("array `{}` in {}", e.name, path.display()),
                });
            }
            arrays.insert(e.name, a);
        }
        Ok(Self {
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Splits arrays by a `prefix.` namespace.
    pub fn section(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}.");
        ParamSet(
            self.arrays
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn put_section(&mut self, prefix: &str, params: &ParamSet) {
        for (k, v) in &params.0 {
            self.arrays.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::default();
        p.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = BTreeMap::from([("x".to_string(), p.get("x") * 2.0)]);
            opt.update(&mut p, &g).unwrap();
        }
        assert!(p.get("x").iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = ParamSet::default();
        p.insert("x", array![[1.0]]);
        let mut opt = Adam::new(AdamConfig::default());
        let g = BTreeMap::from([("x".to_string(), array![[f64::NAN]])]);
        assert!(opt.update(&mut p, &g).is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::default();
        p.normal("a.w", (3, 4), 1.0, &mut rng);
        p.normal("b", (1, 7), 1e-300, &mut rng);
        let mut ck = Checkpoint {
            metadata: serde_json::json!({"step": 12, "rng": {"seed": 1, "step": 12}}),
            arrays: BTreeMap::new(),
        };
        ck.put_section("model", &p);
        let path = Path::new("mem");
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.section("model"), p);
    }

    #[test]
    fn checkpoint_rejects_non_finite_arrays() {
        let ck = Checkpoint {
            metadata: serde_json::Value::Null,
            arrays: BTreeMap::from([("x".to_string(), array![[f64::INFINITY]])]),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::NonFinite { .. })
        ));
    }
}
