//! Named parameter storage, initialization and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` plus one
//! little-endian, row-major `float32` blob per parameter. Values held in a
//! [`ParamStore`] are always representable in `f32` (they are rounded on
//! registration and after every optimizer step), so saving and loading is
//! bit-exact.

use std::collections::HashMap;
use std::fs;
use std::ops::Index;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Mat, Tape, Var};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "attrseg-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on duplicate names, which indicates a model
    /// construction bug.
    pub fn register(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        round_to_f32(&mut value);
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Rounds every value to the nearest `f32`.
    pub fn quantize(&mut self) {
        self.values.iter_mut().for_each(round_to_f32);
    }

    /// Records every parameter on `tape`. With `trainable = false` the
    /// parameters are recorded as constants and the backward pass skips them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, value)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("{i:03}_{name}.bin");
            let mut bytes = Vec::with_capacity(value.len() * 4);
            for &v in value.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: [value.nrows(), value.ncols()],
                dtype: "float32".into(),
                file,
            });
        }
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            byte_order: "little".into(),
            layout: "row-major".into(),
            config: config.clone(),
            params: entries,
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Loads a checkpoint, returning the store and the echoed config.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unexpected format tag `{}`",
                manifest.format
            )));
        }
        let mut store = ParamStore::new();
        for entry in manifest.params {
            if entry.dtype != "float32" {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let bytes = fs::read(dir.join(&entry.file))?;
            let [rows, cols] = entry.shape;
            if bytes.len() != rows * cols * 4 {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} bytes, found {}",
                    entry.name,
                    rows * cols * 4,
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.register(entry.name, value);
        }
        Ok((store, manifest.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    byte_order: String,
    layout: String,
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    file: String,
}

/// Tape handles for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradient per parameter, zero-filled where the loss does not depend on
    /// a parameter.
    pub fn collect_grads(&self, tape: &Tape, grads: &Grads) -> Vec<Mat> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.shape(v)))
            })
            .collect()
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Mat::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn trunc_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
        let normal = Normal::new(0.0, std).expect("positive std");
        Mat::from_shape_simple_fn((rows, cols), || loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registration_rounds_to_f32() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::from_elem((1, 1), 0.1));
        assert_eq!(store.get(id)[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.register("a.w", init::xavier(&mut rng, 4, 3));
        store.register("b", init::trunc_normal(&mut rng, 2, 5, 0.02));
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"d": 4});
        store.save(dir.path(), &cfg).unwrap();
        let (loaded, echoed) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(loaded.len(), store.len());
        for ((_, n1, v1), (_, n2, v2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = v1.iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = v2.iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = init::trunc_normal(&mut rng, 50, 20, 0.02);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
    }
}
