//! Named trainable parameters, non-trainable buffers, the Adam optimizer and
//! checkpoint persistence (JSON manifest plus little-endian `f64` blob).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    grads: Vec<Mat>,
    /// Non-trainable state such as batch-norm running statistics.
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.grads.push(Mat::zeros(value.raw_dim()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform `rows x cols` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, gain: f64, rng: &mut R) -> ParamId {
        let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
        let w = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, w)
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let w = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, w)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), v))
    }

    pub fn add_buffer(&mut self, name: &str, value: Vec<f64>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffer(&self, name: &str) -> &[f64] {
        &self.buffers[name]
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.buffers.get_mut(name).expect("known buffer")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        self.grads[id.0] += g;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Write `manifest` JSON and a little-endian `f64` blob holding every
    /// parameter, then every buffer, in manifest order.
    pub fn save(&self, manifest_path: &Path, blob_path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut blob = Vec::with_capacity(8 * self.scalar_count());
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, v) in self.names.iter().zip(&self.values) {
            let std = v.as_standard_layout();
            for x in std.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                kind: TensorKind::Param,
                shape: vec![v.nrows(), v.ncols()],
                offset,
            });
            offset += v.len();
        }
        for (name, b) in &self.buffers {
            for x in b {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                kind: TensorKind::Buffer,
                shape: vec![b.len()],
                offset,
            });
            offset += b.len();
        }
        let blob_file = blob_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            blob: blob_file,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            scalar_count: offset,
            tensors: entries,
            meta,
        };
        fs::write(blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Numerical(format!("cannot serialize checkpoint: {e}")))?;
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
    }

    /// Load values into a store whose layout was already built by the model
    /// constructor. Names and shapes must match exactly.
    pub fn load_into(&mut self, manifest_path: &Path) -> Result<serde_json::Value> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, e))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                manifest_path,
                format!("unsupported checkpoint version {}", manifest.format_version),
            ));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(Error::parse(&blob_path, "parameter blob checksum mismatch"));
        }
        if blob.len() != 8 * manifest.scalar_count {
            return Err(Error::parse(&blob_path, "parameter blob has the wrong size"));
        }
        let read = |offset: usize, n: usize| -> Vec<f64> {
            blob[8 * offset..8 * (offset + n)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let params: Vec<&TensorEntry> = manifest
            .tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .collect();
        if params.len() != self.values.len() {
            return Err(Error::structural(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                self.values.len()
            )));
        }
        let mismatch = |what: &str| Error::structural(format!("checkpoint mismatch: {what}"));
        let mut new_values = Vec::with_capacity(params.len());
        for (entry, (name, v)) in params.iter().zip(self.names.iter().zip(&self.values)) {
            if &entry.name != name {
                return Err(mismatch(&format!("expected {name}, found {}", entry.name)));
            }
            if entry.shape != [v.nrows(), v.ncols()] {
                return Err(mismatch(&format!(
                    "{name} has shape {:?}, model expects [{}, {}]",
                    entry.shape,
                    v.nrows(),
                    v.ncols()
                )));
            }
            if entry.offset + v.len() > manifest.scalar_count {
                return Err(mismatch(&format!("{name} extends past the blob")));
            }
            let data = read(entry.offset, v.len());
            new_values.push(Mat::from_shape_vec(v.raw_dim(), data).expect("shape checked"));
        }
        let mut new_buffers = BTreeMap::new();
        for entry in manifest.tensors.iter().filter(|t| t.kind == TensorKind::Buffer) {
            let Some(existing) = self.buffers.get(&entry.name) else {
                return Err(mismatch(&format!("unknown buffer {}", entry.name)));
            };
            if entry.shape != [existing.len()] || entry.offset + existing.len() > manifest.scalar_count {
                return Err(mismatch(&format!("buffer {} has the wrong shape", entry.name)));
            }
            new_buffers.insert(entry.name.clone(), read(entry.offset, existing.len()));
        }
        if new_buffers.len() != self.buffers.len() {
            return Err(mismatch("buffer set differs"));
        }
        self.values = new_values;
        self.buffers = new_buffers;
        Ok(manifest.meta)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Offset in `f64` elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    blob: String,
    blob_sha256: String,
    scalar_count: usize,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((value, grad), (m, v)) in store
            .values
            .iter_mut()
            .zip(&store.grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add_glorot("a.w", 3, 4, 1.0, &mut rng);
        s.add_const("a.b", 1, 4, 0.5);
        s.add_buffer("bn.mean", vec![0.1, 0.2]);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let (m, b) = (dir.path().join("ckpt.json"), dir.path().join("ckpt.bin"));
        s.save(&m, &b, serde_json::json!({"epoch": 3})).unwrap();
        let mut fresh = store();
        fresh.value_mut(ParamId(0)).fill(0.0);
        fresh.buffer_mut("bn.mean")[0] = 9.0;
        let meta = fresh.load_into(&m).unwrap();
        assert_eq!(meta["epoch"], 3);
        assert_eq!(fresh, s);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_structural() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("c.json"), dir.path().join("c.bin"));
        store().save(&m, &b, serde_json::Value::Null).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut other = ParamStore::new();
        other.add_glorot("a.w", 4, 4, 1.0, &mut rng);
        other.add_const("a.b", 1, 4, 0.5);
        other.add_buffer("bn.mean", vec![0.0, 0.0]);
        assert!(matches!(other.load_into(&m), Err(Error::Structural(_))));
    }

    #[test]
    fn corrupted_blob_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("c.json"), dir.path().join("c.bin"));
        store().save(&m, &b, serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&b).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&b, bytes).unwrap();
        assert!(matches!(store().load_into(&m), Err(Error::Parse { .. })));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("p", Mat::from_elem((1, 2), 1.0));
        s.accumulate_grad(id, &ndarray::arr2(&[[3.0, -0.01]]));
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s);
        let v = s.value(id);
        assert!((v[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[[0, 1]] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("p", Mat::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..2000 {
            s.zero_grads();
            let g = s.value(id) * 2.0;
            s.accumulate_grad(id, &g);
            adam.step(&mut s);
        }
        assert!(s.value(id)[[0, 0]].abs() < 1e-2);
    }
}
