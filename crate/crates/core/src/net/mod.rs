//! The three autoencoders: a skeleton prior over bone scales, a B-motion
//! retargeting VAE and an A-motion adaptation VAE conditioned on B's motion.
//!
//! All tensors are matrices whose rows enumerate `(batch, frame, joint)` and
//! whose columns are channels; see [`crate::tape`].

mod batch;
mod layers;

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::skeleton::Skeleton;
use crate::tape::{Act, Dims, Mat, Var};

pub use batch::{context_features, Batch, PairInput};
pub use layers::{Bn, Dense, Ggru, Pass, Stgcn, StgcnLayer, StgcnLayerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Hidden widths of the skeleton encoder; the last one is the latent size.
    pub skeleton_encoder: Vec<usize>,
    /// Hidden widths of the skeleton decoder, before the bone-scale output.
    pub skeleton_decoder: Vec<usize>,
    /// Channel ladder shared by the two delta encoders. The last entry is the
    /// per-joint latent size and the decoders' hidden size.
    pub motion_channels: Vec<usize>,
    pub motion_strides: Vec<usize>,
    /// Channel width of every layer of the B-context encoder.
    pub context_channels: usize,
    pub context_layers: usize,
    pub temporal_kernel: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Hidden widths of the decoders' per-joint output head (before the 3-d output).
    pub head: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            skeleton_encoder: vec![16, 32, 64, 128, 256],
            skeleton_decoder: vec![128, 64, 32],
            motion_channels: vec![32, 64, 128, 256, 256],
            motion_strides: vec![1, 2, 2, 2, 1],
            context_channels: 16,
            context_layers: 5,
            temporal_kernel: 5,
            dropout: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            head: vec![256, 256],
        }
    }
}

impl NetConfig {
    /// Reduced widths for tests and gradient checks.
    pub fn tiny(hidden: usize) -> Self {
        NetConfig {
            skeleton_encoder: vec![4, hidden],
            skeleton_decoder: vec![4],
            motion_channels: vec![4, hidden],
            motion_strides: vec![2, 1],
            context_channels: 3,
            context_layers: 2,
            temporal_kernel: 3,
            dropout: 0.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            head: vec![hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        *self.motion_channels.last().expect("validated")
    }

    pub fn skeleton_latent(&self) -> usize {
        *self.skeleton_encoder.last().expect("validated")
    }

    /// Frames must be a multiple of this.
    pub fn frame_multiple(&self) -> usize {
        self.motion_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("network config: {m}")));
        if self.skeleton_encoder.is_empty() || self.motion_channels.is_empty() {
            return bad("empty layer list");
        }
        if self.motion_channels.len() != self.motion_strides.len() {
            return bad("motion_channels and motion_strides differ in length");
        }
        let widths = self
            .skeleton_encoder
            .iter()
            .chain(&self.skeleton_decoder)
            .chain(&self.motion_channels)
            .chain(&self.head);
        if widths.copied().chain([self.context_channels]).any(|w| w == 0) {
            return bad("zero width");
        }
        if self.context_layers == 0 {
            return bad("context encoder needs at least one layer");
        }
        if self.motion_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return bad("strides must be 1 or 2");
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return bad("temporal kernel must be odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps < 0.0 {
            return bad("batch-norm momentum or epsilon out of range");
        }
        Ok(())
    }
}

/// Per-joint Gaussian posterior.
#[derive(Debug, Clone, Copy)]
pub struct Code {
    pub mu: Var,
    pub log_var: Var,
}

/// How the latent code is chosen at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// The prior mode, `z = 0`.
    Zero,
    /// A draw from the standard normal prior.
    Sample,
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}` of a skeleton's adjacency.
pub fn normalized_adjacency(skeleton: &Skeleton) -> Mat {
    normalize_adjacency(&skeleton.adjacency())
}

/// Symmetric normalization of any 0/1 adjacency matrix.
pub fn normalize_adjacency(a: &Mat) -> Mat {
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| {
        if a[[i, j]] == 0.0 {
            0.0
        } else {
            a[[i, j]] / (deg[i] * deg[j]).sqrt()
        }
    })
}

/// Normalized adjacency plus self-loops, used by the recurrent decoders.
pub fn recurrent_adjacency(skeleton: &Skeleton) -> Mat {
    normalized_adjacency(skeleton) + Mat::eye(skeleton.n_joints())
}

/// Blend batch statistics into the running buffers of each batch-norm layer.
pub fn update_running_stats(store: &mut ParamStore, stats: Vec<(String, crate::tape::BatchStats)>, momentum: f64) {
    for (name, s) in stats {
        for (buf, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let running = store.buffer_mut(&format!("{name}.{buf}"));
            for (r, &b) in running.iter_mut().zip(batch.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Scale of the bone above each joint; the root gets one.
pub fn joint_scale_channel(skeleton: &Skeleton, scales: &[f64]) -> Vec<f64> {
    (0..skeleton.n_joints())
        .map(|j| skeleton.bone_of_joint(j).map_or(1.0, |k| scales[k]))
        .collect()
}

pub struct Model {
    pub config: NetConfig,
    pub store: ParamStore,
    pub skeleton_a: Skeleton,
    pub skeleton_b: Skeleton,
    adj_a: Rc<Mat>,
    adj_b: Rc<Mat>,
    rec_adj_a: Rc<Mat>,
    rec_adj_b: Rc<Mat>,
    skel_enc: Vec<Dense>,
    skel_mu: Dense,
    skel_log_var: Dense,
    skel_dec: Vec<Dense>,
    skel_out: Dense,
    enc_b: Stgcn,
    enc_b_mu: Dense,
    enc_b_log_var: Dense,
    dec_b: Ggru,
    enc_a: Stgcn,
    context: Stgcn,
    enc_a_hidden: Dense,
    enc_a_mu: Dense,
    enc_a_log_var: Dense,
    dec_a: Ggru,
}

/// Channels of the B-encoder input: delta plus the joint's bone scale.
pub const ENC_B_INPUT: usize = 4;
pub const ENC_A_INPUT: usize = 3;
pub const CONTEXT_INPUT: usize = 8;

impl Model {
    pub fn new(config: NetConfig, skeleton_a: Skeleton, skeleton_b: Skeleton, seed: u64) -> Result<Self> {
        config.validate()?;
        if skeleton_a.n_joints() != skeleton_b.n_joints() {
            return Err(Error::structural(format!(
                "characters need equal joint counts for per-joint conditioning, got {} and {}",
                skeleton_a.n_joints(),
                skeleton_b.n_joints()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = &mut store;
        let r = &mut rng;
        let c = &config;
        let hidden = c.hidden();
        let n_bones = skeleton_b.n_bones();

        let mut skel_enc = Vec::new();
        let mut width = n_bones;
        let (enc_hidden, latent) = c.skeleton_encoder.split_at(c.skeleton_encoder.len() - 1);
        for (i, &w) in enc_hidden.iter().enumerate() {
            skel_enc.push(Dense::new(st, &format!("skel_enc.{i}"), width, w, Act::Relu, r));
            width = w;
        }
        let skel_mu = Dense::new_scaled(st, "skel_enc.mu", width, latent[0], 0.1, r);
        let skel_log_var = Dense::new_scaled(st, "skel_enc.log_var", width, latent[0], 0.1, r);
        let mut skel_dec = Vec::new();
        width = latent[0];
        for (i, &w) in c.skeleton_decoder.iter().enumerate() {
            skel_dec.push(Dense::new(st, &format!("skel_dec.{i}"), width, w, Act::Relu, r));
            width = w;
        }
        let skel_out = Dense::with_act(
            Dense::new_scaled(st, "skel_dec.out", width, n_bones, 0.1, r),
            Act::UnitSoftplus,
        );

        let motion_specs = |input: usize| -> Vec<StgcnLayerSpec> {
            let mut prev = input;
            c.motion_channels
                .iter()
                .zip(&c.motion_strides)
                .map(|(&ch, &stride)| {
                    let spec = StgcnLayerSpec {
                        in_channels: prev,
                        out_channels: ch,
                        temporal_stride: stride,
                        temporal_kernel: c.temporal_kernel,
                        dropout_rate: c.dropout,
                    };
                    prev = ch;
                    spec
                })
                .collect()
        };
        let enc_b = Stgcn::new(st, "enc_b", &motion_specs(ENC_B_INPUT), r);
        let enc_b_mu = Dense::new_scaled(st, "enc_b.mu", hidden + 6, hidden, 0.1, r);
        let enc_b_log_var = Dense::new_scaled(st, "enc_b.log_var", hidden + 6, hidden, 0.1, r);
        let dec_b = Ggru::new(st, "dec_b", 1 + 6 + 3, hidden, &c.head, r);

        let enc_a = Stgcn::new(st, "enc_a", &motion_specs(ENC_A_INPUT), r);
        let mut prev = CONTEXT_INPUT;
        let context_specs: Vec<StgcnLayerSpec> = (0..c.context_layers)
            .map(|i| {
                let spec = StgcnLayerSpec {
                    in_channels: prev,
                    out_channels: c.context_channels,
                    temporal_stride: c.motion_strides.get(i).copied().unwrap_or(1),
                    temporal_kernel: c.temporal_kernel,
                    dropout_rate: c.dropout,
                };
                prev = c.context_channels;
                spec
            })
            .collect();
        let context = Stgcn::new(st, "context", &context_specs, r);
        let enc_a_in = hidden + c.context_channels + 6;
        let enc_a_hidden = Dense::new(st, "enc_a.hidden", enc_a_in, hidden, Act::Relu, r);
        let enc_a_mu = Dense::new_scaled(st, "enc_a.mu", hidden, hidden, 0.1, r);
        let enc_a_log_var = Dense::new_scaled(st, "enc_a.log_var", hidden, hidden, 0.1, r);
        let dec_a = Ggru::new(st, "dec_a", c.context_channels + 6 + 3, hidden, &c.head, r);

        Ok(Model {
            adj_a: Rc::new(normalized_adjacency(&skeleton_a)),
            adj_b: Rc::new(normalized_adjacency(&skeleton_b)),
            rec_adj_a: Rc::new(recurrent_adjacency(&skeleton_a)),
            rec_adj_b: Rc::new(recurrent_adjacency(&skeleton_b)),
            config,
            store,
            skeleton_a,
            skeleton_b,
            skel_enc,
            skel_mu,
            skel_log_var,
            skel_dec,
            skel_out,
            enc_b,
            enc_b_mu,
            enc_b_log_var,
            dec_b,
            enc_a,
            context,
            enc_a_hidden,
            enc_a_mu,
            enc_a_log_var,
            dec_a,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.skeleton_b.n_joints()
    }

    pub fn n_bones(&self) -> usize {
        self.skeleton_b.n_bones()
    }

    pub fn pass<'a>(&'a self, train: bool, rng: &'a mut ChaCha8Rng) -> Pass<'a> {
        Pass::new(&self.store, &self.config, train, rng)
    }

    /// Skeleton encoder: `batch x n_bones` scales to a `batch x latent` code.
    pub fn encode_skeleton(&self, p: &mut Pass, scales: Var) -> Code {
        let mut h = scales;
        for d in &self.skel_enc {
            h = d.forward(p, h);
        }
        Code {
            mu: self.skel_mu.forward(p, h),
            log_var: self.skel_log_var.forward(p, h),
        }
    }

    /// Skeleton decoder: `batch x latent` to positive `batch x n_bones` scales.
    pub fn decode_skeleton(&self, p: &mut Pass, z: Var) -> Var {
        let mut h = z;
        for d in &self.skel_dec {
            h = d.forward(p, h);
        }
        self.skel_out.forward(p, h)
    }

    fn check_frames(&self, dims: Dims) -> Result<()> {
        let m = self.config.frame_multiple();
        if dims.frames == 0 || !dims.frames.is_multiple_of(m) {
            return Err(Error::structural(format!(
                "frame count {} is not a positive multiple of {m}",
                dims.frames
            )));
        }
        if dims.joints != self.n_joints() {
            return Err(Error::structural(format!(
                "batch has {} joints, model expects {}",
                dims.joints,
                self.n_joints()
            )));
        }
        Ok(())
    }

    /// B-delta encoder. `input` is `(b, t, j) x 4`: delta and joint bone scale.
    pub fn encode_delta_b(&self, p: &mut Pass, input: Var, dims: Dims, first: Var, last: Var) -> Result<Code> {
        self.check_frames(dims)?;
        let (feat, fd) = self.enc_b.forward(p, input, dims, &self.adj_b);
        let pooled = p.tape.time_mean(feat, fd);
        let cat = p.tape.concat_cols(&[pooled, first, last]);
        Ok(Code {
            mu: self.enc_b_mu.forward(p, cat),
            log_var: self.enc_b_log_var.forward(p, cat),
        })
    }

    /// B-delta decoder. `static_input` is `(b, j) x 7`: joint bone scale and
    /// the first and last template frames. Returns `(b, t, j) x 3` deltas.
    pub fn decode_delta_b(
        &self,
        p: &mut Pass,
        z: Var,
        static_input: Var,
        dims: Dims,
        teacher: Option<&Mat>,
    ) -> Result<Var> {
        self.check_frames(dims)?;
        Ok(self.dec_b.unroll(p, z, static_input, dims, &self.rec_adj_b, teacher))
    }

    /// B-context encoder over `(b, t, j) x 8` features of B's motion; returns `(b, j) x context`.
    pub fn encode_context(&self, p: &mut Pass, features: Var, dims: Dims) -> Result<Var> {
        self.check_frames(dims)?;
        let (feat, fd) = self.context.forward(p, features, dims, &self.adj_b);
        Ok(p.tape.time_mean(feat, fd))
    }

    /// A-delta encoder over `(b, t, j) x 3` deltas and the B context.
    pub fn encode_delta_a(
        &self,
        p: &mut Pass,
        delta: Var,
        dims: Dims,
        context: Var,
        first: Var,
        last: Var,
    ) -> Result<Code> {
        self.check_frames(dims)?;
        let (feat, fd) = self.enc_a.forward(p, delta, dims, &self.adj_a);
        let pooled = p.tape.time_mean(feat, fd);
        let cat = p.tape.concat_cols(&[pooled, context, first, last]);
        let h = self.enc_a_hidden.forward(p, cat);
        Ok(Code {
            mu: self.enc_a_mu.forward(p, h),
            log_var: self.enc_a_log_var.forward(p, h),
        })
    }

    /// A-delta decoder; the step input carries the B context instead of bone scales.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_delta_a(
        &self,
        p: &mut Pass,
        z: Var,
        context: Var,
        first: Var,
        last: Var,
        dims: Dims,
        teacher: Option<&Mat>,
    ) -> Result<Var> {
        self.check_frames(dims)?;
        let static_input = p.tape.concat_cols(&[context, first, last]);
        Ok(self.dec_a.unroll(p, z, static_input, dims, &self.rec_adj_a, teacher))
    }

    /// Fold the batch statistics gathered by a training pass into the running averages.
    pub fn apply_bn_stats(&mut self, stats: Vec<(String, crate::tape::BatchStats)>) {
        update_running_stats(&mut self.store, stats, self.config.bn_momentum);
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    /// Write `<stem>.json` and `<stem>.bin`. `extra` is stored under `meta.extra`.
    pub fn save(&self, manifest_path: &Path, extra: serde_json::Value) -> Result<()> {
        let blob = manifest_path.with_extension("bin");
        let meta = serde_json::json!({
            "config": self.config,
            "skeleton_a": self.skeleton_a,
            "skeleton_b": self.skeleton_b,
            "skeleton_a_hash": self.skeleton_a.fingerprint(),
            "skeleton_b_hash": self.skeleton_b.fingerprint(),
            "parameter_count": self.store.scalar_count(),
            "extra": extra,
        });
        self.store.save(manifest_path, &blob, meta)
    }

    /// Rebuild a model from a checkpoint manifest. Returns the model and the
    /// `extra` metadata saved with it.
    pub fn load(manifest_path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, e))?;
        let meta = &head["meta"];
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::parse(manifest_path, format!("missing meta.{k}")));
        let config: NetConfig = serde_json::from_value(field("config")?).map_err(|e| Error::parse(manifest_path, e))?;
        let sa: Skeleton = serde_json::from_value(field("skeleton_a")?).map_err(|e| Error::parse(manifest_path, e))?;
        let sb: Skeleton = serde_json::from_value(field("skeleton_b")?).map_err(|e| Error::parse(manifest_path, e))?;
        for (s, key) in [(&sa, "skeleton_a_hash"), (&sb, "skeleton_b_hash")] {
            if meta.get(key).and_then(|v| v.as_str()) != Some(s.fingerprint().as_str()) {
                return Err(Error::parse(manifest_path, format!("{key} does not match the stored skeleton")));
            }
        }
        let mut model = Model::new(config, sa, sb, 0)?;
        let meta = model.store.load_into(manifest_path)?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}
