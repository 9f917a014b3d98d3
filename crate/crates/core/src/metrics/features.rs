//! Motion features for the Fréchet distance: a small interaction-kind
//! classifier whose penultimate activations serve as the embedding.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormalizationRecord};
use crate::error::{Error, Result};
use crate::motion::InteractionClip;
use crate::net::{normalize_adjacency, update_running_stats, Dense, NetConfig, Pass, Stgcn, StgcnLayerSpec};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tape::{Act, Dims, Mat, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Frames per window; every clip contributes all windows at `stride`.
    pub window: usize,
    pub stride: usize,
    pub channels: [usize; 2],
    pub temporal_kernel: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 16,
            stride: 8,
            channels: [32, 64],
            temporal_kernel: 5,
            feature_dim: 64,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Window start frames covering a clip of `frames` frames.
pub fn window_starts(frames: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || frames < window {
        return Err(Error::domain(format!(
            "cannot cut {frames} frames into windows of {window} at stride {stride}"
        )));
    }
    Ok((0..=frames - window).step_by(stride).collect())
}

/// Two-ST-GCN-layer classifier over both characters as one graph.
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    pub kinds: Vec<String>,
    store: ParamStore,
    net: NetConfig,
    body: Stgcn,
    embed: Dense,
    out: Dense,
    adjacency: Rc<Mat>,
    joints: usize,
}

/// Block-diagonal adjacency of A and B joined at their roots.
fn interaction_adjacency(clip: &InteractionClip) -> Mat {
    let (sa, sb) = (&clip.skeleton_a, &clip.skeleton_b);
    let (na, nb) = (sa.n_joints(), sb.n_joints());
    let mut a = Mat::zeros((na + nb, na + nb));
    a.slice_mut(ndarray::s![..na, ..na]).assign(&sa.adjacency());
    a.slice_mut(ndarray::s![na.., na..]).assign(&sb.adjacency());
    a[[sa.root(), na + sb.root()]] = 1.0;
    a[[na + sb.root(), sa.root()]] = 1.0;
    normalize_adjacency(&a)
}

impl FeatureExtractor {
    /// Train the classifier on every window of every clip in `train`.
    pub fn fit(train: &Dataset, config: &FeatureConfig) -> Result<Self> {
        let kinds = train.kinds();
        let first = train
            .entries
            .first()
            .ok_or_else(|| Error::config("feature extractor needs training clips"))?;
        if !config.window.is_multiple_of(2) || config.feature_dim == 0 || config.batch_size == 0 {
            return Err(Error::config(format!("invalid feature config {config:?}")));
        }
        let net = NetConfig {
            dropout: 0.0,
            ..NetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let spec = |i: usize, o: usize, stride: usize| StgcnLayerSpec {
            in_channels: i,
            out_channels: o,
            temporal_stride: stride,
            temporal_kernel: config.temporal_kernel,
            dropout_rate: 0.0,
        };
        let [c1, c2] = config.channels;
        let body = Stgcn::new(&mut store, "fx", &[spec(3, c1, 1), spec(c1, c2, 2)], &mut rng);
        let embed = Dense::new(&mut store, "fx.embed", c2, config.feature_dim, Act::Relu, &mut rng);
        let out = Dense::new(&mut store, "fx.out", config.feature_dim, kinds.len().max(1), Act::Identity, &mut rng);
        let mut fx = FeatureExtractor {
            config: config.clone(),
            kinds,
            store,
            net,
            body,
            embed,
            out,
            adjacency: Rc::new(interaction_adjacency(&first.clip)),
            joints: first.clip.skeleton_a.n_joints() + first.clip.skeleton_b.n_joints(),
        };

        let mut samples: Vec<(Mat, usize)> = Vec::new();
        for e in &train.entries {
            let label = fx.kinds.iter().position(|k| k == e.kind()).expect("kind listed");
            for w in fx.windows(&e.clip)? {
                samples.push((w, label));
            }
        }
        let mut adam = Adam::new(
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
            &fx.store,
        );
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let x = stack(chunk.iter().map(|&i| &samples[i].0));
                let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
                let (tape, loss, stats) = {
                    let mut p = Pass::new(&fx.store, &fx.net, true, &mut rng);
                    let (_, logits) = fx.forward(&mut p, x, chunk.len());
                    let loss = p.tape.softmax_xent(logits, &labels);
                    let stats = std::mem::take(&mut p.bn_stats);
                    (p.tape, loss, stats)
                };
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::Numerical("feature classifier loss is not finite".into()));
                }
                fx.store.zero_grads();
                tape.backward_into(loss, &mut fx.store);
                adam.step(&mut fx.store);
                update_running_stats(&mut fx.store, stats, fx.net.bn_momentum);
            }
        }
        Ok(fx)
    }

    /// `(t, j) x 3` rows of each window of the normalized clip, A's joints before B's.
    fn windows(&self, clip: &InteractionClip) -> Result<Vec<Mat>> {
        let n = clip.skeleton_a.n_joints() + clip.skeleton_b.n_joints();
        if n != self.joints {
            return Err(Error::structural(format!(
                "feature extractor expects {} joints, clip has {n}",
                self.joints
            )));
        }
        let norm = NormalizationRecord::of(clip).apply(clip)?;
        let na = clip.skeleton_a.n_joints();
        let (fa, fb) = (norm.motion_a.frames(), norm.motion_b.frames());
        let w = self.config.window;
        window_starts(clip.n_frames(), w, self.config.stride)?
            .into_iter()
            .map(|t0| {
                Ok(Mat::from_shape_fn((w * n, 3), |(r, c)| {
                    let (t, j) = (t0 + r / n, r % n);
                    if j < na {
                        fa[[t, j, c]]
                    } else {
                        fb[[t, j - na, c]]
                    }
                }))
            })
            .collect()
    }

    fn forward(&self, p: &mut Pass, x: Mat, batch: usize) -> (Var, Var) {
        let dims = Dims::new(batch, self.config.window, self.joints);
        let xv = p.constant(x);
        let (h, d) = self.body.forward(p, xv, dims, &self.adjacency);
        let per_joint = p.tape.time_mean(h, d);
        let pool = Mat::from_shape_fn((batch, batch * self.joints), |(b, r)| {
            if r / self.joints == b {
                1.0 / self.joints as f64
            } else {
                0.0
            }
        });
        let pv = p.constant(pool);
        let pooled = p.tape.matmul(pv, per_joint);
        let feat = self.embed.forward(p, pooled);
        let logits = self.out.forward(p, feat);
        (feat, logits)
    }

    /// Feature rows for every window of every clip, in clip order.
    pub fn features<'c>(&self, clips: impl IntoIterator<Item = &'c InteractionClip>) -> Result<Mat> {
        let mut windows = Vec::new();
        for c in clips {
            windows.extend(self.windows(c)?);
        }
        if windows.is_empty() {
            return Ok(Mat::zeros((0, self.config.feature_dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(64) {
            let mut p = Pass::new(&self.store, &self.net, false, &mut rng);
            let (feat, _) = self.forward(&mut p, stack(chunk.iter()), chunk.len());
            rows.push(p.value(feat).clone());
        }
        let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
    }

    /// Predicted kind index per window, for checking the classifier.
    pub fn classify(&self, clip: &InteractionClip) -> Result<Vec<usize>> {
        let windows = self.windows(clip)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Pass::new(&self.store, &self.net, false, &mut rng);
        let (_, logits) = self.forward(&mut p, stack(windows.iter()), windows.len());
        Ok(p.value(logits)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

fn stack<'m>(parts: impl Iterator<Item = &'m Mat>) -> Mat {
    let views: Vec<_> = parts.map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}
