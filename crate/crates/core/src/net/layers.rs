use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Code, NetConfig};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Act, BatchStats, Dims, Mat, Tape, Var};

/// One forward evaluation: the tape, the parameters it reads, and the
/// randomness used by dropout and latent sampling.
pub struct Pass<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub train: bool,
    /// Draw latents by reparameterization; otherwise use the posterior mean.
    pub sample_latents: bool,
    pub rng: &'a mut ChaCha8Rng,
    pub bn_stats: Vec<(String, BatchStats)>,
    bn_eps: f64,
    params: HashMap<ParamId, Var>,
}

impl<'a> Pass<'a> {
    pub fn new(store: &'a ParamStore, config: &NetConfig, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Pass {
            tape: Tape::new(),
            store,
            train,
            sample_latents: train,
            rng,
            bn_stats: Vec::new(),
            bn_eps: config.bn_eps,
            params: HashMap::new(),
        }
    }

    /// Tape variable for a parameter, created once per pass.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.tape.constant(m)
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_simple_fn((rows, cols), || self.rng.sample(StandardNormal))
    }

    /// `z = mu + exp(log_var / 2) * eps`, or the mean when not sampling.
    pub fn reparameterize(&mut self, code: Code) -> Var {
        if !self.sample_latents {
            return code.mu;
        }
        let (r, c) = self.tape.value(code.mu).dim();
        let eps = self.standard_normal(r, c);
        let eps = self.tape.constant(eps);
        let half = self.tape.scale(code.log_var, 0.5);
        let std = self.tape.exp(half);
        let noise = self.tape.mul(std, eps);
        self.tape.add(code.mu, noise)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Act,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, act: Act, rng: &mut R) -> Self {
        let gain = if act == Act::Relu { 2f64.sqrt() } else { 1.0 };
        Dense {
            w: store.add_glorot(&format!("{name}.w"), inp, out, gain, rng),
            b: store.add_const(&format!("{name}.b"), 1, out, 0.0),
            act,
        }
    }

    /// Linear layer with Glorot weights shrunk by `gain`.
    pub fn new_scaled<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, gain: f64, rng: &mut R) -> Self {
        Dense {
            w: store.add_glorot(&format!("{name}.w"), inp, out, gain, rng),
            b: store.add_const(&format!("{name}.b"), 1, out, 0.0),
            act: Act::Identity,
        }
    }

    pub fn with_act(self, act: Act) -> Self {
        Dense { act, ..self }
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Var {
        let (w, b) = (p.p(self.w), p.p(self.b));
        p.tape.affine(x, w, Some(b), self.act)
    }
}

/// Batch normalization over all rows, with running statistics kept as buffers
/// `<name>.mean` and `<name>.var`.
#[derive(Debug, Clone)]
pub struct Bn {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Bn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        store.add_buffer(&format!("{name}.mean"), vec![0.0; channels]);
        store.add_buffer(&format!("{name}.var"), vec![1.0; channels]);
        Bn {
            name: name.to_string(),
            gamma: store.add_const(&format!("{name}.gamma"), 1, channels, 1.0),
            beta: store.add_const(&format!("{name}.beta"), 1, channels, 0.0),
        }
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Var {
        let (g, b) = (p.p(self.gamma), p.p(self.beta));
        let eps = p.bn_eps;
        if p.train {
            let (y, stats) = p.tape.batch_norm(x, g, b, eps, None);
            p.bn_stats.push((self.name.clone(), stats.expect("batch statistics")));
            y
        } else {
            let mean = Array1::from(p.store.buffer(&format!("{}.mean", self.name)).to_vec());
            let var = Array1::from(p.store.buffer(&format!("{}.var", self.name)).to_vec());
            p.tape.batch_norm(x, g, b, eps, Some((&mean, &var))).0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StgcnLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub temporal_kernel: usize,
    pub dropout_rate: f64,
}

/// Spatial graph convolution `relu(A X W + X U)`, then batch norm, ReLU,
/// strided temporal convolution, batch norm and dropout.
#[derive(Debug, Clone)]
pub struct StgcnLayer {
    pub spec: StgcnLayerSpec,
    pub neighbor: ParamId,
    pub own: ParamId,
    pub bn_spatial: Bn,
    pub temporal: ParamId,
    pub bn_temporal: Bn,
}

impl StgcnLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, spec: StgcnLayerSpec, rng: &mut R) -> Self {
        let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.temporal_kernel);
        StgcnLayer {
            spec,
            neighbor: store.add_glorot(&format!("{name}.neighbor"), ci, co, 1.0, rng),
            own: store.add_glorot(&format!("{name}.own"), ci, co, 1.0, rng),
            bn_spatial: Bn::new(store, &format!("{name}.bn_spatial"), co),
            temporal: store.add_normal(
                &format!("{name}.temporal"),
                k * co,
                co,
                (2.0 / (k * co) as f64).sqrt(),
                rng,
            ),
            bn_temporal: Bn::new(store, &format!("{name}.bn_temporal"), co),
        }
    }

    pub fn forward(&self, p: &mut Pass, x: Var, dims: Dims, adj: &Rc<Mat>) -> (Var, Dims) {
        let (w, u) = (p.p(self.neighbor), p.p(self.own));
        let xw = p.tape.matmul(x, w);
        let mixed = p.tape.graph_mix(xw, adj.clone());
        let xu = p.tape.matmul(x, u);
        let sum = p.tape.add(mixed, xu);
        let spatial = p.tape.relu(sum);
        let h = self.bn_spatial.forward(p, spatial);
        let h = p.tape.relu(h);
        let tw = p.p(self.temporal);
        let stride = self.spec.temporal_stride;
        let h = p.tape.temporal_conv(h, tw, dims, stride, self.spec.temporal_kernel);
        let h = self.bn_temporal.forward(p, h);
        let out_dims = Dims::new(dims.batch, dims.frames / stride, dims.joints);
        let h = if p.train {
            p.tape.dropout(h, self.spec.dropout_rate, p.rng)
        } else {
            h
        };
        (h, out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct Stgcn {
    pub layers: Vec<StgcnLayer>,
}

impl Stgcn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, specs: &[StgcnLayerSpec], rng: &mut R) -> Self {
        Stgcn {
            layers: specs
                .iter()
                .enumerate()
                .map(|(i, &s)| StgcnLayer::new(store, &format!("{name}.{i}"), s, rng))
                .collect(),
        }
    }

    pub fn forward(&self, p: &mut Pass, x: Var, dims: Dims, adj: &Rc<Mat>) -> (Var, Dims) {
        self.layers
            .iter()
            .fold((x, dims), |(h, d), layer| layer.forward(p, h, d, adj))
    }
}

/// Graph-gated recurrent decoder with a shared per-joint output head.
/// Gate pre-activations are `X Wx + b` from the step input and `A (H Wh)`
/// from the hidden state, in the order reset, update, candidate.
#[derive(Debug, Clone)]
pub struct Ggru {
    pub input: Dense,
    pub hidden_w: ParamId,
    pub head: Vec<Dense>,
    pub hidden: usize,
}

/// The `(b, j) x c` rows of frame `t` of a `(b, t, j) x c` matrix.
fn frame_rows(m: &Mat, dims: Dims, t: usize) -> Mat {
    let mut out = Mat::zeros((dims.batch * dims.joints, m.ncols()));
    for b in 0..dims.batch {
        let src = dims.row(b, t, 0);
        out.slice_mut(s![b * dims.joints..(b + 1) * dims.joints, ..])
            .assign(&m.slice(s![src..src + dims.joints, ..]));
    }
    out
}

impl Ggru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, head: &[usize], rng: &mut R) -> Self {
        let input_layer = Dense::new_scaled(store, &format!("{name}.input"), input, 3 * hidden, 1.0, rng);
        let hidden_w = store.add_glorot(&format!("{name}.hidden"), hidden, 3 * hidden, 1.0, rng);
        let mut layers = Vec::new();
        let mut width = hidden;
        for (i, &w) in head.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.head.{i}"), width, w, Act::Relu, rng));
            width = w;
        }
        layers.push(Dense::new_scaled(store, &format!("{name}.head.out"), width, 3, 0.01, rng));
        Ggru {
            input: input_layer,
            hidden_w,
            head: layers,
            hidden,
        }
    }

    /// One recurrent update of the `(b, j) x hidden` state.
    pub fn step(&self, p: &mut Pass, x: Var, h: Var, adj: &Rc<Mat>) -> Var {
        let xg = self.input.forward(p, x);
        let wh = p.p(self.hidden_w);
        let hw = p.tape.matmul(h, wh);
        let hg = p.tape.graph_mix(hw, adj.clone());
        p.tape.gru_cell(xg, hg, h)
    }

    pub fn output(&self, p: &mut Pass, h: Var) -> Var {
        self.head.iter().fold(h, |x, d| d.forward(p, x))
    }

    /// Autoregressive unroll over `dims.frames` steps starting from `h0`.
    /// The step input is `static_input` followed by the previous delta (the
    /// prediction, or the ground truth from `teacher`); the first step sees a
    /// zero delta.
    pub fn unroll(
        &self,
        p: &mut Pass,
        h0: Var,
        static_input: Var,
        dims: Dims,
        adj: &Rc<Mat>,
        teacher: Option<&Mat>,
    ) -> Var {
        let rows = dims.batch * dims.joints;
        let mut h = h0;
        let mut prev = p.constant(Mat::zeros((rows, 3)));
        let mut outs = Vec::with_capacity(dims.frames);
        for t in 0..dims.frames {
            let x = p.tape.concat_cols(&[static_input, prev]);
            h = self.step(p, x, h, adj);
            let delta = self.output(p, h);
            outs.push(delta);
            prev = match teacher {
                Some(gt) => p.constant(frame_rows(gt, dims, t)),
                None => delta,
            };
        }
        p.tape.stack_time(&outs, dims.batch, dims.joints)
    }
}
