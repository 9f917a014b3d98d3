//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every tensor in the networks is a 2-D matrix whose rows enumerate
//! `(batch, frame, joint)` (or `(batch, joint)`) and whose columns are
//! channels. Graph and temporal structure is carried by the ops that need it.
//! Ops used in hot loops (affine layers, the gated recurrent cell, temporal
//! convolution, batch normalization) are fused so the tape stays small.

use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Softplus shifted so that zero maps to one; always positive.
    UnitSoftplus,
}

/// `ln(e - 1)`: the softplus argument that yields exactly one.
const SOFTPLUS_SHIFT: f64 = 0.541_324_854_612_918_1;

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

impl Act {
    fn apply(self, v: f64) -> f64 {
        match self {
            Act::Identity => v,
            Act::Relu => v.max(0.0),
            Act::Tanh => v.tanh(),
            Act::Sigmoid => sigmoid(v),
            Act::UnitSoftplus => softplus(v + SOFTPLUS_SHIFT),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Act::Identity => 1.0,
            Act::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Tanh => 1.0 - y * y,
            Act::Sigmoid => y * (1.0 - y),
            Act::UnitSoftplus => -(-y).exp_m1(),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row grouping of a `(batch, frame, joint)` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub frames: usize,
    pub joints: usize,
}

impl Dims {
    pub fn new(batch: usize, frames: usize, joints: usize) -> Self {
        Dims { batch, frames, joints }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.frames * self.joints
    }

    pub fn row(&self, b: usize, t: usize, j: usize) -> usize {
        (b * self.frames + t) * self.joints + j
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        act: Act,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Act),
    Exp(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GraphMix {
        x: Var,
        adj: Rc<Mat>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        dims: Dims,
        stride: usize,
        kernel: usize,
        cols: Mat,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Mat,
    },
    TimeMean {
        x: Var,
        dims: Dims,
    },
    TimeDiff {
        x: Var,
        dims: Dims,
    },
    StackTime {
        parts: Vec<Var>,
        batch: usize,
        joints: usize,
    },
    GruCell {
        xg: Var,
        hg: Var,
        h: Var,
        r: Mat,
        u: Mat,
        c: Mat,
    },
    BoneLengths {
        x: Var,
        bones: Rc<Vec<(usize, usize)>>,
        joints: usize,
    },
    Sum(Var),
    KlNormal {
        mu: Var,
        log_var: Var,
        scale: f64,
    },
    SoftmaxXent {
        logits: Var,
        probs: Mat,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Batch statistics produced by a training-mode batch normalization.
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance.
    pub var: Array1<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `act(x w + b)`, with `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>, act: Act) -> Var {
        let mut y = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            y += &self.value(b).row(0);
        }
        if act != Act::Identity {
            y.mapv_inplace(|v| act.apply(v));
        }
        self.push(y, Op::Affine { x, w, b, act })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn unary(&mut self, a: Var, act: Act) -> Var {
        let v = self.value(a).mapv(|x| act.apply(x));
        self.push(v, Op::Unary(a, act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Act::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    /// Multiply every consecutive block of `adj.nrows()` rows by `adj`.
    pub fn graph_mix(&mut self, x: Var, adj: Rc<Mat>) -> Var {
        let v = graph_mix_forward(self.value(x), &adj, false);
        self.push(v, Op::GraphMix { x, adj })
    }

    /// Convolution along frames with zero padding `kernel / 2`; `w` is
    /// `(kernel * c_in) x c_out`, tap-major.
    pub fn temporal_conv(&mut self, x: Var, w: Var, dims: Dims, stride: usize, kernel: usize) -> Var {
        let xv = self.value(x);
        let c_in = xv.ncols();
        assert_eq!(xv.nrows(), dims.rows(), "temporal conv input rows");
        assert_eq!(self.value(w).nrows(), kernel * c_in, "temporal conv weight rows");
        let out_dims = Dims::new(dims.batch, dims.frames / stride, dims.joints);
        let pad = kernel / 2;
        let mut cols = Mat::zeros((out_dims.rows(), kernel * c_in));
        for b in 0..dims.batch {
            for to in 0..out_dims.frames {
                for k in 0..kernel {
                    let ti = (to * stride + k) as isize - pad as isize;
                    if ti < 0 || ti >= dims.frames as isize {
                        continue;
                    }
                    for j in 0..dims.joints {
                        let src = xv.row(dims.row(b, ti as usize, j));
                        cols.slice_mut(s![out_dims.row(b, to, j), k * c_in..(k + 1) * c_in])
                            .assign(&src);
                    }
                }
            }
        }
        let v = cols.dot(self.value(w));
        self.push(
            v,
            Op::TemporalConv {
                x,
                w,
                dims,
                stride,
                kernel,
                cols,
            },
        )
    }

    /// Per-channel normalization over all rows. With `running = Some((mean, var))`
    /// the given statistics are used; otherwise batch statistics are computed
    /// and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => (m.clone(), v.clone(), None),
            None => {
                let mean = xv.mean_axis(Axis(0)).expect("rows");
                let centered = xv - &mean;
                let var = (&centered * &centered).mean_axis(Axis(0)).expect("rows");
                let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
                (
                    mean.clone(),
                    var,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
        };
        let inv_std = var_biased.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let y = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        let batch_stats = stats.is_some();
        let var = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (var, stats)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Average over frames: `(b, t, j)` rows to `(b, j)` rows.
    pub fn time_mean(&mut self, x: Var, dims: Dims) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((dims.batch * dims.joints, xv.ncols()));
        let inv = 1.0 / dims.frames as f64;
        for b in 0..dims.batch {
            for t in 0..dims.frames {
                for j in 0..dims.joints {
                    out.row_mut(b * dims.joints + j)
                        .scaled_add(inv, &xv.row(dims.row(b, t, j)));
                }
            }
        }
        self.push(out, Op::TimeMean { x, dims })
    }

    /// Forward difference along frames: `(b, t, j)` rows to `(b, t-1, j)` rows.
    pub fn time_diff(&mut self, x: Var, dims: Dims) -> Var {
        let xv = self.value(x);
        let od = Dims::new(dims.batch, dims.frames - 1, dims.joints);
        let mut out = Mat::zeros((od.rows(), xv.ncols()));
        for b in 0..dims.batch {
            for t in 0..od.frames {
                for j in 0..dims.joints {
                    let mut row = out.row_mut(od.row(b, t, j));
                    row.assign(&xv.row(dims.row(b, t + 1, j)));
                    row -= &xv.row(dims.row(b, t, j));
                }
            }
        }
        self.push(out, Op::TimeDiff { x, dims })
    }

    /// Interleave per-frame `(b, j)` matrices into one `(b, t, j)` matrix.
    pub fn stack_time(&mut self, parts: &[Var], batch: usize, joints: usize) -> Var {
        let c = self.value(parts[0]).ncols();
        let dims = Dims::new(batch, parts.len(), joints);
        let mut out = Mat::zeros((dims.rows(), c));
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for b in 0..batch {
                let dst = dims.row(b, t, 0);
                out.slice_mut(s![dst..dst + joints, ..])
                    .assign(&pv.slice(s![b * joints..(b + 1) * joints, ..]));
            }
        }
        self.push(
            out,
            Op::StackTime {
                parts: parts.to_vec(),
                batch,
                joints,
            },
        )
    }

    /// Gated recurrent update from pre-computed input projections `xg` and
    /// hidden projections `hg`, both `rows x 3H` laid out `[reset | update | candidate]`:
    /// `r = σ(x_r + h_r)`, `u = σ(x_u + h_u)`, `c = tanh(x_c + r ⊙ h_c)`,
    /// `h' = u ⊙ h + (1 - u) ⊙ c`.
    pub fn gru_cell(&mut self, xg: Var, hg: Var, h: Var) -> Var {
        let hv = self.value(h);
        let hsz = hv.ncols();
        let xgv = self.value(xg);
        let hgv = self.value(hg);
        let r = (&xgv.slice(s![.., 0..hsz]) + &hgv.slice(s![.., 0..hsz])).mapv(sigmoid);
        let u = (&xgv.slice(s![.., hsz..2 * hsz]) + &hgv.slice(s![.., hsz..2 * hsz])).mapv(sigmoid);
        let mut c = &r * &hgv.slice(s![.., 2 * hsz..]);
        c += &xgv.slice(s![.., 2 * hsz..]);
        c.mapv_inplace(f64::tanh);
        let mut out = Mat::zeros(hv.raw_dim());
        Zip::from(&mut out)
            .and(&u)
            .and(hv)
            .and(&c)
            .for_each(|o, &u, &h, &c| *o = u * h + (1.0 - u) * c);
        self.push(out, Op::GruCell { xg, hg, h, r, u, c })
    }

    /// Bone lengths of every `joints`-row block of a `rows x 3` position matrix,
    /// as a `(blocks * bones) x 1` column.
    pub fn bone_lengths(&mut self, x: Var, bones: Rc<Vec<(usize, usize)>>, joints: usize) -> Var {
        let xv = self.value(x);
        let blocks = xv.nrows() / joints;
        let nb = bones.len();
        let mut out = Mat::zeros((blocks * nb, 1));
        for g in 0..blocks {
            for (k, &(p, c)) in bones.iter().enumerate() {
                let (rp, rc) = (g * joints + p, g * joints + c);
                let d2: f64 = (0..3).map(|i| (xv[[rc, i]] - xv[[rp, i]]).powi(2)).sum();
                out[[g * nb + k, 0]] = d2.sqrt();
            }
        }
        self.push(out, Op::BoneLengths { x, bones, joints })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `scale * Σ 0.5 (μ² + exp(log σ²) - 1 - log σ²)` as a `1 x 1` value.
    pub fn kl_normal(&mut self, mu: Var, log_var: Var, scale: f64) -> Var {
        let total: f64 = self
            .value(mu)
            .iter()
            .zip(self.value(log_var).iter())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();
        self.push(
            Mat::from_elem((1, 1), scale * total),
            Op::KlNormal { mu, log_var, scale },
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            loss -= row[y].max(1e-300).ln();
        }
        loss /= labels.len() as f64;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, out: Var, store: &mut ParamStore) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(id) = self.nodes[i].op {
                store.accumulate_grad(id, &g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::Affine { x, w, b, act } => {
                let ga = if *act == Act::Identity {
                    g.clone()
                } else {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= act.grad_from_output(y));
                    ga
                };
                if let Some(b) = b {
                    accumulate(grads, *b, ga.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                accumulate(grads, *w, val(*x).t().dot(&ga));
                accumulate(grads, *x, ga.dot(&val(*w).t()));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Unary(a, act) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= act.grad_from_output(y));
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Abs(a) => accumulate(grads, *a, g * &val(*a).mapv(sign)),
            Op::Square(a) => accumulate(grads, *a, g * &(val(*a) * 2.0)),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let mut d = Mat::zeros(val(*x).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *x, d);
            }
            Op::GraphMix { x, adj } => accumulate(grads, *x, graph_mix_forward(g, adj, true)),
            Op::TemporalConv {
                x,
                w,
                dims,
                stride,
                kernel,
                cols,
            } => {
                accumulate(grads, *w, cols.t().dot(g));
                let dcols = g.dot(&val(*w).t());
                let c_in = val(*x).ncols();
                let od = Dims::new(dims.batch, dims.frames / stride, dims.joints);
                let pad = kernel / 2;
                let mut dx = Mat::zeros((dims.rows(), c_in));
                for b in 0..dims.batch {
                    for to in 0..od.frames {
                        for k in 0..*kernel {
                            let ti = (to * stride + k) as isize - pad as isize;
                            if ti < 0 || ti >= dims.frames as isize {
                                continue;
                            }
                            for j in 0..dims.joints {
                                let src = dcols.slice(s![od.row(b, to, j), k * c_in..(k + 1) * c_in]);
                                let mut dst = dx.row_mut(dims.row(b, ti as usize, j));
                                dst += &src;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gamma_v = val(*gamma).row(0).to_owned();
                let dxhat = g * &gamma_v;
                let dx = if *batch_stats {
                    let n = g.nrows() as f64;
                    let mean_d = dxhat.mean_axis(Axis(0)).expect("rows");
                    let mean_dx = (&dxhat * xhat).mean_axis(Axis(0)).expect("rows");
                    (&dxhat - &mean_d - &(xhat * &mean_dx)) * inv_std
                        * if n > 0.0 { 1.0 } else { 0.0 }
                } else {
                    dxhat * inv_std
                };
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, g * mask),
            Op::TimeMean { x, dims } => {
                let inv = 1.0 / dims.frames as f64;
                let mut dx = Mat::zeros((dims.rows(), g.ncols()));
                for b in 0..dims.batch {
                    for t in 0..dims.frames {
                        for j in 0..dims.joints {
                            dx.row_mut(dims.row(b, t, j))
                                .scaled_add(inv, &g.row(b * dims.joints + j));
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::TimeDiff { x, dims } => {
                let od = Dims::new(dims.batch, dims.frames - 1, dims.joints);
                let mut dx = Mat::zeros((dims.rows(), g.ncols()));
                for b in 0..dims.batch {
                    for t in 0..od.frames {
                        for j in 0..dims.joints {
                            let gr = g.row(od.row(b, t, j));
                            dx.row_mut(dims.row(b, t + 1, j)).scaled_add(1.0, &gr);
                            dx.row_mut(dims.row(b, t, j)).scaled_add(-1.0, &gr);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::StackTime {
                parts,
                batch,
                joints,
            } => {
                let dims = Dims::new(*batch, parts.len(), *joints);
                for (t, &p) in parts.iter().enumerate() {
                    let mut d = Mat::zeros((batch * joints, g.ncols()));
                    for b in 0..*batch {
                        let src = dims.row(b, t, 0);
                        d.slice_mut(s![b * joints..(b + 1) * joints, ..])
                            .assign(&g.slice(s![src..src + joints, ..]));
                    }
                    accumulate(grads, p, d);
                }
            }
            Op::GruCell { xg, hg, h, r, u, c } => {
                let hsz = r.ncols();
                let hv = val(*h);
                let hgv = val(*hg);
                let hc = hgv.slice(s![.., 2 * hsz..]);
                let rows = r.nrows();
                let mut dxg = Mat::zeros((rows, 3 * hsz));
                let mut dhg = Mat::zeros((rows, 3 * hsz));
                let mut dh = Mat::zeros((rows, hsz));
                for i in 0..rows {
                    for k in 0..hsz {
                        let gi = g[[i, k]];
                        let (ri, ui, ci) = (r[[i, k]], u[[i, k]], c[[i, k]]);
                        dh[[i, k]] = gi * ui;
                        let du = gi * (hv[[i, k]] - ci);
                        let dc = gi * (1.0 - ui);
                        let dac = dc * (1.0 - ci * ci);
                        let dr = dac * hc[[i, k]];
                        let dau = du * ui * (1.0 - ui);
                        let dar = dr * ri * (1.0 - ri);
                        dxg[[i, k]] = dar;
                        dxg[[i, hsz + k]] = dau;
                        dxg[[i, 2 * hsz + k]] = dac;
                        dhg[[i, k]] = dar;
                        dhg[[i, hsz + k]] = dau;
                        dhg[[i, 2 * hsz + k]] = dac * ri;
                    }
                }
                accumulate(grads, *xg, dxg);
                accumulate(grads, *hg, dhg);
                accumulate(grads, *h, dh);
            }
            Op::BoneLengths { x, bones, joints } => {
                let xv = val(*x);
                let mut dx = Mat::zeros(xv.raw_dim());
                let nb = bones.len();
                for gi in 0..xv.nrows() / joints {
                    for (k, &(p, c)) in bones.iter().enumerate() {
                        let (rp, rc) = (gi * joints + p, gi * joints + c);
                        let len = node.value[[gi * nb + k, 0]];
                        if len <= 0.0 {
                            continue;
                        }
                        let coef = g[[gi * nb + k, 0]] / len;
                        for d in 0..3 {
                            let diff = xv[[rc, d]] - xv[[rp, d]];
                            dx[[rc, d]] += coef * diff;
                            dx[[rp, d]] -= coef * diff;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => accumulate(grads, *x, Mat::from_elem(val(*x).raw_dim(), g[[0, 0]])),
            Op::KlNormal { mu, log_var, scale } => {
                let k = g[[0, 0]] * scale;
                accumulate(grads, *mu, val(*mu) * k);
                accumulate(grads, *log_var, val(*log_var).mapv(|lv| 0.5 * k * (lv.exp() - 1.0)));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] -= 1.0;
                }
                d *= g[[0, 0]] / labels.len() as f64;
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

fn graph_mix_forward(x: &Mat, adj: &Mat, transpose: bool) -> Mat {
    let n = adj.nrows();
    let mut out = Mat::zeros(x.raw_dim());
    let groups = x.nrows() / n;
    for gi in 0..groups {
        for i in 0..n {
            for j in 0..n {
                let a = if transpose { adj[[j, i]] } else { adj[[i, j]] };
                if a != 0.0 {
                    let src = x.row(gi * n + j);
                    out.row_mut(gi * n + i).scaled_add(a, &src);
                }
            }
        }
    }
    out
}

/// `a += b · c` without allocating.
pub fn gemm_acc(a: &mut Mat, b: &Mat, c: &Mat) {
    general_mat_mul(1.0, b, c, 1.0, a);
}
