//! Interaction-mesh retargeting.
//!
//! Every joint of character A is connected to every joint of character B, and
//! each skeleton also contributes its own bone edges. A deformed clip is scored
//! by how far its Laplacian coordinates drift from the source clip, how far its
//! bone lengths are from the requested targets, and how much its per-frame
//! velocities differ from the source. Minimizing that energy from a naively
//! scaled starting point yields a clip whose character B has the new bone
//! lengths while the two characters keep their spatial relations.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{apply_bone_scales, InteractionClip, Motion};
use crate::skeleton::{BoneScaleVector, Skeleton};

/// Distances below this are clamped before inverse-distance weighting.
pub const MIN_WEIGHT_DISTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianWeighting {
    #[default]
    InverseDistance,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub laplacian: f64,
    pub bone: f64,
    pub temporal: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            laplacian: 1.0,
            bone: 10.0,
            temporal: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Converged once the largest gradient component drops below this.
    pub tolerance: f64,
    /// L-BFGS history length.
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 3000,
            tolerance: 1e-6,
            memory: 10,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

/// Per-frame interaction mesh: dense neighbor weights over the `N_A + N_B`
/// vertices of both characters (A first), rows normalized to sum to one.
#[derive(Debug, Clone)]
pub struct InteractionMesh {
    n_a: usize,
    n_b: usize,
    weights: Vec<Array2<f64>>,
}

impl InteractionMesh {
    /// Build from a source clip, weighting edges by the source geometry.
    pub fn build(source: &InteractionClip, weighting: LaplacianWeighting) -> Result<Self> {
        let n_a = source.skeleton_a.n_joints();
        let n_b = source.skeleton_b.n_joints();
        let v = n_a + n_b;
        let mut adjacency = Array2::<bool>::from_elem((v, v), false);
        for i in 0..n_a {
            for j in 0..n_b {
                adjacency[[i, n_a + j]] = true;
                adjacency[[n_a + j, i]] = true;
            }
        }
        for (p, c) in source.skeleton_a.bones() {
            adjacency[[p, c]] = true;
            adjacency[[c, p]] = true;
        }
        for (p, c) in source.skeleton_b.bones() {
            adjacency[[n_a + p, n_a + c]] = true;
            adjacency[[n_a + c, n_a + p]] = true;
        }

        let mut weights = Vec::with_capacity(source.n_frames());
        for t in 0..source.n_frames() {
            let pos = stacked_frame(&source.motion_a, &source.motion_b, t);
            let mut w = Array2::zeros((v, v));
            for i in 0..v {
                let mut total = 0.0;
                for j in 0..v {
                    if !adjacency[[i, j]] {
                        continue;
                    }
                    let wij = match weighting {
                        LaplacianWeighting::Uniform => 1.0,
                        LaplacianWeighting::InverseDistance => {
                            let d = (0..3)
                                .map(|c| (pos[[i, c]] - pos[[j, c]]).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            1.0 / d.max(MIN_WEIGHT_DISTANCE)
                        }
                    };
                    w[[i, j]] = wij;
                    total += wij;
                }
                if total <= 0.0 {
                    return Err(Error::structural(format!("mesh vertex {i} is isolated")));
                }
                w.row_mut(i).mapv_inplace(|x| x / total);
            }
            weights.push(w);
        }
        Ok(InteractionMesh { n_a, n_b, weights })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn n_frames(&self) -> usize {
        self.weights.len()
    }

    /// Normalized neighbor weights of frame `t`.
    pub fn weights(&self, t: usize) -> &Array2<f64> {
        &self.weights[t]
    }

    /// Number of A-B cross edges with nonzero weight in frame `t`.
    pub fn cross_edge_count(&self, t: usize) -> usize {
        let w = &self.weights[t];
        (0..self.n_a)
            .flat_map(|i| (0..self.n_b).map(move |j| (i, j)))
            .filter(|&(i, j)| w[[i, self.n_a + j]] > 0.0)
            .count()
    }
}

fn stacked_frame(a: &Motion, b: &Motion, t: usize) -> Array2<f64> {
    let (n_a, n_b) = (a.n_joints(), b.n_joints());
    let mut out = Array2::zeros((n_a + n_b, 3));
    out.slice_mut(ndarray::s![..n_a, ..]).assign(&a.frame(t));
    out.slice_mut(ndarray::s![n_a.., ..]).assign(&b.frame(t));
    out
}

/// Laplacian coordinates `p_i - sum_j w_ij p_j` of one frame pair.
pub fn laplacian_coords(
    frame_a: ndarray::ArrayView2<'_, f64>,
    frame_b: ndarray::ArrayView2<'_, f64>,
    mesh: &InteractionMesh,
    t: usize,
) -> Result<Array2<f64>> {
    if frame_a.shape() != [mesh.n_a, 3] || frame_b.shape() != [mesh.n_b, 3] {
        return Err(Error::structural("frame does not match the interaction mesh"));
    }
    if t >= mesh.n_frames() {
        return Err(Error::structural(format!("frame {t} outside the mesh")));
    }
    let mut pos = Array2::zeros((mesh.n_vertices(), 3));
    pos.slice_mut(ndarray::s![..mesh.n_a, ..]).assign(&frame_a);
    pos.slice_mut(ndarray::s![mesh.n_a.., ..]).assign(&frame_b);
    Ok(&pos - &mesh.weights[t].dot(&pos))
}

#[derive(Debug, Clone)]
pub struct RetargetProblem {
    pub source: InteractionClip,
    pub target_scales_b: BoneScaleVector,
    /// Scales for character A; all ones when A keeps its template skeleton.
    pub target_scales_a: Option<BoneScaleVector>,
    pub weights: EnergyWeights,
    pub weighting: LaplacianWeighting,
    pub solver: SolverConfig,
}

impl RetargetProblem {
    pub fn new(source: InteractionClip, target_scales_b: BoneScaleVector) -> Self {
        RetargetProblem {
            source,
            target_scales_b,
            target_scales_a: None,
            weights: EnergyWeights::default(),
            weighting: LaplacianWeighting::default(),
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target_scales_b.check_for(&self.source.skeleton_b)?;
        if let Some(a) = &self.target_scales_a {
            a.check_for(&self.source.skeleton_a)?;
        }
        let w = self.weights;
        if !(w.laplacian >= 0.0 && w.bone >= 0.0 && w.temporal >= 0.0) {
            return Err(Error::config("energy weights must be non-negative"));
        }
        if self.solver.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Energy evaluator bound to one problem. Positions are flattened as
/// `[t][vertex][xyz]` with A's joints before B's.
pub struct RetargetEnergy {
    mesh: InteractionMesh,
    weights: EnergyWeights,
    n_frames: usize,
    n_a: usize,
    /// `(parent vertex, child vertex, target length)` for both characters.
    bones: Vec<(usize, usize, f64)>,
    source: Vec<f64>,
    source_delta: Vec<f64>,
}

impl RetargetEnergy {
    pub fn new(problem: &RetargetProblem) -> Result<Self> {
        problem.validate()?;
        let src = &problem.source;
        let mesh = InteractionMesh::build(src, problem.weighting)?;
        let n_a = src.skeleton_a.n_joints();
        let scales_a = problem
            .target_scales_a
            .clone()
            .unwrap_or_else(|| BoneScaleVector::ones(src.skeleton_a.n_bones()));
        let mut bones = Vec::new();
        let la = scales_a.target_lengths(&src.skeleton_a)?;
        for ((p, c), l) in src.skeleton_a.bones().zip(la) {
            bones.push((p, c, l));
        }
        let lb = problem.target_scales_b.target_lengths(&src.skeleton_b)?;
        for ((p, c), l) in src.skeleton_b.bones().zip(lb) {
            bones.push((n_a + p, n_a + c, l));
        }
        let source = flatten(&src.motion_a, &src.motion_b);
        let mut e = RetargetEnergy {
            mesh,
            weights: problem.weights,
            n_frames: src.n_frames(),
            n_a,
            bones,
            source,
            source_delta: Vec::new(),
        };
        e.source_delta = e.laplacian_all(&e.source);
        Ok(e)
    }

    fn nv(&self) -> usize {
        self.mesh.n_vertices()
    }

    pub fn source_positions(&self) -> &[f64] {
        &self.source
    }

    fn laplacian_all(&self, x: &[f64]) -> Vec<f64> {
        let nv = self.nv();
        let mut out = vec![0.0; x.len()];
        for t in 0..self.n_frames {
            let w = self.mesh.weights(t);
            let base = t * nv * 3;
            for i in 0..nv {
                for c in 0..3 {
                    let mut acc = x[base + i * 3 + c];
                    for j in 0..nv {
                        let wij = w[[i, j]];
                        if wij != 0.0 {
                            acc -= wij * x[base + j * 3 + c];
                        }
                    }
                    out[base + i * 3 + c] = acc;
                }
            }
        }
        out
    }

    /// Energy terms `(laplacian, bone, temporal)` before weighting.
    pub fn terms(&self, x: &[f64]) -> (f64, f64, f64) {
        let nv = self.nv();
        let delta = self.laplacian_all(x);
        let lap: f64 = delta
            .iter()
            .zip(&self.source_delta)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let mut bone = 0.0;
        for t in 0..self.n_frames {
            let base = t * nv * 3;
            for &(p, c, l) in &self.bones {
                let d = (0..3)
                    .map(|k| (x[base + c * 3 + k] - x[base + p * 3 + k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                bone += (d - l).powi(2);
            }
        }
        let stride = nv * 3;
        let mut temporal = 0.0;
        for t in 0..self.n_frames.saturating_sub(1) {
            for k in 0..stride {
                let i0 = t * stride + k;
                let i1 = i0 + stride;
                temporal += ((x[i1] - x[i0]) - (self.source[i1] - self.source[i0])).powi(2);
            }
        }
        (lap, bone, temporal)
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let (l, b, t) = self.terms(x);
        self.weights.laplacian * l + self.weights.bone * b + self.weights.temporal * t
    }

    /// Energy and its analytic gradient.
    pub fn energy_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let nv = self.nv();
        let w = self.weights;
        let mut grad = vec![0.0; x.len()];
        let delta = self.laplacian_all(x);
        let resid: Vec<f64> = delta
            .iter()
            .zip(&self.source_delta)
            .map(|(a, b)| a - b)
            .collect();
        let lap: f64 = resid.iter().map(|r| r * r).sum();
        // d/dx ||L x - d||^2 = 2 L^T r
        for t in 0..self.n_frames {
            let wt = self.mesh.weights(t);
            let base = t * nv * 3;
            for i in 0..nv {
                for c in 0..3 {
                    let r = 2.0 * w.laplacian * resid[base + i * 3 + c];
                    if r == 0.0 {
                        continue;
                    }
                    grad[base + i * 3 + c] += r;
                    for j in 0..nv {
                        let wij = wt[[i, j]];
                        if wij != 0.0 {
                            grad[base + j * 3 + c] -= wij * r;
                        }
                    }
                }
            }
        }

        let mut bone = 0.0;
        for t in 0..self.n_frames {
            let base = t * nv * 3;
            for &(p, c, l) in &self.bones {
                let d: [f64; 3] =
                    std::array::from_fn(|k| x[base + c * 3 + k] - x[base + p * 3 + k]);
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                bone += (len - l).powi(2);
                let g = 2.0 * w.bone * (len - l) / len;
                for k in 0..3 {
                    grad[base + c * 3 + k] += g * d[k];
                    grad[base + p * 3 + k] -= g * d[k];
                }
            }
        }

        let stride = nv * 3;
        let mut temporal = 0.0;
        for t in 0..self.n_frames.saturating_sub(1) {
            for k in 0..stride {
                let i0 = t * stride + k;
                let i1 = i0 + stride;
                let e = (x[i1] - x[i0]) - (self.source[i1] - self.source[i0]);
                temporal += e * e;
                grad[i1] += 2.0 * w.temporal * e;
                grad[i0] -= 2.0 * w.temporal * e;
            }
        }
        let energy = w.laplacian * lap + w.bone * bone + w.temporal * temporal;
        (energy, grad)
    }

    /// Rebuild a clip from flat positions, labelled like `template`.
    pub fn unflatten(&self, x: &[f64], template: &InteractionClip) -> Result<InteractionClip> {
        let (a, b) = unflatten(x, self.n_frames, self.n_a, self.nv() - self.n_a);
        let rate = template.motion_a.frame_rate();
        template.with_motions(Motion::new(a, rate)?, Motion::new(b, rate)?)
    }
}

fn flatten(a: &Motion, b: &Motion) -> Vec<f64> {
    let (t, n_a, n_b) = (a.n_frames(), a.n_joints(), b.n_joints());
    let mut out = Vec::with_capacity(t * (n_a + n_b) * 3);
    for ti in 0..t {
        out.extend(a.frame(ti).iter());
        out.extend(b.frame(ti).iter());
    }
    out
}

fn unflatten(x: &[f64], t: usize, n_a: usize, n_b: usize) -> (Array3<f64>, Array3<f64>) {
    let nv = n_a + n_b;
    let a = Array3::from_shape_fn((t, n_a, 3), |(ti, j, c)| x[(ti * nv + j) * 3 + c]);
    let b = Array3::from_shape_fn((t, n_b, 3), |(ti, j, c)| x[(ti * nv + n_a + j) * 3 + c]);
    (a, b)
}

/// Energy of a candidate clip for a problem.
pub fn energy(candidate: &InteractionClip, problem: &RetargetProblem) -> Result<f64> {
    let e = RetargetEnergy::new(problem)?;
    let src = &problem.source;
    if candidate.motion_a.frames().shape() != src.motion_a.frames().shape()
        || candidate.motion_b.frames().shape() != src.motion_b.frames().shape()
    {
        return Err(Error::structural("candidate shape differs from the source"));
    }
    Ok(e.energy(&flatten(&candidate.motion_a, &candidate.motion_b)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetDiagnostics {
    /// Energy of every accepted iterate, starting with the initial guess.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_inf: f64,
    /// Largest bone-length error before the projection pass, in meters.
    pub max_bone_error_before_projection: f64,
    /// Energy of the returned (projected) clip.
    pub projected_energy: f64,
}

/// Minimize the retargeting energy with L-BFGS and a backtracking line search,
/// starting from the naively scaled source, then snap bone lengths to their
/// targets along the optimized bone directions.
pub fn retarget_optimize(
    problem: &RetargetProblem,
) -> Result<(InteractionClip, RetargetDiagnostics)> {
    let objective = RetargetEnergy::new(problem)?;
    let src = &problem.source;
    let scales_a = problem
        .target_scales_a
        .clone()
        .unwrap_or_else(|| BoneScaleVector::ones(src.skeleton_a.n_bones()));
    let init_a = apply_bone_scales(&src.motion_a, &src.skeleton_a, &scales_a)?;
    let init_b = apply_bone_scales(&src.motion_b, &src.skeleton_b, &problem.target_scales_b)?;
    let x0 = flatten(&init_a, &init_b);

    let (x, trace, iterations, converged, grad_inf) =
        lbfgs(&objective, x0, &problem.solver)?;

    let mut out = objective.unflatten(&x, src)?;
    out.scale_b = problem.target_scales_b.clone();
    let before = max_bone_error(&out, &scales_a)?;
    out.motion_a = project_bone_lengths(&out.motion_a, &src.skeleton_a, &scales_a)?;
    out.motion_b =
        project_bone_lengths(&out.motion_b, &src.skeleton_b, &problem.target_scales_b)?;
    let projected = objective.energy(&flatten(&out.motion_a, &out.motion_b));
    Ok((
        out,
        RetargetDiagnostics {
            energy_trace: trace,
            iterations,
            converged,
            final_grad_inf: grad_inf,
            max_bone_error_before_projection: before,
            projected_energy: projected,
        },
    ))
}

fn max_bone_error(clip: &InteractionClip, scales_a: &BoneScaleVector) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (m, s, sc) in [
        (&clip.motion_a, &clip.skeleton_a, scales_a),
        (&clip.motion_b, &clip.skeleton_b, &clip.scale_b),
    ] {
        let target = sc.target_lengths(s)?;
        let lens = m.bone_lengths(s)?;
        for row in lens.rows() {
            for (l, t) in row.iter().zip(&target) {
                worst = worst.max((l - t).abs());
            }
        }
    }
    Ok(worst)
}

/// Walk each frame root to leaves, placing every child at exactly its target
/// length from its (already placed) parent along the current bone direction.
pub fn project_bone_lengths(
    motion: &Motion,
    skeleton: &Skeleton,
    scales: &BoneScaleVector,
) -> Result<Motion> {
    let target = scales.target_lengths(skeleton)?;
    let src = motion.frames();
    let mut out = src.clone();
    for t in 0..motion.n_frames() {
        for &j in skeleton.topological_order() {
            let Some(p) = skeleton.parent(j) else { continue };
            let k = skeleton.bone_of_joint(j).expect("non-root");
            let d: [f64; 3] = std::array::from_fn(|c| src[[t, j, c]] - src[[t, p, c]]);
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if len <= 0.0 {
                return Err(Error::Numerical(format!(
                    "bone {k} collapsed to zero length at frame {t}"
                )));
            }
            for c in 0..3 {
                out[[t, j, c]] = out[[t, p, c]] + target[k] * d[c] / len;
            }
        }
    }
    Motion::new(out, motion.frame_rate())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

type LbfgsOutcome = (Vec<f64>, Vec<f64>, usize, bool, f64);

fn lbfgs(objective: &RetargetEnergy, x0: Vec<f64>, cfg: &SolverConfig) -> Result<LbfgsOutcome> {
    let mut x = x0;
    let (mut f, mut g) = objective.energy_grad(&x);
    let mut trace = vec![f];
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            message: "initial energy is not finite".into(),
            trace,
        });
    }
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::new();
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) < cfg.tolerance {
            return Ok((x, trace, iterations, true, inf_norm(&g)));
        }
        iterations += 1;

        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = objective.energy_grad(&trial);
            if !ft.is_finite() || gt.iter().any(|v| !v.is_finite()) {
                trace.push(ft);
                return Err(Error::Divergence {
                    message: format!("energy became {ft} at iteration {iterations}"),
                    trace,
                });
            }
            if ft <= f + cfg.armijo * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            // No sufficient decrease along the direction: treat as stationary.
            let gi = inf_norm(&g);
            return Ok((x, trace, iterations, gi < cfg.tolerance, gi));
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        g = gn;
        f = fnew;
        trace.push(f);
    }
    let gi = inf_norm(&g);
    Ok((x, trace, iterations, gi < cfg.tolerance, gi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_clip(rng: &mut ChaCha8Rng, t: usize) -> InteractionClip {
        let s = Skeleton::chain(3);
        let mk = |rng: &mut ChaCha8Rng, x0: f64| {
            let frames = Array3::from_shape_fn((t, 3, 3), |(ti, j, c)| {
                let base = match c {
                    0 => x0,
                    1 => j as f64,
                    _ => 0.0,
                };
                base + 0.05 * ti as f64 + rng.random_range(-0.01..0.01)
            });
            let m = Motion::new(frames, 30.0).unwrap();
            // Snap to unit bones so all-ones targets hold exactly.
            project_bone_lengths(&m, &s, &BoneScaleVector::ones(2)).unwrap()
        };
        let a = mk(rng, 0.0);
        let b = mk(rng, 0.7);
        InteractionClip::new(
            s.clone(),
            s,
            a,
            b,
            "toy",
            BoneScaleVector::ones(2),
            vec![(2, 2)],
        )
        .unwrap()
    }

    #[test]
    fn laplacian_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = toy_clip(&mut rng, 3);
        let mesh = InteractionMesh::build(&clip, LaplacianWeighting::InverseDistance).unwrap();
        assert_eq!(mesh.cross_edge_count(0), 9);
        let d0 = laplacian_coords(clip.motion_a.frame(1), clip.motion_b.frame(1), &mesh, 1).unwrap();
        let off = [0.3, -1.0, 2.0];
        let a = clip.motion_a.translated(off);
        let b = clip.motion_b.translated(off);
        let d1 = laplacian_coords(a.frame(1), b.frame(1), &mesh, 1).unwrap();
        for (x, y) in d0.iter().zip(&d1) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_at_its_neighbors_has_zero_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = toy_clip(&mut rng, 2);
        let mesh = InteractionMesh::build(&clip, LaplacianWeighting::Uniform).unwrap();
        // Collapse every vertex onto one point: each vertex coincides with its neighbors.
        let a = Array3::<f64>::from_elem((1, 3, 3), 0.25);
        let d = laplacian_coords(
            a.index_axis(ndarray::Axis(0), 0),
            a.index_axis(ndarray::Axis(0), 0),
            &mesh,
            0,
        )
        .unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn laplacian_matches_weighted_average_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = toy_clip(&mut rng, 2);
        let mesh = InteractionMesh::build(&clip, LaplacianWeighting::InverseDistance).unwrap();
        let fa = Array3::from_shape_fn((1, 3, 3), |_| rng.random_range(-1.0..1.0));
        let fb = Array3::from_shape_fn((1, 3, 3), |_| rng.random_range(-1.0..1.0));
        let d = laplacian_coords(
            fa.index_axis(ndarray::Axis(0), 0),
            fb.index_axis(ndarray::Axis(0), 0),
            &mesh,
            0,
        )
        .unwrap();
        let pos = |v: usize, c: usize| if v < 3 { fa[[0, v, c]] } else { fb[[0, v - 3, c]] };
        let src = |v: usize| -> [f64; 3] {
            if v < 3 {
                clip.motion_a.joint(0, v)
            } else {
                clip.motion_b.joint(0, v - 3)
            }
        };
        for i in 0..6 {
            // Oracle neighbor set: other character's joints plus bone neighbors.
            let nbrs: Vec<usize> = (0..6)
                .filter(|&j| {
                    j != i && ((i < 3) != (j < 3) || (i as i64 - j as i64).abs() == 1)
                })
                .collect();
            let raw: Vec<f64> = nbrs
                .iter()
                .map(|&j| 1.0 / crate::skeleton::dist(src(i), src(j)).max(MIN_WEIGHT_DISTANCE))
                .collect();
            let total: f64 = raw.iter().sum();
            for c in 0..3 {
                let avg: f64 = nbrs
                    .iter()
                    .zip(&raw)
                    .map(|(&j, w)| w / total * pos(j, c))
                    .sum();
                assert!((d[[i, c]] - (pos(i, c) - avg)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_zero_at_source_and_under_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = toy_clip(&mut rng, 4);
        let p = RetargetProblem::new(clip.clone(), BoneScaleVector::ones(2));
        assert!(energy(&clip, &p).unwrap().abs() < 1e-20);
        let moved = clip
            .with_motions(
                clip.motion_a.translated([1.0, 2.0, 3.0]),
                clip.motion_b.translated([1.0, 2.0, 3.0]),
            )
            .unwrap();
        assert!(energy(&moved, &p).unwrap() < 1e-20);
    }

    #[test]
    fn single_joint_perturbation_matches_laplacian_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = toy_clip(&mut rng, 3);
        let mut p = RetargetProblem::new(clip.clone(), BoneScaleVector::ones(2));
        p.weights = EnergyWeights {
            laplacian: 2.5,
            bone: 0.0,
            temporal: 0.0,
        };
        let eps = 0.01;
        let mut frames = clip.motion_b.frames().clone();
        frames[[1, 2, 0]] += eps;
        let cand = clip
            .with_motions(clip.motion_a.clone(), Motion::new(frames, 30.0).unwrap())
            .unwrap();
        // Oracle: only column (vertex 5, x) of frame 1's Laplacian changes, by eps * (I - W).
        let mesh = InteractionMesh::build(&clip, LaplacianWeighting::InverseDistance).unwrap();
        let w = mesh.weights(1);
        let mut resid = 0.0;
        for i in 0..6 {
            let coef = if i == 5 { 1.0 } else { 0.0 } - w[[i, 5]];
            resid += (coef * eps).powi(2);
        }
        let e = energy(&cand, &p).unwrap();
        assert!((e - 2.5 * resid).abs() < 1e-12 * e.max(1.0), "{e} vs {}", 2.5 * resid);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = toy_clip(&mut rng, 3);
        let mut p = RetargetProblem::new(clip, BoneScaleVector::new(vec![1.2, 0.9]).unwrap());
        p.weights = EnergyWeights {
            laplacian: 1.0,
            bone: 10.0,
            temporal: 0.5,
        };
        let e = RetargetEnergy::new(&p).unwrap();
        let mut x: Vec<f64> = e.source_positions().to_vec();
        x.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        let (_, g) = e.energy_grad(&x);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (e.energy(&xp) - e.energy(&xm)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel <= 1e-5, "component {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn identity_problem_returns_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clip = toy_clip(&mut rng, 4);
        let p = RetargetProblem::new(clip.clone(), BoneScaleVector::ones(2));
        let (out, diag) = retarget_optimize(&p).unwrap();
        assert!(diag.converged);
        for (a, b) in out.motion_b.frames().iter().zip(clip.motion_b.frames()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_is_monotone_and_bones_hit_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clip = toy_clip(&mut rng, 4);
        let scales = BoneScaleVector::new(vec![1.25, 0.8]).unwrap();
        let p = RetargetProblem::new(clip, scales.clone());
        let (out, diag) = retarget_optimize(&p).unwrap();
        for w in diag.energy_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let target = scales.target_lengths(&out.skeleton_b).unwrap();
        for row in out.motion_b.bone_lengths(&out.skeleton_b).unwrap().rows() {
            for (l, t) in row.iter().zip(&target) {
                assert!((l - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clip = toy_clip(&mut rng, 2);
        let mut p = RetargetProblem::new(clip.clone(), BoneScaleVector::ones(2));
        p.weights.bone = -1.0;
        assert!(matches!(retarget_optimize(&p), Err(Error::Config(_))));
        let mut p = RetargetProblem::new(clip.clone(), BoneScaleVector::ones(2));
        p.solver.max_iters = 0;
        assert!(matches!(retarget_optimize(&p), Err(Error::Config(_))));
        let p = RetargetProblem::new(clip, BoneScaleVector::ones(3));
        assert!(matches!(retarget_optimize(&p), Err(Error::Structural(_))));
    }
}
