//! World-space joint trajectories and the two-character clip container.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{BoneScaleVector, Skeleton, Vec3};

pub const CLIP_FORMAT_VERSION: u32 = 1;

/// `T x N x 3` joint positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    frames: Array3<f64>,
    frame_rate: f64,
}

impl Motion {
    pub fn new(frames: Array3<f64>, frame_rate: f64) -> Result<Self> {
        if frames.shape()[2] != 3 {
            return Err(Error::structural(format!(
                "motion frames must have 3 coordinates, got {}",
                frames.shape()[2]
            )));
        }
        if frames.shape()[0] < 2 {
            return Err(Error::domain("a motion needs at least two frames"));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("motion contains non-finite coordinates"));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::domain(format!("invalid frame rate {frame_rate}")));
        }
        Ok(Motion { frames, frame_rate })
    }

    pub fn from_frames(frames: &[Vec<Vec3>], frame_rate: f64) -> Result<Self> {
        let t = frames.len();
        let n = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != n) {
            return Err(Error::structural("ragged frame list"));
        }
        let mut a = Array3::zeros((t, n, 3));
        for (ti, f) in frames.iter().enumerate() {
            for (j, p) in f.iter().enumerate() {
                for c in 0..3 {
                    a[[ti, j, c]] = p[c];
                }
            }
        }
        Motion::new(a, frame_rate)
    }

    pub fn to_frames(&self) -> Vec<Vec<Vec3>> {
        self.frames
            .outer_iter()
            .map(|f| f.outer_iter().map(|p| [p[0], p[1], p[2]]).collect())
            .collect()
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array3<f64> {
        self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn joint(&self, t: usize, j: usize) -> Vec3 {
        [
            self.frames[[t, j, 0]],
            self.frames[[t, j, 1]],
            self.frames[[t, j, 2]],
        ]
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn check_for(&self, skeleton: &Skeleton) -> Result<()> {
        if self.n_joints() != skeleton.n_joints() {
            return Err(Error::structural(format!(
                "motion has {} joints, skeleton has {}",
                self.n_joints(),
                skeleton.n_joints()
            )));
        }
        Ok(())
    }

    /// Same motion shifted by a constant vector.
    pub fn translated(&self, offset: Vec3) -> Motion {
        let mut frames = self.frames.clone();
        for (c, o) in offset.into_iter().enumerate() {
            frames.slice_mut(s![.., .., c]).mapv_inplace(|v| v + o);
        }
        Motion {
            frames,
            frame_rate: self.frame_rate,
        }
    }

    /// Per-frame bone lengths, `T x n`.
    pub fn bone_lengths(&self, skeleton: &Skeleton) -> Result<Array2<f64>> {
        self.check_for(skeleton)?;
        let mut out = Array2::zeros((self.n_frames(), skeleton.n_bones()));
        for t in 0..self.n_frames() {
            let row = bone_lengths(self.frame(t), skeleton)?;
            out.row_mut(t).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }

    /// Mean distance of each joint from its own time-averaged position,
    /// averaged over joints and frames.
    pub fn mean_amplitude(&self) -> f64 {
        let mean = self.frames.mean_axis(Axis(0)).expect("T >= 2");
        let (t, n) = (self.n_frames(), self.n_joints());
        let mut acc = 0.0;
        for ti in 0..t {
            for j in 0..n {
                let d: f64 = (0..3)
                    .map(|c| (self.frames[[ti, j, c]] - mean[[j, c]]).powi(2))
                    .sum();
                acc += d.sqrt();
            }
        }
        acc / (t * n) as f64
    }
}

/// Offset of a motion from its template, same shape as the motion.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDelta(pub Array3<f64>);

impl MotionDelta {
    pub fn zeros(t: usize, n: usize) -> Self {
        MotionDelta(Array3::zeros((t, n, 3)))
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Bone lengths of one frame (`N x 3`), ordered by child joint.
pub fn bone_lengths(frame: ArrayView2<'_, f64>, skeleton: &Skeleton) -> Result<Vec<f64>> {
    if frame.shape() != [skeleton.n_joints(), 3] {
        return Err(Error::structural(format!(
            "frame shape {:?} does not match a {}-joint skeleton",
            frame.shape(),
            skeleton.n_joints()
        )));
    }
    Ok(skeleton
        .bones()
        .map(|(p, c)| {
            let d0 = frame[[c, 0]] - frame[[p, 0]];
            let d1 = frame[[c, 1]] - frame[[p, 1]];
            let d2 = frame[[c, 2]] - frame[[p, 2]];
            (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
        })
        .collect())
}

/// Re-pose a motion for a scaled skeleton: walking root to leaves, each child is
/// placed at its parent's new position plus the old bone vector times the bone's
/// scale. Root trajectory and bone directions are unchanged.
pub fn apply_bone_scales(
    motion: &Motion,
    skeleton: &Skeleton,
    scales: &BoneScaleVector,
) -> Result<Motion> {
    motion.check_for(skeleton)?;
    scales.check_for(skeleton)?;
    if scales.is_template() {
        return Ok(motion.clone());
    }
    let src = motion.frames();
    let mut out = src.clone();
    let order = skeleton.topological_order();
    for t in 0..motion.n_frames() {
        for &j in order {
            let Some(p) = skeleton.parent(j) else { continue };
            let k = skeleton.bone_of_joint(j).expect("non-root");
            let s = scales.as_slice()[k];
            for c in 0..3 {
                out[[t, j, c]] = out[[t, p, c]] + s * (src[[t, j, c]] - src[[t, p, c]]);
            }
        }
    }
    Motion::new(out, motion.frame_rate())
}

pub fn delta(motion: &Motion, template: &Motion) -> Result<MotionDelta> {
    if motion.frames.shape() != template.frames.shape() {
        return Err(Error::structural(format!(
            "delta between shapes {:?} and {:?}",
            motion.frames.shape(),
            template.frames.shape()
        )));
    }
    Ok(MotionDelta(&motion.frames - &template.frames))
}

pub fn add_delta(template: &Motion, d: &MotionDelta) -> Result<Motion> {
    if d.0.shape() != template.frames.shape() {
        return Err(Error::structural(format!(
            "adding delta {:?} to motion {:?}",
            d.0.shape(),
            template.frames.shape()
        )));
    }
    Motion::new(&template.frames + &d.0, template.frame_rate)
}

/// Forward differences, `(T-1) x N x 3`, in meters per frame.
pub fn velocity(motion: &Motion) -> Result<Array3<f64>> {
    let t = motion.n_frames();
    if t < 2 {
        return Err(Error::domain("velocity needs at least two frames"));
    }
    let f = motion.frames();
    Ok(&f.slice(s![1.., .., ..]) - &f.slice(s![..t - 1, .., ..]))
}

/// Two characters performing one interaction. Character B carries the bone
/// scale relative to its template skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionClip {
    pub skeleton_a: Skeleton,
    pub skeleton_b: Skeleton,
    pub motion_a: Motion,
    pub motion_b: Motion,
    pub interaction_kind: String,
    pub scale_b: BoneScaleVector,
    /// `(joint on A, joint on B)` contact pairs.
    pub key_pairs: Vec<(usize, usize)>,
}

impl InteractionClip {
    pub fn new(
        skeleton_a: Skeleton,
        skeleton_b: Skeleton,
        motion_a: Motion,
        motion_b: Motion,
        interaction_kind: impl Into<String>,
        scale_b: BoneScaleVector,
        key_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let clip = InteractionClip {
            skeleton_a,
            skeleton_b,
            motion_a,
            motion_b,
            interaction_kind: interaction_kind.into(),
            scale_b,
            key_pairs,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        self.motion_a.check_for(&self.skeleton_a)?;
        self.motion_b.check_for(&self.skeleton_b)?;
        self.scale_b.check_for(&self.skeleton_b)?;
        if self.motion_a.n_frames() != self.motion_b.n_frames() {
            return Err(Error::structural(format!(
                "characters have {} and {} frames",
                self.motion_a.n_frames(),
                self.motion_b.n_frames()
            )));
        }
        if self.motion_a.frame_rate() != self.motion_b.frame_rate() {
            return Err(Error::structural("characters have different frame rates"));
        }
        for &(a, b) in &self.key_pairs {
            if a >= self.skeleton_a.n_joints() || b >= self.skeleton_b.n_joints() {
                return Err(Error::structural(format!("key pair ({a}, {b}) out of range")));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.motion_a.n_frames()
    }

    pub fn is_template(&self) -> bool {
        self.scale_b.is_template()
    }

    /// Copy with new motions, keeping skeletons, labels, and pairs.
    pub fn with_motions(&self, motion_a: Motion, motion_b: Motion) -> Result<Self> {
        let mut c = self.clone();
        c.motion_a = motion_a;
        c.motion_b = motion_b;
        c.validate()?;
        Ok(c)
    }

    /// Distances of every key pair at frame `t`.
    pub fn key_pair_distances(&self, t: usize) -> Vec<f64> {
        self.key_pairs
            .iter()
            .map(|&(a, b)| {
                crate::skeleton::dist(self.motion_a.joint(t, a), self.motion_b.joint(t, b))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&ClipRepr::from(self))
            .map_err(|e| Error::Numerical(format!("cannot serialize clip: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: ClipRepr =
            serde_json::from_str(text).map_err(|e| Error::parse("<clip json>", e))?;
        repr.into_clip()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let repr: ClipRepr = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        repr.into_clip().map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    /// One row per (frame, character, joint).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        w.write_record(["frame", "character", "joint", "x", "y", "z"])
            .map_err(io)?;
        for t in 0..self.n_frames() {
            for (tag, m) in [("A", &self.motion_a), ("B", &self.motion_b)] {
                for j in 0..m.n_joints() {
                    let p = m.joint(t, j);
                    w.write_record([
                        t.to_string(),
                        tag.to_string(),
                        j.to_string(),
                        format!("{:.9}", p[0]),
                        format!("{:.9}", p[1]),
                        format!("{:.9}", p[2]),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(())
    }

    /// Replace both motions with positions read from CSV written by [`write_csv`].
    ///
    /// [`write_csv`]: InteractionClip::write_csv
    pub fn read_csv_positions<R: std::io::Read>(&self, input: R) -> Result<Self> {
        let mut a = self.motion_a.frames().clone();
        let mut b = self.motion_b.frames().clone();
        let mut seen = 0usize;
        let mut rd = csv::Reader::from_reader(input);
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::parse("<csv>", e))?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::parse("<csv>", "short row"));
            let t: usize = field(0)?.parse().map_err(|e| Error::parse("<csv>", e))?;
            let j: usize = field(2)?.parse().map_err(|e| Error::parse("<csv>", e))?;
            let target = match field(1)? {
                "A" => &mut a,
                "B" => &mut b,
                other => return Err(Error::parse("<csv>", format!("unknown character {other}"))),
            };
            if t >= target.shape()[0] || j >= target.shape()[1] {
                return Err(Error::parse("<csv>", format!("row ({t}, {j}) out of range")));
            }
            for c in 0..3 {
                target[[t, j, c]] = field(3 + c)?
                    .parse()
                    .map_err(|e| Error::parse("<csv>", e))?;
            }
            seen += 1;
        }
        let expected = self.n_frames() * (self.skeleton_a.n_joints() + self.skeleton_b.n_joints());
        if seen != expected {
            return Err(Error::parse(
                "<csv>",
                format!("expected {expected} rows, read {seen}"),
            ));
        }
        let rate = self.motion_a.frame_rate();
        self.with_motions(Motion::new(a, rate)?, Motion::new(b, rate)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ClipRepr {
    format_version: u32,
    skeleton: Skeleton,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skeleton_b: Option<Skeleton>,
    frame_rate: f64,
    frames_a: Vec<Vec<Vec3>>,
    frames_b: Vec<Vec<Vec3>>,
    interaction_kind: String,
    scale_b: BoneScaleVector,
    key_pairs: Vec<(usize, usize)>,
}

impl From<&InteractionClip> for ClipRepr {
    fn from(c: &InteractionClip) -> Self {
        ClipRepr {
            format_version: CLIP_FORMAT_VERSION,
            skeleton: c.skeleton_a.clone(),
            skeleton_b: (c.skeleton_b != c.skeleton_a).then(|| c.skeleton_b.clone()),
            frame_rate: c.motion_a.frame_rate(),
            frames_a: c.motion_a.to_frames(),
            frames_b: c.motion_b.to_frames(),
            interaction_kind: c.interaction_kind.clone(),
            scale_b: c.scale_b.clone(),
            key_pairs: c.key_pairs.clone(),
        }
    }
}

impl ClipRepr {
    fn into_clip(self) -> Result<InteractionClip> {
        if self.format_version != CLIP_FORMAT_VERSION {
            return Err(Error::parse(
                "<clip json>",
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        let skeleton_b = self.skeleton_b.unwrap_or_else(|| self.skeleton.clone());
        InteractionClip::new(
            self.skeleton,
            skeleton_b,
            Motion::from_frames(&self.frames_a, self.frame_rate)?,
            Motion::from_frames(&self.frames_b, self.frame_rate)?,
            self.interaction_kind,
            self.scale_b,
            self.key_pairs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Motion {
        let frames = Array3::from_shape_fn((t, n, 3), |_| rng.random_range(-1.0..1.0));
        Motion::new(frames, 30.0).unwrap()
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Skeleton {
        let parents = (0..n)
            .map(|j| (j > 0).then(|| rng.random_range(0..j)))
            .collect();
        let offsets = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.1..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        Skeleton::new((0..n).map(|i| i.to_string()).collect(), parents, offsets).unwrap()
    }

    #[test]
    fn unit_bone_length() {
        let s = Skeleton::chain(2);
        let f = ndarray::arr2(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(bone_lengths(f.view(), &s).unwrap(), vec![1.0]);
    }

    #[test]
    fn bone_lengths_shape_mismatch() {
        let s = Skeleton::chain(3);
        let f = ndarray::Array2::<f64>::zeros((2, 3));
        assert!(matches!(bone_lengths(f.view(), &s), Err(Error::Structural(_))));
    }

    #[test]
    fn bone_lengths_match_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_tree(&mut rng, 7);
            let m = random_motion(&mut rng, 2, 7);
            let got = bone_lengths(m.frame(0), &s).unwrap();
            // Oracle: walk joints in index order, skip the root.
            let mut want = Vec::new();
            for j in 0..7 {
                if let Some(p) = s.parent(j) {
                    let a = m.joint(0, j);
                    let b = m.joint(0, p);
                    want.push(
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                            .sqrt(),
                    );
                }
            }
            assert_eq!(got, want);
            let shifted = m.translated([0.3, -2.0, 5.0]);
            let moved = bone_lengths(shifted.frame(0), &s).unwrap();
            for (a, b) in got.iter().zip(&moved) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_chain_by_half() {
        let s = Skeleton::chain(3);
        let m = Motion::from_frames(
            &[
                vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]],
                vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]],
            ],
            30.0,
        )
        .unwrap();
        let out = apply_bone_scales(&m, &s, &BoneScaleVector::uniform(2, 0.5).unwrap()).unwrap();
        assert_eq!(out.joint(0, 1), [0.0, 0.5, 0.0]);
        assert_eq!(out.joint(1, 2), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_ones_scaling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_tree(&mut rng, 6);
        let m = random_motion(&mut rng, 4, 6);
        let out = apply_bone_scales(&m, &s, &BoneScaleVector::ones(5)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn scaling_wrong_length_is_structural() {
        let s = Skeleton::chain(3);
        let m = Motion::new(Array3::zeros((2, 3, 3)), 30.0).unwrap();
        let err = apply_bone_scales(&m, &s, &BoneScaleVector::ones(4));
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn motion_needs_two_frames() {
        assert!(matches!(
            Motion::new(Array3::zeros((1, 2, 3)), 30.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn velocity_of_linear_motion() {
        let v = [0.1, -0.2, 0.3];
        let frames: Vec<Vec<Vec3>> = (0..5)
            .map(|t| vec![[v[0] * t as f64, v[1] * t as f64, v[2] * t as f64]; 2])
            .collect();
        let m = Motion::from_frames(&frames, 30.0).unwrap();
        let vel = velocity(&m).unwrap();
        assert_eq!(vel.shape(), &[4, 2, 3]);
        for ((_, _, c), x) in vel.indexed_iter() {
            assert!((x - v[c]).abs() < 1e-12);
        }
        let still = Motion::new(Array3::from_elem((3, 2, 3), 0.7), 30.0).unwrap();
        assert!(velocity(&still).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_matches_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_motion(&mut rng, 6, 4);
        let vel = velocity(&m).unwrap();
        for t in 0..5 {
            for j in 0..4 {
                let (a, b) = (m.joint(t + 1, j), m.joint(t, j));
                for c in 0..3 {
                    assert_eq!(vel[[t, j, c]], a[c] - b[c]);
                }
            }
        }
    }

    #[test]
    fn delta_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_motion(&mut rng, 3, 4);
        assert!(delta(&m, &m).unwrap().0.iter().all(|&x| x == 0.0));
        assert_eq!(add_delta(&m, &MotionDelta::zeros(3, 4)).unwrap(), m);
        let other = random_motion(&mut rng, 4, 4);
        assert!(matches!(delta(&m, &other), Err(Error::Structural(_))));
    }

    #[test]
    fn adjacency_matches_edge_list_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..10 {
            let s = random_tree(&mut rng, n);
            let a = s.adjacency();
            let mut edges = std::collections::HashSet::new();
            for (j, p) in s.parents().iter().enumerate() {
                if let Some(p) = p {
                    edges.insert((j.min(*p), j.max(*p)));
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let want = edges.contains(&(i.min(j), i.max(j))) as i32 as f64;
                    assert_eq!(a[[i, j]], want);
                }
            }
            assert_eq!(a.sum(), 2.0 * (n - 1) as f64);
            assert_eq!(a, a.t());
        }
    }

    proptest! {
        #[test]
        fn scaling_composes_and_scales_lengths(
            seed in 0u64..1000,
            s1 in proptest::collection::vec(0.5f64..1.5, 5),
            s2 in proptest::collection::vec(0.5f64..1.5, 5),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let skel = random_tree(&mut rng, 6);
            let m = random_motion(&mut rng, 3, 6);
            let a = BoneScaleVector::new(s1).unwrap();
            let b = BoneScaleVector::new(s2).unwrap();
            let once = apply_bone_scales(&m, &skel, &a.compose(&b).unwrap()).unwrap();
            let twice = apply_bone_scales(
                &apply_bone_scales(&m, &skel, &a).unwrap(), &skel, &b).unwrap();
            for (x, y) in once.frames().iter().zip(twice.frames()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let before = m.bone_lengths(&skel).unwrap();
            let after = apply_bone_scales(&m, &skel, &a).unwrap().bone_lengths(&skel).unwrap();
            for t in 0..3 {
                for k in 0..5 {
                    prop_assert!((after[[t, k]] - a.as_slice()[k] * before[[t, k]]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn delta_round_trip_is_exact(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_motion(&mut rng, 4, 3);
            let t = random_motion(&mut rng, 4, 3);
            let back = add_delta(&t, &delta(&m, &t).unwrap()).unwrap();
            // Exact up to the single rounding of (m - t) + t.
            for (x, y) in back.frames().iter().zip(m.frames()) {
                prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clip_json_round_trip_and_errors() {
        let s = Skeleton::desk7();
        let rest: Vec<Vec3> = s.rest_pose();
        let frames = vec![rest.clone(), rest];
        let m = Motion::from_frames(&frames, 30.0).unwrap();
        let clip = InteractionClip::new(
            s.clone(),
            s,
            m.clone(),
            m.translated([1.0, 0.0, 0.0]),
            "hold",
            BoneScaleVector::ones(6),
            vec![(4, 1)],
        )
        .unwrap();
        let json = clip.to_json().unwrap();
        assert!(json.contains("\"format_version\":1"));
        assert_eq!(InteractionClip::from_json(&json).unwrap(), clip);
        assert!(matches!(
            InteractionClip::from_json("{\"format_version\": 1"),
            Err(Error::Parse { .. })
        ));
        let bumped = json.replace("\"format_version\":1", "\"format_version\":7");
        assert!(InteractionClip::from_json(&bumped).is_err());
    }

    #[test]
    fn clip_rejects_bad_key_pair() {
        let s = Skeleton::chain(2);
        let m = Motion::new(Array3::zeros((2, 2, 3)), 30.0).unwrap();
        let err = InteractionClip::new(
            s.clone(),
            s,
            m.clone(),
            m,
            "x",
            BoneScaleVector::ones(1),
            vec![(0, 5)],
        );
        assert!(matches!(err, Err(Error::Structural(_))));
    }
}
