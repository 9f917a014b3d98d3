use ndarray::{s, Array3};

use super::joint_scale_channel;
use crate::error::{Error, Result};
use crate::motion::InteractionClip;
use crate::tape::{Dims, Mat};

/// One training or inference example. Both clips are expected in the
/// template's normalized frame; `target` is absent at inference time.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub template: &'a InteractionClip,
    pub target: Option<&'a InteractionClip>,
    pub scales: &'a [f64],
}

/// Network inputs for a batch of pairs, laid out as `(b, t, j)` or `(b, j)` rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub dims: Dims,
    pub frame_rate: f64,
    /// `b x n_bones`.
    pub scales: Mat,
    /// `(b, j) x 1`: scale of the bone above each joint.
    pub joint_scale: Mat,
    pub first_a: Mat,
    pub last_a: Mat,
    pub first_b: Mat,
    pub last_b: Mat,
    pub template_a: Mat,
    pub template_b: Mat,
    pub target_a: Option<Mat>,
    pub target_b: Option<Mat>,
    pub delta_a: Option<Mat>,
    pub delta_b: Option<Mat>,
    /// Context features of the ground-truth B motion.
    pub context: Option<Mat>,
}

fn rows_of(frames: &Array3<f64>) -> Mat {
    let (t, n, _) = frames.dim();
    frames
        .to_shape((t * n, 3))
        .expect("contiguous frames")
        .to_owned()
}

/// Eight channels per `(t, j)` row of one motion: position, velocity in units
/// per second (zero at the first frame), and the joint's distance to the root
/// at the first and at the last frame.
pub fn context_features(frames: &Array3<f64>, root: usize, frame_rate: f64) -> Mat {
    let (t_len, n, _) = frames.dim();
    let dist = |t: usize, j: usize| -> f64 {
        (0..3)
            .map(|c| (frames[[t, j, c]] - frames[[t, root, c]]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Mat::zeros((t_len * n, 8));
    for t in 0..t_len {
        for j in 0..n {
            let r = t * n + j;
            for c in 0..3 {
                out[[r, c]] = frames[[t, j, c]];
                if t > 0 {
                    out[[r, 3 + c]] = (frames[[t, j, c]] - frames[[t - 1, j, c]]) * frame_rate;
                }
            }
            out[[r, 6]] = dist(0, j);
            out[[r, 7]] = dist(t_len - 1, j);
        }
    }
    out
}

impl Batch {
    pub fn new(pairs: &[PairInput]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::structural("empty batch"))?;
        let tpl = first.template;
        let (frames, joints) = (tpl.n_frames(), tpl.skeleton_b.n_joints());
        let n_bones = tpl.skeleton_b.n_bones();
        let dims = Dims::new(pairs.len(), frames, joints);
        let with_target = first.target.is_some();
        let seq = || Mat::zeros((dims.rows(), 3));
        let per_joint = |c: usize| Mat::zeros((pairs.len() * joints, c));
        let mut b = Batch {
            dims,
            frame_rate: tpl.motion_b.frame_rate(),
            scales: Mat::zeros((pairs.len(), n_bones)),
            joint_scale: per_joint(1),
            first_a: per_joint(3),
            last_a: per_joint(3),
            first_b: per_joint(3),
            last_b: per_joint(3),
            template_a: seq(),
            template_b: seq(),
            target_a: with_target.then(seq),
            target_b: with_target.then(seq),
            delta_a: None,
            delta_b: None,
            context: with_target.then(|| Mat::zeros((dims.rows(), 8))),
        };
        let block = frames * joints;
        for (i, pair) in pairs.iter().enumerate() {
            let t = pair.template;
            if t.n_frames() != frames
                || t.skeleton_a.n_joints() != joints
                || t.skeleton_b.n_joints() != joints
                || pair.target.is_some() != with_target
            {
                return Err(Error::structural("batch members disagree in shape"));
            }
            if pair.scales.len() != n_bones {
                return Err(Error::structural(format!(
                    "scale vector has {} entries, skeleton has {n_bones} bones",
                    pair.scales.len()
                )));
            }
            b.scales.row_mut(i).assign(&ndarray::ArrayView1::from(pair.scales));
            let js = joint_scale_channel(&t.skeleton_b, pair.scales);
            let jr = i * joints..(i + 1) * joints;
            for (j, s) in js.into_iter().enumerate() {
                b.joint_scale[[i * joints + j, 0]] = s;
            }
            let fa = t.motion_a.frames();
            let fb = t.motion_b.frames();
            b.first_a.slice_mut(s![jr.clone(), ..]).assign(&fa.slice(s![0, .., ..]));
            b.last_a.slice_mut(s![jr.clone(), ..]).assign(&fa.slice(s![frames - 1, .., ..]));
            b.first_b.slice_mut(s![jr.clone(), ..]).assign(&fb.slice(s![0, .., ..]));
            b.last_b.slice_mut(s![jr, ..]).assign(&fb.slice(s![frames - 1, .., ..]));
            let rr = i * block..(i + 1) * block;
            b.template_a.slice_mut(s![rr.clone(), ..]).assign(&rows_of(fa));
            b.template_b.slice_mut(s![rr.clone(), ..]).assign(&rows_of(fb));
            if let Some(target) = pair.target {
                if target.n_frames() != frames
                    || target.skeleton_a.n_joints() != joints
                    || target.skeleton_b.n_joints() != joints
                {
                    return Err(Error::structural("target does not match its template's shape"));
                }
                let ta = target.motion_a.frames();
                let tb = target.motion_b.frames();
                b.target_a.as_mut().expect("targets").slice_mut(s![rr.clone(), ..]).assign(&rows_of(ta));
                b.target_b.as_mut().expect("targets").slice_mut(s![rr.clone(), ..]).assign(&rows_of(tb));
                let ctx = context_features(tb, target.skeleton_b.root(), target.motion_b.frame_rate());
                b.context.as_mut().expect("targets").slice_mut(s![rr, ..]).assign(&ctx);
            }
        }
        if let (Some(ta), Some(tb)) = (&b.target_a, &b.target_b) {
            b.delta_a = Some(ta - &b.template_a);
            b.delta_b = Some(tb - &b.template_b);
        }
        Ok(b)
    }

    /// `(b, t, j) x 4` input of the B encoder: delta and joint scale.
    pub fn enc_b_input(&self) -> Option<Mat> {
        let delta = self.delta_b.as_ref()?;
        let mut out = Mat::zeros((self.dims.rows(), 4));
        out.slice_mut(s![.., 0..3]).assign(delta);
        let d = self.dims;
        for b in 0..d.batch {
            for t in 0..d.frames {
                for j in 0..d.joints {
                    out[[d.row(b, t, j), 3]] = self.joint_scale[[b * d.joints + j, 0]];
                }
            }
        }
        Some(out)
    }

    /// `(b, j) x 7` static step input of the B decoder.
    pub fn static_b(&self) -> Mat {
        ndarray::concatenate(
            ndarray::Axis(1),
            &[self.joint_scale.view(), self.first_b.view(), self.last_b.view()],
        )
        .expect("row counts agree")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_base_clip;
    use crate::skeleton::Skeleton;

    #[test]
    fn context_channels() {
        let f = Array3::from_shape_fn((3, 2, 3), |(t, j, c)| (t * 10 + j * 3 + c) as f64);
        let m = context_features(&f, 0, 2.0);
        assert_eq!(m.dim(), (6, 8));
        // Row (t=1, j=1): position, velocity * rate, root distances.
        let r = m.row(3);
        assert_eq!(&r.to_vec()[..6], &[13.0, 14.0, 15.0, 20.0, 20.0, 20.0]);
        assert!((r[6] - 27f64.sqrt()).abs() < 1e-12);
        assert!((r[7] - 27f64.sqrt()).abs() < 1e-12);
        assert!(m.row(1).slice(s![3..6]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_layout() {
        let s = Skeleton::desk7();
        let c = gen_base_clip("hold", &s, 8, 0).unwrap();
        let scales = vec![1.1; 6];
        let pairs = [
            PairInput { template: &c, target: Some(&c), scales: &scales },
            PairInput { template: &c, target: Some(&c), scales: &scales },
        ];
        let b = Batch::new(&pairs).unwrap();
        assert_eq!(b.dims, Dims::new(2, 8, 7));
        assert_eq!(b.template_b.dim(), (112, 3));
        assert!(b.delta_b.as_ref().unwrap().iter().all(|&v| v == 0.0));
        let row = b.dims.row(1, 5, 4);
        assert_eq!(b.template_b.row(row).to_vec(), c.motion_b.joint(5, 4).to_vec());
        assert_eq!(b.joint_scale[[7, 0]], 1.0);
        assert_eq!(b.joint_scale[[8, 0]], 1.1);
        assert_eq!(b.static_b().ncols(), 7);
        assert_eq!(b.enc_b_input().unwrap()[[row, 3]], 1.1);
        let bad = [PairInput { template: &c, target: None, scales: &scales[..3] }];
        assert!(matches!(Batch::new(&bad), Err(Error::Structural(_))));
    }
}
