//! Joint trees and per-bone scale vectors.
//!
//! Bones are identified by their child joint. Bone `k` is the `k`-th
//! non-root joint in ascending joint index, which fixes the ordering of
//! every bone-length vector in the crate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRepr", into = "SkeletonRepr")]
pub struct Skeleton {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    template_offsets: Vec<Vec3>,
    root: usize,
    order: Vec<usize>,
    bone_children: Vec<usize>,
}

/// On-disk form: the root's parent is written as `-1`.
#[derive(Serialize, Deserialize)]
struct SkeletonRepr {
    names: Vec<String>,
    parents: Vec<i64>,
    template_offsets: Vec<Vec3>,
}

impl TryFrom<SkeletonRepr> for Skeleton {
    type Error = Error;

    fn try_from(r: SkeletonRepr) -> Result<Self> {
        let parents = r
            .parents
            .iter()
            .map(|&p| {
                if p < 0 {
                    Ok(None)
                } else {
                    usize::try_from(p)
                        .map(Some)
                        .map_err(|_| Error::structural("bad parent index"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Skeleton::new(r.names, parents, r.template_offsets)
    }
}

impl From<Skeleton> for SkeletonRepr {
    fn from(s: Skeleton) -> Self {
        SkeletonRepr {
            parents: s
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            names: s.joint_names,
            template_offsets: s.template_offsets,
        }
    }
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        template_offsets: Vec<Vec3>,
    ) -> Result<Self> {
        let n = parents.len();
        if n < 2 {
            return Err(Error::structural("a skeleton needs at least two joints"));
        }
        if joint_names.len() != n || template_offsets.len() != n {
            return Err(Error::structural(format!(
                "{} names, {} parents, {} offsets",
                joint_names.len(),
                n,
                template_offsets.len()
            )));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::structural(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == j {
                    return Err(Error::structural(format!("joint {j} has invalid parent {p}")));
                }
                if norm(template_offsets[j]) <= 0.0 || !norm(template_offsets[j]).is_finite() {
                    return Err(Error::structural(format!(
                        "joint {j} has a zero-length template offset"
                    )));
                }
            }
        }

        // Breadth-first from the root; any joint not reached sits on a cycle.
        let mut children = vec![Vec::new(); n];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(n);
        order.push(root);
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            head += 1;
            order.extend(children[j].iter().copied());
        }
        if order.len() != n {
            return Err(Error::structural("parent links contain a cycle"));
        }

        let bone_children = (0..n).filter(|&j| j != root).collect();
        Ok(Skeleton {
            joint_names,
            parents,
            template_offsets,
            root,
            order,
            bone_children,
        })
    }

    /// Seven-joint stick figure used throughout the desk-scale experiments:
    /// pelvis (root), chest, head, left hand, right hand, left foot, right foot.
    /// Hands hang off the chest with a single arm bone.
    pub fn desk7() -> Self {
        let names = ["pelvis", "chest", "head", "l_hand", "r_hand", "l_foot", "r_foot"];
        let parents = vec![None, Some(0), Some(1), Some(1), Some(1), Some(0), Some(0)];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, 0.25, 0.0],
            [0.6, 0.0, 0.0],
            [-0.6, 0.0, 0.0],
            [0.15, -0.9, 0.0],
            [-0.15, -0.9, 0.0],
        ];
        Skeleton::new(names.iter().map(|s| s.to_string()).collect(), parents, offsets)
            .expect("desk7 preset is valid")
    }

    /// Straight chain of `n` joints with unit offsets along +y.
    pub fn chain(n: usize) -> Self {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parents = (0..n).map(|i| i.checked_sub(1)).collect();
        let offsets = (0..n)
            .map(|i| if i == 0 { [0.0; 3] } else { [0.0, 1.0, 0.0] })
            .collect();
        Skeleton::new(names, parents, offsets).expect("chain preset is valid")
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_bones(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn template_offsets(&self) -> &[Vec3] {
        &self.template_offsets
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Child joint of each bone, ascending.
    pub fn bone_children(&self) -> &[usize] {
        &self.bone_children
    }

    /// `(parent, child)` joint pair of every bone.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bone_children
            .iter()
            .map(|&c| (self.parents[c].expect("non-root"), c))
    }

    /// Index of the bone whose child is `joint`, `None` for the root.
    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        if joint == self.root {
            None
        } else if joint < self.root {
            Some(joint)
        } else {
            Some(joint - 1)
        }
    }

    pub fn template_lengths(&self) -> Vec<f64> {
        self.bone_children
            .iter()
            .map(|&c| norm(self.template_offsets[c]))
            .collect()
    }

    pub fn mean_template_length(&self) -> f64 {
        let l = self.template_lengths();
        l.iter().sum::<f64>() / l.len() as f64
    }

    /// Rest pose: forward kinematics of the template offsets, root at the origin.
    pub fn rest_pose(&self) -> Vec<Vec3> {
        let mut pos = vec![[0.0; 3]; self.n_joints()];
        for &j in &self.order {
            if let Some(p) = self.parents[j] {
                pos[j] = add(pos[p], self.template_offsets[j]);
            }
        }
        pos
    }

    /// Symmetric 0/1 parent-child adjacency with zero diagonal.
    pub fn adjacency(&self) -> Array2<f64> {
        let n = self.n_joints();
        let mut a = Array2::zeros((n, n));
        for (p, c) in self.bones() {
            a[[p, c]] = 1.0;
            a[[c, p]] = 1.0;
        }
        a
    }

    /// Hash of the topology and template offsets, used to tie checkpoints to data.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (j, p) in self.parents.iter().enumerate() {
            h.update(j.to_le_bytes());
            h.update(p.map_or(u64::MAX, |p| p as u64).to_le_bytes());
            for v in self.template_offsets[j] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BoneScaleVector(Vec<f64>);

impl TryFrom<Vec<f64>> for BoneScaleVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        BoneScaleVector::new(v)
    }
}

impl From<BoneScaleVector> for Vec<f64> {
    fn from(s: BoneScaleVector) -> Self {
        s.0
    }
}

impl BoneScaleVector {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::domain("empty bone scale vector"));
        }
        if let Some((k, s)) = scales
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::domain(format!("bone {k} has non-positive scale {s}")));
        }
        Ok(BoneScaleVector(scales))
    }

    pub fn ones(n: usize) -> Self {
        BoneScaleVector(vec![1.0; n])
    }

    pub fn uniform(n: usize, s: f64) -> Result<Self> {
        BoneScaleVector::new(vec![s; n])
    }

    /// All ones except bone `k`.
    pub fn single(n: usize, k: usize, s: f64) -> Result<Self> {
        if k >= n {
            return Err(Error::structural(format!("bone {k} out of range for {n} bones")));
        }
        let mut v = vec![1.0; n];
        v[k] = s;
        BoneScaleVector::new(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_template(&self) -> bool {
        self.0.iter().all(|&s| s == 1.0)
    }

    /// Elementwise product.
    pub fn compose(&self, other: &BoneScaleVector) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::structural("scale vectors differ in length"));
        }
        BoneScaleVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    /// Target bone lengths for `skeleton`: scales times template lengths.
    pub fn target_lengths(&self, skeleton: &Skeleton) -> Result<Vec<f64>> {
        self.check_for(skeleton)?;
        Ok(skeleton
            .template_lengths()
            .iter()
            .zip(&self.0)
            .map(|(l, s)| l * s)
            .collect())
    }

    /// Per-joint channel: the scale of the bone above each joint, 1.0 at the root.
    pub fn per_joint(&self, skeleton: &Skeleton) -> Result<Vec<f64>> {
        self.check_for(skeleton)?;
        Ok((0..skeleton.n_joints())
            .map(|j| skeleton.bone_of_joint(j).map_or(1.0, |k| self.0[k]))
            .collect())
    }

    pub fn check_for(&self, skeleton: &Skeleton) -> Result<()> {
        if self.len() != skeleton.n_bones() {
            return Err(Error::structural(format!(
                "{} scales for a skeleton with {} bones",
                self.len(),
                skeleton.n_bones()
            )));
        }
        Ok(())
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn rejects_two_roots() {
        let err = Skeleton::new(names(2), vec![None, None], vec![[0.0; 3]; 2]);
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn rejects_cycles() {
        let err = Skeleton::new(
            names(3),
            vec![None, Some(2), Some(1)],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        );
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn rejects_zero_offset() {
        let err = Skeleton::new(names(2), vec![None, Some(0)], vec![[0.0; 3]; 2]);
        assert!(err.is_err());
    }

    #[test]
    fn root_need_not_be_first() {
        let s = Skeleton::new(
            names(3),
            vec![Some(1), None, Some(1)],
            vec![[1.0, 0.0, 0.0], [0.0; 3], [0.0, 2.0, 0.0]],
        )
        .unwrap();
        assert_eq!(s.root(), 1);
        assert_eq!(s.bone_children(), &[0, 2]);
        assert_eq!(s.bone_of_joint(2), Some(1));
        assert_eq!(s.template_lengths(), vec![1.0, 2.0]);
    }

    #[test]
    fn desk7_shape() {
        let s = Skeleton::desk7();
        assert_eq!(s.n_joints(), 7);
        assert_eq!(s.n_bones(), 6);
        let a = s.adjacency();
        assert_eq!(a.sum(), 12.0);
    }

    #[test]
    fn adjacency_two_joint_chain() {
        let a = Skeleton::chain(2).adjacency();
        assert_eq!(a, ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn adjacency_star() {
        let s = Skeleton::new(
            names(4),
            vec![None, Some(0), Some(0), Some(0)],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let a = s.adjacency();
        assert_eq!(a.row(0).sum(), 3.0);
        for j in 1..4 {
            assert_eq!(a.row(j).sum(), 1.0);
        }
    }

    #[test]
    fn scale_vector_validation() {
        assert!(BoneScaleVector::new(vec![1.0, 0.0]).is_err());
        assert!(BoneScaleVector::new(vec![1.0, -0.5]).is_err());
        assert!(BoneScaleVector::new(vec![f64::NAN]).is_err());
        assert!(BoneScaleVector::ones(3).is_template());
        let s = BoneScaleVector::single(3, 1, 1.1).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.1, 1.0]);
        assert!(serde_json::from_str::<BoneScaleVector>("[1.0, -1.0]").is_err());
    }

    #[test]
    fn per_joint_channel_puts_one_at_root() {
        let s = Skeleton::desk7();
        let b = BoneScaleVector::new(vec![1.1, 1.2, 1.3, 1.4, 1.5, 1.6]).unwrap();
        assert_eq!(
            b.per_joint(&s).unwrap(),
            vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6]
        );
    }

    #[test]
    fn json_round_trip_uses_minus_one_for_root() {
        let s = Skeleton::desk7();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("-1"));
        let back: Skeleton = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
