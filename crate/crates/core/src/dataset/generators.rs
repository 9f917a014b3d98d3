//! Procedural two-character base interactions.
//!
//! Each generator poses two characters with rigid bones: every joint is
//! placed at its parent's position plus a unit direction times the template
//! bone length, so bone lengths are constant across frames. Hands that take
//! part in a contact aim straight at their target, and the acting character's
//! chest is kept close to arm's length from that target.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{InteractionClip, Motion};
use crate::skeleton::{add, dist, norm, scale, sub, BoneScaleVector, Skeleton, Vec3};

pub const FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// A's right hand rests on B's chest while B sways.
    Hold,
    /// The two orbit a common center with A's right hand clasping B's left.
    Circle,
    /// B leans forward into A, who supports B's chest with both hands.
    Lean,
    /// A's hands hold B's pelvis while B rises and settles.
    Lift,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 4] = [
        InteractionKind::Circle,
        InteractionKind::Hold,
        InteractionKind::Lean,
        InteractionKind::Lift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InteractionKind::Hold => "hold",
            InteractionKind::Circle => "circle",
            InteractionKind::Lean => "lean",
            InteractionKind::Lift => "lift",
        }
    }

    /// `(joint on A, joint on B)` contact pairs, in desk7 joint indices.
    pub fn key_pairs(self) -> Vec<(usize, usize)> {
        match self {
            InteractionKind::Hold => vec![(R_HAND, CHEST)],
            InteractionKind::Circle => vec![(R_HAND, L_HAND)],
            InteractionKind::Lean => vec![(L_HAND, CHEST), (R_HAND, CHEST)],
            InteractionKind::Lift => vec![(L_HAND, PELVIS), (R_HAND, PELVIS)],
        }
    }

    /// Key-pair distance the generator keeps below for most frames.
    pub fn contact_threshold(self) -> f64 {
        0.15
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InteractionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InteractionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown interaction kind '{s}'")))
    }
}

pub const PELVIS: usize = 0;
pub const CHEST: usize = 1;
pub const HEAD: usize = 2;
pub const L_HAND: usize = 3;
pub const R_HAND: usize = 4;
pub const L_FOOT: usize = 5;
pub const R_FOOT: usize = 6;

const ROLES: [&str; 7] = ["pelvis", "chest", "head", "l_hand", "r_hand", "l_foot", "r_foot"];

/// Bone lengths of a desk7-shaped skeleton, indexed by child joint.
struct Lengths([f64; 7]);

fn lengths_of(skeleton: &Skeleton) -> Result<Lengths> {
    let names: Vec<&str> = skeleton.joint_names().iter().map(String::as_str).collect();
    if names != ROLES {
        return Err(Error::config(format!(
            "procedural generators need the desk7 joint layout {ROLES:?}, got {names:?}"
        )));
    }
    let desk = Skeleton::desk7();
    if skeleton.parents() != desk.parents() {
        return Err(Error::config("procedural generators need the desk7 hierarchy"));
    }
    let mut l = [0.0; 7];
    for (j, off) in skeleton.template_offsets().iter().enumerate().skip(1) {
        l[j] = norm(*off);
    }
    Ok(Lengths(l))
}

fn unit(v: Vec3) -> Vec3 {
    scale(v, 1.0 / norm(v))
}

/// Rotate a body-local vector (x lateral, y up, z forward) by yaw about +y.
fn yaw(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// Pose parameters for one character in one frame.
struct Pose {
    root: Vec3,
    heading: f64,
    /// Forward trunk pitch in radians.
    lean: f64,
    l_hand: HandGoal,
    r_hand: HandGoal,
    stride_phase: f64,
}

enum HandGoal {
    /// Aim at a world-space point.
    Reach(Vec3),
    /// Body-local direction.
    Hang(Vec3),
}

impl Pose {
    fn place(&self, l: &Lengths) -> [Vec3; 7] {
        let mut p = [[0.0; 3]; 7];
        let trunk = yaw([0.0, self.lean.cos(), self.lean.sin()], self.heading);
        p[PELVIS] = self.root;
        p[CHEST] = add(self.root, scale(trunk, l.0[CHEST]));
        p[HEAD] = add(p[CHEST], scale(trunk, l.0[HEAD]));
        for (joint, goal) in [(L_HAND, &self.l_hand), (R_HAND, &self.r_hand)] {
            let dir = match goal {
                HandGoal::Reach(target) => unit(sub(*target, p[CHEST])),
                HandGoal::Hang(local) => unit(yaw(*local, self.heading)),
            };
            p[joint] = add(p[CHEST], scale(dir, l.0[joint]));
        }
        let swing = 0.25 * self.stride_phase.sin();
        for (joint, side) in [(L_FOOT, 1.0), (R_FOOT, -1.0)] {
            let local = [0.16 * side, -1.0, side * swing];
            p[joint] = add(self.root, scale(unit(yaw(local, self.heading)), l.0[joint]));
        }
        p
    }

    /// Root position that puts this pose's chest at `chest`.
    fn root_for_chest(&self, chest: Vec3, l: &Lengths) -> Vec3 {
        let trunk = yaw([0.0, self.lean.cos(), self.lean.sin()], self.heading);
        sub(chest, scale(trunk, l.0[CHEST]))
    }
}

fn heading_towards(from: Vec3, to: Vec3) -> f64 {
    (to[0] - from[0]).atan2(to[2] - from[2])
}

/// Horizontal unit vector for a heading.
fn forward(heading: f64) -> Vec3 {
    yaw([0.0, 0.0, 1.0], heading)
}

struct Knobs {
    phase: f64,
    freq: f64,
    amp: f64,
    facing: f64,
    reach: f64,
}

fn knobs(rng: &mut ChaCha8Rng, t: usize) -> Knobs {
    Knobs {
        phase: rng.random_range(0.0..TAU),
        // One to two full cycles per clip.
        freq: TAU * rng.random_range(1.0..2.0) / t as f64,
        amp: rng.random_range(0.8..1.2),
        facing: rng.random_range(-PI..PI),
        reach: rng.random_range(0.9..0.97),
    }
}

const HANG_L: Vec3 = [0.25, -1.0, 0.1];
const HANG_R: Vec3 = [-0.25, -1.0, 0.1];

/// Generate a base (template) interaction of `kind` for two characters sharing
/// `skeleton`. Deterministic in `seed`.
pub fn gen_base_clip(
    kind: &str,
    skeleton: &Skeleton,
    n_frames: usize,
    seed: u64,
) -> Result<InteractionClip> {
    let kind: InteractionKind = kind.parse()?;
    let l = lengths_of(skeleton)?;
    if n_frames < 2 {
        return Err(Error::domain("a clip needs at least two frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9));
    let k = knobs(&mut rng, n_frames);
    let standing = l.0[L_FOOT] * 0.985;
    let arm = l.0[R_HAND].min(l.0[L_HAND]);

    let mut frames_a = Vec::with_capacity(n_frames);
    let mut frames_b = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let w = k.phase + k.freq * t as f64;
        let (pa, pb) = match kind {
            InteractionKind::Hold => {
                let b = Pose {
                    root: add(
                        [0.0, standing, 0.0],
                        yaw([0.12 * k.amp * w.sin(), 0.02 * (2.0 * w).sin(), 0.05 * w.cos()], k.facing),
                    ),
                    heading: k.facing + PI + 0.15 * w.sin(),
                    lean: 0.12 * (w + 0.5).sin(),
                    l_hand: HandGoal::Hang(HANG_L),
                    r_hand: HandGoal::Hang(HANG_R),
                    stride_phase: w,
                };
                let target = b.place(&l)[CHEST];
                let heading = k.facing + 0.1 * (w * 0.5).cos();
                let mut a = Pose {
                    root: [0.0; 3],
                    heading,
                    lean: 0.05,
                    l_hand: HandGoal::Hang(HANG_L),
                    r_hand: HandGoal::Reach(target),
                    stride_phase: 0.5 * w,
                };
                let back = scale(forward(heading), -k.reach * arm);
                let lateral = scale(yaw([1.0, 0.0, 0.0], heading), 0.12);
                let mut chest_a = add(add(target, back), lateral);
                chest_a[1] = target[1] + 0.05 * w.cos();
                a.root = a.root_for_chest(chest_a, &l);
                (a, b)
            }
            InteractionKind::Circle => {
                let center = [0.0, 0.0, 0.0];
                let angle = k.facing + 0.5 * k.amp * w;
                let sep = 2.0 * k.reach * arm;
                let radial = [angle.sin(), 0.0, angle.cos()];
                let chest_h = standing + l.0[CHEST] * 0.99;
                let chest_a = add(add(center, scale(radial, 0.5 * sep)), [0.0, chest_h, 0.0]);
                let chest_b = add(add(center, scale(radial, -0.5 * sep)), [0.0, chest_h, 0.0]);
                let lateral = scale(yaw([1.0, 0.0, 0.0], angle), 0.1);
                let grip = add(
                    add(scale(add(chest_a, chest_b), 0.5), lateral),
                    [0.0, -0.15 + 0.05 * (2.0 * w).sin(), 0.0],
                );
                let mut a = Pose {
                    root: [0.0; 3],
                    heading: heading_towards(chest_a, chest_b),
                    lean: 0.08,
                    l_hand: HandGoal::Hang(HANG_L),
                    r_hand: HandGoal::Reach(grip),
                    stride_phase: 2.0 * w,
                };
                let mut b = Pose {
                    root: [0.0; 3],
                    heading: heading_towards(chest_b, chest_a),
                    lean: 0.08,
                    l_hand: HandGoal::Reach(grip),
                    r_hand: HandGoal::Hang(HANG_R),
                    stride_phase: 2.0 * w + PI,
                };
                a.root = a.root_for_chest(chest_a, &l);
                b.root = b.root_for_chest(chest_b, &l);
                (a, b)
            }
            InteractionKind::Lean => {
                // Lean angle rises and falls once or twice over the clip.
                let lean_b = 0.15 + 0.25 * k.amp * (0.5 - 0.5 * w.cos());
                let b = Pose {
                    root: add([0.0, standing, 0.0], yaw([0.04 * w.sin(), 0.0, 0.0], k.facing)),
                    heading: k.facing,
                    lean: lean_b,
                    l_hand: HandGoal::Hang(HANG_L),
                    r_hand: HandGoal::Hang(HANG_R),
                    stride_phase: 0.3 * w,
                };
                let target = b.place(&l)[CHEST];
                let heading = k.facing + PI;
                let mut a = Pose {
                    root: [0.0; 3],
                    heading,
                    lean: 0.1,
                    l_hand: HandGoal::Reach(target),
                    r_hand: HandGoal::Reach(target),
                    stride_phase: 0.3 * w + PI,
                };
                let mut chest_a = add(target, scale(forward(heading), -k.reach * arm));
                chest_a[1] = target[1] + 0.1;
                a.root = a.root_for_chest(chest_a, &l);
                (a, b)
            }
            InteractionKind::Lift => {
                let rise = 0.25 * k.amp * (0.5 - 0.5 * w.cos());
                let b = Pose {
                    root: add([0.0, standing + rise, 0.0], yaw([0.0, 0.0, 0.03 * w.sin()], k.facing)),
                    heading: k.facing + PI,
                    lean: -0.05,
                    l_hand: HandGoal::Hang([0.6, -0.2, 0.5]),
                    r_hand: HandGoal::Hang([-0.6, -0.2, 0.5]),
                    stride_phase: 0.0,
                };
                let target = b.place(&l)[PELVIS];
                let heading = k.facing;
                let mut a = Pose {
                    root: [0.0; 3],
                    heading,
                    lean: 0.25,
                    l_hand: HandGoal::Reach(target),
                    r_hand: HandGoal::Reach(target),
                    stride_phase: 0.2 * w,
                };
                let mut chest_a = add(target, scale(forward(heading), -0.75 * k.reach * arm));
                chest_a[1] = target[1] + 0.35;
                a.root = a.root_for_chest(chest_a, &l);
                (a, b)
            }
        };
        frames_a.push(pa.place(&l).to_vec());
        frames_b.push(pb.place(&l).to_vec());
    }

    InteractionClip::new(
        skeleton.clone(),
        skeleton.clone(),
        Motion::from_frames(&frames_a, FRAME_RATE)?,
        Motion::from_frames(&frames_b, FRAME_RATE)?,
        kind.name(),
        BoneScaleVector::ones(skeleton.n_bones()),
        kind.key_pairs(),
    )
}

/// Fraction of frames whose key-pair distances are all below `threshold`.
pub fn contact_fraction(clip: &InteractionClip, threshold: f64) -> f64 {
    let hits = (0..clip.n_frames())
        .filter(|&t| clip.key_pair_distances(t).iter().all(|&d| d <= threshold))
        .count();
    hits as f64 / clip.n_frames() as f64
}

/// Largest per-frame joint displacement of either character, in meters.
pub fn max_joint_speed(clip: &InteractionClip) -> f64 {
    let mut worst: f64 = 0.0;
    for m in [&clip.motion_a, &clip.motion_b] {
        for t in 1..m.n_frames() {
            for j in 0..m.n_joints() {
                worst = worst.max(dist(m.joint(t, j), m.joint(t - 1, j)));
            }
        }
    }
    worst
}
