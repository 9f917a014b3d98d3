//! Base interactions, scale-grid variations, split protocols and persistence.

mod generators;
mod split;
mod store;

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{retarget_optimize, EnergyWeights, LaplacianWeighting, RetargetProblem, SolverConfig};
use crate::motion::{InteractionClip, Motion};
use crate::skeleton::{BoneScaleVector, Skeleton, Vec3};

pub use generators::{
    contact_fraction, gen_base_clip, max_joint_speed, InteractionKind, CHEST, FRAME_RATE, HEAD,
    L_FOOT, L_HAND, PELVIS, R_FOOT, R_HAND,
};
pub use split::{split, Band, SplitProtocol};
pub use store::{load, manifest_hash, save, Manifest};

/// Bone-length audit tolerance for stored variations, in meters.
pub const BONE_AUDIT_TOLERANCE: f64 = 1e-3;

/// Inclusive `min..=max` grid of scales with a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for ScaleGrid {
    fn default() -> Self {
        ScaleGrid {
            min: 0.75,
            max: 1.25,
            step: 0.05,
        }
    }
}

impl ScaleGrid {
    /// Parse `min:max:step`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("scale grid '{text}' is not min:max:step")));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number '{s}' in scale grid")))
        };
        let g = ScaleGrid {
            min: num(parts[0])?,
            max: num(parts[1])?,
            step: num(parts[2])?,
        };
        g.values()?;
        Ok(g)
    }

    /// Grid values rounded to 1e-9 so that 1.0 lands exactly.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0 && self.max >= self.min && self.step > 0.0) {
            return Err(Error::config(format!("invalid scale grid {self:?}")));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        let vals: Vec<f64> = (0..n)
            .map(|i| ((self.min + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect();
        if !vals.contains(&1.0) {
            return Err(Error::config("scale grid must contain 1.0 (the template)"));
        }
        Ok(vals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Every bone of B scaled by the same factor.
    Uniform,
    /// One upper-body bone of B scaled, the rest kept.
    SingleUpperBody,
}

impl ScalingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScalingMode::Uniform),
            "single_upper_body" | "single-upper-body" => Ok(ScalingMode::SingleUpperBody),
            _ => Err(Error::config(format!("unknown scaling mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Uniform => "uniform",
            ScalingMode::SingleUpperBody => "single_upper_body",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RetargetSettings {
    pub weights: EnergyWeights,
    pub weighting: LaplacianWeighting,
    pub solver: SolverConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub base_kinds: Vec<String>,
    pub scale_grid: ScaleGrid,
    pub scaling_modes: Vec<ScalingMode>,
    pub n_frames: usize,
    pub seed: u64,
    pub retarget: RetargetSettings,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            base_kinds: InteractionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            scale_grid: ScaleGrid::default(),
            scaling_modes: vec![ScalingMode::Uniform],
            n_frames: 64,
            seed: 0,
            retarget: RetargetSettings::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scale_grid.values()?;
        if self.base_kinds.is_empty() {
            return Err(Error::config("no base kinds requested"));
        }
        for k in &self.base_kinds {
            k.parse::<InteractionKind>()?;
        }
        if self.n_frames < 8 || !self.n_frames.is_multiple_of(8) {
            return Err(Error::config(format!(
                "frames per clip must be a positive multiple of 8, got {}",
                self.n_frames
            )));
        }
        Ok(())
    }

    /// Bone scale vectors for one base, in a fixed order: modes as listed,
    /// then grid values ascending, then bones ascending. The template is excluded.
    pub fn variation_scales(&self, skeleton: &Skeleton) -> Result<Vec<(ScalingMode, f64, BoneScaleVector)>> {
        let n = skeleton.n_bones();
        let mut out = Vec::new();
        for &mode in &self.scaling_modes {
            for s in self.scale_grid.values()? {
                if s == 1.0 {
                    continue;
                }
                match mode {
                    ScalingMode::Uniform => out.push((mode, s, BoneScaleVector::uniform(n, s)?)),
                    ScalingMode::SingleUpperBody => {
                        for k in upper_body_bones(skeleton) {
                            out.push((mode, s, BoneScaleVector::single(n, k, s)?));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bones whose child joint sits above the pelvis: chest, head and both arms on desk7.
pub fn upper_body_bones(skeleton: &Skeleton) -> Vec<usize> {
    let rest = skeleton.rest_pose();
    let root_y = rest[skeleton.root()][1];
    skeleton
        .bone_children()
        .iter()
        .enumerate()
        .filter(|(_, &c)| rest[c][1] >= root_y)
        .map(|(k, _)| k)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub clip: InteractionClip,
    /// `None` for the template.
    pub mode: Option<ScalingMode>,
    /// The non-unit scale that defines this variation (1.0 for the template).
    pub scale_label: f64,
}

impl DatasetEntry {
    pub fn is_template(&self) -> bool {
        self.mode.is_none()
    }

    pub fn kind(&self) -> &str {
        &self.clip.interaction_kind
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationFailure {
    pub kind: String,
    pub mode: ScalingMode,
    pub scale_b: Vec<f64>,
    pub reason: String,
}

/// Interaction clips with exactly one template per kind.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    pub failures: Vec<VariationFailure>,
    pub spec: Option<DatasetSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kinds(&self) -> Vec<String> {
        let mut k: Vec<String> = self.entries.iter().map(|e| e.kind().to_string()).collect();
        k.sort();
        k.dedup();
        k
    }

    pub fn template(&self, kind: &str) -> Option<&InteractionClip> {
        self.entries
            .iter()
            .find(|e| e.is_template() && e.kind() == kind)
            .map(|e| &e.clip)
    }

    pub fn templates(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| e.is_template())
    }

    pub fn variations(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| !e.is_template())
    }

    pub fn validate(&self) -> Result<()> {
        let mut templates: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            e.clip.validate()?;
            if e.is_template() {
                *templates.entry(e.kind()).or_default() += 1;
            }
        }
        for kind in self.kinds() {
            match templates.get(kind.as_str()) {
                Some(1) => {}
                Some(n) => return Err(Error::structural(format!("{n} templates for '{kind}'"))),
                None => return Err(Error::structural(format!("no template for '{kind}'"))),
            }
        }
        Ok(())
    }

    /// Merge datasets built independently (one per base kind, say).
    pub fn merge(parts: Vec<Dataset>) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.entries.extend(p.entries);
            out.failures.extend(p.failures);
            if out.spec.is_none() {
                out.spec = p.spec;
            }
        }
        out
    }

    /// Largest bone-length deviation of any stored clip from its labelled
    /// scale (B) or the template (A).
    pub fn bone_audit(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for e in &self.entries {
            let c = &e.clip;
            let ta = c.skeleton_a.template_lengths();
            let tb = c.scale_b.target_lengths(&c.skeleton_b)?;
            for (m, s, target) in [(&c.motion_a, &c.skeleton_a, &ta), (&c.motion_b, &c.skeleton_b, &tb)] {
                for row in m.bone_lengths(s)?.rows() {
                    for (l, t) in row.iter().zip(target.iter()) {
                        worst = worst.max((l - t).abs());
                    }
                }
            }
        }
        Ok(worst)
    }
}

pub fn entry_id(kind: &str, mode: Option<ScalingMode>, scales: &BoneScaleVector) -> String {
    match mode {
        None => format!("{kind}_template"),
        Some(ScalingMode::Uniform) => format!("{kind}_uniform_{:.2}", scales.as_slice()[0]),
        Some(ScalingMode::SingleUpperBody) => {
            let (k, s) = scales
                .as_slice()
                .iter()
                .enumerate()
                .find(|(_, &s)| s != 1.0)
                .map(|(k, &s)| (k, s))
                .unwrap_or((0, 1.0));
            format!("{kind}_bone{k}_{s:.2}")
        }
    }
}

/// Retarget a template to every scale on the grid. Variations whose optimizer
/// fails, does not converge, or misses the bone audit are logged as failures
/// and skipped; the batch always completes.
pub fn gen_variations(base: &InteractionClip, spec: &DatasetSpec) -> Result<Dataset> {
    if !base.is_template() {
        return Err(Error::config("variations must start from a template clip"));
    }
    spec.validate()?;
    let kind = base.interaction_kind.clone();
    let tasks = spec.variation_scales(&base.skeleton_b)?;

    let results: Vec<_> = {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .map(|(mode, label, scales)| {
                let problem = RetargetProblem {
                    source: base.clone(),
                    target_scales_b: scales.clone(),
                    target_scales_a: None,
                    weights: spec.retarget.weights,
                    weighting: spec.retarget.weighting,
                    solver: spec.retarget.solver,
                };
                let outcome = retarget_optimize(&problem).and_then(|(clip, diag)| {
                    if !diag.converged {
                        return Err(Error::Numerical(format!(
                            "not converged after {} iterations (|grad| {:.2e})",
                            diag.iterations, diag.final_grad_inf
                        )));
                    }
                    Ok(clip)
                });
                (*mode, *label, scales.clone(), outcome)
            })
            .collect()
    };

    let mut out = Dataset {
        entries: vec![DatasetEntry {
            id: entry_id(&kind, None, &base.scale_b),
            clip: base.clone(),
            mode: None,
            scale_label: 1.0,
        }],
        failures: Vec::new(),
        spec: Some(spec.clone()),
    };
    for (mode, label, scales, outcome) in results {
        let audited = outcome.and_then(|clip| {
            let single = Dataset {
                entries: vec![DatasetEntry {
                    id: String::new(),
                    clip,
                    mode: Some(mode),
                    scale_label: label,
                }],
                ..Default::default()
            };
            let err = single.bone_audit()?;
            if err > BONE_AUDIT_TOLERANCE {
                return Err(Error::Numerical(format!("bone audit failed by {err:.2e} m")));
            }
            Ok(single.entries.into_iter().next().expect("one entry").clip)
        });
        match audited {
            Ok(clip) => out.entries.push(DatasetEntry {
                id: entry_id(&kind, Some(mode), &scales),
                clip,
                mode: Some(mode),
                scale_label: label,
            }),
            Err(e) => {
                warn!("{kind} {} {:?}: {e}", mode.name(), scales.as_slice());
                out.failures.push(VariationFailure {
                    kind: kind.clone(),
                    mode,
                    scale_b: scales.as_slice().to_vec(),
                    reason: e.to_string(),
                });
            }
        }
    }
    info!(
        "{kind}: {} variations, {} failures",
        out.entries.len() - 1,
        out.failures.len()
    );
    Ok(out)
}

/// Generate every base kind and its variations.
pub fn generate(spec: &DatasetSpec, skeleton: &Skeleton) -> Result<Dataset> {
    spec.validate()?;
    let mut parts = Vec::new();
    for (i, kind) in spec.base_kinds.iter().enumerate() {
        let base = gen_base_clip(kind, skeleton, spec.n_frames, spec.seed.wrapping_add(i as u64))?;
        parts.push(gen_variations(&base, spec)?);
    }
    let mut d = Dataset::merge(parts);
    d.spec = Some(spec.clone());
    Ok(d)
}

/// Offset removed by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub offset: Vec3,
}

impl NormalizationRecord {
    /// Midpoint of the two root positions at frame 0.
    pub fn of(clip: &InteractionClip) -> Self {
        let ra = clip.motion_a.joint(0, clip.skeleton_a.root());
        let rb = clip.motion_b.joint(0, clip.skeleton_b.root());
        NormalizationRecord {
            offset: std::array::from_fn(|c| 0.5 * (ra[c] + rb[c])),
        }
    }

    pub fn apply(&self, clip: &InteractionClip) -> Result<InteractionClip> {
        let neg = self.offset.map(|v| -v);
        clip.with_motions(clip.motion_a.translated(neg), clip.motion_b.translated(neg))
    }

    pub fn apply_motion(&self, m: &Motion) -> Motion {
        m.translated(self.offset.map(|v| -v))
    }

    pub fn invert_motion(&self, m: &Motion) -> Motion {
        m.translated(self.offset)
    }

    pub fn invert(&self, clip: &InteractionClip) -> Result<InteractionClip> {
        clip.with_motions(
            clip.motion_a.translated(self.offset),
            clip.motion_b.translated(self.offset),
        )
    }
}

/// Center a clip on the midpoint of the two roots at frame 0.
pub fn normalize(clip: &InteractionClip) -> Result<(InteractionClip, NormalizationRecord)> {
    let rec = NormalizationRecord::of(clip);
    Ok((rec.apply(clip)?, rec))
}

pub fn denormalize(clip: &InteractionClip, record: &NormalizationRecord) -> Result<InteractionClip> {
    record.invert(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let v = ScaleGrid::default().values().unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v[5], 1.0);
        assert_eq!(v[0], 0.75);
        assert_eq!(v[10], 1.25);
        assert_eq!(ScaleGrid::parse("1.0:1.0:0.05").unwrap().values().unwrap(), vec![1.0]);
        assert!(ScaleGrid::parse("0.8:0.9:0.05").is_err());
        assert!(ScaleGrid::parse("0.8:0.9").is_err());
        assert!(ScaleGrid::parse("a:b:c").is_err());
    }

    #[test]
    fn upper_body_bones_of_desk7() {
        assert_eq!(upper_body_bones(&Skeleton::desk7()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn variation_counts() {
        let s = Skeleton::desk7();
        let mut spec = DatasetSpec::default();
        assert_eq!(spec.variation_scales(&s).unwrap().len(), 10);
        spec.scaling_modes = vec![ScalingMode::Uniform, ScalingMode::SingleUpperBody];
        assert_eq!(spec.variation_scales(&s).unwrap().len(), 10 + 40);
    }

    #[test]
    fn template_only_grid_yields_base() {
        let s = Skeleton::desk7();
        let base = gen_base_clip("hold", &s, 16, 0).unwrap();
        let spec = DatasetSpec {
            scale_grid: ScaleGrid::parse("1.0:1.0:0.05").unwrap(),
            n_frames: 16,
            ..Default::default()
        };
        let d = gen_variations(&base, &spec).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.entries[0].clip, base);
        assert!(d.entries[0].is_template());
    }

    #[test]
    fn variations_need_a_template() {
        let s = Skeleton::desk7();
        let mut base = gen_base_clip("hold", &s, 16, 0).unwrap();
        base.scale_b = BoneScaleVector::uniform(6, 1.1).unwrap();
        assert!(matches!(
            gen_variations(&base, &DatasetSpec { n_frames: 16, ..Default::default() }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn normalization_round_trip() {
        let s = Skeleton::desk7();
        let clip = gen_base_clip("circle", &s, 16, 4).unwrap();
        let (n, rec) = normalize(&clip).unwrap();
        let ra = n.motion_a.joint(0, 0);
        let rb = n.motion_b.joint(0, 0);
        for c in 0..3 {
            assert!((ra[c] + rb[c]).abs() < 1e-12);
        }
        let back = denormalize(&n, &rec).unwrap();
        for (x, y) in back.motion_a.frames().iter().zip(clip.motion_a.frames()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ids_are_descriptive() {
        assert_eq!(entry_id("hold", None, &BoneScaleVector::ones(6)), "hold_template");
        assert_eq!(
            entry_id("hold", Some(ScalingMode::Uniform), &BoneScaleVector::uniform(6, 0.8).unwrap()),
            "hold_uniform_0.80"
        );
        assert_eq!(
            entry_id(
                "lift",
                Some(ScalingMode::SingleUpperBody),
                &BoneScaleVector::single(6, 2, 1.15).unwrap()
            ),
            "lift_bone2_1.15"
        );
    }
}
