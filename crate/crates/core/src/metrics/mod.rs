//! Reconstruction, bone-length, joint-pair and Fréchet metrics, and the
//! evaluation harness over a test split.

mod features;

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetEntry, ScalingMode};
use crate::error::{Error, Result};
use crate::infer::{generate, retarget_many, Request};
use crate::motion::{InteractionClip, Motion};
use crate::net::{LatentMode, Model};
use crate::skeleton::{dist, BoneScaleVector, Skeleton};
use crate::tape::Mat;

pub use features::{window_starts, FeatureConfig, FeatureExtractor};

/// Ridge added to both covariances when either is rank-deficient.
pub const FID_RIDGE: f64 = 1e-6;

fn same_shape(a: &Motion, b: &Motion) -> Result<()> {
    if a.frames().shape() != b.frames().shape() {
        return Err(Error::structural(format!(
            "motions of shape {:?} and {:?}",
            a.frames().shape(),
            b.frames().shape()
        )));
    }
    Ok(())
}

/// Mean per-joint Euclidean error over frames and joints.
pub fn e_r(pred: &Motion, gt: &Motion) -> Result<f64> {
    same_shape(pred, gt)?;
    let (t, n) = (pred.n_frames(), pred.n_joints());
    let total: f64 = (0..t)
        .flat_map(|ti| (0..n).map(move |j| (ti, j)))
        .map(|(ti, j)| dist(pred.joint(ti, j), gt.joint(ti, j)))
        .sum();
    Ok(total / (t * n) as f64)
}

/// Mean absolute gap between per-frame bone lengths and `scales ⊙ template`.
pub fn e_b(pred: &Motion, skeleton: &Skeleton, scales: &BoneScaleVector) -> Result<f64> {
    let target = scales.target_lengths(skeleton)?;
    let lengths = pred.bone_lengths(skeleton)?;
    if target.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = lengths
        .rows()
        .into_iter()
        .flat_map(|row| row.into_iter().zip(&target).map(|(l, t)| (l - t).abs()).collect::<Vec<_>>())
        .sum();
    Ok(total / lengths.len() as f64)
}

/// Mean absolute difference of key-pair distances, over pairs and frames.
pub fn jpd(pred: &InteractionClip, gt: &InteractionClip) -> Result<f64> {
    if pred.key_pairs != gt.key_pairs {
        return Err(Error::structural("clips declare different key pairs"));
    }
    if gt.key_pairs.is_empty() {
        return Err(Error::domain("no key pairs to measure"));
    }
    same_shape(&pred.motion_a, &gt.motion_a)?;
    same_shape(&pred.motion_b, &gt.motion_b)?;
    let t = gt.n_frames();
    let total: f64 = (0..t)
        .map(|ti| {
            pred.key_pair_distances(ti)
                .iter()
                .zip(gt.key_pair_distances(ti))
                .map(|(p, g)| (p - g).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / (t * gt.key_pairs.len()) as f64)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain("correlation needs two equal-length series of at least 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("correlation of a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    /// Whether a ridge had to be added to a singular covariance.
    pub ridge: bool,
}

fn to_dmatrix(x: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

/// Sample mean and unbiased covariance of the rows.
fn gaussian(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let ev = symmetric_eigen(cov).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    max == 0.0 || min <= 1e-10 * max
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = symmetric_eigen(m);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two sets of feature rows.
pub fn fid(p: &Mat, q: &Mat) -> Result<Fid> {
    if p.nrows() < 2 || q.nrows() < 2 {
        return Err(Error::domain(format!(
            "Fréchet distance needs at least 2 samples per set, got {} and {}",
            p.nrows(),
            q.nrows()
        )));
    }
    if p.ncols() != q.ncols() {
        return Err(Error::structural(format!("feature widths {} and {}", p.ncols(), q.ncols())));
    }
    if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite features".into()));
    }
    let (mp, mut cp) = gaussian(&to_dmatrix(p));
    let (mq, mut cq) = gaussian(&to_dmatrix(q));
    let ridge = is_singular(&cp) || is_singular(&cq);
    if ridge {
        let eye = DMatrix::<f64>::identity(p.ncols(), p.ncols()) * FID_RIDGE;
        cp += &eye;
        cq += &eye;
    }
    // Tr((Cp Cq)^1/2) = Tr((Cp^1/2 Cq Cp^1/2)^1/2), the latter symmetric.
    let sp = sqrt_psd(&cp);
    let inner = &sp * &cq * &sp;
    let tr_sqrt: f64 = symmetric_eigen(&inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = (&mp - &mq).norm_squared() + cp.trace() + cq.trace() - 2.0 * tr_sqrt;
    Ok(Fid {
        value: value.max(0.0),
        ridge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Retarget,
    Generate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Retarget => "retarget",
            Mode::Generate => "generate",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retarget" => Ok(Mode::Retarget),
            "generate" => Ok(Mode::Generate),
            _ => Err(Error::config(format!("unknown evaluation mode '{s}' (retarget or generate)"))),
        }
    }
}

/// Label grouping variations by scaling mode and grid value.
pub fn scale_label(entry: &DatasetEntry) -> String {
    match entry.mode {
        None => "template".into(),
        Some(ScalingMode::Uniform) => format!("uniform_{:.2}", entry.scale_label),
        Some(ScalingMode::SingleUpperBody) => format!("single_{:.2}", entry.scale_label),
    }
}

/// A model output with the ground truth it is scored against.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub kind: String,
    pub scale_label: String,
    pub clip: InteractionClip,
    pub reference: InteractionClip,
}

fn test_variations(test: &Dataset) -> Result<BTreeMap<String, Vec<&DatasetEntry>>> {
    let mut by_kind: BTreeMap<String, Vec<&DatasetEntry>> = BTreeMap::new();
    for e in test.variations() {
        by_kind.entry(e.kind().to_string()).or_default().push(e);
    }
    if by_kind.is_empty() {
        return Err(Error::config("test set has no variations to evaluate"));
    }
    for kind in by_kind.keys() {
        if test.template(kind).is_none() {
            return Err(Error::config(format!("test set has no template for '{kind}'")));
        }
    }
    Ok(by_kind)
}

/// Retarget every test variation from its template (latents zero), or
/// generate as many clips per kind from the skeleton prior. Generated clips
/// are scored against the test clip whose scales are nearest.
pub fn predict(model: &Model, test: &Dataset, mode: Mode, seed: u64) -> Result<Vec<Prediction>> {
    let by_kind = test_variations(test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (kind, entries) in &by_kind {
        let template = test.template(kind).expect("checked");
        match mode {
            Mode::Retarget => {
                for chunk in entries.chunks(16) {
                    let requests: Vec<Request> = chunk
                        .iter()
                        .map(|e| Request {
                            template,
                            scales: &e.clip.scale_b,
                        })
                        .collect();
                    let clips = retarget_many(model, &requests, LatentMode::Zero, &mut rng)?;
                    out.extend(chunk.iter().zip(clips).map(|(e, clip)| Prediction {
                        id: e.id.clone(),
                        kind: kind.clone(),
                        scale_label: scale_label(e),
                        clip,
                        reference: e.clip.clone(),
                    }));
                }
            }
            Mode::Generate => {
                let clips = generate(model, template, entries.len(), &mut rng)?;
                for (i, clip) in clips.into_iter().enumerate() {
                    let nearest = entries
                        .iter()
                        .min_by(|a, b| {
                            let d = |e: &DatasetEntry| scale_distance(&e.clip.scale_b, &clip.scale_b);
                            d(a).total_cmp(&d(b))
                        })
                        .expect("non-empty");
                    out.push(Prediction {
                        id: format!("{kind}_gen{i:03}"),
                        kind: kind.clone(),
                        scale_label: "prior".into(),
                        clip,
                        reference: nearest.clip.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn scale_distance(a: &BoneScaleVector, b: &BoneScaleVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub kind: String,
    pub scale_label: String,
    pub mode: Mode,
    /// Mean of the two characters; absent in generation.
    pub e_r: Option<f64>,
    pub e_b: f64,
    pub jpd: f64,
    pub e_r_a: Option<f64>,
    pub e_r_b: Option<f64>,
    pub e_b_a: f64,
    pub e_b_b: f64,
}

pub fn clip_metrics(p: &Prediction, mode: Mode) -> Result<ClipMetrics> {
    let c = &p.clip;
    let (e_r_a, e_r_b) = match mode {
        Mode::Retarget => (
            Some(e_r(&c.motion_a, &p.reference.motion_a)?),
            Some(e_r(&c.motion_b, &p.reference.motion_b)?),
        ),
        Mode::Generate => (None, None),
    };
    let ones = BoneScaleVector::ones(c.skeleton_a.n_bones());
    let e_b_a = e_b(&c.motion_a, &c.skeleton_a, &ones)?;
    let e_b_b = e_b(&c.motion_b, &c.skeleton_b, &c.scale_b)?;
    Ok(ClipMetrics {
        clip_id: p.id.clone(),
        kind: p.kind.clone(),
        scale_label: p.scale_label.clone(),
        mode,
        e_r: e_r_a.zip(e_r_b).map(|(a, b)| 0.5 * (a + b)),
        e_b: 0.5 * (e_b_a + e_b_b),
        jpd: jpd(c, &p.reference)?,
        e_r_a,
        e_r_b,
        e_b_a,
        e_b_b,
    })
}

/// Means of the per-clip values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    pub e_r: Option<f64>,
    pub e_b: f64,
    pub jpd: f64,
    pub e_r_a: Option<f64>,
    pub e_r_b: Option<f64>,
    pub e_b_a: f64,
    pub e_b_b: f64,
}

impl Aggregate {
    pub fn of<'a>(clips: impl IntoIterator<Item = &'a ClipMetrics>) -> Self {
        let clips: Vec<&ClipMetrics> = clips.into_iter().collect();
        let n = clips.len() as f64;
        let mean = |f: &dyn Fn(&ClipMetrics) -> f64| clips.iter().map(|c| f(c)).sum::<f64>() / n;
        let mean_opt = |f: &dyn Fn(&ClipMetrics) -> Option<f64>| {
            clips.iter().map(|c| f(c)).sum::<Option<f64>>().map(|s| s / n)
        };
        Aggregate {
            clips: clips.len(),
            e_r: mean_opt(&|c| c.e_r),
            e_b: mean(&|c| c.e_b),
            jpd: mean(&|c| c.jpd),
            e_r_a: mean_opt(&|c| c.e_r_a),
            e_r_b: mean_opt(&|c| c.e_r_b),
            e_b_a: mean(&|c| c.e_b_a),
            e_b_b: mean(&|c| c.e_b_b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    /// Interaction kind, or `all` for the pooled value.
    pub kind: String,
    pub mode: Mode,
    pub protocol: String,
    pub value: f64,
    pub ridge: bool,
    pub real_windows: usize,
    pub model_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub mode: Mode,
    pub pooled: Aggregate,
    pub per_scale: BTreeMap<String, Aggregate>,
    pub per_kind: BTreeMap<String, Aggregate>,
    pub fid: Vec<FidEntry>,
    #[serde(skip)]
    pub clips: Vec<ClipMetrics>,
}

impl MetricReport {
    /// Fails with a numerical error if any reported value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let mut values: Vec<f64> = self.fid.iter().map(|f| f.value).collect();
        for c in &self.clips {
            values.extend([c.e_b, c.jpd, c.e_b_a, c.e_b_b]);
            values.extend([c.e_r, c.e_r_a, c.e_r_b].into_iter().flatten());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("evaluation produced non-finite metrics".into()));
        }
        Ok(())
    }
}

/// Score predictions; Fréchet distances need a feature extractor.
pub fn report(
    predictions: &[Prediction],
    mode: Mode,
    protocol: &str,
    extractor: Option<&FeatureExtractor>,
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let clips = predictions
        .iter()
        .map(|p| clip_metrics(p, mode))
        .collect::<Result<Vec<_>>>()?;
    let group = |key: &dyn Fn(&ClipMetrics) -> String| {
        let mut g: BTreeMap<String, Vec<&ClipMetrics>> = BTreeMap::new();
        for c in &clips {
            g.entry(key(c)).or_default().push(c);
        }
        g.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect::<BTreeMap<_, _>>()
    };
    let per_scale = group(&|c| c.scale_label.clone());
    let per_kind = group(&|c| c.kind.clone());

    let mut fid_entries = Vec::new();
    if let Some(fx) = extractor {
        let mut kinds: Vec<Option<&str>> = per_kind.keys().map(|k| Some(k.as_str())).collect();
        kinds.push(None);
        for kind in kinds {
            let chosen: Vec<&Prediction> = predictions
                .iter()
                .filter(|p| kind.is_none_or(|k| p.kind == k))
                .collect();
            // Real clips: each distinct reference once.
            let mut seen = std::collections::BTreeSet::new();
            let real: Vec<&InteractionClip> = chosen
                .iter()
                .filter(|p| seen.insert(reference_key(p)))
                .map(|p| &p.reference)
                .collect();
            let real_f = fx.features(real)?;
            let model_f = fx.features(chosen.iter().map(|p| &p.clip))?;
            match fid(&real_f, &model_f) {
                Ok(f) => {
                    if f.ridge {
                        warn!("rank-deficient features for {}: ridge {FID_RIDGE} added", kind.unwrap_or("all"));
                    }
                    fid_entries.push(FidEntry {
                        kind: kind.unwrap_or("all").to_string(),
                        mode,
                        protocol: protocol.to_string(),
                        value: f.value,
                        ridge: f.ridge,
                        real_windows: real_f.nrows(),
                        model_windows: model_f.nrows(),
                    });
                }
                Err(Error::Domain(msg)) => warn!("no Fréchet distance for {}: {msg}", kind.unwrap_or("all")),
                Err(e) => return Err(e),
            }
        }
    }
    let report = MetricReport {
        protocol: protocol.to_string(),
        mode,
        pooled: Aggregate::of(&clips),
        per_scale,
        per_kind,
        fid: fid_entries,
        clips,
    };
    report.check_finite()?;
    Ok(report)
}

fn reference_key(p: &Prediction) -> (String, Vec<u64>) {
    (
        p.reference.interaction_kind.clone(),
        p.reference.scale_b.as_slice().iter().map(|s| s.to_bits()).collect(),
    )
}

/// Predict and score a test set in one call.
pub fn evaluate(
    model: &Model,
    test: &Dataset,
    mode: Mode,
    protocol: &str,
    extractor: Option<&FeatureExtractor>,
    seed: u64,
) -> Result<MetricReport> {
    let predictions = predict(model, test, mode, seed)?;
    report(&predictions, mode, protocol, extractor)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One row per clip: `clip_id,kind,scale_label,mode,E_r,E_b,JPD`; E_r is empty in generation.
pub fn write_metrics_csv(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let io = |e: csv::Error| Error::parse(path, e);
    w.write_record(["clip_id", "kind", "scale_label", "mode", "E_r", "E_b", "JPD"]).map_err(io)?;
    for r in reports {
        for c in &r.clips {
            w.write_record([
                c.clip_id.clone(),
                c.kind.clone(),
                c.scale_label.clone(),
                c.mode.name().to_string(),
                c.e_r.map(|v| v.to_string()).unwrap_or_default(),
                c.e_b.to_string(),
                c.jpd.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(&serde_json::json!({ "reports": reports }))
        .map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
