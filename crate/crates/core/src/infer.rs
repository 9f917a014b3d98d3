//! Retargeting and generation with a trained model. Only the decoders (and
//! the B-context encoder) run at inference time.

use ndarray::{s, Array3};
use rand_chacha::ChaCha8Rng;

use crate::dataset::NormalizationRecord;
use crate::error::{Error, Result};
use crate::motion::{InteractionClip, Motion};
use crate::net::{context_features, Batch, LatentMode, Model, PairInput, Pass};
use crate::skeleton::BoneScaleVector;
use crate::tape::{Dims, Mat, Var};

/// One retargeting request: a template clip and the bone scales for B.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub template: &'a InteractionClip,
    pub scales: &'a BoneScaleVector,
}

fn latent(p: &mut Pass, rows: usize, cols: usize, mode: LatentMode) -> Var {
    match mode {
        LatentMode::Zero => p.constant(Mat::zeros((rows, cols))),
        LatentMode::Sample => {
            let z = p.standard_normal(rows, cols);
            p.constant(z)
        }
    }
}

fn frames_of(rows: &Mat, dims: Dims, b: usize) -> Array3<f64> {
    let block = dims.frames * dims.joints;
    rows.slice(s![b * block..(b + 1) * block, ..])
        .to_owned()
        .into_shape_with_order((dims.frames, dims.joints, 3))
        .expect("block shape")
}

/// Context features for every member of a batch of B motions given as rows.
fn batch_context(rows: &Mat, dims: Dims, root: usize, frame_rate: f64) -> Mat {
    let mut out = Mat::zeros((dims.rows(), 8));
    let block = dims.frames * dims.joints;
    for b in 0..dims.batch {
        let f = frames_of(rows, dims, b);
        out.slice_mut(s![b * block..(b + 1) * block, ..])
            .assign(&context_features(&f, root, frame_rate));
    }
    out
}

/// Decode B and then A for a batch of templates already in their normalized
/// frame. Returns the predicted `(b, t, j) x 3` positions of A and B.
pub fn decode_batch(model: &Model, batch: &Batch, mode: LatentMode, rng: &mut ChaCha8Rng) -> Result<(Mat, Mat)> {
    let d = batch.dims;
    let hidden = model.config.hidden();
    let rows = d.batch * d.joints;
    let mut p = model.pass(false, rng);
    let zb = latent(&mut p, rows, hidden, mode);
    let sb = p.constant(batch.static_b());
    let db = model.decode_delta_b(&mut p, zb, sb, d, None)?;
    let pos_b = p.value(db) + &batch.template_b;
    let ctx_rows = batch_context(&pos_b, d, model.skeleton_b.root(), batch.frame_rate);
    let ctx_in = p.constant(ctx_rows);
    let ctx = model.encode_context(&mut p, ctx_in, d)?;
    let za = latent(&mut p, rows, hidden, mode);
    let (fa, la) = (p.constant(batch.first_a.clone()), p.constant(batch.last_a.clone()));
    let da = model.decode_delta_a(&mut p, za, ctx, fa, la, d, None)?;
    let pos_a = p.value(da) + &batch.template_a;
    if pos_a.iter().chain(pos_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("decoder produced non-finite positions".into()));
    }
    Ok((pos_a, pos_b))
}

/// Retarget every request; templates may come from different kinds but must
/// share a frame count.
pub fn retarget_many(
    model: &Model,
    requests: &[Request],
    mode: LatentMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InteractionClip>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let mut normalized = Vec::with_capacity(requests.len());
    for r in requests {
        check_template(model, r.template)?;
        r.scales.check_for(&r.template.skeleton_b)?;
        let rec = NormalizationRecord::of(r.template);
        normalized.push((rec.apply(r.template)?, rec));
    }
    let pairs: Vec<PairInput> = normalized
        .iter()
        .zip(requests)
        .map(|((clip, _), r)| PairInput {
            template: clip,
            target: None,
            scales: r.scales.as_slice(),
        })
        .collect();
    let batch = Batch::new(&pairs)?;
    let (pos_a, pos_b) = decode_batch(model, &batch, mode, rng)?;
    let d = batch.dims;
    normalized
        .iter()
        .zip(requests)
        .enumerate()
        .map(|(b, ((_, rec), r))| {
            let fr = r.template.motion_a.frame_rate();
            let ma = rec.invert_motion(&Motion::new(frames_of(&pos_a, d, b), fr)?);
            let mb = rec.invert_motion(&Motion::new(frames_of(&pos_b, d, b), fr)?);
            let mut clip = r.template.with_motions(ma, mb)?;
            clip.scale_b = r.scales.clone();
            clip.validate()?;
            Ok(clip)
        })
        .collect()
}

pub fn retarget(
    model: &Model,
    template: &InteractionClip,
    scales: &BoneScaleVector,
    mode: LatentMode,
    rng: &mut ChaCha8Rng,
) -> Result<InteractionClip> {
    let mut out = retarget_many(model, &[Request { template, scales }], mode, rng)?;
    Ok(out.remove(0))
}

fn check_template(model: &Model, template: &InteractionClip) -> Result<()> {
    if template.skeleton_b.fingerprint() != model.skeleton_b.fingerprint()
        || template.skeleton_a.fingerprint() != model.skeleton_a.fingerprint()
    {
        return Err(Error::structural("template skeletons differ from the model's"));
    }
    if !template.is_template() {
        return Err(Error::config("retargeting starts from a template clip (all scales one)"));
    }
    Ok(())
}

/// Sample `count` bone-scale vectors from the skeleton prior.
pub fn sample_scales(model: &Model, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BoneScaleVector>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut p = model.pass(false, rng);
    let z = p.standard_normal(count, model.config.skeleton_latent());
    let zv = p.constant(z);
    let out = model.decode_skeleton(&mut p, zv);
    p.value(out)
        .rows()
        .into_iter()
        .map(|r| BoneScaleVector::new(r.to_vec()))
        .collect()
}

/// Generation: skeletons from the prior, motions decoded from latent draws.
pub fn generate(
    model: &Model,
    template: &InteractionClip,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InteractionClip>> {
    check_template(model, template)?;
    let scales = sample_scales(model, count, rng)?;
    let requests: Vec<Request> = scales.iter().map(|s| Request { template, scales: s }).collect();
    retarget_many(model, &requests, LatentMode::Sample, rng)
}
