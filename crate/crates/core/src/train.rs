//! Losses and the joint training loop of the three autoencoders.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormalizationRecord};
use crate::error::{Error, Result};
use crate::infer::decode_batch;
use crate::motion::{InteractionClip, Motion};
use crate::net::{Batch, Code, LatentMode, Model, NetConfig, PairInput, Pass};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::skeleton::Skeleton;
use crate::tape::{Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    pub bone: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            position: 0.75,
            velocity: 0.1,
            bone: 0.05,
            kl: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.position, self.velocity, self.bone, self.kl];
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("loss weights must lie in [0, 1]"));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("loss weights must sum to one"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Feed ground-truth deltas back into the decoders instead of predictions.
    pub teacher_forcing: bool,
    /// Fraction of optimizer steps over which the motion KL weight ramps from
    /// zero to one; zero disables the ramp.
    pub kl_warmup_fraction: f64,
    /// Fraction of training variations held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Also train on each template paired with itself (the all-ones scale).
    pub identity_pairs: bool,
    pub weights: LossWeights,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            teacher_forcing: false,
            kl_warmup_fraction: 0.1,
            validation_fraction: 0.1,
            identity_pairs: true,
            weights: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("warm-up and validation fractions must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Closed-form KL divergence of diagonal Gaussians from the standard normal,
/// summed over all entries and divided by `batch`.
pub fn kl_divergence(mu: &Mat, log_var: &Mat, batch: usize) -> f64 {
    mu.iter()
        .zip(log_var.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / batch as f64
}

/// Sum over frames of the squared norm of the per-frame bone-length difference.
pub fn bone_length_loss(pred: &Motion, gt: &Motion, skeleton: &Skeleton) -> Result<f64> {
    if pred.frames().shape() != gt.frames().shape() {
        return Err(Error::structural("bone-length loss between motions of different shape"));
    }
    let lp = pred.bone_lengths(skeleton)?;
    let lg = gt.bone_lengths(skeleton)?;
    Ok((&lp - &lg).mapv(|d| d * d).sum())
}

/// Loss terms of one batch, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub skeleton: Var,
    pub motion_b: Var,
    pub motion_a: Var,
    pub total: Var,
}

/// Weighted reconstruction loss of one character plus its KL term. Position
/// and velocity errors are L1 norms over a whole motion, the bone term sums
/// over frames, and all three are averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn motion_loss(
    p: &mut Pass,
    pred_delta: Var,
    template: &Mat,
    target: &Mat,
    code: Code,
    dims: crate::tape::Dims,
    bones: &Rc<Vec<(usize, usize)>>,
    weights: &LossWeights,
    kl_weight: f64,
) -> Var {
    let batch = dims.batch as f64;
    let tpl = p.constant(template.clone());
    let pred = p.tape.add(tpl, pred_delta);
    let gt = p.constant(target.clone());

    let diff = p.tape.sub(pred, gt);
    let abs = p.tape.abs(diff);
    let abs_sum = p.tape.sum(abs);
    let position = p.tape.scale(abs_sum, 1.0 / batch);

    let vp = p.tape.time_diff(pred, dims);
    let vg = p.tape.time_diff(gt, dims);
    let vd = p.tape.sub(vp, vg);
    let va = p.tape.abs(vd);
    let va_sum = p.tape.sum(va);
    let velocity = p.tape.scale(va_sum, 1.0 / batch);

    let lp = p.tape.bone_lengths(pred, bones.clone(), dims.joints);
    let lg = p.tape.bone_lengths(gt, bones.clone(), dims.joints);
    let ld = p.tape.sub(lp, lg);
    let lsq = p.tape.square(ld);
    let lsum = p.tape.sum(lsq);
    let bone = p.tape.scale(lsum, 1.0 / batch);

    let kl = p.tape.kl_normal(code.mu, code.log_var, 1.0 / batch);

    let a = p.tape.scale(position, weights.position);
    let b = p.tape.scale(velocity, weights.velocity);
    let c = p.tape.scale(bone, weights.bone);
    let d = p.tape.scale(kl, weights.kl * kl_weight);
    let ab = p.tape.add(a, b);
    let cd = p.tape.add(c, d);
    p.tape.add(ab, cd)
}

/// Skeleton autoencoder loss: squared reconstruction error and KL, per batch member.
pub fn skeleton_loss(model: &Model, p: &mut Pass, scales: &Mat) -> Var {
    let batch = scales.nrows() as f64;
    let sv = p.constant(scales.clone());
    let code = model.encode_skeleton(p, sv);
    let z = p.reparameterize(code);
    let rec = model.decode_skeleton(p, z);
    let diff = p.tape.sub(rec, sv);
    let sq = p.tape.square(diff);
    let sum = p.tape.sum(sq);
    let recon = p.tape.scale(sum, 1.0 / batch);
    let kl = p.tape.kl_normal(code.mu, code.log_var, 1.0 / batch);
    p.tape.add(recon, kl)
}

/// Build the full objective for one batch on a fresh training pass.
pub fn batch_loss(
    model: &Model,
    p: &mut Pass,
    batch: &Batch,
    weights: &LossWeights,
    kl_weight: f64,
    teacher_forcing: bool,
) -> Result<LossVars> {
    let d = batch.dims;
    let (Some(delta_b), Some(delta_a), Some(target_b), Some(target_a), Some(context)) = (
        batch.delta_b.as_ref(),
        batch.delta_a.as_ref(),
        batch.target_b.as_ref(),
        batch.target_a.as_ref(),
        batch.context.as_ref(),
    ) else {
        return Err(Error::structural("training batch needs targets"));
    };
    let skeleton = skeleton_loss(model, p, &batch.scales);

    let enc_in = p.constant(batch.enc_b_input().expect("targets present"));
    let (fb, lb) = (p.constant(batch.first_b.clone()), p.constant(batch.last_b.clone()));
    let code_b = model.encode_delta_b(p, enc_in, d, fb, lb)?;
    let zb = p.reparameterize(code_b);
    let sb = p.constant(batch.static_b());
    let teacher_b = teacher_forcing.then_some(delta_b);
    let pred_b = model.decode_delta_b(p, zb, sb, d, teacher_b)?;
    let bones_b = Rc::new(model.skeleton_b.bones().collect::<Vec<_>>());
    let motion_b = motion_loss(p, pred_b, &batch.template_b, target_b, code_b, d, &bones_b, weights, kl_weight);

    let ctx_in = p.constant(context.clone());
    let ctx = model.encode_context(p, ctx_in, d)?;
    let da = p.constant(delta_a.clone());
    let (fa, la) = (p.constant(batch.first_a.clone()), p.constant(batch.last_a.clone()));
    let code_a = model.encode_delta_a(p, da, d, ctx, fa, la)?;
    let za = p.reparameterize(code_a);
    let teacher_a = teacher_forcing.then_some(delta_a);
    let pred_a = model.decode_delta_a(p, za, ctx, fa, la, d, teacher_a)?;
    let bones_a = Rc::new(model.skeleton_a.bones().collect::<Vec<_>>());
    let motion_a = motion_loss(p, pred_a, &batch.template_a, target_a, code_a, d, &bones_a, weights, kl_weight);

    let sm = p.tape.add(skeleton, motion_b);
    let total = p.tape.add(sm, motion_a);
    Ok(LossVars {
        skeleton,
        motion_b,
        motion_a,
        total,
    })
}

/// A (template, variation) pair in the template's normalized frame.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub template: InteractionClip,
    pub target: InteractionClip,
    pub scales: Vec<f64>,
}

impl TrainPair {
    pub fn input(&self) -> PairInput<'_> {
        PairInput {
            template: &self.template,
            target: Some(&self.target),
            scales: self.scales.as_slice(),
        }
    }
}

/// Pair every variation with its kind's template. With `identity`, each
/// template is also paired with itself.
pub fn training_pairs(dataset: &Dataset, identity: bool) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::new();
    let mut push = |id: &str, template: &InteractionClip, target: &InteractionClip| -> Result<()> {
        let rec = NormalizationRecord::of(template);
        pairs.push(TrainPair {
            id: id.to_string(),
            template: rec.apply(template)?,
            target: rec.apply(target)?,
            scales: target.scale_b.as_slice().to_vec(),
        });
        Ok(())
    };
    if identity {
        for e in dataset.templates() {
            push(&e.id, &e.clip, &e.clip)?;
        }
    }
    for e in dataset.variations() {
        let template = dataset
            .template(e.kind())
            .ok_or_else(|| Error::config(format!("no template for kind {}", e.kind())))?;
        push(&e.id, template, &e.clip)?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_skeleton: f64,
    pub loss_motion_b: f64,
    pub loss_motion_a: f64,
    pub loss_total: f64,
    pub kl_weight: f64,
    /// Mean joint error of deterministic retargeting on the held-out pairs.
    pub val_retarget_error: Option<f64>,
    pub seconds: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record([
        "epoch",
        "loss_skeleton",
        "loss_motion_b",
        "loss_motion_a",
        "loss_total",
        "kl_weight",
        "val_retarget_error",
        "seconds",
    ])
    .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss_skeleton.to_string(),
            r.loss_motion_b.to_string(),
            r.loss_motion_a.to_string(),
            r.loss_total.to_string(),
            r.kl_weight.to_string(),
            r.val_retarget_error.map(|v| v.to_string()).unwrap_or_default(),
            format!("{:.3}", r.seconds),
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, `None` for an untrained model.
    pub best_epoch: Option<usize>,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Metadata stored with every checkpoint written by [`train`].
pub fn checkpoint_meta(config: &TrainConfig, epoch: Option<usize>) -> serde_json::Value {
    serde_json::json!({
        "train_config": config,
        "loss_weights": config.weights,
        "epoch": epoch,
    })
}

/// Mean joint-position error between `(b, t, j) x 3` row matrices.
fn mean_joint_error(a: &Mat, b: &Mat) -> f64 {
    let n = a.nrows() as f64;
    (a - b)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / n
}

fn validation_error(model: &Model, pairs: &[&TrainPair], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0.0;
    for chunk in pairs.chunks(batch_size) {
        let inputs: Vec<PairInput> = chunk.iter().map(|p| p.input()).collect();
        let batch = Batch::new(&inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pa, pb) = decode_batch(model, &batch, LatentMode::Zero, &mut rng)?;
        let n = 2.0 * pa.nrows() as f64;
        let e = mean_joint_error(&pa, batch.target_a.as_ref().expect("targets"))
            + mean_joint_error(&pb, batch.target_b.as_ref().expect("targets"));
        total += e * n / 2.0;
        rows += n;
    }
    Ok(total / rows)
}

fn save_checkpoint(model: &Model, dir: Option<&Path>, config: &TrainConfig, epoch: Option<usize>) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    model.save(&path, checkpoint_meta(config, epoch))?;
    Ok(Some(path))
}

/// Train all three autoencoders jointly on `dataset`. With `out_dir`, the
/// best checkpoint and `history.csv` are kept up to date there.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let first = dataset
        .templates()
        .next()
        .ok_or_else(|| Error::config("training set has no template"))?;
    for kind in dataset.kinds() {
        if dataset.template(&kind).is_none() {
            return Err(Error::config(format!("kind {kind} has no template in the training set")));
        }
    }
    let frames = first.clip.n_frames();
    if frames % config.net.frame_multiple() != 0 {
        return Err(Error::structural(format!(
            "clips have {frames} frames, not a multiple of {}",
            config.net.frame_multiple()
        )));
    }
    let mut model = Model::new(
        config.net.clone(),
        first.clip.skeleton_a.clone(),
        first.clip.skeleton_b.clone(),
        config.seed,
    )?;
    let pairs = training_pairs(dataset, config.identity_pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);

    // Hold out a fraction of the variations; identity pairs always train.
    let mut variation_idx: Vec<usize> = (0..pairs.len())
        .filter(|&i| !pairs[i].target.scale_b.is_template())
        .collect();
    variation_idx.shuffle(&mut rng);
    let n_val = (variation_idx.len() as f64 * config.validation_fraction).floor() as usize;
    let mut val_idx: Vec<usize> = variation_idx[..n_val].to_vec();
    val_idx.sort_unstable();
    let train_idx: Vec<usize> = (0..pairs.len()).filter(|i| !val_idx.contains(i)).collect();
    let val_pairs: Vec<&TrainPair> = val_idx.iter().map(|&i| &pairs[i]).collect();
    let train_ids = train_idx.iter().map(|&i| pairs[i].id.clone()).collect();
    let validation_ids = val_idx.iter().map(|&i| pairs[i].id.clone()).collect();
    info!(
        "training on {} pairs, validating on {}, {} parameters",
        train_idx.len(),
        val_pairs.len(),
        model.store.scalar_count()
    );

    let mut history = Vec::new();
    if config.epochs == 0 || train_idx.is_empty() {
        if train_idx.is_empty() {
            warn!("no training pairs; returning the initialized model");
        }
        save_checkpoint(&model, out_dir, config, None)?;
        if let Some(dir) = out_dir {
            write_history(&dir.join(HISTORY_FILE), &history)?;
        }
        return Ok(TrainOutcome {
            model,
            history,
            best_epoch: None,
            train_ids,
            validation_ids,
        });
    }

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = (config.kl_warmup_fraction * total_steps as f64).round() as usize;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;
    let mut order = train_idx.clone();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut kl_weight = 1.0;
        for chunk in order.chunks(config.batch_size) {
            kl_weight = if warmup_steps == 0 {
                1.0
            } else {
                (step as f64 / warmup_steps as f64).min(1.0)
            };
            let inputs: Vec<PairInput> = chunk.iter().map(|&i| pairs[i].input()).collect();
            let batch = Batch::new(&inputs)?;
            let (tape, loss, values, stats) = {
                let mut p = model.pass(true, &mut rng);
                let l = batch_loss(&model, &mut p, &batch, &config.weights, kl_weight, config.teacher_forcing)?;
                let values = [
                    p.tape.scalar(l.skeleton),
                    p.tape.scalar(l.motion_b),
                    p.tape.scalar(l.motion_a),
                    p.tape.scalar(l.total),
                ];
                let stats = std::mem::take(&mut p.bn_stats);
                (p.tape, l.total, values, stats)
            };
            if values.iter().any(|v| !v.is_finite()) {
                let restore = best.as_ref().map(|(_, e, s)| (*e, s.clone()));
                let kept = match restore {
                    Some((e, s)) => {
                        model.store = s;
                        Some(e)
                    }
                    None => None,
                };
                let path = save_checkpoint(&model, out_dir, config, kept)?;
                if let Some(dir) = out_dir {
                    write_history(&dir.join(HISTORY_FILE), &history)?;
                }
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step} (terms {values:?}); last good checkpoint: {}",
                    path.map(|p| p.display().to_string()).unwrap_or_else(|| "not written".into())
                )));
            }
            model.store.zero_grads();
            tape.backward_into(loss, &mut model.store);
            drop(tape);
            adam.step(&mut model.store);
            model.apply_bn_stats(stats);
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
            step += 1;
        }
        let n = order.len() as f64;
        let val = if val_pairs.is_empty() {
            None
        } else {
            Some(validation_error(&model, &val_pairs, config.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            loss_skeleton: sums[0] / n,
            loss_motion_b: sums[1] / n,
            loss_motion_a: sums[2] / n,
            loss_total: sums[3] / n,
            kl_weight,
            val_retarget_error: val,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: total {:.5} (skeleton {:.5}, B {:.5}, A {:.5}) val {:?} [{:.1}s]",
            record.loss_total, record.loss_skeleton, record.loss_motion_b, record.loss_motion_a, val, record.seconds
        );
        history.push(record);
        // Without validation data the latest epoch is kept.
        let score = val.unwrap_or(-(epoch as f64));
        if best.as_ref().is_none_or(|(b, _, _)| score <= *b) {
            best = Some((score, epoch, model.store.clone()));
            save_checkpoint(&model, out_dir, config, Some(epoch))?;
        }
        if let Some(dir) = out_dir {
            write_history(&dir.join(HISTORY_FILE), &history)?;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: Some(best_epoch),
        train_ids,
        validation_ids,
    })
}

/// Read the loss weights stored in a checkpoint written by [`train`].
pub fn checkpoint_weights(extra: &serde_json::Value) -> Result<LossWeights> {
    serde_json::from_value(extra["loss_weights"].clone())
        .map_err(|e| Error::config(format!("checkpoint has no loss weights: {e}")))
}

#[cfg(test)]
mod tests;
