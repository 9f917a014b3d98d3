use super::*;
use crate::motion::{velocity, InteractionClip};
use crate::skeleton::BoneScaleVector;
use crate::tape::Dims;
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_motion(r: &mut ChaCha8Rng, t: usize, n: usize, scale: f64) -> Motion {
    Motion::new(
        Array3::from_shape_fn((t, n, 3), |_| r.random_range(-scale..scale)),
        30.0,
    )
    .unwrap()
}

#[test]
fn kl_closed_forms() {
    assert_eq!(kl_divergence(&Mat::zeros((3, 4)), &Mat::zeros((3, 4)), 1), 0.0);
    let v = kl_divergence(&Mat::ones((1, 1)), &Mat::zeros((1, 1)), 1);
    assert!((v - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(1);
    let mu = Mat::from_shape_fn((1, 3), |_| r.random_range(-1.0..1.0));
    let lv = Mat::from_shape_fn((1, 3), |_| r.random_range(-1.0..0.5));
    let exact = kl_divergence(&mu, &lv, 1);
    // E_q[log q(z) - log p(z)], both densities evaluated per dimension.
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for d in 0..3 {
            let (m, l) = (mu[[0, d]], lv[[0, d]]);
            let eps: f64 = r.sample(StandardNormal);
            let z = m + (0.5 * l).exp() * eps;
            let log_q = -0.5 * (l + eps * eps);
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    let mc = acc / n as f64;
    assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
}

#[test]
fn bone_loss_examples() {
    let s = Skeleton::chain(4);
    let mut r = rng(2);
    let gt = random_motion(&mut r, 6, 4, 1.0);
    assert_eq!(bone_length_loss(&gt, &gt, &s).unwrap(), 0.0);

    // Lengthen the last bone by d in every frame.
    let d = 0.03;
    let mut f = gt.frames().clone();
    for t in 0..6 {
        let dir: Vec<f64> = (0..3).map(|c| f[[t, 3, c]] - f[[t, 2, c]]).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            f[[t, 3, c]] += d * dir[c] / len;
        }
    }
    let pred = Motion::new(f, 30.0).unwrap();
    let v = bone_length_loss(&pred, &gt, &s).unwrap();
    assert!((v - 6.0 * d * d).abs() < 1e-12, "{v}");
}

/// Per-frame loop with explicit joint-pair distances.
fn bone_loss_loop(pred: &Motion, gt: &Motion, s: &Skeleton) -> f64 {
    let mut total = 0.0;
    for t in 0..pred.n_frames() {
        for (p, c) in s.bones() {
            let dist = |m: &Motion| {
                let (a, b) = (m.joint(t, p), m.joint(t, c));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            total += (dist(pred) - dist(gt)).powi(2);
        }
    }
    total
}

#[test]
fn bone_loss_matches_loop_oracle() {
    let s = Skeleton::desk7();
    let mut r = rng(3);
    for _ in 0..20 {
        let a = random_motion(&mut r, 5, 7, 1.0);
        let b = random_motion(&mut r, 5, 7, 1.0);
        let fast = bone_length_loss(&a, &b, &s).unwrap();
        assert!((fast - bone_loss_loop(&a, &b, &s)).abs() < 1e-12);
    }
}

/// The motion objective composed from scalar quantities.
fn motion_objective(
    preds: &[Motion],
    gts: &[Motion],
    mu: &Mat,
    lv: &Mat,
    s: &Skeleton,
    w: &LossWeights,
    kl_weight: f64,
) -> f64 {
    let b = preds.len();
    let mut pos = 0.0;
    let mut vel = 0.0;
    let mut bone = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        for (x, y) in p.frames().iter().zip(g.frames().iter()) {
            pos += (x - y).abs();
        }
        let (vp, vg) = (velocity(p).unwrap(), velocity(g).unwrap());
        for (x, y) in vp.iter().zip(vg.iter()) {
            vel += (x - y).abs();
        }
        bone += bone_loss_loop(p, g, s);
    }
    let b = b as f64;
    w.position * pos / b + w.velocity * vel / b + w.bone * bone / b
        + w.kl * kl_weight * kl_divergence(mu, lv, preds.len())
}

fn rows(motions: &[Motion]) -> Mat {
    let n = motions[0].n_joints();
    let t = motions[0].n_frames();
    let mut m = Mat::zeros((motions.len() * t * n, 3));
    for (b, mo) in motions.iter().enumerate() {
        for tt in 0..t {
            for j in 0..n {
                for c in 0..3 {
                    m[[(b * t + tt) * n + j, c]] = mo.frames()[[tt, j, c]];
                }
            }
        }
    }
    m
}

#[test]
fn motion_loss_matches_scalar_composition() {
    let s = Skeleton::desk7();
    let store = ParamStore::new();
    let cfg = NetConfig::tiny(4);
    let w = LossWeights::default();
    let bones = Rc::new(s.bones().collect::<Vec<_>>());
    let mut r = rng(4);
    for _ in 0..10 {
        let (b, t) = (3, 6);
        let tpl: Vec<Motion> = (0..b).map(|_| random_motion(&mut r, t, 7, 1.0)).collect();
        let pred: Vec<Motion> = (0..b).map(|_| random_motion(&mut r, t, 7, 1.0)).collect();
        let gt: Vec<Motion> = (0..b).map(|_| random_motion(&mut r, t, 7, 1.0)).collect();
        let mu = Mat::from_shape_fn((b * 7, 5), |_| r.random_range(-1.0..1.0));
        let lv = Mat::from_shape_fn((b * 7, 5), |_| r.random_range(-1.0..1.0));
        let kl_weight = r.random_range(0.0..1.0);
        let expected = motion_objective(&pred, &gt, &mu, &lv, &s, &w, kl_weight);

        let mut rr = rng(0);
        let mut p = Pass::new(&store, &cfg, true, &mut rr);
        let delta = rows(&pred) - rows(&tpl);
        let dv = p.constant(delta);
        let code = Code {
            mu: p.constant(mu),
            log_var: p.constant(lv),
        };
        let loss = motion_loss(&mut p, dv, &rows(&tpl), &rows(&gt), code, Dims::new(b, t, 7), &bones, &w, kl_weight);
        let got = p.tape.scalar(loss);
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn motion_loss_trivial_cases() {
    let s = Skeleton::desk7();
    let store = ParamStore::new();
    let cfg = NetConfig::tiny(4);
    let w = LossWeights::default();
    let bones = Rc::new(s.bones().collect::<Vec<_>>());
    let mut r = rng(5);
    let gt = random_motion(&mut r, 4, 7, 1.0);
    let g = rows(std::slice::from_ref(&gt));
    let eval = |delta: Mat| {
        let mut rr = rng(0);
        let mut p = Pass::new(&store, &cfg, true, &mut rr);
        let dv = p.constant(delta);
        let code = Code {
            mu: p.constant(Mat::zeros((7, 2))),
            log_var: p.constant(Mat::zeros((7, 2))),
        };
        let l = motion_loss(&mut p, dv, &Mat::zeros(g.raw_dim()), &g, code, Dims::new(1, 4, 7), &bones, &w, 1.0);
        p.tape.scalar(l)
    };
    assert_eq!(eval(g.clone()), 0.0);
    // A constant offset moves positions only: the velocity and bone terms
    // vanish and the L1 norm covers 4 frames x 7 joints x 3 axes.
    let c = 0.02;
    let v = eval(g.mapv(|x| x + c));
    assert!((v - w.position * c * 84.0).abs() < 1e-12, "{v}");
}

#[test]
fn skeleton_loss_zero_kl_error_vector() {
    // With mu = 0 and log_var = 0 the KL vanishes, leaving ||error||^2 = 0.01 n.
    let n = 6;
    let err = Mat::from_elem((1, n), 0.1);
    let recon: f64 = err.iter().map(|e| e * e).sum();
    let kl = kl_divergence(&Mat::zeros((1, 8)), &Mat::zeros((1, 8)), 1);
    assert!((recon + kl - 0.01 * n as f64).abs() < 1e-15);
}

fn chain_clip(r: &mut ChaCha8Rng, t: usize, scales: &[f64], template: Option<&InteractionClip>) -> InteractionClip {
    let s = Skeleton::chain(3);
    let (ma, mb) = match template {
        Some(tpl) => (
            Motion::new(tpl.motion_a.frames() + &random_motion(r, t, 3, 0.05).into_frames(), 30.0).unwrap(),
            Motion::new(tpl.motion_b.frames() + &random_motion(r, t, 3, 0.05).into_frames(), 30.0).unwrap(),
        ),
        None => (random_motion(r, t, 3, 1.0), random_motion(r, t, 3, 1.0)),
    };
    InteractionClip::new(
        s.clone(),
        s,
        ma,
        mb,
        "k",
        BoneScaleVector::new(scales.to_vec()).unwrap(),
        vec![(2, 2)],
    )
    .unwrap()
}

/// Central differences of the whole objective on a tiny model.
pub(crate) fn total_gradient_max_rel_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let tpl = chain_clip(&mut r, 8, &[1.0, 1.0], None);
    let var1 = chain_clip(&mut r, 8, &[1.1, 0.9], Some(&tpl));
    let var2 = chain_clip(&mut r, 8, &[0.8, 1.2], Some(&tpl));
    let s = Skeleton::chain(3);
    let mut model = Model::new(NetConfig::tiny(8), s.clone(), s, seed).unwrap();
    // Zero BN offsets put a dead channel exactly on the ReLU kink.
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.name(id).ends_with(".beta") {
            model.store.value_mut(id).mapv_inplace(|_| r.random_range(-0.1..0.1));
        }
    }
    let pairs = [
        PairInput { template: &tpl, target: Some(&var1), scales: &[1.1, 0.9] },
        PairInput { template: &tpl, target: Some(&var2), scales: &[0.8, 1.2] },
    ];
    let batch = Batch::new(&pairs).unwrap();
    let w = LossWeights::default();
    let eval = |m: &Model| {
        let mut rr = rng(seed + 1);
        let mut p = m.pass(true, &mut rr);
        let l = batch_loss(m, &mut p, &batch, &w, 0.7, false).unwrap();
        (p.tape, l.total)
    };
    let (tape, out) = eval(&model);
    model.store.zero_grads();
    tape.backward_into(out, &mut model.store);
    let ids: Vec<_> = model.store.ids().collect();
    let analytic: Vec<Mat> = ids.iter().map(|&id| model.store.grad(id).clone()).collect();
    // Small enough not to straddle the kinks of |x| and ReLU, large enough
    // that rounding in a loss of order 1e2 stays well below the tolerance.
    let h = 3e-6;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for idx in 0..model.store.value(id).len() {
            let orig = model.store.value(id).as_slice().unwrap()[idx];
            model.store.value_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
            let (t, o) = eval(&model);
            let fp = t.scalar(o);
            model.store.value_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
            let (t, o) = eval(&model);
            let fm = t.scalar(o);
            model.store.value_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[k].as_slice().unwrap()[idx];
            let e = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let worst = total_gradient_max_rel_error(0);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

fn tiny_dataset() -> Dataset {
    dataset_with(8, "0.9:1.1:0.1")
}

fn dataset_with(frames: usize, grid: &str) -> Dataset {
    use crate::dataset::{gen_variations, DatasetSpec, ScaleGrid};
    let s = Skeleton::desk7();
    let base = crate::dataset::gen_base_clip("hold", &s, frames, 0).unwrap();
    let spec = DatasetSpec {
        scale_grid: ScaleGrid::parse(grid).unwrap(),
        n_frames: frames,
        ..DatasetSpec::default()
    };
    gen_variations(&base, &spec).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 1,
        net: NetConfig::tiny(6),
        ..TrainConfig::default()
    }
}

#[test]
fn pairs_are_normalized_to_their_template() {
    let d = tiny_dataset();
    let pairs = training_pairs(&d, true).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs[0].target.scale_b.is_template());
    for p in &pairs {
        let rec = NormalizationRecord::of(&p.template);
        assert!(rec.offset.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(p.scales, p.target.scale_b.as_slice());
    }
    assert_eq!(training_pairs(&d, false).unwrap().len(), 2);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let d = tiny_dataset();
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let out = train(&d, &cfg, None).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    let fresh = Model::new(cfg.net.clone(), Skeleton::desk7(), Skeleton::desk7(), cfg.seed).unwrap();
    assert_eq!(out.model.store, fresh.store);
}

#[test]
fn same_seed_gives_same_loss_trace() {
    let d = tiny_dataset();
    let cfg = small_config();
    let a = train(&d, &cfg, None).unwrap();
    let b = train(&d, &cfg, None).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.loss_total - y.loss_total).abs() <= 1e-4 * x.loss_total.abs());
    }
    assert_eq!(a.history.len(), 1);
}

#[test]
fn checkpoint_and_history_written_with_exact_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = tiny_dataset();
    let cfg = TrainConfig { epochs: 2, ..small_config() };
    let out = train(&d, &cfg, Some(dir.path())).unwrap();
    let (_, extra) = Model::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let w = checkpoint_weights(&extra).unwrap();
    assert_eq!(w, LossWeights { position: 0.75, velocity: 0.1, bone: 0.05, kl: 0.1 });
    let text = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1 + out.history.len());
    assert!(text.starts_with("epoch,loss_skeleton,loss_motion_b,loss_motion_a"));
}

#[test]
fn invalid_configs_rejected() {
    let d = tiny_dataset();
    for cfg in [
        TrainConfig { batch_size: 0, ..small_config() },
        TrainConfig { learning_rate: -1.0, ..small_config() },
        TrainConfig {
            weights: LossWeights { position: 0.9, ..LossWeights::default() },
            ..small_config()
        },
    ] {
        assert!(matches!(train(&d, &cfg, None), Err(Error::Config(_))));
    }
}

#[test]
fn losses_nonnegative_and_finite_at_init() {
    let d = tiny_dataset();
    let cfg = small_config();
    let pairs = training_pairs(&d, true).unwrap();
    let model = Model::new(cfg.net.clone(), Skeleton::desk7(), Skeleton::desk7(), 0).unwrap();
    let inputs: Vec<PairInput> = pairs.iter().map(|p| p.input()).collect();
    let batch = Batch::new(&inputs).unwrap();
    let mut r = rng(0);
    let mut p = model.pass(true, &mut r);
    let l = batch_loss(&model, &mut p, &batch, &cfg.weights, 1.0, false).unwrap();
    for v in [l.skeleton, l.motion_b, l.motion_a, l.total] {
        let x = p.tape.scalar(v);
        assert!(x.is_finite() && x >= 0.0);
    }
}

/// Position term of B's objective, reconstructed at the posterior mean.
fn position_term_b(model: &Model, batch: &Batch) -> f64 {
    let only_position = LossWeights { position: 1.0, velocity: 0.0, bone: 0.0, kl: 0.0 };
    let mut r = rng(99);
    let mut p = model.pass(false, &mut r);
    let l = batch_loss(model, &mut p, batch, &only_position, 0.0, false).unwrap();
    p.tape.scalar(l.motion_b)
}

// Dropout and latent sampling are switched off: the probe checks that the
// objective and optimizer can memorize one clip.
#[test]
fn overfits_a_single_clip() {
    let d = dataset_with(8, "0.7:1.3:0.3");
    let pairs = training_pairs(&d, false).unwrap();
    let batch = Batch::new(&[pairs.last().unwrap().input()]).unwrap();
    let cfg = TrainConfig {
        net: NetConfig { dropout: 0.0, ..NetConfig::default() },
        ..TrainConfig::default()
    };
    let mut model = Model::new(cfg.net.clone(), Skeleton::desk7(), Skeleton::desk7(), 3).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &model.store);
    let initial = position_term_b(&model, &batch);
    let mut r = rng(7);
    for _ in 0..500 {
        let (tape, total, stats) = {
            let mut p = model.pass(true, &mut r);
            p.sample_latents = false;
            let l = batch_loss(&model, &mut p, &batch, &cfg.weights, 1.0, false).unwrap();
            let stats = std::mem::take(&mut p.bn_stats);
            (p.tape, l.total, stats)
        };
        model.store.zero_grads();
        tape.backward_into(total, &mut model.store);
        adam.step(&mut model.store);
        model.apply_bn_stats(stats);
    }
    let last = position_term_b(&model, &batch);
    assert!(last < 0.05 * initial, "position term {initial} -> {last}");
}
