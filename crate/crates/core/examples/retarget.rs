//! Retarget a template with a trained checkpoint and compare it with plain
//! bone scaling.
//!
//! ```bash
//! cargo run --release -p interaug --example retarget -- /tmp/interaug-run/checkpoint.json /tmp/interaug-data/clips/hold_template.json 1.15
//! ```

use std::path::PathBuf;

use interaug::infer;
use interaug::metrics;
use interaug::motion::{apply_bone_scales, InteractionClip};
use interaug::net::{LatentMode, Model};
use interaug::skeleton::BoneScaleVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = PathBuf::from(args.first().map(String::as_str).unwrap_or("interaug-run/checkpoint.json"));
    let template = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("interaug-data/clips/hold_template.json"));
    let scale: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1.15);

    let (model, _) = Model::load(&ckpt)?;
    let clip = InteractionClip::load(&template)?;
    let scales = BoneScaleVector::uniform(clip.skeleton_b.n_bones(), scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = infer::retarget(&model, &clip, &scales, LatentMode::Zero, &mut rng)?;

    let naive_b = apply_bone_scales(&clip.motion_b, &clip.skeleton_b, &scales)?;
    let naive = clip.with_motions(clip.motion_a.clone(), naive_b)?;
    println!("model: E_b(B) {:.4} m", metrics::e_b(&out.motion_b, &clip.skeleton_b, &scales)?);
    println!("key-pair distance change vs template: model {:.4} m, naive {:.4} m", metrics::jpd(&out, &clip)?, metrics::jpd(&naive, &clip)?);
    Ok(())
}
