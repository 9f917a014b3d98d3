//! Retarget one procedural interaction with the interaction-mesh optimizer and
//! print the solver diagnostics.
//!
//! ```bash
//! cargo run --release -p interaug --example mesh_retarget -- lean 1.2
//! ```

use std::time::Instant;

use interaug::dataset::gen_base_clip;
use interaug::mesh::{retarget_optimize, RetargetProblem};
use interaug::metrics;
use interaug::skeleton::{BoneScaleVector, Skeleton};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map(String::as_str).unwrap_or("lean");
    let scale: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1.2);

    let skeleton = Skeleton::desk7();
    let base = gen_base_clip(kind, &skeleton, 64, 0)?;
    let scales = BoneScaleVector::uniform(skeleton.n_bones(), scale)?;
    let start = Instant::now();
    let (clip, diag) = retarget_optimize(&RetargetProblem::new(base.clone(), scales.clone()))?;

    println!("{kind} at scale {scale}: {} iterations in {:.2} s", diag.iterations, start.elapsed().as_secs_f64());
    println!(
        "energy {:.5} -> {:.5}, converged {}",
        diag.energy_trace.first().copied().unwrap_or(f64::NAN),
        diag.projected_energy,
        diag.converged
    );
    println!("bone error before projection {:.2e} m", diag.max_bone_error_before_projection);
    println!("E_b after projection {:.2e} m", metrics::e_b(&clip.motion_b, &skeleton, &scales)?);
    println!(
        "JPD against the source {:.4} m",
        metrics::jpd(&clip, &base)?
    );
    Ok(())
}
