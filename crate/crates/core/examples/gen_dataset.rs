//! Generate the desk-scale dataset: four procedural base interactions, each
//! retargeted to the uniform scale grid 0.75..1.25, and save it to disk.
//!
//! ```bash
//! cargo run -p interaug --example gen_dataset -- /tmp/interaug-data
//! ```

use std::path::PathBuf;
use std::time::Instant;

use interaug::dataset::{self, DatasetSpec};
use interaug::skeleton::Skeleton;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "interaug-data".into())
        .into();
    let spec = DatasetSpec::default();
    let start = Instant::now();
    let data = dataset::generate(&spec, &Skeleton::desk7())?;
    println!(
        "{} clips ({} failures) in {:.1}s; worst bone error {:.2e} m",
        data.len(),
        data.failures.len(),
        start.elapsed().as_secs_f64(),
        data.bone_audit()?
    );
    for f in &data.failures {
        println!("  failed: {} {:?}: {}", f.kind, f.scale_b, f.reason);
    }
    dataset::save(&data, &out)?;
    println!("saved to {} (manifest {})", out.display(), dataset::manifest_hash(&out)?);
    Ok(())
}
