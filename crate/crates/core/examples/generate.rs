//! Sample new characters from the skeleton prior and decode an interaction
//! for each of them.
//!
//! ```bash
//! cargo run --release -p interaug --example generate -- /tmp/interaug-run/checkpoint.json /tmp/interaug-data/clips/circle_template.json 5
//! ```

use std::path::PathBuf;

use interaug::infer;
use interaug::motion::InteractionClip;
use interaug::net::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = PathBuf::from(args.first().map(String::as_str).unwrap_or("interaug-run/checkpoint.json"));
    let template = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("interaug-data/clips/circle_template.json"));
    let count: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(5);

    let (model, _) = Model::load(&ckpt)?;
    let clip = InteractionClip::load(&template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, c) in infer::generate(&model, &clip, count, &mut rng)?.iter().enumerate() {
        let scales: Vec<String> = c.scale_b.as_slice().iter().map(|s| format!("{s:.3}")).collect();
        println!("{i}: B scales [{}]", scales.join(", "));
    }
    Ok(())
}
