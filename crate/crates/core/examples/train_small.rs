//! Train on a saved dataset with a random split and report per-epoch losses.
//!
//! ```bash
//! cargo run --release -p interaug --example gen_dataset -- /tmp/interaug-data
//! cargo run --release -p interaug --example train_small -- /tmp/interaug-data /tmp/interaug-run 5 4
//! ```
//! Arguments: dataset dir, output dir, epochs (default 5), batch size (default 4),
//! learning rate (default 1e-3).

use std::path::PathBuf;

use interaug::dataset::{self, SplitProtocol};
use interaug::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data_dir = PathBuf::from(args.first().map(String::as_str).unwrap_or("interaug-data"));
    let out_dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("interaug-run"));
    let epochs = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let batch_size = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let learning_rate = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let data = dataset::load(&data_dir)?;
    let (train_set, test_set) = dataset::split(&data, &SplitProtocol::random(), 0)?;
    println!("{} training clips, {} test clips", train_set.len(), test_set.len());
    std::fs::create_dir_all(&out_dir)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        ..TrainConfig::default()
    };
    let outcome = train(&train_set, &config, Some(&out_dir))?;
    for r in &outcome.history {
        println!(
            "epoch {:>3}  total {:>10.4}  val {:?}  {:.1}s",
            r.epoch, r.loss_total, r.val_retarget_error, r.seconds
        );
    }
    println!("best epoch {:?}; checkpoint in {}", outcome.best_epoch, out_dir.display());
    Ok(())
}
