//! Evaluate a checkpoint on the test side of a split, next to the naive
//! bone-scaling baseline that keeps the template's joint directions.
//!
//! ```bash
//! cargo run --release -p interaug --example evaluate -- /tmp/interaug-data /tmp/interaug-run/checkpoint.json random
//! ```

use std::path::PathBuf;

use interaug::dataset::{self, SplitProtocol};
use interaug::metrics::{self, FeatureConfig, FeatureExtractor, Mode, Prediction};
use interaug::motion::apply_bone_scales;
use interaug::net::Model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data_dir = PathBuf::from(args.first().map(String::as_str).unwrap_or("interaug-data"));
    let ckpt = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("interaug-run/checkpoint.json"));
    let protocol = SplitProtocol::parse(args.get(2).map(String::as_str).unwrap_or("random"))?;

    let data = dataset::load(&data_dir)?;
    let (train, test) = dataset::split(&data, &protocol, 0)?;
    let (model, _) = Model::load(&ckpt)?;
    let extractor = FeatureExtractor::fit(&train, &FeatureConfig::default())?;

    let predictions = metrics::predict(&model, &test, Mode::Retarget, 0)?;
    let naive: Vec<Prediction> = predictions
        .iter()
        .map(|p| {
            let template = test.template(&p.kind).expect("split keeps templates");
            let b = apply_bone_scales(&template.motion_b, &template.skeleton_b, &p.reference.scale_b)?;
            let mut clip = template.with_motions(template.motion_a.clone(), b)?;
            clip.scale_b = p.reference.scale_b.clone();
            Ok(Prediction { clip, ..p.clone() })
        })
        .collect::<interaug::Result<_>>()?;

    for (name, preds) in [("model", &predictions), ("naive", &naive)] {
        let r = metrics::report(preds, Mode::Retarget, protocol.name(), Some(&extractor))?;
        let fid_all = r.fid.iter().find(|f| f.kind == "all").map(|f| f.value);
        println!(
            "{name:>5}: E_r {:.4}  E_b {:.4} (B {:.4})  JPD {:.4}  FID {:?}",
            r.pooled.e_r.unwrap_or(f64::NAN),
            r.pooled.e_b,
            r.pooled.e_b_b,
            r.pooled.jpd,
            fid_all
        );
    }
    let generated = metrics::evaluate(&model, &test, Mode::Generate, protocol.name(), Some(&extractor), 0)?;
    println!(
        "generate: E_b {:.4}  JPD {:.4}  FID {:?}",
        generated.pooled.e_b,
        generated.pooled.jpd,
        generated.fid.iter().find(|f| f.kind == "all").map(|f| f.value)
    );
    Ok(())
}
