//! Command-line surface: dataset generation, training, retargeting,
//! generation, evaluation and export.
//!
//! Every command resolves a [`RunConfig`] (defaults, then the optional TOML
//! file, then flags) and writes it as `run_config.toml` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetSpec, ScaleGrid, SplitProtocol};
use crate::error::{Error, Result};
use crate::infer;
use crate::metrics::{self, FeatureConfig, FeatureExtractor, Mode};
use crate::motion::InteractionClip;
use crate::net::{LatentMode, Model};
use crate::skeleton::{BoneScaleVector, Skeleton};
use crate::train::{self, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const BVH_LITE_VERSION: u32 = 1;

/// Everything a command needs to be rerun. `seed` drives every stage and
/// overrides the per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: SplitProtocol,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            split: SplitProtocol::random(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Push the global seed into every section.
    fn propagate_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.features.seed = self.seed;
    }

    /// Write the resolved config into `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "interaug", version, about = "Two-character interaction augmentation")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    BvhLite,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate base interactions and their scale-grid variations.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        /// Scale grid as min:max:step.
        #[arg(long, value_parser = parse_grid)]
        scales: Option<ScaleGrid>,
        /// Comma-separated interaction kinds.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train on one side of a split and write checkpoint, history and split audit.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_split)]
        split: Option<SplitProtocol>,
    },
    /// Retarget a template clip to the given bone scales of B.
    Retarget {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// One scale for every bone, or one per bone separated by commas.
        #[arg(long, value_delimiter = ',', required = true)]
        scales: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample skeletons from the prior and decode motions for them.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; writes metrics.csv and summary.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// retarget or generate; both when omitted.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, value_parser = parse_split)]
        split: Option<SplitProtocol>,
        /// Score the training side instead of the test side.
        #[arg(long)]
        on_train: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a clip as CSV or bvh-lite.
    Export {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid(s: &str) -> std::result::Result<ScaleGrid, String> {
    ScaleGrid::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<SplitProtocol, String> {
    SplitProtocol::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Parse `args` (program name first) and run; returns the process exit code.
/// Usage errors exit with 1, help and version with 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.propagate_seed();
    match cli.command {
        Command::Gendata { out, scales, kinds, frames } => {
            if let Some(g) = scales {
                config.dataset.scale_grid = g;
            }
            if let Some(k) = kinds {
                config.dataset.base_kinds = k;
            }
            if let Some(t) = frames {
                config.dataset.n_frames = t;
            }
            cmd_gendata(&config, &out).map(|_| ())
        }
        Command::Train { data, out, batch, lr, epochs, split } => {
            let t = &mut config.train;
            t.batch_size = batch.unwrap_or(t.batch_size);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.epochs = epochs.unwrap_or(t.epochs);
            if let Some(s) = split {
                config.split = s;
            }
            cmd_train(&config, &data, &out).map(|_| ())
        }
        Command::Retarget { ckpt, template, scales, out } => cmd_retarget(&config, &ckpt, &template, &scales, &out),
        Command::Generate { ckpt, template, count, out } => {
            cmd_generate(&config, &ckpt, &template, count, &out).map(|_| ())
        }
        Command::Eval { ckpt, data, mode, split, on_train, out } => {
            if let Some(s) = split {
                config.split = s;
            }
            let modes = mode.map_or_else(|| vec![Mode::Retarget, Mode::Generate], |m| vec![m]);
            cmd_eval(&config, &ckpt, &data, &modes, on_train, &out).map(|_| ())
        }
        Command::Export { clip, format, out } => cmd_export(&config, &clip, format, &out),
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Generate and save a dataset. Fails if some kind got no variation although
/// the grid asked for some.
pub fn cmd_gendata(config: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = dataset::generate(&config.dataset, &Skeleton::desk7())?;
    dataset::save(&data, out)?;
    config.write_into(out)?;
    let requested = config
        .dataset
        .variation_scales(&Skeleton::desk7())?
        .len();
    if requested > 0 {
        for kind in data.kinds() {
            if !data.variations().any(|e| e.kind() == kind) {
                return Err(Error::Numerical(format!("every variation of '{kind}' failed")));
            }
        }
    }
    info!(
        "{} clips, {} failures, manifest {}",
        data.len(),
        data.failures.len(),
        dataset::manifest_hash(out)?
    );
    Ok(data)
}

#[derive(Serialize)]
struct SplitAuditEntry<'a> {
    id: &'a str,
    kind: &'a str,
    scale_label: String,
    min_scale: f64,
    max_scale: f64,
}

fn audit_entries(d: &Dataset) -> Vec<SplitAuditEntry<'_>> {
    d.variations()
        .map(|e| {
            let s = e.clip.scale_b.as_slice();
            SplitAuditEntry {
                id: &e.id,
                kind: e.kind(),
                scale_label: metrics::scale_label(e),
                min_scale: s.iter().copied().fold(f64::INFINITY, f64::min),
                max_scale: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Split, train on the training side and write checkpoint, history, split
/// audit and resolved config into `out`.
pub fn cmd_train(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<train::TrainOutcome> {
    let data = dataset::load(data_dir)?;
    let (train_set, test_set) = dataset::split(&data, &config.split, config.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.write_into(out)?;
    let outcome = train::train(&train_set, &config.train, Some(out))?;
    let audit = serde_json::json!({
        "protocol": config.split,
        "seed": config.seed,
        "train": audit_entries(&train_set),
        "validation_ids": outcome.validation_ids,
        "test": audit_entries(&test_set),
    });
    let path = out.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(&audit).map_err(|e| Error::config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(outcome)
}

/// A single value means that scale on every bone.
fn scale_vector(values: &[f64], skeleton: &Skeleton) -> Result<BoneScaleVector> {
    let scales = match values {
        [s] => BoneScaleVector::uniform(skeleton.n_bones(), *s)?,
        v => BoneScaleVector::new(v.to_vec())?,
    };
    scales.check_for(skeleton)?;
    Ok(scales)
}

pub fn cmd_retarget(config: &RunConfig, ckpt: &Path, template: &Path, scales: &[f64], out: &Path) -> Result<()> {
    let (model, _) = Model::load(ckpt)?;
    let clip = InteractionClip::load(template)?;
    let scales = scale_vector(scales, &clip.skeleton_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let result = infer::retarget(&model, &clip, &scales, LatentMode::Zero, &mut rng)?;
    println!("retargeted in {:.3} s", start.elapsed().as_secs_f64());
    config.write_into(parent_dir(out))?;
    result.save(out)
}

/// Write `count` generated clips into `out`; nothing is written for zero.
pub fn cmd_generate(config: &RunConfig, ckpt: &Path, template: &Path, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = Model::load(ckpt)?;
    let clip = InteractionClip::load(template)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let clips = infer::generate(&model, &clip, count, &mut rng)?;
    config.write_into(out)?;
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let path = out.join(format!("{}_gen{i:03}.json", c.interaction_kind));
            c.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Evaluate on the test side (or the training side) of the configured split.
pub fn cmd_eval(
    config: &RunConfig,
    ckpt: &Path,
    data_dir: &Path,
    modes: &[Mode],
    on_train: bool,
    out: &Path,
) -> Result<Vec<metrics::MetricReport>> {
    let (model, _) = Model::load(ckpt)?;
    let data = dataset::load(data_dir)?;
    let (train_set, test_set) = dataset::split(&data, &config.split, config.seed)?;
    let extractor = FeatureExtractor::fit(&train_set, &config.features)?;
    let target = if on_train { &train_set } else { &test_set };
    let reports = modes
        .iter()
        .map(|&m| {
            let r = metrics::evaluate(&model, target, m, config.split.name(), Some(&extractor), config.seed)?;
            r.check_finite()?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.write_into(out)?;
    let refs: Vec<&metrics::MetricReport> = reports.iter().collect();
    metrics::write_metrics_csv(&out.join(metrics::METRICS_FILE), &refs)?;
    metrics::write_summary(&out.join(metrics::SUMMARY_FILE), &refs)?;
    for r in &reports {
        println!(
            "{} {}: E_r {} E_b {:.4} JPD {:.4}",
            r.protocol,
            r.mode.name(),
            r.pooled.e_r.map_or("-".to_string(), |v| format!("{v:.4}")),
            r.pooled.e_b,
            r.pooled.jpd
        );
    }
    Ok(reports)
}

pub fn cmd_export(config: &RunConfig, clip: &Path, format: ExportFormat, out: &Path) -> Result<()> {
    let clip = InteractionClip::load(clip)?;
    if clip.n_frames() == 0 {
        return Err(Error::domain("cannot export an empty clip"));
    }
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    match format {
        ExportFormat::Csv => clip.write_csv(&mut w)?,
        ExportFormat::BvhLite => write_bvh_lite(&clip, &mut w)?,
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    config.write_into(parent_dir(out))
}

/// Minimal position-only BVH variant:
///
/// ```text
/// BVH-LITE 1
/// HIERARCHY
/// CHARACTER A 7
/// JOINT 0 pelvis PARENT -
/// JOINT 1 chest PARENT 0
/// ...
/// CHARACTER B 7
/// ...
/// MOTION
/// Frames: 64
/// Frame Time: 0.033333333
/// <one line per frame>
/// ```
///
/// Each frame line holds, for A then B, the root's world position followed by
/// every other joint's position relative to the root, in joint order.
pub fn write_bvh_lite<W: Write>(clip: &InteractionClip, mut out: W) -> Result<()> {
    if clip.n_frames() == 0 {
        return Err(Error::domain("cannot export an empty clip"));
    }
    let io = |e: std::io::Error| Error::io("<bvh-lite>", e);
    writeln!(out, "BVH-LITE {BVH_LITE_VERSION}").map_err(io)?;
    writeln!(out, "HIERARCHY").map_err(io)?;
    let characters = [("A", &clip.skeleton_a, &clip.motion_a), ("B", &clip.skeleton_b, &clip.motion_b)];
    for (tag, s, _) in &characters {
        writeln!(out, "CHARACTER {tag} {}", s.n_joints()).map_err(io)?;
        for (j, name) in s.joint_names().iter().enumerate() {
            let parent = s.parent(j).map_or("-".to_string(), |p| p.to_string());
            writeln!(out, "JOINT {j} {name} PARENT {parent}").map_err(io)?;
        }
    }
    writeln!(out, "MOTION").map_err(io)?;
    writeln!(out, "Frames: {}", clip.n_frames()).map_err(io)?;
    writeln!(out, "Frame Time: {:.9}", 1.0 / clip.motion_a.frame_rate()).map_err(io)?;
    for t in 0..clip.n_frames() {
        let mut fields = Vec::new();
        for (_, s, m) in &characters {
            let root = m.joint(t, s.root());
            fields.extend(root.iter().copied());
            for j in (0..s.n_joints()).filter(|&j| j != s.root()) {
                let p = m.joint(t, j);
                fields.extend((0..3).map(|c| p[c] - root[c]));
            }
        }
        let line: Vec<String> = fields.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", line.join(" ")).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
