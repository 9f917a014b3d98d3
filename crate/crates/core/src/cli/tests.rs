use std::path::Path;

use tempfile::TempDir;

use super::*;
use crate::net::NetConfig;

/// Fast config: one kind, 16 frames, tiny network.
fn fast_config(grid: &str) -> RunConfig {
    let mut c = RunConfig {
        seed: 3,
        ..RunConfig::default()
    };
    c.dataset.base_kinds = vec!["hold".into()];
    c.dataset.n_frames = 16;
    c.dataset.scale_grid = ScaleGrid::parse(grid).unwrap();
    c.train.epochs = 1;
    c.train.batch_size = 2;
    c.train.net = NetConfig::tiny(6);
    c.features.epochs = 1;
    c
}

fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("interaug").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Dataset plus an untrained checkpoint built through the CLI.
fn fixture(grid: &str) -> (TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &fast_config(grid));
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(cli(&["gendata", "--config", p(&cfg), "--out", p(&data)]), 0);
    assert_eq!(
        cli(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--epochs", "0"]),
        0
    );
    (dir, cfg, data, run)
}

fn template_path(data: &Path) -> PathBuf {
    let d = dataset::load(data).unwrap();
    let id = d.templates().next().unwrap().id.clone();
    data.join("clips").join(format!("{id}.json"))
}

#[test]
fn config_round_trips_and_partial_files_fill_defaults() {
    let c = fast_config("0.9:1.1:0.1");
    let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
    let partial: RunConfig = toml::from_str("seed = 9\n[train]\nepochs = 3\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.train.batch_size, 32);
    assert_eq!(partial.dataset, DatasetSpec::default());
}

#[test]
fn global_seed_reaches_every_stage() {
    let mut c = RunConfig {
        seed: 42,
        ..RunConfig::default()
    };
    c.propagate_seed();
    assert_eq!((c.dataset.seed, c.train.seed, c.features.seed), (42, 42, 42));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(
        cli(&["export", "--clip", "x.json", "--format", "bvh", "--out", "y"]),
        1
    );
    assert_eq!(
        cli(&["eval", "--ckpt", "c", "--data", "d", "--mode", "dance", "--out", "o"]),
        1
    );
    assert_eq!(cli(&["gendata", "--out", "o", "--scales", "1.2:0.8:0.1"]), 1);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn missing_inputs_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("out.csv");
    assert_eq!(cli(&["export", "--clip", p(&missing), "--format", "csv", "--out", p(&out)]), 1);
}

#[test]
fn unit_grid_gives_templates_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &fast_config("0.9:1.1:0.1"));
    let out = dir.path().join("data");
    let code = cli(&["gendata", "--config", p(&cfg), "--out", p(&out), "--scales", "1.0:1.0:0.05"]);
    assert_eq!(code, 0);
    let d = dataset::load(&out).unwrap();
    assert_eq!(d.len(), 1);
    assert!(d.entries[0].is_template());
    assert!(out.join(RUN_CONFIG_FILE).exists());
}

#[test]
fn gendata_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &fast_config("0.9:1.1:0.1"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["gendata", "--config", p(&cfg), "--out", p(out)]), 0);
    }
    assert_eq!(dataset::manifest_hash(&a).unwrap(), dataset::manifest_hash(&b).unwrap());
    let d = dataset::load(&a).unwrap();
    assert_eq!(d.variations().count(), 2);
}

#[test]
fn zero_epoch_training_gives_a_loadable_checkpoint() {
    let (_dir, _cfg, _data, run) = fixture("0.8:1.2:0.05");
    let (model, _) = Model::load(&run.join(train::CHECKPOINT_FILE)).unwrap();
    assert_eq!(model.config, NetConfig::tiny(6));
    assert!(run.join(train::HISTORY_FILE).exists());
    let resolved = RunConfig::load(&run.join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(resolved.train.epochs, 0);
    assert_eq!(resolved.seed, 3);
}

#[test]
fn cross_scale_audit_has_no_mid_band_test_scales() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &fast_config("0.8:1.2:0.05"));
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(cli(&["gendata", "--config", p(&cfg), "--out", p(&data)]), 0);
    let code = cli(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--epochs", "0", "--split", "cross-scale",
    ]);
    assert_eq!(code, 0);
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(SPLIT_FILE)).unwrap()).unwrap();
    let test = audit["test"].as_array().unwrap();
    assert!(!test.is_empty());
    for e in test {
        let (lo, hi) = (e["min_scale"].as_f64().unwrap(), e["max_scale"].as_f64().unwrap());
        assert!(hi <= 0.85 + 1e-9 || lo >= 1.15 - 1e-9, "mid-band test entry {e}");
    }
    for e in audit["train"].as_array().unwrap() {
        let (lo, hi) = (e["min_scale"].as_f64().unwrap(), e["max_scale"].as_f64().unwrap());
        assert!(lo >= 0.95 - 1e-9 && hi <= 1.05 + 1e-9);
    }
}

#[test]
fn retarget_checks_scale_length_and_writes_valid_clips() {
    let (dir, cfg, data, run) = fixture("0.8:1.2:0.05");
    let ckpt = run.join(train::CHECKPOINT_FILE);
    let template = template_path(&data);
    let out = dir.path().join("retargeted.json");
    let args = |scales: &str| {
        cli(&[
            "retarget", "--config", p(&cfg), "--ckpt", p(&ckpt), "--template", p(&template), "--scales", scales, "--out",
            p(&out),
        ])
    };
    assert_eq!(args("1.1,1.1,1.1"), 1);
    assert!(!out.exists());
    assert_eq!(args("1.1"), 0);
    let clip = InteractionClip::load(&out).unwrap();
    clip.validate().unwrap();
    assert_eq!(clip.scale_b.as_slice(), &[1.1; 6]);
    let first = fs::read(&out).unwrap();
    assert_eq!(args("1.1"), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn generate_zero_writes_nothing_and_fixed_seed_repeats() {
    let (dir, cfg, data, run) = fixture("0.8:1.2:0.05");
    let ckpt = run.join(train::CHECKPOINT_FILE);
    let template = template_path(&data);
    let gen = |count: &str, out: &Path| {
        cli(&[
            "generate", "--config", p(&cfg), "--ckpt", p(&ckpt), "--template", p(&template), "--count", count, "--out",
            p(out),
        ])
    };
    let none = dir.path().join("none");
    assert_eq!(gen("0", &none), 0);
    assert!(!none.exists());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(gen("3", &a), 0);
    assert_eq!(gen("3", &b), 0);
    for i in 0..3 {
        let name = format!("hold_gen{i:03}.json");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn eval_writes_documented_columns() {
    let (dir, cfg, data, run) = fixture("0.8:1.2:0.05");
    let ckpt = run.join(train::CHECKPOINT_FILE);
    let out = dir.path().join("eval");
    let code = cli(&[
        "eval", "--config", p(&cfg), "--ckpt", p(&ckpt), "--data", p(&data), "--mode", "retarget", "--on-train", "--out",
        p(&out),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join(metrics::METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "clip_id,kind,scale_label,mode,E_r,E_b,JPD");
    assert!(out.join(metrics::SUMMARY_FILE).exists());
    assert!(out.join(RUN_CONFIG_FILE).exists());
}

#[test]
fn eval_with_non_finite_weights_exits_with_two() {
    let (dir, cfg, data, run) = fixture("0.8:1.2:0.05");
    let ckpt = run.join(train::CHECKPOINT_FILE);
    let (mut model, meta) = Model::load(&ckpt).unwrap();
    let id = model.param_id("dec_b.head.out.b").unwrap();
    model.store.value_mut(id).fill(f64::NAN);
    let broken = dir.path().join("broken.json");
    model.save(&broken, meta["extra"].clone()).unwrap();
    let out = dir.path().join("eval");
    let code = cli(&[
        "eval", "--config", p(&cfg), "--ckpt", p(&broken), "--data", p(&data), "--mode", "retarget", "--on-train",
        "--out", p(&out),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn csv_export_round_trips() {
    let (dir, cfg, data, _run) = fixture("0.8:1.2:0.05");
    let template = template_path(&data);
    let out = dir.path().join("clip.csv");
    assert_eq!(cli(&["export", "--config", p(&cfg), "--clip", p(&template), "--format", "csv", "--out", p(&out)]), 0);
    let clip = InteractionClip::load(&template).unwrap();
    let back = clip.read_csv_positions(fs::File::open(&out).unwrap()).unwrap();
    let diff = (clip.motion_a.frames() - back.motion_a.frames())
        .iter()
        .chain((clip.motion_b.frames() - back.motion_b.frames()).iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff <= 1e-6, "round-trip error {diff}");
}

#[test]
fn bvh_lite_layout() {
    let (dir, cfg, data, _run) = fixture("0.8:1.2:0.05");
    let template = template_path(&data);
    let out = dir.path().join("clip.bvhl");
    assert_eq!(
        cli(&["export", "--config", p(&cfg), "--clip", p(&template), "--format", "bvh-lite", "--out", p(&out)]),
        0
    );
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], format!("BVH-LITE {BVH_LITE_VERSION}"));
    assert_eq!(lines[2], "CHARACTER A 7");
    assert_eq!(lines[3], "JOINT 0 pelvis PARENT -");
    let motion = lines.iter().position(|l| *l == "MOTION").unwrap();
    assert_eq!(lines[motion + 1], "Frames: 16");
    let frames = &lines[motion + 3..];
    assert_eq!(frames.len(), 16);

    let clip = InteractionClip::load(&template).unwrap();
    let first: Vec<f64> = frames[0].split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first.len(), 2 * 7 * 3);
    let root = clip.motion_a.joint(0, 0);
    let chest = clip.motion_a.joint(0, 1);
    for c in 0..3 {
        assert!((first[c] - root[c]).abs() < 1e-6);
        assert!((first[3 + c] - (chest[c] - root[c])).abs() < 1e-6);
    }
}

#[test]
fn scale_flag_accepts_uniform_or_full_vectors() {
    let s = Skeleton::desk7();
    assert_eq!(scale_vector(&[1.2], &s).unwrap().as_slice(), &[1.2; 6]);
    assert_eq!(scale_vector(&[1.0, 1.1, 1.2, 0.9, 0.8, 1.0], &s).unwrap().len(), 6);
    assert!(scale_vector(&[1.0, 1.1], &s).is_err());
    assert!(scale_vector(&[-1.0], &s).is_err());
}
