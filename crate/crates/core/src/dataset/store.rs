//! On-disk layout: `manifest.json` plus one clip JSON per entry under `clips/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetEntry, DatasetSpec, ScalingMode, VariationFailure};
use crate::error::{Error, Result};
use crate::motion::InteractionClip;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub kind: String,
    pub mode: Option<ScalingMode>,
    pub scale_label: f64,
    pub scale_b: Vec<f64>,
    pub template: bool,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kinds: Vec<String>,
    pub spec: Option<DatasetSpec>,
    pub clip_count: usize,
    pub clips: Vec<ManifestClip>,
    pub failures: Vec<VariationFailure>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    dataset.validate()?;
    let clips_dir = dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut clips = Vec::with_capacity(dataset.len());
    for e in &dataset.entries {
        let file = format!("clips/{}.json", e.id);
        let json = e.clip.to_json()?;
        let path = dir.join(&file);
        fs::write(&path, &json).map_err(|err| Error::io(&path, err))?;
        clips.push(ManifestClip {
            id: e.id.clone(),
            kind: e.kind().to_string(),
            mode: e.mode,
            scale_label: e.scale_label,
            scale_b: e.clip.scale_b.as_slice().to_vec(),
            template: e.is_template(),
            file,
            sha256: sha256_hex(json.as_bytes()),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        kinds: dataset.kinds(),
        spec: dataset.spec.clone(),
        clip_count: clips.len(),
        clips,
        failures: dataset.failures.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numerical(format!("cannot serialize manifest: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::parse(
            &path,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    if manifest.clip_count != manifest.clips.len() {
        return Err(Error::parse(
            &path,
            format!(
                "manifest declares {} clips but lists {}",
                manifest.clip_count,
                manifest.clips.len()
            ),
        ));
    }
    let mut entries = Vec::with_capacity(manifest.clips.len());
    for mc in &manifest.clips {
        let clip_path = dir.join(&mc.file);
        let clip = InteractionClip::load(&clip_path)?;
        if clip.interaction_kind != mc.kind || clip.scale_b.as_slice() != mc.scale_b.as_slice() {
            return Err(Error::parse(&clip_path, "clip disagrees with its manifest entry"));
        }
        entries.push(DatasetEntry {
            id: mc.id.clone(),
            clip,
            mode: mc.mode,
            scale_label: mc.scale_label,
        });
    }
    let d = Dataset {
        entries,
        failures: manifest.failures,
        spec: manifest.spec,
    };
    d.validate()?;
    Ok(d)
}

/// SHA-256 of `manifest.json`; covers every clip through the per-clip hashes.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_base_clip;
    use crate::skeleton::Skeleton;

    fn tiny() -> Dataset {
        let s = Skeleton::desk7();
        let entries = ["hold", "lift"]
            .iter()
            .map(|k| {
                let clip = gen_base_clip(k, &s, 8, 1).unwrap();
                DatasetEntry {
                    id: format!("{k}_template"),
                    clip,
                    mode: None,
                    scale_label: 1.0,
                }
            })
            .collect();
        Dataset { entries, ..Default::default() }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        let m = save(&d, dir.path()).unwrap();
        assert_eq!(m.clip_count, 2);
        let n_files = fs::read_dir(dir.path().join("clips")).unwrap().count();
        assert_eq!(n_files, m.clip_count);
        assert_eq!(load(dir.path()).unwrap(), d);
    }

    #[test]
    fn corrupted_clip_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("clips/hold_template.json"), "{ not json").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn corrupted_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("manifest.json"), "[1, 2").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(load(Path::new("/nonexistent/dataset")), Err(Error::Io { .. })));
    }
}
