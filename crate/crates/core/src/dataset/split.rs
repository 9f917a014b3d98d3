use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetEntry};
use crate::error::{Error, Result};

/// Closed scale interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Band { lo, hi }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo - 1e-9 && s <= self.hi + 1e-9
    }
}

/// How variations are divided between training and testing. Templates are
/// conditioning inputs and go to both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitProtocol {
    Random {
        test_fraction: f64,
    },
    CrossScale {
        train_band: Band,
        test_bands: Vec<Band>,
    },
    /// `train_kinds` empty means: kinds sorted, first half trains, second half tests.
    CrossInteraction {
        train_kinds: Vec<String>,
        test_kinds: Vec<String>,
    },
    CrossScaleInteraction {
        train_band: Band,
        test_bands: Vec<Band>,
        train_kinds: Vec<String>,
        test_kinds: Vec<String>,
    },
}

impl SplitProtocol {
    pub fn random() -> Self {
        SplitProtocol::Random { test_fraction: 0.2 }
    }

    pub fn cross_scale() -> Self {
        SplitProtocol::CrossScale {
            train_band: Band::new(0.95, 1.05),
            test_bands: vec![Band::new(0.75, 0.85), Band::new(1.15, 1.25)],
        }
    }

    pub fn cross_interaction() -> Self {
        SplitProtocol::CrossInteraction {
            train_kinds: Vec::new(),
            test_kinds: Vec::new(),
        }
    }

    pub fn cross_scale_interaction() -> Self {
        SplitProtocol::CrossScaleInteraction {
            train_band: Band::new(0.95, 1.05),
            test_bands: vec![Band::new(0.75, 0.85), Band::new(1.15, 1.25)],
            train_kinds: Vec::new(),
            test_kinds: Vec::new(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "random" => Ok(Self::random()),
            "cross-scale" | "cross_scale" => Ok(Self::cross_scale()),
            "cross-interaction" | "cross_interaction" => Ok(Self::cross_interaction()),
            "cross-scale-interaction" | "cross_scale_interaction" => {
                Ok(Self::cross_scale_interaction())
            }
            _ => Err(Error::config(format!("unknown split protocol '{name}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitProtocol::Random { .. } => "random",
            SplitProtocol::CrossScale { .. } => "cross-scale",
            SplitProtocol::CrossInteraction { .. } => "cross-interaction",
            SplitProtocol::CrossScaleInteraction { .. } => "cross-scale-interaction",
        }
    }
}

fn all_in(entry: &DatasetEntry, band: &Band) -> bool {
    entry.clip.scale_b.as_slice().iter().all(|&s| band.contains(s))
}

fn all_in_any(entry: &DatasetEntry, bands: &[Band]) -> bool {
    entry
        .clip
        .scale_b
        .as_slice()
        .iter()
        .all(|&s| bands.iter().any(|b| b.contains(s)))
}

fn kind_groups(dataset: &Dataset, train: &[String], test: &[String]) -> (Vec<String>, Vec<String>) {
    if !train.is_empty() || !test.is_empty() {
        return (train.to_vec(), test.to_vec());
    }
    let kinds = dataset.kinds();
    let half = kinds.len().div_ceil(2);
    (kinds[..half].to_vec(), kinds[half..].to_vec())
}

/// Divide the variations of `dataset` according to `protocol`. Deterministic
/// in `seed`. Both sides receive every template.
pub fn split(dataset: &Dataset, protocol: &SplitProtocol, seed: u64) -> Result<(Dataset, Dataset)> {
    let vars: Vec<&DatasetEntry> = dataset.variations().collect();
    let (train, test): (Vec<&DatasetEntry>, Vec<&DatasetEntry>) = match protocol {
        SplitProtocol::Random { test_fraction } => {
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::config(format!("test fraction {test_fraction} not in [0, 1)")));
            }
            let mut shuffled = vars.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_test = (shuffled.len() as f64 * test_fraction).round() as usize;
            let test = shuffled[..n_test].to_vec();
            let train = shuffled[n_test..].to_vec();
            (train, test)
        }
        SplitProtocol::CrossScale { train_band, test_bands } => (
            vars.iter().copied().filter(|e| all_in(e, train_band)).collect(),
            vars.iter().copied().filter(|e| all_in_any(e, test_bands)).collect(),
        ),
        SplitProtocol::CrossInteraction { train_kinds, test_kinds } => {
            let (tr, te) = kind_groups(dataset, train_kinds, test_kinds);
            (
                vars.iter().copied().filter(|e| tr.iter().any(|k| k == e.kind())).collect(),
                vars.iter().copied().filter(|e| te.iter().any(|k| k == e.kind())).collect(),
            )
        }
        SplitProtocol::CrossScaleInteraction {
            train_band,
            test_bands,
            train_kinds,
            test_kinds,
        } => {
            let (tr, te) = kind_groups(dataset, train_kinds, test_kinds);
            (
                vars.iter()
                    .copied()
                    .filter(|e| tr.iter().any(|k| k == e.kind()) && all_in(e, train_band))
                    .collect(),
                vars.iter()
                    .copied()
                    .filter(|e| te.iter().any(|k| k == e.kind()) && all_in_any(e, test_bands))
                    .collect(),
            )
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "{} split leaves {} training and {} test clips",
            protocol.name(),
            train.len(),
            test.len()
        )));
    }
    let build = |picked: Vec<&DatasetEntry>| {
        let mut entries: Vec<DatasetEntry> = dataset.templates().cloned().collect();
        let mut picked: Vec<DatasetEntry> = picked.into_iter().cloned().collect();
        // Keep dataset order on both sides regardless of the shuffle.
        picked.sort_by_key(|e| dataset.entries.iter().position(|x| x.id == e.id));
        entries.extend(picked);
        Dataset {
            entries,
            failures: Vec::new(),
            spec: dataset.spec.clone(),
        }
    };
    Ok((build(train), build(test)))
}
