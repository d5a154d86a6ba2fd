#![allow(dead_code)]

use std::path::{Path, PathBuf};

use memefusion_core::config::RunConfig;
use memefusion_core::training::{extract_features, load_splits, FrozenStack, PreparedData, SampleFeatures};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped mock config with extra `key=value` overrides.
pub fn mock_config(overrides: &[&str]) -> RunConfig {
    RunConfig::load(&repo_root().join("configs/mock_synthetic.json"))
        .unwrap()
        .with_overrides(overrides)
        .unwrap()
}

pub struct Prepared {
    pub stack: FrozenStack,
    pub data: PreparedData,
    pub test: Vec<SampleFeatures>,
}

pub fn prepare(cfg: &RunConfig) -> Prepared {
    let stack = FrozenStack::from_config(cfg).unwrap();
    let splits = load_splits(cfg).unwrap();
    let data = PreparedData::extract(&stack, &splits).unwrap();
    let test = extract_features(&stack, splits.test.as_ref().unwrap(), true).unwrap();
    Prepared { stack, data, test }
}

pub fn labels(features: &[SampleFeatures]) -> Vec<u8> {
    features.iter().map(|s| s.label()).collect()
}

/// O(n²) pairwise AUROC: the fraction of (positive, negative) pairs the
/// positive wins, ties counting one half.
pub fn brute_force_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
