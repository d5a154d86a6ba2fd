//! Meme records and dataset ingestion.
//!
//! Real datasets are line-delimited JSON with `id`, `img`, `label` and `text`
//! keys; the HarMeme loader folds its three-way harm labels into the same
//! binary record. A synthetic XOR "confounder" generator produces desk-scale
//! data where neither modality alone predicts the label.

mod harmeme;
mod hmc;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub use harmeme::{load_harmeme_split, merge_harmeme_label};
pub use hmc::{load_hmc_split, write_hmc_dataset};
pub use synthetic::{
    generate_synthetic_confounders, partition_synthetic, render_synthetic_image, synthetic_cues,
    SyntheticMemeSpec, SYNTHETIC_IMAGE_SIZE,
};

/// Where a record's image comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ImageRef {
    /// An image file on disk. Existence is only checked when the image is loaded.
    File(PathBuf),
    /// A procedurally rendered canvas.
    Synthetic { image_cue: u8, seed: u64 },
}

impl ImageRef {
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            ImageRef::File(path) => load_image_file(path),
            ImageRef::Synthetic { image_cue, seed } => Ok(render_synthetic_image(*image_cue, *seed)),
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::File(p) => write!(f, "{}", p.display()),
            ImageRef::Synthetic { image_cue, seed } => {
                write!(f, "synthetic(cue={image_cue}, seed={seed})")
            }
        }
    }
}

pub fn load_image_file(path: &Path) -> Result<RgbImage> {
    let decode_err = |message: String| Error::ImageDecode {
        path: path.display().to_string(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// One image-text sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub image_ref: ImageRef,
    /// The caption; may be empty.
    pub text: String,
    /// 0 = not hateful, 1 = hateful. Absent for prediction-only input.
    pub label: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    DevSeen,
    TestUnseen,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::DevSeen => "dev_seen",
            SplitName::TestUnseen => "test_unseen",
            SplitName::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev_seen" | "dev" => Ok(SplitName::DevSeen),
            "test_unseen" => Ok(SplitName::TestUnseen),
            "test" => Ok(SplitName::Test),
            other => Err(Error::arg(format!(
                "unknown split {other:?} (expected train, dev_seen, test_unseen or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Hmc,
    Harmeme,
    Synthetic,
}

impl DataSource {
    /// Published split sizes; `None` when the source has no fixed size.
    pub fn expected_len(self, split: SplitName) -> Option<usize> {
        match (self, split) {
            (DataSource::Hmc, SplitName::Train) => Some(8500),
            (DataSource::Hmc, SplitName::DevSeen) => Some(500),
            (DataSource::Hmc, SplitName::TestUnseen) => Some(2000),
            (DataSource::Harmeme, SplitName::Train) => Some(3013),
            (DataSource::Harmeme, SplitName::Test) => Some(354),
            _ => None,
        }
    }
}

/// An ordered, immutable list of records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub source: DataSource,
    pub records: Vec<MemeRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Moves a seed-chosen `fraction` of records into a held-out split. Both
    /// halves keep the original relative order.
    pub fn holdout(&self, fraction: f64, seed: u64, held_name: SplitName) -> (Self, Self) {
        let n = self.records.len();
        let k = ((n as f64) * fraction).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeded_rng(seed, "holdout"));
        let mut held_mask = vec![false; n];
        for &i in &idx[..k.min(n)] {
            held_mask[i] = true;
        }
        let mut rest = Vec::with_capacity(n - k);
        let mut held = Vec::with_capacity(k);
        for (r, h) in self.records.iter().zip(held_mask) {
            if h {
                held.push(r.clone());
            } else {
                rest.push(r.clone());
            }
        }
        (
            Self {
                name: self.name,
                source: self.source,
                records: rest,
            },
            Self {
                name: held_name,
                source: self.source,
                records: held,
            },
        )
    }
}

pub(crate) fn warn_on_size(source: DataSource, split: SplitName, got: usize) {
    if let Some(expected) = source.expected_len(split) {
        if expected != got {
            log::warn!(
                "{source:?} {split} split has {got} records, published size is {expected}"
            );
        }
    }
}

pub(crate) fn check_unique_id(
    seen: &mut std::collections::HashSet<String>,
    id: &str,
    path: &Path,
    line: usize,
) -> Result<()> {
    if !seen.insert(id.to_string()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("duplicate id {id:?}"),
        });
    }
    Ok(())
}

/// Reads a JSON id that may be a string or an integer.
pub(crate) fn json_id(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}
