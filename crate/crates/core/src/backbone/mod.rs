//! Frozen vision-language encoders.
//!
//! The text path is split at the token-embedding level: `tokenize` →
//! `embed_tokens` → `encode_token_embeddings`. Pseudo-word tokens are spliced
//! into the embedding sequence between the last two steps, which is why the
//! encoder is exposed on embeddings rather than strings.

mod bpe;
pub mod clip;
mod mock;

use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::BpeTokenizer;
pub use clip::{resolve_archive_dir, ClipBackbone};
pub use mock::{MockBackbone, MOCK_VOCAB_SIZE};

/// Dimensions shared by everything a backbone produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneMeta {
    /// Joint image-text embedding dimension.
    pub d: usize,
    /// Token-embedding dimension.
    pub w: usize,
    pub context_len: usize,
    pub name: String,
}

impl BackboneMeta {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.w == 0 || self.context_len < 8 {
            return Err(Error::arg(format!(
                "backbone dims must satisfy d > 0, w > 0, context_len >= 8 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Array1<f64>,
    pub modality: Modality,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Token ids with start and end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    /// Content was cut to fit the context window.
    pub truncated: bool,
}

/// Output of the embedding lookup: one row per occupied position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    /// `length × w`.
    pub embeddings: Array2<f64>,
    pub eot_index: usize,
    /// Position holding a pseudo-word vector, if any.
    pub pseudo_slot: Option<usize>,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub(crate) fn check(&self, meta: &BackboneMeta) -> Result<()> {
        let (len, width) = self.embeddings.dim();
        if width != meta.w {
            return Err(Error::shape(format!(
                "token embeddings have width {width}, backbone expects {}",
                meta.w
            )));
        }
        if len == 0 || len > meta.context_len {
            return Err(Error::shape(format!(
                "sequence length {len} outside 1..={}",
                meta.context_len
            )));
        }
        if self.eot_index >= len {
            return Err(Error::shape(format!(
                "eot index {} not below length {len}",
                self.eot_index
            )));
        }
        Ok(())
    }
}

/// The frozen encoder contract.
pub trait Backbone: Send + Sync {
    fn meta(&self) -> &BackboneMeta;

    fn vocab_size(&self) -> usize;

    fn sot(&self) -> u32;

    fn eot(&self) -> u32;

    /// Content token ids of `text` with no markers and no truncation.
    fn encode_words(&self, text: &str) -> Vec<u32>;

    fn encode_image(&self, image: &RgbImage) -> Result<FeatureVector>;

    fn embed_tokens(&self, ids: &[u32]) -> Result<TokenEmbeddingSequence>;

    fn encode_token_embeddings(&self, seq: &TokenEmbeddingSequence) -> Result<FeatureVector>;

    /// One-shot text encoding straight from the string.
    fn encode_text(&self, text: &str) -> Result<FeatureVector>;

    /// Gradient of a scalar loss with respect to every embedding row, given
    /// the gradient with respect to `encode_token_embeddings(seq)`.
    fn text_vjp(
        &self,
        seq: &TokenEmbeddingSequence,
        grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>>;

    /// SHA-256 over every weight, recomputed on each call.
    fn param_hash(&self) -> String;

    /// `[SOT, content.., EOT]`; over-long content is cut so the sequence
    /// fills the context window exactly and still ends with EOT.
    fn tokenize(&self, text: &str) -> Tokens {
        let mut content = self.encode_words(text);
        let max_content = self.meta().context_len - 2;
        let truncated = content.len() > max_content;
        content.truncate(max_content);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(self.sot());
        ids.extend(content);
        ids.push(self.eot());
        Tokens { ids, truncated }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Pretrained,
    Mock,
}

/// What to load: a weight archive directory or a seeded mock.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    Archive(PathBuf),
    Mock {
        seed: u64,
        d: usize,
        w: usize,
        context_len: usize,
    },
}

impl BackboneSource {
    pub fn mock(seed: u64) -> Self {
        BackboneSource::Mock {
            seed,
            d: 32,
            w: 32,
            context_len: 77,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneSource::Archive(_) => BackboneKind::Pretrained,
            BackboneSource::Mock { .. } => BackboneKind::Mock,
        }
    }
}

pub fn load_backbone(source: &BackboneSource) -> Result<Arc<dyn Backbone>> {
    match source {
        BackboneSource::Archive(dir) => Ok(Arc::new(ClipBackbone::load(dir)?)),
        BackboneSource::Mock {
            seed,
            d,
            w,
            context_len,
        } => Ok(Arc::new(MockBackbone::new(*seed, *d, *w, *context_len)?)),
    }
}
