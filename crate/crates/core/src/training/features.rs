//! Frozen-encoder features, computed once per record.

use std::sync::Arc;

use ndarray::Array1;
use rayon::prelude::*;

use crate::backbone::{load_backbone, Backbone};
use crate::config::RunConfig;
use crate::data::{DatasetSplit, MemeRecord};
use crate::error::{Error, Result};
use crate::inversion::{PhiNetwork, PromptSkeleton, PromptTemplate};
use crate::nn::derive_seed;

/// Everything that stays frozen: encoder, inversion network, prompt template.
#[derive(Clone)]
pub struct FrozenStack {
    pub backbone: Arc<dyn Backbone>,
    pub phi: PhiNetwork,
    /// `stub` or the φ archive path.
    pub phi_source: String,
    pub template: PromptTemplate,
}

impl std::fmt::Debug for FrozenStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenStack")
            .field("backbone", self.backbone.meta())
            .field("phi_source", &self.phi_source)
            .field("template", &self.template)
            .finish()
    }
}

impl FrozenStack {
    pub fn new(backbone: Arc<dyn Backbone>, phi: PhiNetwork, phi_source: String, template: PromptTemplate) -> Result<Self> {
        let meta = backbone.meta();
        if phi.input_dim() != meta.d || phi.output_dim() != meta.w {
            return Err(Error::Compatibility(format!(
                "inversion network maps {} -> {}, backbone needs {} -> {}",
                phi.input_dim(),
                phi.output_dim(),
                meta.d,
                meta.w
            )));
        }
        Ok(Self {
            backbone,
            phi,
            phi_source,
            template,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.effective();
        let backbone = load_backbone(&cfg.backbone_source())?;
        let meta = backbone.meta().clone();
        let (phi, source) = match &cfg.phi.archive {
            Some(path) => {
                let dir = crate::backbone::resolve_archive_dir(path);
                (PhiNetwork::load(&dir)?, dir.display().to_string())
            }
            None => (
                PhiNetwork::stub(meta.d, meta.w, derive_seed(cfg.resolved_seed(), "phi-stub")),
                "stub".to_string(),
            ),
        };
        Self::new(backbone, phi, source, cfg.model.template.clone())
    }

    /// SHA-256 over the φ weights.
    pub fn phi_hash(&self) -> String {
        use crate::nn::Params;
        self.phi.param_hash()
    }
}

/// Frozen features of one record.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    pub id: String,
    pub label: Option<u8>,
    /// Image features (length d).
    pub visual: Array1<f64>,
    /// Features of the raw meme text (length d).
    pub text: Array1<f64>,
    /// Inversion prompt with the pseudo slot left empty.
    pub prompt: Option<PromptSkeleton>,
}

impl SampleFeatures {
    pub fn label(&self) -> u8 {
        self.label.unwrap_or(0)
    }
}

pub fn extract_record(stack: &FrozenStack, record: &MemeRecord, with_prompt: bool) -> Result<SampleFeatures> {
    let image = record.image_ref.load()?;
    let visual = stack.backbone.encode_image(&image)?.values;
    let text = stack.backbone.encode_text(&record.text)?.values;
    let prompt = if with_prompt {
        Some(PromptSkeleton::new(stack.backbone.as_ref(), &record.text, &stack.template)?)
    } else {
        None
    };
    Ok(SampleFeatures {
        id: record.id.clone(),
        label: record.label,
        visual,
        text,
        prompt,
    })
}

/// Extracts features for every record in parallel, preserving order.
pub fn extract_features(stack: &FrozenStack, split: &DatasetSplit, with_prompt: bool) -> Result<Vec<SampleFeatures>> {
    let out: Vec<SampleFeatures> = split
        .records
        .par_iter()
        .map(|r| extract_record(stack, r, with_prompt))
        .collect::<Result<_>>()?;
    let truncated = out
        .iter()
        .filter(|s| s.prompt.as_ref().is_some_and(|p| p.truncated))
        .count();
    if truncated > 0 {
        log::warn!("{truncated} meme texts in {} were cut to fit the context window", split.name);
    }
    Ok(out)
}

pub fn count_truncated(features: &[SampleFeatures]) -> usize {
    features
        .iter()
        .filter(|s| s.prompt.as_ref().is_some_and(|p| p.truncated))
        .count()
}
