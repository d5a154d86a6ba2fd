//! Run configuration: one JSON document, dotted `key=value` overrides, and
//! an effective form with every default filled in. The effective form is
//! what gets hashed and embedded in artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::InitScheme;
use crate::backbone::{resolve_archive_dir, BackboneKind, BackboneSource};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::inversion::PromptTemplate;
use crate::nn::sha256_hex;

pub const SEED_ENV: &str = "MEMEFUSION_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Weight archive directory (pretrained only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_len: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Mock,
            archive: None,
            seed: None,
            d: None,
            w: None,
            context_len: None,
        }
    }
}

/// `archive` absent selects the seeded stub.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Synthetic record count.
    #[serde(default = "default_synthetic_n")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fraction of train held out for selection when there is no dev split.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_synthetic_n() -> usize {
    1024
}
fn default_dev_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_holdout() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            n: default_synthetic_n(),
            seed: None,
            dev_fraction: default_dev_fraction(),
            test_fraction: default_test_fraction(),
            holdout_fraction: default_holdout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiPlacement {
    /// `φ(phi_proj(v))`.
    Input,
    /// `phi_proj(φ(v))`.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default = "default_interaction_hidden")]
    pub interaction_hidden: usize,
    #[serde(default = "default_dropout")]
    pub head_dropout: f64,
    #[serde(default = "default_placement")]
    pub phi_proj_placement: PhiPlacement,
    #[serde(default = "default_phi_init")]
    pub phi_proj_init: InitScheme,
    #[serde(default)]
    pub template: PromptTemplate,
}

fn default_interaction_hidden() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.1
}
fn default_placement() -> PhiPlacement {
    PhiPlacement::Input
}
fn default_phi_init() -> InitScheme {
    InitScheme::IdentityPadded
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p: None,
            h: None,
            interaction_hidden: default_interaction_hidden(),
            head_dropout: default_dropout(),
            phi_proj_placement: default_placement(),
            phi_proj_init: default_phi_init(),
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr")]
    pub weight_decay: f64,
    /// Hard cap on optimizer steps for the stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

fn default_lr() -> f64 {
    1e-4
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: None,
            lr: default_lr(),
            weight_decay: default_lr(),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSplit {
    /// Per-source default: dev_seen for HMC and synthetic data, a train
    /// holdout for HarMeme.
    Auto,
    DevSeen,
    Holdout,
    /// Select on the training data itself.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Keep training the visual projection during stage 2.
    #[serde(default)]
    pub finetune_visual_proj: bool,
    #[serde(default = "default_selection")]
    pub selection_split: SelectionSplit,
}

fn default_stage1() -> StageConfig {
    StageConfig::with_epochs(10)
}
fn default_stage2() -> StageConfig {
    StageConfig::with_epochs(20)
}
fn default_clip() -> f64 {
    1.0
}
fn default_selection() -> SelectionSplit {
    SelectionSplit::Auto
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: default_stage1(),
            stage2: default_stage2(),
            grad_clip: default_clip(),
            finetune_visual_proj: false,
            selection_split: default_selection(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "yes")]
    pub use_combiner: bool,
    #[serde(default = "yes")]
    pub use_two_stage: bool,
    #[serde(default = "yes")]
    pub use_textual_inversion: bool,
}

fn yes() -> bool {
    true
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self {
        use_combiner: true,
        use_two_stage: true,
        use_textual_inversion: true,
    };

    /// The four ablation rows: interaction-matrix base, then Combiner,
    /// two-stage training and textual inversion switched on in turn.
    pub const GRID: [Self; 4] = [
        Self {
            use_combiner: false,
            use_two_stage: false,
            use_textual_inversion: false,
        },
        Self {
            use_combiner: true,
            use_two_stage: false,
            use_textual_inversion: false,
        },
        Self {
            use_combiner: true,
            use_two_stage: true,
            use_textual_inversion: false,
        },
        Self::FULL,
    ];

    pub fn label(self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        format!(
            "combiner={} two_stage={} textual_inversion={}",
            mark(self.use_combiner),
            mark(self.use_two_stage),
            mark(self.use_textual_inversion)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_device")]
    pub device: String,
}

fn default_device() -> String {
    "cpu".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            phi: PhiConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            seed: None,
            device: default_device(),
        }
    }
}

fn value_err(e: serde_json::Error) -> Error {
    // serde reports unknown fields and type errors with the offending name in the text
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<root>".into());
    Error::config(key, msg)
}

/// Sets `a.b.c` in a JSON object tree, creating intermediate objects.
fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::config(key, "empty path segment"));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is below a non-object value")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(pair: &str) -> Result<(String, Value)> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::config(pair, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(pair, "override key is empty"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(value_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        cfg.rebase_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Resolves relative data paths against the config file's directory.
    /// Relative archive paths are only rebased when the rebased path exists,
    /// so bare archive names still fall through to `MEMEFUSION_CACHE`.
    fn rebase_paths(&mut self, base: &Path) {
        if let Some(root) = &self.data.root {
            if root.is_relative() {
                self.data.root = Some(base.join(root));
            }
        }
        for archive in [&mut self.backbone.archive, &mut self.phi.archive] {
            if let Some(p) = archive.as_ref().filter(|p| p.is_relative()) {
                let rebased = base.join(p);
                if rebased.exists() {
                    *archive = Some(rebased);
                }
            }
        }
    }

    pub fn with_overrides<S: AsRef<str>>(&self, pairs: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for pair in pairs {
            let (key, value) = parse_override(pair.as_ref())?;
            set_dotted(&mut tree, &key, value)?;
        }
        serde_json::from_value(tree).map_err(value_err)
    }

    pub fn resolved_seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok()))
            .unwrap_or(0)
    }

    /// Fills every default that depends on other fields.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        let seed = self.resolved_seed();
        cfg.seed = Some(seed);
        let mock = cfg.backbone.kind == BackboneKind::Mock;
        if mock {
            cfg.backbone.seed.get_or_insert(seed);
            cfg.backbone.d.get_or_insert(32);
            cfg.backbone.w.get_or_insert(32);
            cfg.backbone.context_len.get_or_insert(77);
        }
        let p = *cfg.model.p.get_or_insert(if mock { 16 } else { 1024 });
        cfg.model.h.get_or_insert(p);
        let batch = if mock { 16 } else { 64 };
        cfg.train.stage1.batch_size.get_or_insert(batch);
        cfg.train.stage2.batch_size.get_or_insert(batch);
        if cfg.data.source == DataSource::Synthetic {
            cfg.data.seed.get_or_insert(seed);
        }
        cfg
    }

    /// Canonical JSON of the effective config (sorted keys, compact).
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self.effective())
            .expect("config serializes")
            .to_string()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Checks values and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.effective();
        match cfg.backbone.kind {
            BackboneKind::Pretrained => {
                let archive = cfg
                    .backbone
                    .archive
                    .as_ref()
                    .ok_or_else(|| Error::config("backbone.archive", "required for pretrained backbones"))?;
                let dir = resolve_archive_dir(archive);
                if !dir.is_dir() {
                    return Err(Error::config(
                        "backbone.archive",
                        format!("{} does not exist", dir.display()),
                    ));
                }
            }
            BackboneKind::Mock => {
                if cfg.backbone.archive.is_some() {
                    return Err(Error::config("backbone.archive", "not used by the mock backbone"));
                }
            }
        }
        if let Some(phi) = &cfg.phi.archive {
            let dir = resolve_archive_dir(phi);
            if !dir.is_dir() {
                return Err(Error::config(
                    "phi.archive",
                    format!("{} does not exist", dir.display()),
                ));
            }
        }
        match cfg.data.source {
            DataSource::Synthetic => {
                if cfg.data.n < 4 {
                    return Err(Error::config("data.n", "synthetic data needs at least 4 records"));
                }
            }
            DataSource::Hmc | DataSource::Harmeme => {
                let root = cfg
                    .data
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::config("data.root", "required for on-disk datasets"))?;
                if !root.is_dir() {
                    return Err(Error::config(
                        "data.root",
                        format!("{} does not exist", root.display()),
                    ));
                }
            }
        }
        let frac = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{v} is outside [0, 1)")))
            }
        };
        frac("data.dev_fraction", cfg.data.dev_fraction)?;
        frac("data.test_fraction", cfg.data.test_fraction)?;
        frac("data.holdout_fraction", cfg.data.holdout_fraction)?;
        frac("model.head_dropout", cfg.model.head_dropout)?;
        if cfg.model.p == Some(0) || cfg.model.h == Some(0) {
            return Err(Error::config("model.p", "projection dimensions must be positive"));
        }
        for (name, st) in [("train.stage1", &cfg.train.stage1), ("train.stage2", &cfg.train.stage2)] {
            if st.batch_size == Some(0) {
                return Err(Error::config(format!("{name}.batch_size"), "must be positive"));
            }
            if !(st.lr.is_finite() && st.lr > 0.0) {
                return Err(Error::config(format!("{name}.lr"), "must be a positive number"));
            }
            if !(st.weight_decay.is_finite() && st.weight_decay >= 0.0) {
                return Err(Error::config(format!("{name}.weight_decay"), "must be non-negative"));
            }
        }
        if !(cfg.train.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn backbone_source(&self) -> BackboneSource {
        let cfg = self.effective();
        match cfg.backbone.kind {
            BackboneKind::Pretrained => BackboneSource::Archive(resolve_archive_dir(
                cfg.backbone.archive.as_deref().unwrap_or(Path::new("")),
            )),
            BackboneKind::Mock => BackboneSource::Mock {
                seed: cfg.backbone.seed.unwrap_or(0),
                d: cfg.backbone.d.unwrap_or(32),
                w: cfg.backbone.w.unwrap_or(32),
                context_len: cfg.backbone.context_len.unwrap_or(77),
            },
        }
    }

    pub fn p(&self) -> usize {
        self.effective().model.p.unwrap_or(16)
    }

    pub fn h(&self) -> usize {
        self.effective().model.h.unwrap_or(16)
    }
}
