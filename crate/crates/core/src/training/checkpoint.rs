//! Training checkpoints: `manifest.json` plus a verified `tensors.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::features::FrozenStack;
use super::model::{Fusion, MemeModel, COMBINER, INTERACTION_HEAD, PHI_PROJ, TEXTUAL_PROJ, VISUAL_PROJ};
use super::trainer::EpochRecord;
use crate::adapters::{ProjectionName, ProjectionParams};
use crate::archive::{read_blob, write_blob, NamedTensor, TensorData, TensorEntry, BLOB_FILE, MANIFEST_FILE};
use crate::backbone::load_backbone;
use crate::config::{PhiPlacement, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{CombinerParams, HeadParams, InteractionHeadParams};
use crate::inversion::PhiNetwork;
use crate::nn::{Linear, Params};

pub const CHECKPOINT_FORMAT: &str = "memefusion-checkpoint";
pub const PHI_COMPONENT: &str = "phi";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub frozen: bool,
    /// Which run produced the values: `stage1`, `stage2`, `joint`, `frozen`.
    pub provenance: String,
    pub tensors: Vec<String>,
}

/// The frozen encoder is referenced, not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneRef {
    pub name: String,
    pub d: usize,
    pub w: usize,
    pub context_len: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub backbone: BackboneRef,
    pub phi_source: String,
    pub phi_proj_placement: PhiPlacement,
    pub components: Vec<ComponentEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    pub metric_history: Vec<EpochRecord>,
    /// Training texts cut to fit the context window.
    pub truncated_texts: usize,
}

impl CheckpointManifest {
    pub fn component(&self, name: &str) -> Option<&ComponentEntry> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Compatibility(format!("config snapshot does not parse: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: MemeModel,
    pub phi: PhiNetwork,
}

/// Everything needed to write a checkpoint besides the model itself.
pub struct CheckpointInfo<'a> {
    pub stage: &'a str,
    pub config: &'a RunConfig,
    pub stack: &'a FrozenStack,
    pub provenance: BTreeMap<&'static str, String>,
    pub metric_history: Vec<EpochRecord>,
    pub truncated_texts: usize,
}

impl Checkpoint {
    pub fn build(model: MemeModel, info: CheckpointInfo<'_>) -> Result<Self> {
        let mut components = Vec::new();
        for (name, frozen, p) in model.components() {
            components.push(ComponentEntry {
                name: name.to_string(),
                frozen,
                provenance: info.provenance.get(name).cloned().unwrap_or_else(|| info.stage.to_string()),
                tensors: p.tensors(name).into_iter().map(|t| t.name).collect(),
            });
        }
        components.push(ComponentEntry {
            name: PHI_COMPONENT.to_string(),
            frozen: true,
            provenance: "frozen".to_string(),
            tensors: info.stack.phi.tensors(PHI_COMPONENT).into_iter().map(|t| t.name).collect(),
        });
        let meta = info.stack.backbone.meta();
        let eff = info.config.effective();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            stage: info.stage.to_string(),
            config_hash: info.config.hash(),
            config: serde_json::to_value(&eff)?,
            backbone: BackboneRef {
                name: meta.name.clone(),
                d: meta.d,
                w: meta.w,
                context_len: meta.context_len,
                fingerprint: info.stack.backbone.param_hash(),
            },
            phi_source: info.stack.phi_source.clone(),
            phi_proj_placement: model.placement,
            components,
            tensors: Vec::new(),
            blob_sha256: String::new(),
            metric_history: info.metric_history,
            truncated_texts: info.truncated_texts,
        };
        Ok(Self {
            manifest,
            model,
            phi: info.stack.phi.clone(),
        })
    }

    fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .model
            .tensors("")
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: TensorData::F64(t.data.to_vec()),
            })
            .collect();
        out.extend(self.phi.tensors(PHI_COMPONENT).into_iter().map(|t| NamedTensor {
            name: t.name,
            shape: t.shape,
            data: TensorData::F64(t.data.to_vec()),
        }));
        out
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        let (entries, sha) = write_blob(dir, &self.named_tensors())?;
        self.manifest.tensors = entries;
        self.manifest.blob_sha256 = sha;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::Corruption {
            path: dir.to_path_buf(),
            detail,
        };
        let raw = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| corrupt(format!("cannot read {MANIFEST_FILE}: {e}")))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&raw).map_err(|e| corrupt(format!("malformed {MANIFEST_FILE}: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unexpected format {:?}", manifest.format)));
        }
        if !dir.join(BLOB_FILE).is_file() {
            return Err(corrupt(format!("missing {BLOB_FILE}")));
        }
        let mut tensors = read_blob(dir, &manifest.tensors, &manifest.blob_sha256)?;
        let cfg = manifest.run_config()?;
        let dropout = cfg.effective().model.head_dropout;
        let mut reader = TensorReader {
            dir,
            tensors: &mut tensors,
        };
        let frozen = |name: &str| manifest.component(name).map(|c| c.frozen);
        let projection = |r: &mut TensorReader<'_>, name: &'static str, pname: ProjectionName| -> Result<ProjectionParams> {
            Ok(ProjectionParams {
                name: pname,
                linear: r.linear(name)?,
                frozen: frozen(name).ok_or_else(|| corrupt(format!("component {name} missing")))?,
            })
        };
        let visual_proj = projection(&mut reader, VISUAL_PROJ, ProjectionName::VisualProj)?;
        let textual_proj = projection(&mut reader, TEXTUAL_PROJ, ProjectionName::TextualProj)?;
        let phi_proj = match frozen(PHI_PROJ) {
            Some(_) => Some(projection(&mut reader, PHI_PROJ, ProjectionName::PhiProj)?),
            None => None,
        };
        let (fusion, fusion_frozen) = if let Some(f) = frozen(COMBINER) {
            let combiner = CombinerParams {
                text_branch: reader.linear("combiner.text_branch")?,
                image_branch: reader.linear("combiner.image_branch")?,
                gate_hidden: reader.linear("combiner.gate_hidden")?,
                gate_out: reader.linear("combiner.gate_out")?,
                residual_hidden: reader.linear("combiner.residual_hidden")?,
                residual_out: reader.linear("combiner.residual_out")?,
            };
            let head = HeadParams {
                hidden: reader.linear("head.hidden")?,
                out: reader.linear("head.out")?,
                dropout,
            };
            (Fusion::Combiner { combiner, head }, f)
        } else if let Some(f) = frozen(INTERACTION_HEAD) {
            let mlp = HeadParams {
                hidden: reader.linear("interaction_head.hidden")?,
                out: reader.linear("interaction_head.out")?,
                dropout,
            };
            let p = visual_proj.p_out();
            (Fusion::Interaction(InteractionHeadParams::from_mlp(p, mlp)?), f)
        } else {
            return Err(corrupt("no fusion component in manifest".into()));
        };
        let mut layers = Vec::new();
        while reader.has(&format!("phi.layers.{}.weight", layers.len())) {
            layers.push(reader.linear(&format!("phi.layers.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(corrupt("inversion network tensors missing".into()));
        }
        if let Some(extra) = reader.tensors.keys().next() {
            return Err(corrupt(format!("tensor {extra} belongs to no component")));
        }
        let model = MemeModel {
            visual_proj,
            textual_proj,
            phi_proj,
            fusion,
            fusion_frozen,
            placement: manifest.phi_proj_placement,
        };
        Ok(Self {
            manifest,
            model,
            phi: PhiNetwork { layers },
        })
    }

    /// Rebuilds the frozen stack this checkpoint was trained against and
    /// checks the backbone fingerprint.
    pub fn stack(&self) -> Result<FrozenStack> {
        let cfg = self.manifest.run_config()?;
        let backbone = load_backbone(&cfg.backbone_source())?;
        let fp = backbone.param_hash();
        if fp != self.manifest.backbone.fingerprint {
            return Err(Error::Compatibility(format!(
                "backbone fingerprint {fp} differs from the checkpoint's {}",
                self.manifest.backbone.fingerprint
            )));
        }
        FrozenStack::new(backbone, self.phi.clone(), self.manifest.phi_source.clone(), cfg.effective().model.template)
    }
}

struct TensorReader<'a> {
    dir: &'a Path,
    tensors: &'a mut BTreeMap<String, NamedTensor>,
}

impl TensorReader<'_> {
    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn take(&mut self, name: &str) -> Result<NamedTensor> {
        self.tensors.remove(name).ok_or_else(|| Error::Corruption {
            path: self.dir.to_path_buf(),
            detail: format!("tensor {name} missing"),
        })
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear> {
        let w = self.take(&format!("{prefix}.weight"))?;
        let b = self.take(&format!("{prefix}.bias"))?;
        let bad = |detail: String| Error::Corruption {
            path: self.dir.to_path_buf(),
            detail,
        };
        if w.shape.len() != 2 || b.shape != [w.shape[0]] {
            return Err(bad(format!("{prefix} has weight {:?} and bias {:?}", w.shape, b.shape)));
        }
        let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.into_f64()).map_err(|e| bad(e.to_string()))?;
        Ok(Linear {
            weight,
            bias: Array1::from_vec(b.data.into_f64()),
        })
    }
}
