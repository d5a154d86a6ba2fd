//! Full-split evaluation, the baseline battery and the ablation grid.

use std::path::Path;

use rayon::prelude::*;

use super::metrics::{accuracy, auroc, roc_curve};
use super::report::{MetricsReport, ResultTable, SampleRecord, TableRow};
use crate::config::{AblationFlags, RunConfig};
use crate::data::{DatasetSplit, MemeRecord};
use crate::error::{Error, Result};
use crate::fusion::{baseline_fuse, BaselineInputs, BaselineMode, HeadParams};
use crate::backbone::{FeatureVector, Modality};
use crate::nn::{derive_seed, seeded_rng};
use crate::training::features::{extract_features, FrozenStack, SampleFeatures};
use crate::training::model::{LabeledVector, MemeModel, VectorHead};
use crate::training::pipeline::{run_training, stage_settings, PreparedData, StageSelect, STAGE2};
use crate::training::{predict_probs, train_stage, Checkpoint, RunLog};

/// Anything that maps records to probabilities.
pub trait Scorer {
    fn score(&self, records: &[MemeRecord]) -> Result<Vec<f64>>;
    fn config_hash(&self) -> String;
}

/// A trained model with the frozen stack it was trained against.
pub struct TrainedScorer {
    pub stack: FrozenStack,
    pub model: MemeModel,
    pub config_hash: String,
}

impl TrainedScorer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            stack: ck.stack()?,
            model: ck.model.clone(),
            config_hash: ck.manifest.config_hash.clone(),
        })
    }

    pub fn score_features(&self, features: &[SampleFeatures]) -> Result<Vec<f64>> {
        predict_probs(&self.model, &self.stack, features)
    }
}

impl Scorer for TrainedScorer {
    fn score(&self, records: &[MemeRecord]) -> Result<Vec<f64>> {
        let split = DatasetSplit {
            name: crate::data::SplitName::Test,
            source: crate::data::DataSource::Synthetic,
            records: records.to_vec(),
        };
        let features = extract_features(&self.stack, &split, self.model.uses_inversion())?;
        self.score_features(&features)
    }

    fn config_hash(&self) -> String {
        self.config_hash.clone()
    }
}

/// Builds a report from scores on a labeled split.
pub fn report_from_scores(split: &str, ids: &[String], scores: &[f64], labels: &[u8], config_hash: &str) -> Result<MetricsReport> {
    let acc = accuracy(scores, labels, 0.5)?;
    let (auc, roc) = match auroc(scores, labels) {
        Ok(a) => (Some(a), roc_curve(scores, labels)?),
        Err(Error::UndefinedMetric(_)) => (None, Vec::new()),
        Err(e) => return Err(e),
    };
    let records = ids
        .iter()
        .zip(scores.iter().zip(labels))
        .map(|(id, (&score, &label))| SampleRecord {
            id: id.clone(),
            score,
            label,
            prediction: u8::from(score >= 0.5),
        })
        .collect();
    Ok(MetricsReport {
        split: split.to_string(),
        n: scores.len(),
        accuracy: acc,
        auroc: auc,
        config_hash: config_hash.to_string(),
        records,
        roc,
    })
}

/// Scores every record of a labeled split in inference mode.
pub fn evaluate(scorer: &dyn Scorer, split: &DatasetSplit) -> Result<MetricsReport> {
    let labels = split
        .labels()
        .ok_or_else(|| Error::arg(format!("split {} is unlabeled; use predict for unlabeled input", split.name)))?;
    let scores = scorer.score(&split.records)?;
    let ids: Vec<String> = split.records.iter().map(|r| r.id.clone()).collect();
    report_from_scores(split.name.as_str(), &ids, &scores, &labels, &scorer.config_hash())
}

fn labels_of(features: &[SampleFeatures]) -> Result<Vec<u8>> {
    features
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::arg(format!("record {} is unlabeled", s.id))))
        .collect()
}

fn table_row(name: String, probs: &[f64], labels: &[u8], config_hash: String, checkpoint: Option<String>) -> Result<TableRow> {
    let auc = match auroc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TableRow {
        name,
        n: probs.len(),
        accuracy: accuracy(probs, labels, 0.5)?,
        auroc: auc,
        config_hash,
        checkpoint,
    })
}

/// The vector a baseline head sees for one record.
pub fn baseline_vector(stack: &FrozenStack, mode: BaselineMode, s: &SampleFeatures) -> Result<ndarray::Array1<f64>> {
    let visual = FeatureVector {
        values: s.visual.clone(),
        modality: Modality::Visual,
    };
    let textual = FeatureVector {
        values: s.text.clone(),
        modality: Modality::Textual,
    };
    let inverted = if mode == BaselineMode::TextPlusTi {
        let skeleton = s
            .prompt
            .as_ref()
            .ok_or_else(|| Error::arg(format!("record {} has no inversion prompt", s.id)))?;
        let pseudo = stack.phi.forward(s.visual.view());
        Some(stack.backbone.encode_token_embeddings(&skeleton.fill(pseudo.view())?)?)
    } else {
        None
    };
    baseline_fuse(
        mode,
        BaselineInputs {
            visual: Some(&visual),
            textual: Some(&textual),
            inverted_text: inverted.as_ref(),
        },
    )
}

fn baseline_samples(stack: &FrozenStack, mode: BaselineMode, features: &[SampleFeatures]) -> Result<Vec<LabeledVector>> {
    features
        .par_iter()
        .map(|s| {
            Ok(LabeledVector {
                id: s.id.clone(),
                x: baseline_vector(stack, mode, s)?,
                label: s.label(),
            })
        })
        .collect()
}

pub const SHARED_PROTOCOL_NOTE: &str =
    "All rows share one protocol: the same classification head, optimizer settings, epochs and selection split.";

/// Trains one classification head per baseline mode on frozen features
/// and scores it on `test`. Rows follow [`BaselineMode::ALL`].
pub fn run_baselines(
    cfg: &RunConfig,
    stack: &FrozenStack,
    data: &PreparedData,
    test: &[SampleFeatures],
    test_name: &str,
    log: &mut dyn RunLog,
) -> Result<ResultTable> {
    let eff = cfg.effective();
    let labels = labels_of(test)?;
    let mut rows = Vec::new();
    for mode in BaselineMode::ALL {
        let train = baseline_samples(stack, mode, &data.train)?;
        let selection = baseline_samples(stack, mode, &data.selection)?;
        let test_x = baseline_samples(stack, mode, test)?;
        let dim = train.first().map(|s| s.x.len()).unwrap_or(stack.backbone.meta().d);
        let seed = derive_seed(eff.resolved_seed(), &format!("baseline-{}", mode.as_str()));
        let model = VectorHead {
            head: HeadParams::new(dim, eff.model.head_dropout, &mut seeded_rng(seed, "head")),
        };
        let mut settings = stage_settings(cfg, STAGE2);
        settings.stage = format!("baseline-{}", mode.as_str());
        settings.seed = seed;
        let out = train_stage(model, &(), &train, &selection, &settings, log)?;
        let probs = predict_probs(&out.best, &(), &test_x)?;
        rows.push(table_row(mode.as_str().to_string(), &probs, &labels, cfg.hash(), None)?);
    }
    Ok(ResultTable {
        title: "Baselines".into(),
        split: test_name.to_string(),
        rows,
        note: Some(SHARED_PROTOCOL_NOTE.into()),
    })
}

/// Config of ablation row `k` (0-based): the base config with that row's flags.
pub fn ablation_config(cfg: &RunConfig, flags: AblationFlags) -> RunConfig {
    let mut row = cfg.clone();
    row.ablation = flags;
    row
}

/// Trains and scores the four ablation rows. With `out_dir`, row `k`
/// writes its checkpoints under `<out_dir>/row{k}`.
pub fn run_ablation(
    cfg: &RunConfig,
    stack: &FrozenStack,
    data: &PreparedData,
    test: &[SampleFeatures],
    test_name: &str,
    out_dir: Option<&Path>,
    log: &mut dyn RunLog,
) -> Result<ResultTable> {
    let labels = labels_of(test)?;
    let mut rows = Vec::new();
    for (k, flags) in AblationFlags::GRID.into_iter().enumerate() {
        let row_cfg = ablation_config(cfg, flags);
        let row_dir = out_dir.map(|d| d.join(format!("row{}", k + 1)));
        let run = run_training(&row_cfg, stack, data, StageSelect::All, None, row_dir.as_deref(), log)?;
        let ck = run.final_model.expect("stage all produces a final model");
        let probs = predict_probs(&ck.model, stack, test)?;
        let checkpoint = row_dir.map(|d| d.join("final").display().to_string());
        rows.push(table_row(flags.label(), &probs, &labels, row_cfg.hash(), checkpoint)?);
    }
    Ok(ResultTable {
        title: "Ablation".into(),
        split: test_name.to_string(),
        rows,
        note: None,
    })
}
