//! Config-driven runs: split loading, the two stages, and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint::{Checkpoint, CheckpointInfo};
use super::features::{count_truncated, extract_features, FrozenStack, SampleFeatures};
use super::model::{MemeModel, ModelSpec, VISUAL_PROJ};
use super::runlog::RunLog;
use super::trainer::{train_stage, StageSettings};
use crate::config::{RunConfig, SelectionSplit, StageConfig};
use crate::data::{
    generate_synthetic_confounders, load_harmeme_split, load_hmc_split, partition_synthetic, DataSource, DatasetSplit,
    SplitName,
};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";
pub const JOINT: &str = "joint";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetSplit,
    pub selection: DatasetSplit,
    /// Held-out evaluation split, when the source has one on disk.
    pub test: Option<DatasetSplit>,
}

fn synthetic_parts(cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    let eff = cfg.effective();
    let all = generate_synthetic_confounders(eff.data.n, eff.data.seed.unwrap_or(0))?;
    partition_synthetic(&all, eff.data.dev_fraction, eff.data.test_fraction)
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Error::config("data.root", "required for on-disk datasets"))
}

/// Loads one named split as the config describes it.
pub fn load_named_split(cfg: &RunConfig, split: SplitName) -> Result<DatasetSplit> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let (train, dev, test) = synthetic_parts(cfg)?;
            Ok(match split {
                SplitName::Train => train,
                SplitName::DevSeen => dev,
                SplitName::TestUnseen | SplitName::Test => test,
            })
        }
        DataSource::Hmc => load_hmc_split(data_root(cfg)?, split),
        DataSource::Harmeme => load_harmeme_split(data_root(cfg)?, split),
    }
}

/// The default evaluation split for a source.
pub fn test_split_name(source: DataSource) -> SplitName {
    match source {
        DataSource::Harmeme => SplitName::Test,
        _ => SplitName::TestUnseen,
    }
}

/// Train, model-selection and test splits for a run.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let eff = cfg.effective();
    let seed = eff.resolved_seed();
    let (train, dev, test) = match eff.data.source {
        DataSource::Synthetic => {
            let (a, b, c) = synthetic_parts(&eff)?;
            (a, Some(b), Some(c))
        }
        DataSource::Hmc => {
            let root = data_root(&eff)?;
            let test_path = root.join(SplitName::TestUnseen.file_name());
            (
                load_hmc_split(root, SplitName::Train)?,
                Some(load_hmc_split(root, SplitName::DevSeen)?),
                test_path.is_file().then(|| load_hmc_split(root, SplitName::TestUnseen)).transpose()?,
            )
        }
        DataSource::Harmeme => {
            let root = data_root(&eff)?;
            let test_path = root.join(SplitName::Test.file_name());
            (
                load_harmeme_split(root, SplitName::Train)?,
                None,
                test_path.is_file().then(|| load_harmeme_split(root, SplitName::Test)).transpose()?,
            )
        }
    };
    let holdout = |train: &DatasetSplit| train.holdout(eff.data.holdout_fraction, derive_seed(seed, "selection-holdout"), SplitName::DevSeen);
    let (train, selection) = match (eff.train.selection_split, dev) {
        (SelectionSplit::Auto | SelectionSplit::DevSeen, Some(dev)) => (train, dev),
        (SelectionSplit::DevSeen, None) => {
            return Err(Error::config("train.selection_split", "this dataset has no dev_seen split"));
        }
        (SelectionSplit::Auto | SelectionSplit::Holdout, None) | (SelectionSplit::Holdout, Some(_)) => holdout(&train),
        (SelectionSplit::Train, _) => (train.clone(), train),
    };
    Ok(Splits { train, selection, test })
}

/// Frozen features for the train and selection splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SampleFeatures>,
    pub selection: Vec<SampleFeatures>,
}

impl PreparedData {
    pub fn extract(stack: &FrozenStack, splits: &Splits) -> Result<Self> {
        Ok(Self {
            train: extract_features(stack, &splits.train, true)?,
            selection: extract_features(stack, &splits.selection, true)?,
        })
    }
}

pub fn stage_settings(cfg: &RunConfig, stage: &str) -> StageSettings {
    let eff = cfg.effective();
    let st: &StageConfig = if stage == STAGE1 { &eff.train.stage1 } else { &eff.train.stage2 };
    StageSettings {
        stage: stage.to_string(),
        epochs: st.epochs,
        batch_size: st.batch_size.unwrap_or(16),
        lr: st.lr,
        weight_decay: st.weight_decay,
        grad_clip: eff.train.grad_clip,
        max_steps: st.max_steps,
        seed: derive_seed(eff.resolved_seed(), stage),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    One,
    Two,
    All,
}

impl std::str::FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "all" => Ok(Self::All),
            other => Err(Error::arg(format!("unknown stage {other:?} (expected 1, 2 or all)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingRun {
    pub stage1: Option<Checkpoint>,
    pub final_model: Option<Checkpoint>,
}

fn info<'a>(
    stage: &'a str,
    cfg: &'a RunConfig,
    stack: &'a FrozenStack,
    provenance: BTreeMap<&'static str, String>,
    history: Vec<super::trainer::EpochRecord>,
    data: &PreparedData,
) -> CheckpointInfo<'a> {
    CheckpointInfo {
        stage,
        config: cfg,
        stack,
        provenance,
        metric_history: history,
        truncated_texts: count_truncated(&data.train),
    }
}

/// Stage 1: the visual projection under the interaction head.
pub fn run_stage1(cfg: &RunConfig, stack: &FrozenStack, data: &PreparedData, log: &mut dyn RunLog) -> Result<Checkpoint> {
    let spec = ModelSpec::from_config(cfg, stack.backbone.meta());
    let model = MemeModel::stage1(&spec, derive_seed(cfg.resolved_seed(), STAGE1))?;
    let settings = stage_settings(cfg, STAGE1);
    let out = train_stage(model, stack, &data.train, &data.selection, &settings, log)?;
    Checkpoint::build(out.best, info(STAGE1, cfg, stack, BTreeMap::new(), out.history, data))
}

/// Refuses a stage-1 checkpoint trained against a different encoder or
/// projection size.
pub fn check_stage1_compat(cfg: &RunConfig, stack: &FrozenStack, stage1: &Checkpoint) -> Result<()> {
    let m = &stage1.manifest;
    if m.stage != STAGE1 {
        return Err(Error::Compatibility(format!("expected a stage1 checkpoint, got {:?}", m.stage)));
    }
    let fp = stack.backbone.param_hash();
    if m.backbone.fingerprint != fp {
        return Err(Error::Compatibility(format!(
            "stage-1 checkpoint was trained on backbone {}, config loads {fp}",
            m.backbone.fingerprint
        )));
    }
    let vp = &stage1.model.visual_proj;
    let (d, p) = (stack.backbone.meta().d, cfg.p());
    if vp.p_in() != d || vp.p_out() != p {
        return Err(Error::Compatibility(format!(
            "stage-1 visual projection is {} -> {}, config needs {d} -> {p}",
            vp.p_in(),
            vp.p_out()
        )));
    }
    Ok(())
}

/// Stage 2 (or the single joint stage when two-stage training is off).
pub fn run_stage2(
    cfg: &RunConfig,
    stack: &FrozenStack,
    data: &PreparedData,
    stage1: Option<&Checkpoint>,
    log: &mut dyn RunLog,
) -> Result<Checkpoint> {
    let eff = cfg.effective();
    let spec = ModelSpec::from_config(cfg, stack.backbone.meta());
    let seed = eff.resolved_seed();
    let mut model = MemeModel::fresh(&spec, derive_seed(seed, "final-model"))?;
    let mut provenance = BTreeMap::new();
    let (stage, history_prefix) = if eff.ablation.use_two_stage {
        let s1 = stage1.ok_or_else(|| Error::Compatibility("stage 2 needs a stage-1 checkpoint".into()))?;
        check_stage1_compat(cfg, stack, s1)?;
        model.visual_proj = s1.model.visual_proj.clone().set_frozen(!eff.train.finetune_visual_proj);
        provenance.insert(VISUAL_PROJ, STAGE1.to_string());
        (STAGE2, s1.manifest.metric_history.clone())
    } else {
        (JOINT, Vec::new())
    };
    if model.uses_inversion() && data.train.iter().any(|s| s.prompt.is_none()) {
        return Err(Error::arg("textual inversion needs features extracted with prompts"));
    }
    let settings = stage_settings(cfg, stage);
    let out = train_stage(model, stack, &data.train, &data.selection, &settings, log)?;
    let mut history = history_prefix;
    history.extend(out.history);
    Checkpoint::build(out.best, info(stage, cfg, stack, provenance, history, data))
}

/// Runs the requested stages and writes `<out>/stage1` and `<out>/final`.
pub fn run_training(
    cfg: &RunConfig,
    stack: &FrozenStack,
    data: &PreparedData,
    select: StageSelect,
    init: Option<Checkpoint>,
    out_dir: Option<&Path>,
    log: &mut dyn RunLog,
) -> Result<TrainingRun> {
    let two_stage = cfg.effective().ablation.use_two_stage;
    let mut run = TrainingRun::default();
    if select == StageSelect::One && !two_stage {
        return Err(Error::config("ablation.use_two_stage", "stage 1 only exists with two-stage training"));
    }
    let stage1 = if two_stage && select != StageSelect::Two {
        let mut ck = run_stage1(cfg, stack, data, log)?;
        if let Some(dir) = out_dir {
            ck.save(&dir.join(STAGE1))?;
        }
        Some(ck)
    } else {
        init
    };
    if select != StageSelect::One {
        let mut ck = run_stage2(cfg, stack, data, stage1.as_ref(), log)?;
        if let Some(dir) = out_dir {
            ck.save(&dir.join("final"))?;
        }
        run.final_model = Some(ck);
    }
    run.stage1 = stage1;
    Ok(run)
}

/// Probabilities of a trained model on prepared features.
pub fn score_features(model: &MemeModel, stack: &FrozenStack, features: &[SampleFeatures]) -> Result<Vec<f64>> {
    super::trainer::predict_probs(model, stack, features)
}

/// Used by tests that need the trainable component names of a stage.
pub fn trainable_components(model: &MemeModel) -> Vec<&'static str> {
    model
        .components()
        .into_iter()
        .filter(|(_, frozen, _)| !frozen)
        .map(|(n, _, _)| n)
        .collect()
}
