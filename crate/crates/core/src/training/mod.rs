//! Two-stage training: stage 1 fits the visual projection under the
//! outer-product interaction head; stage 2 trains the text-side
//! projections and the Combiner with the visual projection frozen.

pub mod checkpoint;
pub mod features;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod runlog;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointManifest, ComponentEntry};
pub use features::{extract_features, extract_record, FrozenStack, SampleFeatures};
pub use loss::{bce_batch, bce_loss, PROB_EPS};
pub use model::{Fusion, LabeledVector, MemeModel, ModelSpec, Trainee, VectorHead};
pub use optim::AdamW;
pub use pipeline::{
    load_named_split, load_splits, run_stage1, run_stage2, run_training, PreparedData, Splits, StageSelect, TrainingRun,
};
pub use runlog::{JsonlRunLog, MemoryLog, NullLog, RunLog};
pub use trainer::{predict_probs, train_stage, train_step, EpochRecord, StageOutcome, StageSettings};
