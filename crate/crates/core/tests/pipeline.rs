mod common;

use memefusion_core::config::AblationFlags;
use memefusion_core::data::{generate_synthetic_confounders, load_hmc_split, write_hmc_dataset, SplitName};
use memefusion_core::eval::{run_baselines, ResultTable};
use memefusion_core::nn::Params;
use memefusion_core::training::model::{COMBINER, HEAD, INTERACTION_HEAD, VISUAL_PROJ};
use memefusion_core::training::pipeline::{load_splits, trainable_components};
use memefusion_core::training::{run_training, JsonlRunLog, MemoryLog, NullLog, StageSelect};
use memefusion_core::Error;

use common::{mock_config, prepare};

fn quick(extra: &[&str]) -> memefusion_core::config::RunConfig {
    let mut o = vec!["data.n=128", "train.stage1.epochs=2", "train.stage2.epochs=2"];
    o.extend_from_slice(extra);
    mock_config(&o)
}

#[test]
fn stage_one_trains_visual_projection_under_interaction_head() {
    let cfg = quick(&[]);
    let p = prepare(&cfg);
    let run = run_training(&cfg, &p.stack, &p.data, StageSelect::One, None, None, &mut NullLog).unwrap();
    assert!(run.final_model.is_none());
    let s1 = run.stage1.unwrap();
    assert_eq!(s1.manifest.stage, "stage1");
    assert!(s1.manifest.component(INTERACTION_HEAD).is_some());
    assert!(s1.manifest.component(COMBINER).is_none());
    assert!(trainable_components(&s1.model).contains(&VISUAL_PROJ));
}

#[test]
fn stage_two_trains_only_text_side_and_fusion() {
    let cfg = quick(&[]);
    let p = prepare(&cfg);
    let fin = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog)
        .unwrap()
        .final_model
        .unwrap();
    let mut trainable = trainable_components(&fin.model);
    trainable.sort_unstable();
    assert_eq!(trainable, vec![COMBINER, HEAD, "phi_proj", "textual_proj"]);
    let vp = fin.manifest.component(VISUAL_PROJ).unwrap();
    assert!(vp.frozen);
    assert_eq!(vp.provenance, "stage1");
}

#[test]
fn single_stage_ablation_trains_jointly() {
    let cfg = quick(&["ablation.use_two_stage=false"]);
    let p = prepare(&cfg);
    let run = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog).unwrap();
    assert!(run.stage1.is_none());
    let fin = run.final_model.unwrap();
    assert_eq!(fin.manifest.stage, "joint");
    assert!(!fin.manifest.component(VISUAL_PROJ).unwrap().frozen);
    assert!(matches!(
        run_training(&cfg, &p.stack, &p.data, StageSelect::One, None, None, &mut NullLog),
        Err(Error::Config { .. })
    ));
}

#[test]
fn run_log_records_every_step() {
    let cfg = quick(&[]);
    let p = prepare(&cfg);
    let mut log = MemoryLog::default();
    let fin = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut log)
        .unwrap()
        .final_model
        .unwrap();
    let last_step = fin.manifest.metric_history.iter().map(|r| r.step).max().unwrap();
    assert!(log.events.len() >= last_step);
    assert!(log.events.iter().all(|e| e.loss.is_finite() && e.lr > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut jsonl = JsonlRunLog::create(&path).unwrap();
    run_training(&cfg, &p.stack, &p.data, StageSelect::One, None, None, &mut jsonl).unwrap();
    drop(jsonl);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], "stage1");
    }
}

#[test]
fn diverging_run_is_reported() {
    let cfg = quick(&["train.stage1.lr=1e300", "train.grad_clip=1e300"]);
    let p = prepare(&cfg);
    let err = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn seeds_change_results() {
    let a = quick(&["seed=1"]);
    let b = quick(&["seed=2"]);
    let run = |cfg| {
        let p = prepare(cfg);
        run_training(cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog)
            .unwrap()
            .final_model
            .unwrap()
            .model
            .param_hash()
    };
    assert_ne!(run(&a), run(&b));
}

#[test]
fn baselines_table_has_every_mode() {
    let cfg = quick(&[]);
    let p = prepare(&cfg);
    let table: ResultTable = run_baselines(&cfg, &p.stack, &p.data, &p.test, "test_unseen", &mut NullLog).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, vec!["text_only", "image_only", "text_plus_ti", "sum"]);
    assert!(table.note.is_some());
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn ablation_labels_follow_grid() {
    let labels: Vec<String> = AblationFlags::GRID.iter().map(|f| f.label()).collect();
    assert_eq!(labels[0], "combiner=no two_stage=no textual_inversion=no");
    assert_eq!(labels[3], "combiner=yes two_stage=yes textual_inversion=yes");
}

#[test]
fn hmc_round_trip_through_disk() {
    let split = generate_synthetic_confounders(12, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut train = split.clone();
    train.name = SplitName::Train;
    let mut dev = split.clone();
    dev.name = SplitName::DevSeen;
    write_hmc_dataset(dir.path(), &[&train, &dev]).unwrap();
    let loaded = load_hmc_split(dir.path(), SplitName::Train).unwrap();
    assert_eq!(loaded.len(), 12);
    assert_eq!(loaded.labels(), split.labels());
    let texts: Vec<&str> = loaded.records.iter().map(|r| r.text.as_str()).collect();
    let want: Vec<&str> = split.records.iter().map(|r| r.text.as_str()).collect();
    assert_eq!(texts, want);

    let cfg = quick(&["data.source=\"hmc\""]).with_overrides(&[format!("data.root={:?}", dir.path())]).unwrap();
    let splits = load_splits(&cfg).unwrap();
    assert_eq!(splits.train.len(), 12);
    assert_eq!(splits.selection.name, SplitName::DevSeen);
    // the on-disk images decode to the rendered canvases
    let img = loaded.records[0].image_ref.load().unwrap();
    assert_eq!(img, split.records[0].image_ref.load().unwrap());
}

#[test]
fn missing_dataset_root_is_a_config_error() {
    let cfg = quick(&["data.source=\"hmc\""]);
    assert!(matches!(load_splits(&cfg), Err(Error::Config { .. })));
    let cfg = cfg.with_overrides(&["data.root=\"/nonexistent/memes\""]).unwrap();
    assert!(matches!(load_splits(&cfg), Err(Error::DatasetNotFound(_))));
}
