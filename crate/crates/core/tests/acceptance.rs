//! End-to-end acceptance gate. Every criterion runs even when an earlier
//! one fails; each prints one PASS/FAIL line straight to stderr so the
//! summary is visible without `--nocapture`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use memefusion_core::backbone::{Backbone, MockBackbone};
use memefusion_core::data::{generate_synthetic_confounders, render_synthetic_image};
use memefusion_core::eval::{accuracy, auroc, run_ablation, run_baselines};
use memefusion_core::fusion::{combine, CombinerParams, HeadParams};
use memefusion_core::inversion::{encode_multimodal_text, PhiNetwork, PromptTemplate};
use memefusion_core::nn::{derive_seed, relu, seeded_rng, sigmoid, Params};
use memefusion_core::training::model::{COMBINER, HEAD, INTERACTION_HEAD, PHI_PROJ, TEXTUAL_PROJ, VISUAL_PROJ};
use memefusion_core::training::{
    bce_loss, extract_features, predict_probs, run_training, Checkpoint, MemeModel, ModelSpec, NullLog, PreparedData,
    StageSelect,
};
use ndarray::Array1;
use rand::Rng;

use common::{brute_force_auroc, labels, mock_config, prepare};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(1, "acceptance-auroc");
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        // a coarse grid forces ties
        let levels = rng.random_range(2..=20);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let fast = auroc(&s, &y).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute_force_auroc(&s, &y)).abs());
    }
    check(worst <= 1e-12, format!("max |rank - pairwise| = {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max deviation {worst:e} in {:.2?}", start.elapsed()))
}

fn hand_check_auroc() -> Outcome {
    let a = auroc(&[0.2, 0.7, 0.4, 0.6], &[0, 1, 1, 0]).map_err(|e| e.to_string())?;
    check(a == 0.75, format!("got {a}"))?;
    Ok("auroc = 0.75".into())
}

fn random_text(rng: &mut impl Rng) -> String {
    const PIECES: [&str; 16] = [
        "hate", "love", "the", "Meme", "ÉMOJI", "🙂", "don't", "123", "?!", ",", "über", "   ", "cat", "DOG", "#tag", "it's",
    ];
    let n = rng.random_range(0..40);
    (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect::<Vec<_>>().join(" ")
}

fn factorization_exactness() -> Outcome {
    let backbone = MockBackbone::new(0, 32, 32, 77).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(3, "acceptance-strings");
    for _ in 0..100 {
        let text = random_text(&mut rng);
        let direct = backbone.encode_text(&text).map_err(|e| e.to_string())?;
        let seq = backbone.embed_tokens(&backbone.tokenize(&text).ids).map_err(|e| e.to_string())?;
        let staged = backbone.encode_token_embeddings(&seq).map_err(|e| e.to_string())?;
        let same = direct.values.iter().zip(&staged.values).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same && direct.len() == staged.len(), format!("mismatch for {text:?}"))?;
    }
    Ok("100 strings bit-identical".into())
}

fn freezing_discipline() -> Outcome {
    let start = Instant::now();
    let cfg = mock_config(&[]);
    let p = prepare(&cfg);
    let backbone_before = p.stack.backbone.param_hash();
    let phi_before = p.stack.phi_hash();
    let spec = ModelSpec::from_config(&cfg, p.stack.backbone.meta());
    let initial = MemeModel::fresh(&spec, derive_seed(cfg.resolved_seed(), "final-model")).map_err(|e| e.to_string())?;
    let run = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog).map_err(|e| e.to_string())?;
    let stage1 = run.stage1.ok_or("no stage-1 checkpoint")?;
    let fin = run.final_model.ok_or("no final checkpoint")?;

    check(p.stack.backbone.param_hash() == backbone_before, "backbone changed")?;
    check(p.stack.phi_hash() == phi_before && fin.phi.param_hash() == phi_before, "phi changed")?;
    check(
        stage1.model.component_hash(VISUAL_PROJ) == fin.model.component_hash(VISUAL_PROJ),
        "visual_proj changed during stage 2",
    )?;
    check(fin.manifest.component(VISUAL_PROJ).is_some_and(|c| c.frozen), "visual_proj not marked frozen")?;
    for name in [TEXTUAL_PROJ, PHI_PROJ, COMBINER, HEAD] {
        let before = initial.component_hash(name).ok_or(format!("{name} missing at init"))?;
        let after = fin.model.component_hash(name).ok_or(format!("{name} missing after training"))?;
        check(before != after, format!("{name} did not change"))?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("frozen hashes stable, trainable hashes moved ({:.1?})", start.elapsed()))
}

fn multimodal_text_features() -> Outcome {
    let backbone = MockBackbone::new(0, 32, 32, 77).map_err(|e| e.to_string())?;
    let phi = PhiNetwork::stub(32, 32, 0);
    let template = PromptTemplate::default();
    let records = generate_synthetic_confounders(20, 5).map_err(|e| e.to_string())?;
    let mut min_diff = f64::INFINITY;
    for (k, r) in records.records.iter().enumerate() {
        let image = r.image_ref.load().map_err(|e| e.to_string())?;
        let other_image = render_synthetic_image(1 - (k % 2) as u8, 1000 + k as u64);
        let other_text = &records.records[(k + 1) % records.len()].text;
        let enc = |img, text: &str| {
            encode_multimodal_text(img, text, &backbone, &phi, &template)
                .map(|f| f.values)
                .map_err(|e| e.to_string())
        };
        let base = enc(&image, &r.text)?;
        let by_image = (&base - &enc(&other_image, &r.text)?).mapv(|v| v * v).sum().sqrt();
        let by_text = (&base - &enc(&image, other_text)?).mapv(|v| v * v).sum().sqrt();
        min_diff = min_diff.min(by_image).min(by_text);
    }
    check(min_diff > 1e-6, format!("smallest L2 change {min_diff:e}"))?;
    Ok(format!("smallest L2 change {min_diff:.3e} over 20 pairs"))
}

fn xor_separation() -> Outcome {
    let start = Instant::now();
    let cfg = mock_config(&[]);
    let p = prepare(&cfg);
    let table = run_baselines(&cfg, &p.stack, &p.data, &p.test, "test_unseen", &mut NullLog).map_err(|e| e.to_string())?;
    let row_acc = |name: &str| {
        table
            .rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.accuracy)
            .ok_or(format!("no {name} row"))
    };
    let (text_only, image_only) = (row_acc("text_only")?, row_acc("image_only")?);
    let run = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, None, &mut NullLog).map_err(|e| e.to_string())?;
    let model = run.final_model.ok_or("no final checkpoint")?.model;
    let probs = predict_probs(&model, &p.stack, &p.test).map_err(|e| e.to_string())?;
    let y = labels(&p.test);
    let acc = accuracy(&probs, &y, 0.5).map_err(|e| e.to_string())?;
    let auc = auroc(&probs, &y).map_err(|e| e.to_string())?;
    let summary = format!(
        "text_only acc {text_only:.3}, image_only acc {image_only:.3}, full acc {acc:.3} auroc {auc:.4} ({:.1?})",
        start.elapsed()
    );
    check(text_only <= 0.60 && image_only <= 0.60, format!("unimodal baseline too strong: {summary}"))?;
    check(acc >= 0.90 && auc >= 0.95, format!("full pipeline too weak: {summary}"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(summary)
}

fn overfit_check() -> Outcome {
    let cfg = mock_config(&["train.stage2.epochs=200", "train.stage2.max_steps=200", "train.selection_split=\"train\""]);
    let stack = memefusion_core::training::FrozenStack::from_config(&cfg).map_err(|e| e.to_string())?;
    let split = generate_synthetic_confounders(16, 0).map_err(|e| e.to_string())?;
    let train = extract_features(&stack, &split, true).map_err(|e| e.to_string())?;
    let data = PreparedData {
        train: train.clone(),
        selection: train.clone(),
    };
    let run = run_training(&cfg, &stack, &data, StageSelect::All, None, None, &mut NullLog).map_err(|e| e.to_string())?;
    let fin = run.final_model.ok_or("no final checkpoint")?;
    let stage2_steps = fin
        .manifest
        .metric_history
        .iter()
        .filter(|r| r.stage == "stage2")
        .map(|r| r.step)
        .max()
        .unwrap_or(0);
    let probs = predict_probs(&fin.model, &stack, &train).map_err(|e| e.to_string())?;
    let acc = accuracy(&probs, &labels(&train), 0.5).map_err(|e| e.to_string())?;
    check(stage2_steps <= 200, format!("{stage2_steps} stage-2 steps"))?;
    check(acc == 1.0, format!("train accuracy {acc}"))?;
    Ok(format!("train accuracy 1.0 within {stage2_steps} stage-2 steps"))
}

/// BCE of the Combiner + head output for one sample.
fn combiner_loss(c: &CombinerParams, h: &HeadParams, t: &Array1<f64>, i: &Array1<f64>, y: u8) -> f64 {
    let fused = c.forward(t.view(), i.view()).0;
    let logit = h.forward(fused.view(), None).0;
    bce_loss(sigmoid(logit), y)
}

/// Smallest |pre-activation| over every ReLU in the Combiner and head.
fn kink_distance(c: &CombinerParams, h: &HeadParams, t: &Array1<f64>, i: &Array1<f64>) -> f64 {
    let text_pre = c.text_branch.forward(t.view());
    let image_pre = c.image_branch.forward(i.view());
    let joint = ndarray::concatenate![ndarray::Axis(0), relu(&text_pre), relu(&image_pre)];
    let gate_pre = c.gate_hidden.forward(joint.view());
    let residual_pre = c.residual_hidden.forward(joint.view());
    let fused = c.forward(t.view(), i.view()).0;
    let head_pre = h.hidden.forward(fused.view());
    [text_pre, image_pre, gate_pre, residual_pre, head_pre]
        .iter()
        .flat_map(|a| a.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn gradient_correctness() -> Outcome {
    let (p, step) = (16, 1e-4);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut draws = 0;
    let mut rejected = 0;
    for seed in 0u64.. {
        if draws == 10 {
            break;
        }
        let mut rng = seeded_rng(seed, "acceptance-fd");
        let combiner = CombinerParams::new(p, p, &mut rng);
        let head = HeadParams::new(p, 0.0, &mut rng);
        let t = Array1::from_iter((0..p).map(|_| rng.random_range(-1.0..1.0)));
        let i = Array1::from_iter((0..p).map(|_| rng.random_range(-1.0..1.0)));
        let y = (seed % 2) as u8;
        // a central difference across a ReLU kink does not estimate the derivative
        if kink_distance(&combiner, &head, &t, &i) < 10.0 * step {
            rejected += 1;
            continue;
        }
        draws += 1;
        let draw = seed;

        let (fused, cache) = combiner.forward(t.view(), i.view());
        let (logit, head_cache) = head.forward(fused.view(), None);
        let mut g_head = head.zeros_like();
        let mut g_comb = combiner.zeros_like();
        let d_fused = head.backward(&head_cache, sigmoid(logit) - y as f64, &mut g_head);
        combiner.backward(&cache, d_fused.view(), &mut g_comb);

        let analytic: Vec<f64> = g_comb
            .tensors("")
            .iter()
            .chain(g_head.tensors("").iter())
            .flat_map(|t| t.data.to_vec())
            .collect();
        let mut k = 0;
        let n_comb = combiner.num_params();
        for idx in 0..n_comb + head.num_params() {
            let eval = |delta: f64| {
                let (mut c, mut h) = (combiner.clone(), head.clone());
                let slot = if idx < n_comb {
                    flat_mut(&mut c, idx)
                } else {
                    flat_mut(&mut h, idx - n_comb)
                };
                *slot += delta;
                combiner_loss(&c, &h, &t, &i, y)
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("draw {draw} param {idx}: analytic {a:e}, numeric {numeric:e}");
            }
            k += 1;
        }
        debug_assert_eq!(k, analytic.len());
    }
    check(worst < 1e-3, format!("max relative error {worst:e} at {worst_at}"))?;
    Ok(format!("max relative error {worst:.2e} over 10 draws ({rejected} kink-adjacent draws skipped)"))
}

fn flat_mut<P: Params>(p: &mut P, mut idx: usize) -> &mut f64 {
    for t in p.tensors_mut("") {
        if idx < t.data.len() {
            return &mut t.data[idx];
        }
        idx -= t.data.len();
    }
    panic!("parameter index out of range");
}

fn determinism() -> Outcome {
    let cfg = mock_config(&[]);
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut histories = Vec::new();
    for dir in &dirs {
        let p = prepare(&cfg);
        let run = run_training(&cfg, &p.stack, &p.data, StageSelect::All, None, Some(dir.path()), &mut NullLog)
            .map_err(|e| e.to_string())?;
        let fin = run.final_model.ok_or("no final checkpoint")?;
        histories.push(serde_json::to_vec(&fin.manifest.metric_history).map_err(|e| e.to_string())?);
    }
    check(histories[0] == histories[1], "metric histories differ")?;
    for sub in ["stage1", "final"] {
        for file in ["manifest.json", "tensors.bin"] {
            let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(sub).join(file)).map_err(|e| e.to_string());
            check(read(&dirs[0])? == read(&dirs[1])?, format!("{sub}/{file} differs"))?;
        }
    }
    Ok("histories and checkpoints byte-identical".into())
}

fn ablation_shape() -> Outcome {
    let cfg = mock_config(&[]);
    let p = prepare(&cfg);
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let table = run_ablation(&cfg, &p.stack, &p.data, &p.test, "test_unseen", Some(out.path()), &mut NullLog)
        .map_err(|e| e.to_string())?;
    check(table.rows.len() == 4, format!("{} rows", table.rows.len()))?;
    let row1 = Checkpoint::load(&out.path().join("row1/final")).map_err(|e| e.to_string())?;
    let names: Vec<&str> = row1.manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    check(
        row1.manifest.component(INTERACTION_HEAD).is_some() && names.iter().any(|n| n.starts_with("interaction_head.")),
        "row 1 lacks interaction-head parameters",
    )?;
    check(
        row1.manifest.component(COMBINER).is_none() && !names.iter().any(|n| n.starts_with("combiner.")),
        "row 1 contains Combiner parameters",
    )?;
    check(table.rows[3].config_hash == cfg.hash(), "row 4 hash differs from the main config hash")?;
    let row4 = Checkpoint::load(&out.path().join("row4/final")).map_err(|e| e.to_string())?;
    check(row4.manifest.config_hash == cfg.hash(), "row 4 checkpoint hash differs")?;
    let accs: Vec<String> = table.rows.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
    Ok(format!("4 rows, accuracies [{}]", accs.join(", ")))
}

fn analytic_loss_values() -> Outcome {
    let l = bce_loss(0.5, 1);
    check((l - std::f64::consts::LN_2).abs() <= 1e-9, format!("bce(0.5, 1) = {l}"))?;
    let mut rng = seeded_rng(11, "acceptance-mean");
    let mut params = CombinerParams::new(16, 16, &mut rng);
    params.force_even_mix();
    let t = Array1::from_iter((0..16).map(|_| rng.random_range(-2.0..2.0)));
    let i = Array1::from_iter((0..16).map(|_| rng.random_range(-2.0..2.0)));
    let out = combine(t.view(), i.view(), &params).map_err(|e| e.to_string())?;
    let mean = (&t + &i) * 0.5;
    check(out == mean, "forced-mix output is not the exact mean")?;
    Ok("bce(0.5, 1) = ln 2, forced mix = exact mean".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("metric oracle equivalence", metric_oracle_equivalence),
        ("hand-check auroc", hand_check_auroc),
        ("factorization exactness", factorization_exactness),
        ("freezing discipline", freezing_discipline),
        ("multimodal text features", multimodal_text_features),
        ("xor separation", xor_separation),
        ("overfit check", overfit_check),
        ("gradient correctness", gradient_correctness),
        ("determinism", determinism),
        ("ablation harness shape", ablation_shape),
        ("analytic loss values", analytic_loss_values),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let line = match &outcome {
            Ok(detail) => format!("[acceptance {:>2}] PASS {name}: {detail}", k + 1),
            Err(detail) => format!("[acceptance {:>2}] FAIL {name}: {detail}", k + 1),
        };
        writeln!(std::io::stderr(), "{line}").unwrap();
        if outcome.is_err() {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
