use lpanet::pipeline::{
    ablate, evaluate, run_stage, train::sample_pass, Checkpoint, LossWeights, RunConfig, Stage,
    Variant,
};
use lpanet::synth::{Dataset, Sample};
use lpanet::Error;

/// Small scenes and dimensions so each test trains in seconds.
fn small(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        count: 8,
        image_size: 32,
        objects_min: 2,
        objects_max: 3,
        size_min: 6,
        size_max: 10,
        shift_x: 2,
        jitter: 1,
        visual_dim: 8,
        shared_dim: 16,
        text_dim: 16,
        epochs: 2,
        ..RunConfig::default()
    }
}

fn data(run: &RunConfig, range: std::ops::Range<u64>) -> Vec<Sample> {
    Dataset::generate(&run.scene(), range).unwrap().samples
}

#[test]
fn logged_total_is_the_weighted_sum_of_components() {
    let mut run = small(Variant::Full);
    run.w_sa = 0.3;
    run.w_sc = 2.5;
    let samples = data(&run, 0..8);
    let mut log = Vec::new();
    let (ckpt, _) = run_stage(&run, Stage::One, None, &samples, 1, Some(&mut log)).unwrap();
    let mut log2 = Vec::new();
    run_stage(&run, Stage::Two, Some(ckpt), &samples, 1, Some(&mut log2)).unwrap();
    let text = String::from_utf8([log, log2].concat()).unwrap();
    let mut lines = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "step", "l_det", "l_sa", "l_sc", "total"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
        let f = |k: &str| v[k].as_f64().unwrap();
        let sum = f("l_det") + 0.3 * f("l_sa") + 2.5 * f("l_sc");
        assert!((f("total") - sum).abs() <= 1e-9, "{line}");
        lines += 1;
    }
    assert_eq!(lines, 2 * 2 * 2);
}

#[test]
fn baseline_reports_absent_module_losses_as_null() {
    let run = small(Variant::Baseline);
    let samples = data(&run, 0..4);
    let mut log = Vec::new();
    let (ckpt, _) = run_stage(&run, Stage::One, None, &samples, 1, Some(&mut log)).unwrap();
    let first = String::from_utf8(log)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(v["l_sa"].is_null() && v["l_sc"].is_null());
    let m = evaluate(&ckpt.model, &samples, Stage::One, ckpt.state.weights, 1).unwrap();
    assert_eq!((m.l_sa, m.l_sc), (None, None));
    let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert!(json["l_sa"].is_null() && json["ir_response_mean_iou"].is_null());
}

#[test]
fn stage_one_leaves_esm_untouched() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..4);
    let (init, _) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    let (grads, _) = sample_pass(
        &init.model,
        &lpanet::pipeline::model::SampleInputs::new(&samples[0]).unwrap(),
        Stage::One,
        LossWeights::default(),
    )
    .unwrap();
    assert!(grads.keys().all(|k| !k.starts_with("esm.")));
    assert!(grads.contains_key("sam.proj_rgb.w"));

    let (trained, _) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    for (name, t) in init.model.params.iter() {
        let after = trained.model.params.get(name).unwrap();
        if name.starts_with("esm.") {
            assert_eq!(t, after, "{name} moved in stage one");
        }
    }
    assert_ne!(init.model.params, trained.model.params);
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..4);
    let (a, report) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    assert!(report.steps.is_empty());
    let fresh = lpanet::pipeline::Model::new(
        lpanet::pipeline::model_config(&run),
        lpanet::pipeline::embeddings_for(&run).unwrap(),
        run.seed,
    )
    .unwrap();
    assert_eq!(a.model.params, fresh.params);
}

#[test]
fn stage_two_starts_from_the_stage_one_parameters() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..4);
    let (first, _) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    let (second, _) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::Two,
        Some(first.clone()),
        &samples,
        1,
        None,
    )
    .unwrap();
    assert_eq!(first.model.params, second.model.params);
    assert_eq!(second.state.stage, Stage::Two);
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..2);
    assert!(matches!(
        run_stage(&run, Stage::Two, None, &samples, 1, None),
        Err(Error::Usage(_))
    ));
    let (first, _) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    let (second, _) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::Two,
        Some(first),
        &samples,
        1,
        None,
    )
    .unwrap();
    assert!(matches!(
        run_stage(&run, Stage::Two, Some(second), &samples, 1, None),
        Err(Error::Usage(_))
    ));
}

#[test]
fn checkpoint_round_trip_reproduces_metrics_bit_for_bit() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..6);
    let (first, _) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    let (ckpt, _) = run_stage(&run, Stage::Two, Some(first), &samples, 1, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded, ckpt);
    let a = evaluate(&ckpt.model, &samples, Stage::Two, ckpt.state.weights, 1).unwrap();
    let b = evaluate(&loaded.model, &samples, Stage::Two, loaded.state.weights, 1).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let run = small(Variant::Sam);
    let samples = data(&run, 0..2);
    let (ckpt, _) = run_stage(
        &RunConfig { epochs: 0, ..run },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let p = dir.path().join("params").join("head.b.ten");
    let body = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, body.replacen('e', "E", 1)).unwrap();
    assert!(matches!(
        Checkpoint::load(dir.path()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn evaluation_is_deterministic_and_thread_independent() {
    let run = small(Variant::Full);
    let samples = data(&run, 0..6);
    let (first, _) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    let m = &first.model;
    let a = evaluate(m, &samples, Stage::Two, LossWeights::default(), 1).unwrap();
    let b = evaluate(m, &samples, Stage::Two, LossWeights::default(), 1).unwrap();
    let c = evaluate(m, &samples, Stage::Two, LossWeights::default(), 3).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_json(), c.to_json());
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let run = small(Variant::SamIsm);
    let samples = data(&run, 0..8);
    let (a, _) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    let (b, _) = run_stage(&run, Stage::One, None, &samples, 4, None).unwrap();
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn all_background_prediction_scores_zero_iou() {
    let run = small(Variant::Baseline);
    let samples = data(&run, 0..3);
    let (mut ckpt, _) = run_stage(
        &RunConfig { epochs: 0, ..run },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    let p = &mut ckpt.model.params;
    p.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let b = p.get_mut("head.b").unwrap().data_mut();
    b.fill(-10.0);
    b[0] = 10.0;
    let m = evaluate(&ckpt.model, &samples, Stage::One, LossWeights::default(), 1).unwrap();
    assert!(m.per_category_iou.iter().all(|&v| v == 0.0));
    assert_eq!(m.mean_iou, 0.0);
}

#[test]
fn category_mismatch_is_a_validation_error() {
    let run = small(Variant::Baseline);
    let samples = data(&run, 0..2);
    let (ckpt, _) = run_stage(
        &RunConfig {
            epochs: 0,
            ..run.clone()
        },
        Stage::One,
        None,
        &samples,
        1,
        None,
    )
    .unwrap();
    let other = data(
        &RunConfig {
            n_categories: 3,
            ..run
        },
        0..2,
    );
    assert!(matches!(
        evaluate(&ckpt.model, &other, Stage::One, LossWeights::default(), 1),
        Err(Error::Validation(_))
    ));
}

#[test]
fn ablation_rows_follow_variant_order_and_repeat_exactly() {
    let run = RunConfig {
        epochs: 1,
        ..small(Variant::Full)
    };
    let train = data(&run, 0..4);
    let eval = data(&run, 100..102);
    let rows = ablate(&run, &train, &eval, 1).unwrap();
    let variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(variants, Variant::ALL);
    assert!(rows[0].metrics.l_sa.is_none() && rows[0].metrics.l_sc.is_none());
    assert!(rows[1].metrics.l_sa.is_some() && rows[1].metrics.l_sc.is_none());
    assert!(rows[2].metrics.l_sc.is_some() && rows[2].metrics.offset_mae.is_none());
    assert!(rows[3].metrics.offset_mae.is_some());
    let again = ablate(
        &RunConfig {
            variant: Variant::Baseline,
            ..run
        },
        &train,
        &eval,
        1,
    )
    .unwrap();
    assert_eq!(rows[0].metrics.to_json(), again[0].metrics.to_json());
}

#[test]
fn stage_one_loss_falls_on_the_default_scenes() {
    let run = RunConfig {
        epochs: 10,
        ..RunConfig::default()
    };
    let samples = data(&run, 0..16);
    let (_, report) = run_stage(&run, Stage::One, None, &samples, 1, None).unwrap();
    let mean = |v: &[lpanet::pipeline::LossValues]| {
        v.iter().map(|l| l.total).sum::<f64>() / v.len() as f64
    };
    let e = &report.epoch_means;
    assert!(
        mean(&e[5..]) < mean(&e[..5]),
        "{:?}",
        e.iter().map(|l| l.total).collect::<Vec<_>>()
    );
}

#[test]
fn esm_on_aligned_scenes_costs_at_most_two_hundredths_iou() {
    let base = RunConfig {
        shift_x: 0,
        jitter: 0,
        ..RunConfig::fast()
    };
    let train = data(&base, 0..32);
    let eval = data(&base, 1000..1016);
    let score = |variant| {
        let run = RunConfig {
            variant,
            ..base.clone()
        };
        let (first, _) = run_stage(&run, Stage::One, None, &train, 1, None).unwrap();
        let (second, _) = run_stage(&run, Stage::Two, Some(first), &train, 1, None).unwrap();
        evaluate(&second.model, &eval, Stage::Two, second.state.weights, 1)
            .unwrap()
            .mean_iou
    };
    let (ism, full) = (score(Variant::SamIsm), score(Variant::Full));
    assert!(full >= ism - 0.02, "full {full} vs +ISM {ism}");
}
