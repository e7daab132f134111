mod common;

use common::{config, tiny, watermark, Tiny};
use nnwm_core::*;

fn embedded(seed: u64, bits: usize) -> (Tiny, Watermark, HostModel) {
    let t = tiny(seed);
    let wm = watermark(t.layer, KeyKind::Random, 40 + seed, bits);
    let out = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &config(12, Situation::TrainToEmbed, seed),
        Some(&wm),
    )
    .unwrap();
    assert_eq!(out.detection.as_ref().unwrap().ber, Some(0.0));
    (t, wm, out.model)
}

#[test]
fn attacks_leave_the_input_model_untouched() {
    let (t, wm, model) = embedded(1, 32);
    let before = model.clone();
    attack_prune(
        &model,
        &wm,
        &PruneSpec {
            rate: 0.5,
            order: PruneOrder::Descending,
            seed: 0,
        },
        Some(&t.test),
    )
    .unwrap();
    prune_sweep(&model, &wm, &[0.0, 0.5, 1.0], &PruneOrder::ALL, 2).unwrap();
    attack_finetune(&model, &wm, &t.train, None, &config(1, Situation::None, 9)).unwrap();
    let other = watermark(t.layer, KeyKind::Random, 99, 32);
    attack_overwrite(
        &model,
        &wm,
        &other,
        &t.train,
        None,
        &config(1, Situation::FineTuneToEmbed, 9),
    )
    .unwrap();
    embed_posthoc(
        &model,
        &other,
        &PostHocConfig {
            steps: 10,
            ..PostHocConfig::default()
        },
        None,
    )
    .unwrap();
    assert_eq!(model, before);
}

#[test]
fn zero_epoch_finetune_changes_nothing() {
    let (t, wm, model) = embedded(2, 32);
    let report = attack_finetune(
        &model,
        &wm,
        &t.train,
        Some(&t.test),
        &config(0, Situation::None, 1),
    )
    .unwrap();
    assert_eq!(report.embedding_loss_after, report.embedding_loss_before);
    assert_eq!(report.ber_after, report.ber_before);
    assert!(attack_finetune(
        &model,
        &wm,
        &t.train,
        None,
        &config(1, Situation::TrainToEmbed, 1)
    )
    .is_err());
}

#[test]
fn prune_extremes() {
    let (_, wm, model) = embedded(3, 32);
    let keep = attack_prune(
        &model,
        &wm,
        &PruneSpec {
            rate: 0.0,
            order: PruneOrder::Ascending,
            seed: 0,
        },
        None,
    )
    .unwrap();
    assert_eq!(keep.ber_after, 0.0);
    let all = attack_prune(
        &model,
        &wm,
        &PruneSpec {
            rate: 1.0,
            order: PruneOrder::Ascending,
            seed: 0,
        },
        None,
    )
    .unwrap();
    assert_eq!(all.ber_after, wm.message.zero_fraction());
    let sweep = prune_sweep(
        &model,
        &wm,
        &[0.0, 0.25, 0.5, 0.75, 1.0],
        &[PruneOrder::Ascending],
        0,
    )
    .unwrap();
    assert!(sweep.is_finite());
    assert_eq!(sweep.curve.len(), 5);
    assert!(sweep.curve.windows(2).all(|p| p[0].alpha <= p[1].alpha));
}

#[test]
fn zero_lambda_overwrite_is_plain_finetuning() {
    let (t, wm, model) = embedded(4, 32);
    let mut cfg = config(3, Situation::FineTuneToEmbed, 6);
    cfg.lambda = 0.0;
    let other = watermark(t.layer, KeyKind::Random, 77, 32);
    let over = attack_overwrite(&model, &wm, &other, &t.train, Some(&t.test), &cfg).unwrap();
    let tune = attack_finetune(
        &model,
        &wm,
        &t.train,
        Some(&t.test),
        &TrainConfig {
            situation: Situation::None,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(over.embedding_loss_after, tune.embedding_loss_after);
    assert_eq!(over.ber_after, tune.ber_after);
    assert_eq!(over.ber_after, 0.0);
}

#[test]
fn overwrite_at_low_capacity_keeps_both_marks() {
    let (t, wm, model) = embedded(5, 8);
    let other = watermark(t.layer, KeyKind::Random, 123, 8);
    let report = attack_overwrite(
        &model,
        &wm,
        &other,
        &t.train,
        Some(&t.test),
        &config(12, Situation::FineTuneToEmbed, 2),
    )
    .unwrap();
    assert_eq!(report.new_watermark_ber, Some(0.0));
    assert_eq!(report.ber_after, 0.0);
    assert!(report.warnings.is_empty());
    let same = Watermark::new(t.layer, wm.key.clone(), Message::ones(8).unwrap());
    let warned = attack_overwrite(
        &model,
        &wm,
        &same,
        &t.train,
        None,
        &config(1, Situation::FineTuneToEmbed, 2),
    )
    .unwrap();
    assert_eq!(warned.warnings.len(), 1);
}

#[test]
fn posthoc_without_lambda_is_chance_against_a_fresh_message() {
    let t = tiny(6);
    let trained = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        None,
        &config(5, Situation::None, 1),
        None,
    )
    .unwrap()
    .model;
    let wm = watermark(t.layer, KeyKind::Random, 31, 256);
    let (edited, report) = embed_posthoc(
        &trained,
        &wm,
        &PostHocConfig {
            lambda: 0.0,
            ..PostHocConfig::default()
        },
        Some(&t.test),
    )
    .unwrap();
    assert_eq!(edited, trained);
    assert_eq!(report.distance, Some(0.0));
    assert!(
        (0.4..=0.6).contains(&report.ber_after),
        "{}",
        report.ber_after
    );
}

#[test]
fn report_serializes_with_loss_column_names() {
    let (_, wm, model) = embedded(7, 16);
    let report = attack_prune(
        &model,
        &wm,
        &PruneSpec {
            rate: 0.3,
            order: PruneOrder::Random,
            seed: 1,
        },
        None,
    )
    .unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.get("E_R").is_some() && json.get("E'_R").is_some());
    let back: AttackReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
}

/// Original-watermark BER after overwriting the same layer, for a mini-wide
/// host with the watermark in the given layer.
fn overwrite_ber(layer: usize) -> f64 {
    let shape = FeatureShape::Image {
        height: 8,
        width: 8,
        channels: 3,
    };
    let task = SyntheticTask::new(4, shape, 5.0, 100).unwrap();
    let data = task.sample(512, 1, Split::Train).unwrap();
    let model = build_host(HostPreset::MiniWide, shape, 4, 0)
        .unwrap()
        .with_embed_layer(layer)
        .unwrap();
    let s = model.conv_weight(layer).unwrap().shape().to_vec();
    let m = s[0] * s[1] * s[2];
    let bits = 128;
    let original = Watermark::new(
        layer,
        make_key(KeyKind::Random, 7, bits, m).unwrap(),
        Message::ones(bits).unwrap(),
    );
    let embed = TrainConfig::desk(10, Situation::TrainToEmbed, 0);
    let out = train(Init::Fresh(model), &data, None, &embed, Some(&original)).unwrap();
    let replacement = Watermark::new(
        layer,
        make_key(KeyKind::Random, 99, bits, m).unwrap(),
        Message::random(bits, 5).unwrap(),
    );
    let attack = TrainConfig::desk(10, Situation::FineTuneToEmbed, 40);
    let report =
        attack_overwrite(&out.model, &original, &replacement, &data, None, &attack).unwrap();
    report.ber_after
}

#[test]
fn overwriting_a_larger_layer_costs_fewer_original_bits() {
    let targets = HostPreset::MiniWide.target_layers();
    let ber_small = overwrite_ber(targets[0]);
    let ber_large = overwrite_ber(targets[2]);
    assert!(
        ber_small > 0.0,
        "M = 144 overwrite left the original intact"
    );
    assert!(
        ber_large < ber_small,
        "M = 576: {ber_large}, M = 144: {ber_small}"
    );
}
