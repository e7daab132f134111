mod common;

use common::{config, tiny, watermark};
use nnwm_core::data::distill_dataset;
use nnwm_core::*;

#[test]
fn zero_lambda_embedding_run_matches_plain_training() {
    let t = tiny(1);
    let plain = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &config(4, Situation::None, 3),
        None,
    )
    .unwrap();
    let mut cfg = config(4, Situation::TrainToEmbed, 3);
    cfg.lambda = 0.0;
    let wm = watermark(t.layer, KeyKind::Random, 5, 32);
    let zero = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &cfg,
        Some(&wm),
    )
    .unwrap();
    assert_eq!(plain.history, zero.history);
    assert_eq!(plain.model, zero.model);
    assert!(zero.history.iter().all(|r| r.embedding_loss.is_none()));
}

#[test]
fn histories_are_a_function_of_config_and_seeds() {
    let t = tiny(2);
    let wm = watermark(t.layer, KeyKind::Random, 6, 32);
    let cfg = config(3, Situation::TrainToEmbed, 4);
    let a = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &cfg,
        Some(&wm),
    )
    .unwrap();
    let b = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &cfg,
        Some(&wm),
    )
    .unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    let other = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &config(3, Situation::TrainToEmbed, 5),
        Some(&wm),
    )
    .unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn train_to_embed_recovers_the_message() {
    let t = tiny(3);
    let wm = watermark(t.layer, KeyKind::Random, 7, 64);
    let out = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        Some(&t.test),
        &config(20, Situation::TrainToEmbed, 1),
        Some(&wm),
    )
    .unwrap();
    assert_eq!(out.detection.as_ref().unwrap().ber, Some(0.0));
    let first = out.history[0].embedding_loss.unwrap();
    let last = out.final_embedding_loss().unwrap();
    assert!(last < first / 4.0, "{first} -> {last}");
    assert!(out.final_test_error().unwrap() < 0.2);
}

#[test]
fn distilled_student_stays_close_to_its_teacher() {
    let t = tiny(4);
    let teacher = train(
        Init::Fresh(t.model.clone()),
        &t.train,
        None,
        &config(20, Situation::None, 2),
        None,
    )
    .unwrap()
    .model;
    let teacher_error = error_rate(&teacher, &t.test.inputs, t.test.labels().unwrap()).unwrap();
    let soft = distill_dataset(&teacher, &t.train.inputs).unwrap();
    assert!(soft.labels().is_none());
    let wm = watermark(t.layer, KeyKind::Random, 8, 64);
    let out = train(
        Init::Pretrained(teacher),
        &soft,
        Some(&t.test),
        &config(20, Situation::DistillToEmbed, 3),
        Some(&wm),
    )
    .unwrap();
    let student_error = out.final_test_error().unwrap();
    assert!(
        (student_error - teacher_error).abs() <= 0.015,
        "{student_error} vs {teacher_error}"
    );
    assert_eq!(out.detection.unwrap().ber, Some(0.0));
}

#[test]
fn situations_enforce_their_preconditions() {
    let t = tiny(5);
    let wm = watermark(t.layer, KeyKind::Random, 9, 16);
    let fresh = || Init::Fresh(t.model.clone());
    let pre = || Init::Pretrained(t.model.clone());
    let run =
        |init, sit, wm: Option<&Watermark>| train(init, &t.train, None, &config(1, sit, 0), wm);

    let err = run(fresh(), Situation::FineTuneToEmbed, Some(&wm)).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)));
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(matches!(
        run(fresh(), Situation::DistillToEmbed, Some(&wm)).unwrap_err(),
        Error::MissingCheckpoint(_)
    ));
    assert_eq!(
        run(pre(), Situation::TrainToEmbed, Some(&wm))
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );
    assert_eq!(
        run(fresh(), Situation::TrainToEmbed, None)
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );
    assert_eq!(
        run(fresh(), Situation::None, Some(&wm)).unwrap_err().kind(),
        ErrorKind::Config
    );
    // Distillation refuses labelled data, so ground truth cannot leak in.
    assert_eq!(
        run(pre(), Situation::DistillToEmbed, Some(&wm))
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );

    let wrong_m = Watermark::new(
        t.layer,
        make_key(KeyKind::Random, 1, 16, 100).unwrap(),
        Message::ones(16).unwrap(),
    );
    assert_eq!(
        run(fresh(), Situation::TrainToEmbed, Some(&wrong_m))
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );
}

#[test]
fn unembedded_weights_read_as_coin_flips_under_random_keys() {
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
    let w = trained.conv_weight(t.layer).unwrap();
    let mut ones = 0usize;
    for seed in 0..10 {
        let key = make_key(KeyKind::Random, 500 + seed, 256, 144).unwrap();
        ones += extract(&key, w)
            .unwrap()
            .bits
            .iter()
            .map(|&b| b as usize)
            .sum::<usize>();
    }
    let mean = ones as f64 / 2560.0;
    assert!((0.4..=0.6).contains(&mean), "{mean}");
}

#[test]
fn long_embedding_run_drives_loss_below_one_hundredth() {
    // E_R decays roughly like 1/steps once every bit is right, so this needs
    // a few hundred thousand small steps; a 2x2x4 input keeps them cheap.
    let shape = FeatureShape::Image {
        height: 2,
        width: 2,
        channels: 4,
    };
    let task = SyntheticTask::new(4, shape, 5.0, 100).unwrap();
    let train_set = task.sample(128, 1, Split::Train).unwrap();
    let test_set = task.sample(512, 2, Split::Test).unwrap();
    let model = build_host(HostPreset::SmallCnn, shape, 4, 0).unwrap();
    let layer = model.embed_layer().unwrap();
    let wm = Watermark::new(
        layer,
        make_key(KeyKind::Random, 7, 64, 144).unwrap(),
        Message::ones(64).unwrap(),
    );
    let mut cfg = TrainConfig::desk(18_000, Situation::TrainToEmbed, 0);
    cfg.batch_size = 8;
    cfg.optimizer.schedule.clear();
    assert_eq!(cfg.lambda, 0.01);
    let out = train(Init::Fresh(model), &train_set, None, &cfg, Some(&wm)).unwrap();
    let loss = out.final_embedding_loss().unwrap();
    assert!(loss < 1e-2, "{loss}");
    assert_eq!(out.detection.unwrap().ber, Some(0.0));
    let err = error_rate(&out.model, &test_set.inputs, test_set.labels().unwrap()).unwrap();
    assert!(err < 0.1, "{err}");
}
