use proptest::prelude::*;

use vlp_core::data::{generate_samples, AlignedSample, SyntheticWorldConfig};
use vlp_core::model::{tiny_config, tiny_world, Model, PairInput};
use vlp_core::nn::Parameterized;
use vlp_core::objectives::LossConfig;
use vlp_core::training::{
    cosine_lr, forward_batch, metrics_csv, train, Adam, Checkpoint, ScheduleKind, TrainConfig, TrainOptions,
    TrainSample,
};

fn tiny_samples(seed: u64, count: usize) -> Vec<AlignedSample> {
    generate_samples(&SyntheticWorldConfig { seed, ..tiny_world() }, 0, count).unwrap()
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { model: tiny_config(), seed, batch_size: 2, epochs: 2, ..Default::default() };
    cfg.model.max_sentences = tiny_world().max_sentences;
    cfg
}

fn inputs(samples: &[AlignedSample]) -> Vec<PairInput<'_>> {
    samples.iter().map(|s| PairInput::Raw { image: &s.image, report: &s.report }).collect()
}

fn params(model: &Model) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |n, p| out.push((n, p.iter().copied().collect())));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tiny_step_does_not_increase_batch_loss(seed in any::<u64>(), data_seed in any::<u64>(), b in 1usize..4) {
        let samples = tiny_samples(data_seed, b);
        let batch = inputs(&samples);
        let loss = LossConfig::default();
        let mut model = Model::init(tiny_config(), seed).unwrap();
        let (before, grads) = model.loss_and_grad(&batch, &loss).unwrap();
        let mut adam = Adam::new(&model);
        adam.update(&mut model, &grads, 1e-6).unwrap();
        let after = model.loss(&batch, &loss).unwrap();
        prop_assert!(after.total <= before.total + 1e-6, "{} -> {}", before.total, after.total);
    }

    #[test]
    fn cosine_schedule_shape(base in 1e-6f64..1.0, total in 2u64..5000) {
        prop_assert_eq!(cosine_lr(base, 0, total), base);
        prop_assert!(cosine_lr(base, total - 1, total) <= 1e-6 * base);
        let mut prev = f64::INFINITY;
        for step in (0..total).step_by((total as usize / 97).max(1)).chain([total - 1]) {
            let lr = cosine_lr(base, step, total);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs(seed in any::<u64>(), data_seed in any::<u64>()) {
        let samples = tiny_samples(data_seed, 3);
        let cfg = TrainConfig { epochs: 1, ..tiny_train_config(seed) };
        let trained = train(&samples.iter().map(TrainSample::from_aligned).collect::<Vec<_>>(), &cfg, &TrainOptions::default())
            .unwrap()
            .checkpoint;
        let back = Checkpoint::from_bytes(&trained.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &trained);
        let batch = inputs(&samples);
        let a = forward_batch(&trained.model, &batch, &cfg.loss).unwrap();
        let b = forward_batch(&back.model, &batch, &cfg.loss).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn training_is_reproducible(seed in any::<u64>(), data_seed in any::<u64>()) {
        let samples = tiny_samples(data_seed, 4);
        let ts: Vec<_> = samples.iter().map(TrainSample::from_aligned).collect();
        let cfg = tiny_train_config(seed);
        let a = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;
        let b = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;
        prop_assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        prop_assert_eq!(params(&a.model), params(&b.model));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let samples = tiny_samples(3, 6);
    let ts: Vec<_> = samples.iter().map(TrainSample::from_aligned).collect();
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..tiny_train_config(9) };
    let initial = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let out = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;
    assert_eq!(params(&initial), params(&out.model));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let samples = tiny_samples(5, 7);
    let ts: Vec<_> = samples.iter().map(TrainSample::from_aligned).collect();
    for schedule in [ScheduleKind::Cosine, ScheduleKind::Plateau] {
        let cfg = TrainConfig { epochs: 4, schedule, plateau_patience: 0, early_stop_patience: Some(2), ..tiny_train_config(11) };
        let full = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;

        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_after_epochs: Some(2), ..Default::default() };
        let partial = train(&ts, &cfg, &opts).unwrap().checkpoint;
        assert_eq!(partial.epoch, 2);
        let reloaded = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(reloaded, partial);
        let resumed = train(&ts, &cfg, &TrainOptions { resume: Some(reloaded), ..Default::default() }).unwrap().checkpoint;
        assert_eq!(metrics_csv(&resumed.history), metrics_csv(&full.history));
        assert_eq!(resumed, full);
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let samples = tiny_samples(5, 4);
    let ts: Vec<_> = samples.iter().map(TrainSample::from_aligned).collect();
    let cfg = TrainConfig { epochs: 1, ..tiny_train_config(1) };
    let ck = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;
    let other = TrainConfig { learning_rate: 5e-4, ..cfg };
    assert!(train(&ts, &other, &TrainOptions { resume: Some(ck), ..Default::default() }).is_err());
}

#[test]
fn repeated_batch_overfits() {
    let samples = generate_samples(&SyntheticWorldConfig::default(), 0, 8).unwrap();
    let ts: Vec<_> = samples.iter().map(TrainSample::from_aligned).collect();
    let mut cfg = TrainConfig { epochs: 200, batch_size: 8, learning_rate: 1e-3, ..Default::default() };
    cfg.augmentation.enabled = false;
    let out = train(&ts, &cfg, &TrainOptions::default()).unwrap().checkpoint;
    assert_eq!(out.adam.step, 200);
    let first = out.history.first().unwrap();
    let last = out.history.last().unwrap();
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
    // The local terms sit within a few percent of their entropy floor from
    // the start, so halving is checked on the contrastive part that can move.
    let global = |m: &vlp_core::training::EpochMetrics| m.global_it + m.global_ti;
    assert!(global(last) < 0.5 * global(first), "{} -> {}", global(first), global(last));
}

#[test]
fn local_terms_start_near_their_entropy_floor() {
    use vlp_core::model::PairInput;
    use vlp_core::objectives::{entropy_sum, intra_modal_target};
    let samples = generate_samples(&SyntheticWorldConfig::default(), 0, 8).unwrap();
    let model = Model::init(vlp_core::model::ModelConfig::default(), 0).unwrap();
    let loss = LossConfig::default();
    let bundle = model.loss(&inputs(&samples), &loss).unwrap();
    let mut floor = 0.0;
    for s in &samples {
        let e = model.embed(PairInput::Raw { image: &s.image, report: &s.report }).unwrap();
        for y in [&e.image_local, &e.text_local] {
            let (r, c) = intra_modal_target(y, &loss).unwrap();
            floor += entropy_sum(&r.values) + entropy_sum(&c.values);
        }
    }
    let floor = loss.lambdas[2] * floor / samples.len() as f64;
    // with equal weights on both local terms the floor bounds the total from below
    assert_eq!(loss.lambdas[2], loss.lambdas[3]);
    assert!(bundle.total > floor);
    assert!(floor > 0.5 * bundle.total, "floor {floor} total {}", bundle.total);
}
