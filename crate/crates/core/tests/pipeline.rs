mod common;

use tsdiff_core::data::{synth_dataset, Series, SeriesBatch, SynthConfig};
use tsdiff_core::diffusion::forward_sample;
use tsdiff_core::heads::{
    accuracy, classifier_features, detect, finetune_classifier, finetune_projection, ClassifierHead,
    ClassifierLayout, HeadTrainConfig, ProjectionHead, ThresholdRule, CLASSIFIER_NAMESPACE, PROJECTION_NAMESPACE,
};
use tsdiff_core::masking::MaskKind;
use tsdiff_core::params::normal_init;
use tsdiff_core::sampler::{forecast, generate, SamplerConfig};
use tsdiff_core::{Checkpoint, Matrix, Model, ModelConfig, NoiseSchedule, TrainConfig, Trainer};

fn micro_batch(instances: usize, k: usize, l: usize, seed: u64) -> SeriesBatch {
    let mut rng = common::rng(seed);
    let series = (0..instances)
        .map(|_| {
            let m = common::binary(k, l, 0.9, &mut rng);
            let x = common::gaussian(k, l, &mut rng).zip_map(&m, |v, w| v * w);
            Series::new(x, m).unwrap()
        })
        .collect();
    SeriesBatch::new(series).unwrap()
}

fn micro_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        ..TrainConfig::pretrain(epochs, seed)
    }
}

#[test]
fn forward_sample_variance_matches_schedule() {
    let sched = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
    let mut rng = common::rng(5);
    let n = 100_000;
    let x0 = Matrix::zeros(1, n);
    for t in [1, 10, 50] {
        let eps = common::gaussian(1, n, &mut rng);
        let xt = forward_sample(&x0, t, &eps, &sched).unwrap();
        let mean = xt.sum() / n as f64;
        let var = xt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = 1.0 - sched.alpha_bar(t);
        assert!((var / expected - 1.0).abs() < 0.05, "t={t}: {var} vs {expected}");
    }
}

#[test]
fn denoiser_mixes_no_positions() {
    let model = common::micro_model(3, 2);
    let mut rng = common::rng(3);
    let (k, l) = (3, 5);
    let x = common::gaussian(k, l, &mut rng);
    let m = common::binary(k, l, 0.6, &mut rng);
    let z = model.embed(&x.zip_map(&m, |a, b| a * b), &m, &[0, 1, 2]).unwrap();
    let xt = common::gaussian(k, l, &mut rng);
    let base = model.predict_noise(&xt, 3, &z).unwrap();
    for (pk, pl) in [(0, 0), (1, 3), (2, 4)] {
        let mut moved = xt.clone();
        moved.set(pk, pl, moved.get(pk, pl) + 0.7);
        let out = model.predict_noise(&moved, 3, &z).unwrap();
        for r in 0..k {
            for c in 0..l {
                let changed = out.get(r, c) != base.get(r, c);
                assert_eq!(changed, (r, c) == (pk, pl), "cell ({r}, {c}) after moving ({pk}, {pl})");
            }
        }
        let mut z2 = z.clone();
        for ch in 0..z2.z.cols() {
            let row = pk * l + pl;
            let v = z2.z.get(row, ch);
            z2.z.set(row, ch, v + 0.5);
        }
        let out = model.predict_noise(&xt, 3, &z2).unwrap();
        assert_ne!(out.get(pk, pl), base.get(pk, pl));
        assert_eq!(out.get((pk + 1) % k, pl), base.get((pk + 1) % k, pl));
    }
}

#[test]
fn sampling_embeds_once_and_denoises_per_step() {
    let model = common::micro_model(2, 4);
    let x = Matrix::from_fn(2, 6, |r, c| (r + c) as f64 * 0.1);
    let m = Matrix::from_fn(2, 6, |_, c| if c % 2 == 0 { 1.0 } else { 0.0 });
    model.reset_counters();
    generate(&model, &x, &m, &[0, 1], &SamplerConfig::new(3, 9)).unwrap();
    assert_eq!(model.embed_calls(), 1);
    assert_eq!(model.predict_calls(), 3 * model.schedule.steps());
}

#[test]
fn sampler_keeps_observed_cells_and_is_seeded() {
    let model = common::micro_model(3, 6);
    let mut rng = common::rng(8);
    let x = common::gaussian(3, 7, &mut rng);
    let m = common::binary(3, 7, 0.5, &mut rng);
    let mut cfg = SamplerConfig::new(5, 21);
    let a = generate(&model, &x, &m, &[0, 1, 2], &cfg).unwrap();
    for s in &a.samples {
        for i in 0..x.len() {
            if m.as_slice()[i] != 0.0 {
                assert_eq!(s.as_slice()[i].to_bits(), x.as_slice()[i].to_bits());
            }
        }
    }
    cfg.deterministic = true;
    let b = generate(&model, &x, &m, &[0, 1, 2], &cfg).unwrap();
    assert_eq!(a, b);
    cfg.seed = 22;
    let c = generate(&model, &x, &m, &[0, 1, 2], &cfg).unwrap();
    assert_ne!(a.samples, c.samples);
    let mut cell: Vec<f64> = a.samples.iter().map(|s| s.get(0, 0)).collect();
    cell.sort_by(f64::total_cmp);
    assert_eq!(a.median.get(0, 0), cell[2]);
}

#[test]
fn forecast_fills_the_horizon() {
    let model = common::micro_model(2, 1);
    let x = Matrix::from_fn(2, 6, |r, c| (r * 6 + c) as f64);
    let m = Matrix::filled(2, 6, 1.0);
    let s = forecast(&model, &x, &m, 2, &[0, 1], &SamplerConfig::new(2, 3)).unwrap();
    for r in 0..2 {
        for c in 0..6 {
            assert_eq!(s.target_mask.get(r, c), if c >= 4 { 1.0 } else { 0.0 });
            if c < 4 {
                assert_eq!(s.median.get(r, c), x.get(r, c));
            }
        }
    }
}

#[test]
fn training_is_reproducible_across_modes() {
    let data = micro_batch(6, 2, 5, 1);
    let run = |deterministic: bool| {
        let model = Model::new(ModelConfig::micro(2), 3).unwrap();
        let cfg = TrainConfig {
            deterministic,
            ..micro_train_config(3, 11)
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        t.fit(&data, None, |_| {}).unwrap();
        t
    };
    let a = run(true);
    let b = run(true);
    let c = run(false);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, c.history);
    assert_eq!(a.model.params, c.model.params);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = micro_batch(5, 2, 4, 2);
    let model = Model::new(ModelConfig::micro(2), 5).unwrap();
    let cfg = TrainConfig {
        deterministic: true,
        ..micro_train_config(4, 13)
    };
    let mut straight = Trainer::new(model.clone(), cfg.clone()).unwrap();
    straight.fit(&data, None, |_| {}).unwrap();

    let mut first = Trainer::new(model, cfg).unwrap();
    first.train_epoch(&data, None).unwrap();
    first.train_epoch(&data, None).unwrap();
    let bytes = Checkpoint::from_trainer(&first).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer(None).unwrap();
    resumed.fit(&data, None, |_| {}).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(
        Checkpoint::from_trainer(&resumed).to_bytes(),
        Checkpoint::from_trainer(&straight).to_bytes()
    );
}

#[test]
fn fully_conditioned_batch_has_zero_loss_and_gradient() {
    let model = Model::new(ModelConfig::micro(2), 1).unwrap();
    let t = Trainer::new(
        model,
        TrainConfig {
            mask_kind: MaskKind::Imputation,
            ..micro_train_config(1, 1)
        },
    )
    .unwrap();
    let s = Series::new(Matrix::zeros(2, 4), Matrix::zeros(2, 4)).unwrap();
    let (loss, grads) = t.batch_gradients(&[&s, &s], None, &[1, 2]).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn zero_epoch_finetune_keeps_parameters() {
    let model = Model::new(ModelConfig::micro(2), 1).unwrap();
    let data = micro_batch(2, 2, 4, 1);
    let t = tsdiff_core::trainer::finetune(model.clone(), &data, None, TrainConfig::finetune(0, 1, MaskKind::Imputation))
        .unwrap();
    assert_eq!(t.model.params, model.params);
}

#[test]
fn history_finetune_needs_a_pool() {
    let model = Model::new(ModelConfig::micro(2), 1).unwrap();
    let data = micro_batch(2, 2, 4, 1);
    let cfg = TrainConfig::finetune(1, 1, MaskKind::History);
    assert!(tsdiff_core::trainer::finetune(model.clone(), &data, None, cfg.clone()).is_err());
    assert!(tsdiff_core::trainer::finetune(model, &data, Some(&data), cfg).is_ok());
}

#[test]
fn learning_rate_steps_down() {
    let cfg = TrainConfig::pretrain(100, 1);
    assert_eq!(cfg.lr_for_epoch(75), 1e-3);
    assert!((cfg.lr_for_epoch(76) - 1e-4).abs() < 1e-18);
    assert!((cfg.lr_for_epoch(91) - 1e-5).abs() < 1e-18);
}

fn normal_windows(instances: usize, len: usize, seed: u64) -> Vec<Series> {
    let cfg = SynthConfig {
        instances,
        noise_std: 0.1,
        ..SynthConfig::new(len, seed)
    };
    synth_dataset(&cfg).unwrap().series
}

#[test]
fn projection_head_trains_without_touching_the_model() {
    let model = Model::new(ModelConfig::micro(3), 7).unwrap();
    let before = model.params.fingerprint(model.params.ids());
    let train = normal_windows(8, 12, 1);
    let cfg = HeadTrainConfig {
        lr: 1e-2,
        batch_size: 4,
        ..HeadTrainConfig::projection(60, 42)
    };
    let (trained, losses) = finetune_projection(&model, &train, &cfg).unwrap();
    assert_eq!(model.params.fingerprint(model.params.ids()), before);
    assert_eq!(losses.len(), 60);
    let (fresh, _) = finetune_projection(&model, &train, &HeadTrainConfig { epochs: 0, ..cfg }).unwrap();
    assert!(trained.reconstruction_mse(&model, &train).unwrap() < fresh.reconstruction_mse(&model, &train).unwrap());
    assert_eq!(trained.input_width(), 3 * (model.config.embedding_channels() - 1));

    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.set_head(trained.to_record());
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let restored = ProjectionHead::from_record(back.head(PROJECTION_NAMESPACE).unwrap()).unwrap();
    assert_eq!(restored, trained);
}

#[test]
fn injected_spike_has_the_largest_score() {
    let model = Model::new(ModelConfig::micro(3), 7).unwrap();
    let train = normal_windows(16, 12, 2);
    let cfg = HeadTrainConfig {
        lr: 1e-2,
        batch_size: 4,
        ..HeadTrainConfig::projection(80, 42)
    };
    let (head, _) = finetune_projection(&model, &train, &cfg).unwrap();
    let mut test = normal_windows(1, 12, 99).remove(0);
    let spike = 6;
    test.values.set(1, spike, test.values.get(1, spike) + 8.0);
    let scores = head.scores(&model, &test).unwrap();
    let argmax = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    assert_eq!(argmax, spike, "{scores:?}");

    let high = scores.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
    let d = detect(&model, &head, std::slice::from_ref(&test), ThresholdRule::Fixed(high), None, None).unwrap();
    assert!(d.predictions.iter().all(|&p| !p));
    let gt: Vec<bool> = (0..12).map(|i| (5..=7).contains(&i)).collect();
    let d = detect(
        &model,
        &head,
        std::slice::from_ref(&test),
        ThresholdRule::Fixed(scores[spike]),
        None,
        Some(&gt),
    )
    .unwrap();
    assert_eq!(d.predictions, gt);
    assert_eq!(d.metrics.unwrap().f1, 1.0);
    assert!(detect(&model, &head, &[test], ThresholdRule::ValidationRatio(0.1), None, None).is_err());
}

#[test]
fn classifier_separates_toy_embeddings_and_is_deterministic() {
    let layout = ClassifierLayout {
        hidden: 16,
        ..ClassifierLayout::new(2, 3, 2, 2)
    };
    let mut rng = common::rng(4);
    let direction = normal_init(1, layout.input_width(), 1.0, &mut rng);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        let jitter = normal_init(1, layout.input_width(), 0.3, &mut rng);
        features.push(direction.zip_map(&jitter, |d, j| sign * d + j));
        labels.push(y);
    }
    let cfg = HeadTrainConfig {
        lr: 1e-3,
        batch_size: 8,
        ..HeadTrainConfig::classifier(1)
    };
    let (head, losses) = finetune_classifier(&features, &labels, layout, &cfg).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let all = Matrix::from_fn(40, layout.input_width(), |r, c| features[r].get(0, c));
    let p = head.predict_proba(&all).unwrap();
    assert_eq!(accuracy(&p, &labels), 1.0);
    assert_eq!(p, head.predict_proba(&all).unwrap());
    for r in 0..p.rows() {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let record = head.to_record();
    assert_eq!(record.namespace, CLASSIFIER_NAMESPACE);
    assert_eq!(ClassifierHead::from_record(&record).unwrap(), head);
    assert!(finetune_classifier(&features, &vec![2; 40], layout, &cfg).is_err());
}

#[test]
fn classifier_features_flatten_the_full_embedding() {
    let model = Model::new(ModelConfig::micro(2), 1).unwrap();
    let x = common::gaussian(2, 5, &mut common::rng(1));
    let f = classifier_features(&model, &x, &[0, 1]).unwrap();
    assert_eq!(f.shape(), (1, 2 * 5 * model.config.embedding_channels()));
    let c = model.config.embedding_channels();
    let mask_channel: Vec<f64> = (0..10).map(|i| f.get(0, i * c + c - 1)).collect();
    let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!(mask_channel.iter().all(|v| (v - silu1).abs() < 1e-15));
}
