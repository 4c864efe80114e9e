use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::{DenoiseBatch, NoisePredictor, ScheduleConfig};
use crate::nn::{Gradients, Graph, ParamStore};

fn toy_config(time_encoding: TimeEncoding, context_channels: usize) -> UNetConfig {
    UNetConfig {
        widths: [4, 4, 8, 8, 8, 8],
        embed_dim: 8,
        time_encoding,
        diffusion_steps: 10,
        max_groups: 2,
        ..UNetConfig::desk(5, context_channels)
    }
}

fn randomize<T: crate::nn::Scalar>(params: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    for id in params.ids().collect::<Vec<_>>() {
        let fan = params.get(id).shape().iter().skip(1).product::<usize>().max(1);
        let s = 1.0 / (fan as f64).sqrt();
        let name = params.name(id).to_string();
        for v in params.get_mut(id).data_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v = T::lit(if name.ends_with(".gamma") { 1.0 + 0.2 * z } else { s * z });
        }
    }
}

fn batch<T: crate::nn::Scalar>(n: usize, cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> DenoiseBatch<T> {
    DenoiseBatch {
        y_t: Tensor::randn(&[n, cfg.channels_out, 32, 32], rng),
        cond: Tensor::randn(&[n, cfg.cond_dim], rng),
        steps: (0..n).map(|_| rng.random_range(1..=cfg.diffusion_steps)).collect(),
        context: (cfg.context_channels > 0).then(|| Tensor::randn(&[n, cfg.context_channels, 32, 32], rng)),
    }
}

/// `sum(f(batch) * probe)`, whose gradient is the backward pass seeded with `probe`.
fn probe_value(net: &UNet<f64>, b: &DenoiseBatch<f64>, probe: &Tensor<f64>) -> f64 {
    let out = net.predict(b).unwrap();
    out.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
}

fn check_gradients(time_encoding: TimeEncoding, context_channels: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_config(time_encoding, context_channels);
    let mut net = UNet::<f64>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let b = batch::<f64>(2, &cfg, &mut rng);
    let probe = Tensor::<f64>::randn(b.y_t.shape(), &mut rng);
    let mut g = Graph::new();
    let out = net.build(&mut g, &b).unwrap();
    let grads = g.backward_with(out, probe.clone()).unwrap().into_gradients(net.params());
    let h = 1e-3;
    let mut worst = (0.0, String::new());
    for id in net.params().ids().collect::<Vec<_>>() {
        let name = net.params().name(id).to_string();
        let gt = grads.get(id).data().to_vec();
        let largest = (0..gt.len()).max_by(|&a, &b| gt[a].abs().total_cmp(&gt[b].abs())).unwrap();
        let random = rng.random_range(0..gt.len());
        for k in [largest, random] {
            let orig = net.params().get(id).data()[k];
            net.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let plus = probe_value(&net, &b, &probe);
            net.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let minus = probe_value(&net, &b, &probe);
            net.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (numeric - gt[k]).abs() / numeric.abs().max(gt[k].abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {} numeric {numeric}", gt[k]));
            }
        }
    }
    assert!(worst.0 < 1e-3, "worst relative error {:.2e} at {}", worst.0, worst.1);
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(TimeEncoding::Sinusoidal, 0, 1);
}

#[test]
fn gradients_match_with_learned_time_and_context() {
    check_gradients(TimeEncoding::Learned, 3, 2);
}

#[test]
fn zero_init_output_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = UNetConfig::desk(20, 0);
    let net = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let b = DenoiseBatch {
        y_t: Tensor::zeros(&[1, 3, 32, 32]),
        cond: Tensor::zeros(&[1, 20]),
        steps: vec![1],
        context: None,
    };
    let out = net.predict(&b).unwrap();
    assert_eq!(out.shape(), &[1, 3, 32, 32]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = toy_config(TimeEncoding::Sinusoidal, 0);
    let mut net = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let b = batch::<f32>(3, &cfg, &mut rng);
    let a = net.predict(&b).unwrap();
    let c = net.predict(&b).unwrap();
    assert_eq!(a.data(), c.data());
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let n1 = UNet::<f32>::new(cfg.clone(), &mut r1).unwrap();
    let n2 = UNet::<f32>::new(cfg, &mut r2).unwrap();
    assert_eq!(n1.params(), n2.params());
}

#[test]
fn output_shape_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = UNetConfig {
        widths: [2, 2, 4, 4, 8, 8],
        embed_dim: 16,
        ..UNetConfig::desk(20, 0)
    };
    let mut net = UNet::<f32>::new(cfg, &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    for res in [32, 64, 128] {
        let b = DenoiseBatch {
            y_t: Tensor::randn(&[1, 3, res, res], &mut rng),
            cond: Tensor::randn(&[1, 20], &mut rng),
            steps: vec![7],
            context: None,
        };
        let out = net.predict(&b).unwrap();
        assert_eq!(out.shape(), b.y_t.shape());
        assert!(out.is_finite());
    }
    let bad = DenoiseBatch {
        y_t: Tensor::zeros(&[1, 3, 48, 48]),
        cond: Tensor::zeros(&[1, 20]),
        steps: vec![1],
        context: None,
    };
    assert!(matches!(net.predict(&bad), Err(Error::Structural(_))));
}

#[test]
fn parameter_count_matches_paper_scale_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let desk = UNet::<f32>::new(UNetConfig::desk(20, 0), &mut rng).unwrap();
    let big = UNet::<f32>::new(
        UNetConfig {
            widths: [128, 128, 256, 256, 512, 512],
            ..UNetConfig::desk(20, 0)
        },
        &mut rng,
    )
    .unwrap();
    assert_eq!(desk.parameter_count(), desk.params().numel());
    assert!(big.parameter_count() > 30 * desk.parameter_count());
}

#[test]
fn batch_gradient_is_sum_of_per_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = toy_config(TimeEncoding::Sinusoidal, 0);
    let mut net = UNet::<f64>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let b = batch::<f64>(3, &cfg, &mut rng);
    let probe = Tensor::<f64>::randn(b.y_t.shape(), &mut rng);
    let grad_of = |b: &DenoiseBatch<f64>, probe: &Tensor<f64>| {
        let mut g = Graph::new();
        let out = net.build(&mut g, b).unwrap();
        g.backward_with(out, probe.clone()).unwrap().into_gradients(net.params())
    };
    let full = grad_of(&b, &probe);
    let mut summed = Gradients::zeros_like(net.params());
    let ys = b.y_t.unstack();
    let cs = b.cond.unstack();
    let ps = probe.unstack();
    for i in 0..3 {
        let one = DenoiseBatch {
            y_t: Tensor::stack(&[ys[i].clone()]).unwrap(),
            cond: Tensor::stack(&[cs[i].clone()]).unwrap(),
            steps: vec![b.steps[i]],
            context: None,
        };
        let gi = grad_of(&one, &Tensor::stack(&[ps[i].clone()]).unwrap());
        for (id, t) in gi.iter() {
            summed.get_mut(id).add_assign(t);
        }
    }
    for (id, t) in full.iter() {
        let d = t.max_abs_diff(summed.get(id));
        let scale = t.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(d <= 1e-10 * scale, "{}: {d}", net.params().name(id));
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = toy_config(TimeEncoding::Learned, 3);
    let mut net = UNet::<f64>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let b = batch::<f64>(2, &cfg, &mut rng);
    let mut g = Graph::new();
    let out = net.build(&mut g, &b).unwrap();
    let grads = g
        .backward_with(out, Tensor::zeros(b.y_t.shape()))
        .unwrap()
        .into_gradients(net.params());
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn ignored_condition_component_does_not_change_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = toy_config(TimeEncoding::Sinusoidal, 0);
    let mut net = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let id = net.params().find("cond.fc1.weight").unwrap();
    let w = net.params_mut().get_mut(id);
    let cols = w.shape()[1];
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        if k % cols == 2 {
            *v = 0.0;
        }
    }
    let mut b = batch::<f32>(2, &cfg, &mut rng);
    let before = net.predict(&b).unwrap();
    for row in 0..2 {
        b.cond.data_mut()[row * cols + 2] += 3.5;
    }
    let after = net.predict(&b).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn mismatched_inputs_are_structural_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = toy_config(TimeEncoding::Sinusoidal, 3);
    let net = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let mut b = batch::<f32>(1, &cfg, &mut rng);
    b.context = None;
    assert!(matches!(net.predict(&b), Err(Error::Structural(_))));
    let mut b = batch::<f32>(1, &cfg, &mut rng);
    b.cond = Tensor::zeros(&[1, 4]);
    assert!(matches!(net.predict(&b), Err(Error::Structural(_))));
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        steps: 5,
        widths: [4, 4, 8, 8, 8, 8],
        embed_dim: 8,
        log_every: 0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn constant_examples(n: usize, value: f32) -> Vec<TrainExample> {
    (0..n)
        .map(|_| TrainExample {
            y0: Tensor::full(&[3, 32, 32], value),
            cond: vec![0.0; 5],
            context: None,
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny_train_config()
    };
    let sched = ScheduleConfig::default().build().unwrap();
    let mut model = cfg.init_model(5, 0, 100).unwrap();
    let before = model.params().clone();
    let data = constant_examples(3, 0.5);
    let report = train(&mut model, &mut Shuffled::new(&data).unwrap(), &sched, &cfg, None).unwrap();
    assert_eq!(report.losses.len(), 5);
    assert_eq!(model.params(), &before);
}

#[test]
fn training_reduces_loss_on_constant_data() {
    let cfg = TrainConfig {
        steps: 300,
        learning_rate: 2e-3,
        ..tiny_train_config()
    };
    let sched = ScheduleConfig::default().build().unwrap();
    let mut model = cfg.init_model(5, 0, 100).unwrap();
    let data = constant_examples(4, 0.5);
    let report = train(&mut model, &mut Shuffled::new(&data).unwrap(), &sched, &cfg, None).unwrap();
    let head = report.losses[..50].iter().sum::<f64>() / 50.0;
    assert!(report.trailing_mean(50) < 0.5 * head, "{head} -> {}", report.trailing_mean(50));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_train_config();
    let sched = ScheduleConfig::default().build().unwrap();
    let data = constant_examples(3, -0.25);
    let run = || {
        let mut model = cfg.init_model(5, 0, 100).unwrap();
        let r = train(&mut model, &mut Shuffled::new(&data).unwrap(), &sched, &cfg, None).unwrap();
        (model.params().clone(), r.losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_names_tensor_and_restores_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 4,
        checkpoint_every: 2,
        ..tiny_train_config()
    };
    let sched = ScheduleConfig::default().build().unwrap();
    let mut model = cfg.init_model(5, 0, 100).unwrap();
    let data = constant_examples(2, 0.5);
    let mut poisoned = data.clone();
    poisoned[0].y0.data_mut()[0] = f32::NAN;
    poisoned[1].y0.data_mut()[0] = f32::NAN;
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        meta: CheckpointMeta {
            step: 0,
            seed: cfg.seed,
            schedule: ScheduleConfig::default(),
            texture_space: None,
        },
    };
    // Two clean steps and a snapshot, then poisoned data.
    train(&mut model, &mut Shuffled::new(&data).unwrap(), &sched, &TrainConfig { steps: 2, ..cfg.clone() }, Some(&sink))
        .unwrap();
    let good = model.params().clone();
    let err = train(&mut model, &mut Shuffled::new(&poisoned).unwrap(), &sched, &cfg, Some(&sink)).unwrap_err();
    match err {
        Error::Divergence { step, reason, .. } => {
            assert_eq!(step, 1);
            assert!(reason.contains("NaN"), "{reason}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(model.params(), &good);
    let (restored, manifest) = load_checkpoint(&sink.path_for(2)).unwrap();
    assert_eq!(manifest.step, 2);
    assert_eq!(restored.params(), &good);
}

#[test]
fn non_finite_gradient_is_reported_by_tensor() {
    let cfg = tiny_train_config();
    let sched = ScheduleConfig::default().build().unwrap();
    let mut model = cfg.init_model(5, 0, 100).unwrap();
    let id = model.params().find("cond.fc1.weight").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f32::INFINITY;
    let before = model.params().clone();
    let data: Vec<TrainExample> = constant_examples(2, 0.5)
        .into_iter()
        .map(|mut e| {
            e.cond[0] = 1.0;
            e
        })
        .collect();
    let err = train(&mut model, &mut Shuffled::new(&data).unwrap(), &sched, &cfg, None).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(model.params(), &before);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = toy_config(TimeEncoding::Learned, 3);
    let mut net = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    randomize(net.params_mut(), &mut rng);
    let meta = CheckpointMeta {
        step: 17,
        seed: 3,
        schedule: ScheduleConfig::default(),
        texture_space: Some(TextureSpaceRecord {
            resolution: 2,
            normalization: crate::bake::NormalizationSpec {
                scale: 0.5,
                offset_center: [0.0; 3],
            },
            mask: "0110".into(),
        }),
    };
    save_checkpoint(dir.path(), &net, &meta).unwrap();
    let (back, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.architecture, cfg);
    assert_eq!((manifest.step, manifest.seed), (17, 3));
    assert_eq!(back.params(), net.params());
    let space = manifest.texture_space.unwrap().to_space().unwrap();
    assert_eq!(space.mask, vec![false, true, true, false]);
    let b = batch::<f32>(1, &cfg, &mut rng);
    assert_eq!(back.predict(&b).unwrap().data(), net.predict(&b).unwrap().data());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = UNet::<f32>::new(toy_config(TimeEncoding::Sinusoidal, 0), &mut rng).unwrap();
    let meta = CheckpointMeta {
        step: 0,
        seed: 0,
        schedule: ScheduleConfig::default(),
        texture_space: None,
    };
    save_checkpoint(dir.path(), &net, &meta).unwrap();
    let blob = dir.path().join("tensors.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn loss_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let losses = vec![1.0, 0.5, 0.123456789012345, 1e-9];
    write_loss_csv(&path, &losses).unwrap();
    assert_eq!(read_loss_csv(&path).unwrap(), losses);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,loss\n1,"));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { resolution: 48, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"steps": 10}"#).unwrap();
    assert_eq!(parsed.steps, 10);
    assert_eq!(parsed.batch_size, 8);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 10}"#).is_err());
}
