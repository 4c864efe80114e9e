//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `cargo test -p wrinkle-cli --test acceptance -- 1 4 8` runs a subset.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrinkle_core::bake::{bake, reconstruct_garment};
use wrinkle_core::dataset::{build_dataset, Dataset, DatasetConfig, DesignRig, MotionParams, WrinkleConfig, WrinkleOracle};
use wrinkle_core::denoiser::{train, Shuffled, TrainConfig, TrainExample, UNet, UNetConfig};
use wrinkle_core::design::{DesignParams, DesignTemplate};
use wrinkle_core::diffusion::{
    make_schedule, sample_normalized, DenoiseBatch, DifferentiableDenoiser, NoisePredictor, NoiseSchedule,
    SamplingMode, ScheduleConfig,
};
use wrinkle_core::geometry::{
    desk_body, resolve_collisions, skin, unpose, BodyModel, ClosedMesh, GarmentMesh, Pose, ShapeCoefficients,
    SignedDistance, Vec3,
};
use wrinkle_core::metrics::{position_curve, position_error, velocity_error_by, Reduction};
use wrinkle_core::nn::{Graph, Tensor};
use wrinkle_core::temporal::{rollout, static_rollout, train_temporal, AugmentationConfig};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle() -> WrinkleOracle {
    WrinkleOracle::new(desk_body(), DesignTemplate::default(), WrinkleConfig::default()).unwrap()
}

fn random_design(rng: &mut ChaCha8Rng) -> DesignParams {
    DesignParams::new(rng.random(), rng.random(), rng.random()).unwrap()
}

fn random_shape(body: &BodyModel, rng: &mut ChaCha8Rng) -> ShapeCoefficients {
    ShapeCoefficients((0..body.shape_dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Per-joint rotations of up to 60 degrees about uniform axes, plus a root
/// translation.
fn random_pose(body: &BodyModel, rng: &mut ChaCha8Rng) -> Pose {
    let v = |rng: &mut ChaCha8Rng| {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    };
    let rotations = (0..body.joint_count())
        .map(|_| {
            let axis = v(rng);
            if axis.norm() < 1e-6 {
                Vec3::zeros()
            } else {
                axis.normalize() * (60f64.to_radians() * rng.random::<f64>())
            }
        })
        .collect();
    Pose { rotations, translation: v(rng) }
}

/// A frame drawn the way the dataset draws them: random design, shape,
/// motion and time.
fn oracle_frame(o: &WrinkleOracle, rng: &mut ChaCha8Rng) -> (DesignRig, ShapeCoefficients, Pose, GarmentMesh) {
    let rig = o.rig(&random_design(rng)).unwrap();
    let shape = random_shape(&o.body, rng);
    let pose = MotionParams::random(rng).pose(rng.random_range(0.0..2.0), o.body.joint_count());
    let mesh = o.generate(&rig, &shape, &pose, rng.random()).unwrap();
    (rig, shape, pose, mesh)
}

fn max_vertex_distance(a: &GarmentMesh, b: &GarmentMesh) -> f64 {
    a.vertices.iter().zip(&b.vertices).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn skin_unpose_identity() -> Outcome {
    let o = oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rig = o.rig(&random_design(&mut rng)).unwrap();
        let shape = random_shape(&o.body, &mut rng);
        let pose = random_pose(&o.body, &mut rng);
        let posed = skin(&rig.canonical, &rig.weights, &o.body, &shape, &pose).unwrap();
        let back = unpose(&posed, &rig.weights, &o.body, &shape, &pose).unwrap();
        let again = skin(&back, &rig.weights, &o.body, &shape, &pose).unwrap();
        worst = worst
            .max(max_vertex_distance(&back, &rig.canonical))
            .max(max_vertex_distance(&again, &posed));
    }
    check(worst <= 1e-6, format!("max vertex deviation {worst:.2e} m over 100 poses (limit 1e-6)"))
}

fn bake_fidelity() -> Outcome {
    let o = oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let resolutions = [32, 64, 128];
    let mut sums = [0.0; 3];
    let frames = 50;
    for _ in 0..frames {
        let (rig, shape, pose, mesh) = oracle_frame(&o, &mut rng);
        for (k, &res) in resolutions.iter().enumerate() {
            let tex = bake(&mesh, &rig.canonical, &rig.weights, &o.body, &shape, &pose, res).unwrap();
            let rec =
                reconstruct_garment(&tex, &o.template, &rig.params, &rig.weights, &o.body, &shape, &pose).unwrap();
            sums[k] += position_error(&rec, &mesh).unwrap();
        }
    }
    let means = sums.map(|s| s / frames as f64);
    let monotone = means[0] > means[1] && means[1] > means[2];
    check(
        means[2] < 1e-3 && monotone,
        format!(
            "mean error {:.3} / {:.3} / {:.3} mm at 32 / 64 / 128 (limit 1 mm at 128, strictly decreasing)",
            means[0] * 1e3,
            means[1] * 1e3,
            means[2] * 1e3
        ),
    )
}

fn gradient_config(context_channels: usize) -> UNetConfig {
    UNetConfig {
        widths: [4, 4, 8, 8, 8, 8],
        embed_dim: 8,
        diffusion_steps: 10,
        max_groups: 2,
        ..UNetConfig::desk(5, context_channels)
    }
}

/// Worst relative error over the largest-gradient entry and three random
/// entries of every parameter tensor, and the number of tensors checked.
fn gradient_check(cfg: UNetConfig, rng: &mut ChaCha8Rng) -> (f64, String, usize) {
    let mut net = UNet::<f64>::new(cfg.clone(), rng).unwrap();
    // Zero-initialized layers would hide every gradient behind them.
    for id in net.params().ids().collect::<Vec<_>>() {
        let gamma = net.params().name(id).ends_with(".gamma");
        let fan = net.params().get(id).shape().iter().skip(1).product::<usize>().max(1);
        for v in net.params_mut().get_mut(id).data_mut() {
            let z = rng.random_range(-1.0..1.0) * 3f64.sqrt() / (fan as f64).sqrt();
            *v = if gamma { 1.0 + 0.2 * z } else { z };
        }
    }
    let n = 2;
    let batch = DenoiseBatch {
        y_t: Tensor::<f64>::randn(&[n, cfg.channels_out, 32, 32], rng),
        cond: Tensor::randn(&[n, cfg.cond_dim], rng),
        steps: (0..n).map(|_| rng.random_range(1..=cfg.diffusion_steps)).collect(),
        context: (cfg.context_channels > 0).then(|| Tensor::randn(&[n, cfg.context_channels, 32, 32], rng)),
    };
    let probe = Tensor::<f64>::randn(batch.y_t.shape(), rng);
    let value = |net: &UNet<f64>| -> f64 {
        let out = net.predict(&batch).unwrap();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let out = net.build(&mut g, &batch).unwrap();
    let grads = g.backward_with(out, probe.clone()).unwrap().into_gradients(net.params());
    let h = 1e-4;
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = net.params().ids().collect();
    for &id in &ids {
        let analytic = grads.get(id).data().to_vec();
        let largest = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap();
        let mut entries = vec![largest];
        entries.extend((0..3).map(|_| rng.random_range(0..analytic.len())));
        for k in entries {
            let orig = net.params().get(id).data()[k];
            net.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let plus = value(&net);
            net.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let minus = value(&net);
            net.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]", net.params().name(id)));
            }
        }
    }
    (worst.0, worst.1, ids.len())
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, at_a, na) = gradient_check(gradient_config(0), &mut rng);
    let (b, at_b, nb) = gradient_check(gradient_config(3), &mut rng);
    let (worst, at) = if a >= b { (a, at_a) } else { (b, at_b) };
    check(
        worst < 1e-3,
        format!("worst relative error {worst:.2e} at {at} over {} tensors (limit 1e-3)", na + nb),
    )
}

fn schedule_identity() -> Outcome {
    let mut worst = 0.0f64;
    for steps in [1, 10, 100] {
        let s = make_schedule(steps, 1e-4, 0.02).unwrap();
        let mut running = 1.0;
        for t in 1..=steps {
            running *= s.alpha(t);
            worst = worst.max((s.alpha_bar(t) - running).abs());
        }
    }
    let b = 0.02;
    let s = make_schedule(100, b, b).unwrap();
    let mut closed = 0.0f64;
    for t in 1..=100 {
        let power = (1.0 - b).powi(t as i32);
        closed = closed.max((s.alpha_bar(t) - power).abs() / power);
    }
    check(
        worst <= 1e-12 && closed <= 1e-14,
        format!("running product deviation {worst:.1e} (limit 1e-12), constant-beta relative deviation {closed:.1e}"),
    )
}

const TOY_COND: usize = 20;

/// Training recipe for the learnability checks.
fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        steps: 2000,
        resolution: 32,
        seed,
        log_every: 0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn fit_toy(values: &[f32], seed: u64, sched: &NoiseSchedule) -> (UNet<f32>, f64) {
    let examples: Vec<TrainExample> = (0..16)
        .map(|i| TrainExample {
            y0: Tensor::new(&[3, 32, 32], vec![values[i % values.len()]; 3 * 32 * 32]).unwrap(),
            cond: vec![0.0; TOY_COND],
            context: None,
        })
        .collect();
    let cfg = toy_train_config(seed);
    let mut model = cfg.init_model(TOY_COND, 0, sched.steps()).unwrap();
    let mut source = Shuffled::new(&examples).unwrap();
    let report = train(&mut model, &mut source, sched, &cfg, None).unwrap();
    (model, report.final_loss())
}

/// Per sample: the index of the nearest target by mean absolute texel
/// deviation, that deviation, and the sample mean.
fn sample_deviations(model: &UNet<f32>, sched: &NoiseSchedule, targets: &[f32], count: usize, seed: u64) -> Vec<(usize, f32, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = (count - out.len()).min(25);
        let cond = Tensor::zeros(&[n, TOY_COND]);
        let y = sample_normalized(model, &cond, None, [3, 32, 32], sched, &mut rng, SamplingMode::StandardDdpm).unwrap();
        for s in y.unstack() {
            let len = s.data().len() as f32;
            let dev = |c: f32| s.data().iter().map(|v| (v - c).abs()).sum::<f32>() / len;
            let (k, d) = (0..targets.len())
                .map(|k| (k, dev(targets[k])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            out.push((k, d, s.data().iter().sum::<f32>() / len));
        }
    }
    out
}

fn ddpm_learnability() -> Outcome {
    let sched = ScheduleConfig::default().build().unwrap();
    let constant = 0.3f32;
    let (model, loss) = fit_toy(&[constant], 5, &sched);
    let dev = sample_deviations(&model, &sched, &[constant], 100, 6);
    let worst_mean = dev.iter().map(|d| (d.2 - constant).abs()).fold(0.0, f32::max);
    let texel_dev = dev.iter().map(|d| d.1).sum::<f32>() / dev.len() as f32;

    let clusters = [0.5f32, -0.5];
    let (model, cluster_loss) = fit_toy(&clusters, 7, &sched);
    let dev = sample_deviations(&model, &sched, &clusters, 100, 8);
    let hits = |k: usize| dev.iter().filter(|d| d.0 == k && d.1 <= 0.1).count();
    let (pos, neg) = (hits(0), hits(1));
    check(
        loss < 0.02 && worst_mean <= 0.05 && texel_dev <= 0.05 && pos + neg >= 95 && pos > 0 && neg > 0,
        format!(
            "constant: loss {loss:.4} (limit 0.02), worst sample-mean offset {worst_mean:.3} and mean texel \
             deviation {texel_dev:.3} (limit 0.05); two clusters: loss {cluster_loss:.4}, {pos} at +0.5 and \
             {neg} at -0.5 within 0.1 mean texel deviation (need 95 of 100, both present)"
        ),
    )
}

fn validation_clip(ds: &Dataset) -> (usize, usize) {
    let split = &ds.manifest.split;
    (split.validation_designs[0], split.validation_sequences[0])
}

fn temporal_coherence() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        seed: 21,
        resolution: 32,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, tmp.path()).unwrap();
    let ds = Dataset::open(tmp.path()).unwrap();
    let space = ds.texture_space();
    let sched = ScheduleConfig::default().build().unwrap();
    let train_cfg = toy_train_config(22);

    let examples = ds.static_examples(wrinkle_core::dataset::Subset::Train).unwrap();
    let mut static_model = train_cfg.init_model(ds.cond_dim(), 0, sched.steps()).unwrap();
    train(&mut static_model, &mut Shuffled::new(&examples).unwrap(), &sched, &train_cfg, None).unwrap();

    let sequences = ds.sequence_samples(wrinkle_core::dataset::Subset::Train).unwrap();
    let mut temporal_model = train_cfg.init_model(ds.cond_dim(), space.shape()[0], sched.steps()).unwrap();
    train_temporal(&mut temporal_model, &sequences, &space, &sched, &train_cfg, &AugmentationConfig::default(), None)
        .unwrap();

    let (d, s) = validation_clip(&ds);
    let truth = ds.sequence_sample(d, s).unwrap();
    let conditions: Vec<_> = truth.frames.iter().map(|f| f.condition.clone()).collect();
    let o = ds.oracle().unwrap();
    let rig = o.rig(&ds.manifest.designs[d]).unwrap();
    let gt: Vec<GarmentMesh> = ds.clip(d, s).iter().map(|f| ds.ground_truth(&o, &rig, f).unwrap()).collect();
    let meshes = |textures: Vec<wrinkle_core::bake::DisplacementTexture>| -> Vec<GarmentMesh> {
        textures
            .iter()
            .zip(&conditions)
            .map(|(t, c)| reconstruct_garment(t, &ds.template, &c.design, &rig.weights, &ds.body, &c.shape, &c.pose).unwrap())
            .collect()
    };
    let mode = SamplingMode::default();
    let st = meshes(static_rollout(&static_model, &conditions, &space, &sched, &mut ChaCha8Rng::seed_from_u64(23), mode).unwrap());
    let tm = meshes(rollout(&temporal_model, &conditions, &space, &sched, &mut ChaCha8Rng::seed_from_u64(23), mode).unwrap());
    let name = format!("d{d:02}_s{s:02}");
    let st_vel = velocity_error_by(&st, &gt, Reduction::Mean, "static", &name).unwrap().mean();
    let tm_vel = velocity_error_by(&tm, &gt, Reduction::Mean, "temporal", &name).unwrap().mean();
    let st_var = position_curve(&st, &gt, Reduction::Mean, "static", &name).unwrap().variance();
    let tm_var = position_curve(&tm, &gt, Reduction::Mean, "temporal", &name).unwrap().variance();
    check(
        tm_vel < st_vel && tm_var < st_var,
        format!(
            "{name}, {} frames: velocity error {:.3} vs {:.3} mm/frame, position error variance {:.3e} vs {:.3e} mm^2 \
             (temporal vs static, temporal must be lower in both)",
            gt.len(),
            tm_vel * 1e3,
            st_vel * 1e3,
            tm_var * 1e6,
            st_var * 1e6
        ),
    )
}

fn wrinkle(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_wrinkle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "wrinkle {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).display().to_string();
    let quoted = |key: &str, name: &str| format!("{key}=\"{}\"", p(name));
    let small = [
        "--set", "dataset.design_count=3", "--set", "dataset.validation_designs=1",
        "--set", "dataset.sequence_count=2", "--set", "dataset.validation_sequences=1",
        "--set", "dataset.frames=4",
    ];
    let toy = [
        "--set", "train.widths=[4,4,8,8,8,8]", "--set", "train.embed_dim=8",
        "--set", "train.steps=20", "--set", "train.batch_size=4", "--set", "train.checkpoint_every=10",
    ];
    let mut mismatched = Vec::new();
    let mut compare = |what: &str, a: &str, b: &str| {
        let (ta, tb) = (tree(&root.join(a)), tree(&root.join(b)));
        if ta.is_empty() || ta != tb {
            mismatched.push(what.to_string());
        }
        ta.len()
    };
    for run in ["ds_a", "ds_b"] {
        let out = p(run);
        let mut args = vec!["dataset-gen", "--seed", "31"];
        args.extend(small);
        args.extend(["--out", &out]);
        wrinkle(&args);
    }
    let mut files = compare("dataset-gen", "ds_a", "ds_b");
    let ds = quoted("dataset", "ds_a");
    for (cmd, runs) in [("train", ["st_a", "st_b"]), ("train-temporal", ["tt_a", "tt_b"])] {
        for run in runs {
            let out = p(run);
            let mut args = vec![cmd, "--seed", "32", "--set", &ds];
            args.extend(toy);
            args.extend(["--out", &out]);
            wrinkle(&args);
        }
        files += compare(cmd, runs[0], runs[1]);
    }
    let ck = quoted("checkpoint", "st_a/model");
    for run in ["sa_a", "sa_b"] {
        wrinkle(&["sample", "--seed", "33", "--set", &ck, "--set", &ds, "--set", "limit=6", "--out", &p(run)]);
    }
    files += compare("sample", "sa_a", "sa_b");
    let ck = quoted("checkpoint", "tt_a/model");
    for run in ["ro_a", "ro_b"] {
        wrinkle(&[
            "rollout", "--seed", "34", "--set", &ck, "--set", &ds, "--set", "design=2", "--set", "sequence=1",
            "--out", &p(run),
        ]);
    }
    files += compare("rollout", "ro_a", "ro_b");
    check(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("dataset-gen, train, train-temporal, sample, rollout: {files} files byte-identical across reruns")
        } else {
            format!("outputs differ between reruns: {}", mismatched.join(", "))
        },
    )
}

fn collision_contract() -> Outcome {
    let o = oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = o.config.collision_epsilon;
    let mut deepest = f64::INFINITY;
    let mut penetrating = 0usize;
    for _ in 0..100 {
        let rig = o.rig(&random_design(&mut rng)).unwrap();
        let shape = random_shape(&o.body, &mut rng);
        let pose = MotionParams::random(&mut rng).pose(rng.random_range(0.0..2.0), o.body.joint_count());
        // Wrinkles plus a random inward pull of up to 3 cm, so that many
        // vertices start inside the body.
        let mut canonical = rig.canonical.clone();
        let offsets = o.wrinkle_offsets(&rig, &shape, &pose, rng.random());
        for ((v, d), n) in canonical.vertices.iter_mut().zip(offsets).zip(&rig.normals) {
            *v += d - n * rng.random_range(0.0..0.03);
        }
        let posed = skin(&canonical, &rig.weights, &o.body, &shape, &pose).unwrap();
        let body = ClosedMesh::new(o.body.posed_surface(&shape, &pose).unwrap().unwrap()).unwrap();
        penetrating += posed.vertices.iter().filter(|v| body.query(v).distance < 0.0).count();
        let resolved = resolve_collisions(&posed, &body, eps).unwrap();
        for v in &resolved.vertices {
            deepest = deepest.min(body.query(v).distance);
        }
    }
    check(
        deepest >= -1e-6,
        format!(
            "min signed distance {:.3e} m after resolution on 100 frames (limit -1e-6); {penetrating} vertices were inside before",
            deepest
        ),
    )
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "skin/unpose identity", budget: Duration::from_secs(10), run: skin_unpose_identity },
    Criterion { id: 2, name: "bake/reconstruct fidelity", budget: Duration::from_secs(60), run: bake_fidelity },
    Criterion { id: 3, name: "gradient correctness", budget: Duration::from_secs(300), run: gradient_correctness },
    Criterion { id: 4, name: "schedule identity", budget: Duration::from_secs(1), run: schedule_identity },
    Criterion { id: 5, name: "DDPM learnability", budget: Duration::from_secs(1800), run: ddpm_learnability },
    Criterion { id: 6, name: "temporal coherence", budget: Duration::from_secs(7200), run: temporal_coherence },
    Criterion { id: 7, name: "determinism", budget: Duration::from_secs(600), run: determinism },
    Criterion { id: 8, name: "collision contract", budget: Duration::from_secs(60), run: collision_contract },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {}. {}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
