use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wrinkle_core::bake::read_disp;
use wrinkle_core::dataset::{DesignRig, MotionParams, WrinkleConfig, WrinkleOracle};
use wrinkle_core::design::{DesignParams, DesignTemplate};
use wrinkle_core::geometry::{desk_body, obj, ShapeCoefficients};
use wrinkle_core::metrics::{position_error, read_report};

fn wrinkle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wrinkle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = wrinkle(args);
    assert!(
        out.status.success(),
        "wrinkle {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty(), "machine output belongs in files");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TOY_TRAIN: &[&str] = &[
    "--set",
    "train.widths=[4,4,8,8,8,8]",
    "--set",
    "train.embed_dim=8",
    "--set",
    "train.steps=6",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.checkpoint_every=3",
    "--set",
    "schedule.steps=8",
];

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn small_dataset(root: &Path, name: &str) -> PathBuf {
    let cfg = write_config(
        root,
        "dataset.toml",
        "[dataset]\nresolution = 32\ndesign_count = 2\nvalidation_designs = 1\n\
         sequence_count = 2\nvalidation_sequences = 1\nframes = 3\n",
    );
    let out = root.join(name);
    ok(&["dataset-gen", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);
    out
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let out = wrinkle(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_seed_and_unknown_keys_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wrinkle(&["train", "--set", "dataset=x", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let out = wrinkle(&["dataset-gen", "--set", "dataset.frame=3", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_dataset_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("ds");
    let out = wrinkle(&["dataset-gen", "--set", "dataset.frames=0", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wrinkle(&[
        "sample",
        "--seed",
        "1",
        "--set",
        &format!("checkpoint=\"{}\"", s(&tmp.path().join("nope"))),
        "--set",
        "conditions=[[0.0]]",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bake_then_reconstruct_is_submillimeter() {
    let tmp = tempfile::tempdir().unwrap();
    let oracle = WrinkleOracle::new(desk_body(), DesignTemplate::default(), WrinkleConfig::default()).unwrap();
    let design = DesignParams::new(0.5, 0.3, 0.7).unwrap();
    let rig: DesignRig = oracle.rig(&design).unwrap();
    let shape = ShapeCoefficients(vec![0.3, -0.4]);
    let motion = MotionParams::random(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2));
    let pose = motion.pose(0.7, 4);
    let mesh = oracle.generate(&rig, &shape, &pose, 5).unwrap();
    let src = tmp.path().join("frame.obj");
    obj::write_garment(&src, &mesh).unwrap();

    let list = |v: &[f64]| format!("[{}]", v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(","));
    let baked = tmp.path().join("baked");
    ok(&[
        "bake",
        "--set",
        &format!("mesh=\"{}\"", s(&src)),
        "--set",
        "design={length=0.5,sleeve=0.3,cleavage=0.7}",
        "--set",
        &format!("shape={}", list(&shape.0)),
        "--set",
        &format!("pose={}", list(&pose.flatten())),
        "--out",
        s(&baked),
    ]);
    let tex = baked.join("frame.disp");
    assert_eq!(read_disp(&tex).unwrap().texture.resolution(), 128);
    let rec = tmp.path().join("rec");
    ok(&["reconstruct", "--set", &format!("texture=\"{}\"", s(&tex)), "--out", s(&rec)]);
    let back = obj::read_garment(&rec.join("frame.obj")).unwrap();
    let err = position_error(&back, &mesh).unwrap();
    assert!(err < 1e-3, "mean error {err} m");
}

#[test]
fn pipeline_is_byte_identical_under_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let a = small_dataset(root, "ds_a");
    let b = small_dataset(root, "ds_b");
    assert_eq!(tree(&a), tree(&b));

    let train = |name: &str, cmd: &str| {
        let out = root.join(name);
        let mut args = vec![cmd, "--seed", "11", "--set"];
        let ds = format!("dataset=\"{}\"", s(&a));
        args.push(&ds);
        args.extend_from_slice(TOY_TRAIN);
        args.extend_from_slice(&["--out", s(&out)]);
        ok(&args);
        out
    };
    let t1 = train("t1", "train");
    let t2 = train("t2", "train");
    assert_eq!(tree(&t1), tree(&t2));
    assert!(t1.join("snapshots/step_000003/manifest.json").is_file());
    assert_eq!(std::fs::read_to_string(t1.join("loss.csv")).unwrap().lines().count(), 7);
    let tt1 = train("tt1", "train-temporal");
    let tt2 = train("tt2", "train-temporal");
    assert_eq!(tree(&tt1), tree(&tt2));

    let sample = |name: &str| {
        let out = root.join(name);
        ok(&[
            "sample",
            "--seed",
            "3",
            "--set",
            &format!("checkpoint=\"{}\"", s(&t1.join("model"))),
            "--set",
            &format!("dataset=\"{}\"", s(&a)),
            "--set",
            "limit=4",
            "--out",
            s(&out),
        ]);
        out
    };
    let s1 = sample("s1");
    assert_eq!(tree(&s1).len(), 4);
    assert_eq!(tree(&s1), tree(&sample("s2")));

    let rollout = |name: &str, model: &Path| {
        let out = root.join(name);
        ok(&[
            "rollout",
            "--seed",
            "5",
            "--set",
            &format!("checkpoint=\"{}\"", s(&model.join("model"))),
            "--set",
            &format!("dataset=\"{}\"", s(&a)),
            "--set",
            "design=1",
            "--set",
            "sequence=1",
            "--out",
            s(&out),
        ]);
        out
    };
    let r1 = rollout("r1", &tt1);
    assert_eq!(tree(&r1), tree(&rollout("r2", &tt1)));
    let rs = rollout("rs", &t1);

    let eval_cfg = write_config(
        root,
        "eval.toml",
        &format!(
            "dataset = \"{}\"\ndesign = 1\nsequence = 1\n\n[[predictions]]\nlabel = \"temporal\"\ndir = \"{}\"\n\n\
             [[predictions]]\nlabel = \"static\"\ndir = \"{}\"\n",
            s(&a),
            s(&r1),
            s(&rs)
        ),
    );
    let ev = root.join("eval");
    ok(&["eval", "--config", s(&eval_cfg), "--out", s(&ev)]);
    let curves = read_report(&ev.join("velocity.csv")).unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0].frames, vec![1, 2]);
    assert!(ev.join("position.json").is_file());

    let png = root.join("png");
    ok(&["export-png", "--set", &format!("input=\"{}\"", s(&s1)), "--out", s(&png)]);
    let img = image::open(png.join("sample_00000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}
