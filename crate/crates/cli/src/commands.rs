use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};
use wrinkle_core::bake::{bake, preview_rgb, read_disp, reconstruct_garment, write_disp, DispFile, NormalizationSpec};
use wrinkle_core::dataset::{build_dataset, Dataset};
use wrinkle_core::denoiser::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, CheckpointManifest, CheckpointMeta, CheckpointSink,
    Shuffled, UNet,
};
use wrinkle_core::design::{design_mesh, load_dtpl, DesignParams, DesignTemplate};
use wrinkle_core::diffusion::{sample, ConditionVector, ScheduleConfig, TextureSpace};
use wrinkle_core::geometry::{desk_body, obj, BodyModel, GarmentMesh, Pose, ShapeCoefficients, SkinningWeights};
use wrinkle_core::metrics::{position_curve, report, velocity_error_by};
use wrinkle_core::temporal::{read_sequence, rollout, static_rollout, train_temporal, write_sequence, SequenceFrame, SequenceSample};
use wrinkle_core::Error;

use crate::config::*;

const SAMPLE_CHUNK: usize = 16;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| invalid(format!("{} has no file name", path.display())))
}

struct Scene {
    body: BodyModel,
    template: DesignTemplate,
    dataset: Option<Dataset>,
}

impl Scene {
    fn load(files: &SceneFiles) -> Result<Self> {
        if let Some(dir) = &files.dataset {
            if files.body.is_some() || files.template.is_some() {
                return Err(invalid("scene.dataset already fixes the body and template"));
            }
            let ds = Dataset::open(dir)?;
            return Ok(Scene {
                body: ds.body.clone(),
                template: ds.template.clone(),
                dataset: Some(ds),
            });
        }
        let body = match &files.body {
            Some(p) => BodyModel::load_json(p)?,
            None => desk_body(),
        };
        let template = match &files.template {
            Some(p) => load_dtpl(p)?.0,
            None => DesignTemplate::default(),
        };
        Ok(Scene {
            body,
            template,
            dataset: None,
        })
    }

    fn rig(&self, p: &DesignParams) -> Result<(GarmentMesh, SkinningWeights)> {
        let canonical = design_mesh(&self.template, p)?;
        let weights = SkinningWeights::project(&canonical.vertices, &self.body)?;
        Ok((canonical, weights))
    }

    fn condition(&self, v: &[f64]) -> Result<ConditionVector> {
        Ok(ConditionVector::from_slice(v, self.body.shape_dim(), self.body.joint_count())?)
    }
}

pub fn dataset_gen(run: DatasetGenRun) -> Result<()> {
    let m = build_dataset(&run.dataset, &run.out)?;
    log::info!(
        "wrote {} frames ({} designs, {} sequences) to {}",
        m.frames.len(),
        m.designs.len(),
        m.sequences.len(),
        run.out.display()
    );
    Ok(())
}

pub fn bake_cmd(run: BakeRun) -> Result<()> {
    let scene = Scene::load(&run.scene)?;
    let mesh = obj::read_garment(&run.mesh)?;
    let cond = ConditionVector {
        shape: ShapeCoefficients(run.shape),
        pose: Pose::from_flat(&run.pose)?,
        design: run.design,
    };
    run.design.validate()?;
    scene.body.check_shape(&cond.shape)?;
    scene.body.check_pose(&cond.pose)?;
    let (canonical, weights) = scene.rig(&cond.design)?;
    let texture = bake(&mesh, &canonical, &weights, &scene.body, &cond.shape, &cond.pose, run.resolution)
        .with_context(|| format!("baking {}", run.mesh.display()))?;
    let normalization = run
        .normalization
        .or_else(|| scene.dataset.as_ref().map(|d| d.manifest.normalization));
    let mut provenance = Map::new();
    provenance.insert("source".into(), stem(&run.mesh)?.into());
    provenance.insert("condition".into(), cond.to_vec().into());
    create_dir(&run.out)?;
    let path = run.out.join(format!("{}.disp", stem(&run.mesh)?));
    write_disp(&path, &DispFile { texture, normalization, provenance })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn provenance_condition(p: &Map<String, Value>) -> Option<Vec<f64>> {
    p.get("condition")?.as_array()?.iter().map(Value::as_f64).collect()
}

pub fn reconstruct_cmd(run: ReconstructRun) -> Result<()> {
    let scene = Scene::load(&run.scene)?;
    let file = read_disp(&run.texture)?;
    let raw = match run.condition.clone().or_else(|| provenance_condition(&file.provenance)) {
        Some(v) => v,
        None => {
            let ds = scene
                .dataset
                .as_ref()
                .ok_or_else(|| invalid("no condition given and none recorded in the texture"))?;
            let key = |k: &str| file.provenance.get(k).and_then(Value::as_u64).map(|v| v as usize);
            let (d, s, f) = (key("design"), key("sequence"), key("frame"));
            ds.manifest
                .frames
                .iter()
                .find(|r| Some(r.design) == d && Some(r.sequence) == s && Some(r.frame) == f)
                .map(|r| r.condition.clone())
                .ok_or_else(|| invalid("texture provenance matches no dataset frame"))?
        }
    };
    let cond = scene.condition(&raw)?;
    let (_, weights) = scene.rig(&cond.design)?;
    let mesh = reconstruct_garment(
        &file.texture,
        &scene.template,
        &cond.design,
        &weights,
        &scene.body,
        &cond.shape,
        &cond.pose,
    )?;
    create_dir(&run.out)?;
    let path = run.out.join(format!("{}.obj", stem(&run.texture)?));
    obj::write_garment(&path, &mesh)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn checkpoint_meta(seed: u64, schedule: &ScheduleConfig, space: &TextureSpace) -> CheckpointMeta {
    CheckpointMeta {
        step: 0,
        seed,
        schedule: schedule.clone(),
        texture_space: Some(space.into()),
    }
}

fn finish_training(out: &Path, model: &UNet<f32>, meta: CheckpointMeta, losses: &[f64]) -> Result<()> {
    save_checkpoint(&out.join("model"), model, &CheckpointMeta { step: losses.len(), ..meta })?;
    write_loss_csv(&out.join("loss.csv"), losses)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    log::info!(
        "final loss {:.5} (mean of the last {} steps); model in {}",
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        tail.len(),
        out.join("model").display()
    );
    Ok(())
}

fn open_for_training(dataset: &Path, resolution: usize) -> Result<Dataset> {
    let ds = Dataset::open(dataset)?;
    if ds.manifest.resolution != resolution {
        return Err(invalid(format!(
            "train.resolution is {resolution} but the dataset is baked at {}",
            ds.manifest.resolution
        )));
    }
    Ok(ds)
}

pub fn train_cmd(run: TrainRun) -> Result<()> {
    let mut cfg = run.train;
    cfg.seed = run.seed;
    cfg.validate()?;
    let sched = run.schedule.build()?;
    let ds = open_for_training(&run.dataset, cfg.resolution)?;
    let space = ds.texture_space();
    let examples = ds.static_examples(run.subset.into())?;
    let mut model = cfg.init_model(ds.cond_dim(), 0, sched.steps())?;
    log::info!("{} examples, {} parameters", examples.len(), model.parameter_count());
    create_dir(&run.out)?;
    let meta = checkpoint_meta(run.seed, &run.schedule, &space);
    let sink = CheckpointSink {
        dir: run.out.join("snapshots"),
        meta: meta.clone(),
    };
    let mut source = Shuffled::new(&examples)?;
    let report = train(&mut model, &mut source, &sched, &cfg, Some(&sink))?;
    finish_training(&run.out, &model, meta, &report.losses)
}

pub fn train_temporal_cmd(run: TrainTemporalRun) -> Result<()> {
    let mut cfg = run.train;
    cfg.seed = run.seed;
    cfg.validate()?;
    let sched = run.schedule.build()?;
    let ds = open_for_training(&run.dataset, cfg.resolution)?;
    let space = ds.texture_space();
    let sequences = ds.sequence_samples(run.subset.into())?;
    let mut model = cfg.init_model(ds.cond_dim(), space.shape()[0], sched.steps())?;
    log::info!("{} sequences, {} parameters", sequences.len(), model.parameter_count());
    create_dir(&run.out)?;
    let meta = checkpoint_meta(run.seed, &run.schedule, &space);
    let sink = CheckpointSink {
        dir: run.out.join("snapshots"),
        meta: meta.clone(),
    };
    let report = train_temporal(&mut model, &sequences, &space, &sched, &cfg, &run.augmentation, Some(&sink))?;
    finish_training(&run.out, &model, meta, &report.losses)
}

fn open_checkpoint(dir: &Path) -> Result<(UNet<f32>, CheckpointManifest, TextureSpace)> {
    let (model, manifest) = load_checkpoint(dir)?;
    let space = manifest
        .texture_space
        .as_ref()
        .ok_or_else(|| invalid(format!("{} records no texture space", dir.display())))?
        .to_space()?;
    Ok((model, manifest, space))
}

pub fn sample_cmd(run: SampleRun) -> Result<()> {
    let (model, manifest, space) = open_checkpoint(&run.checkpoint)?;
    if model.config().context_channels > 0 {
        return Err(invalid("this checkpoint expects a previous frame; use `rollout`"));
    }
    let sched = manifest.schedule.build()?;
    let (body, raw): (BodyModel, Vec<Vec<f64>>) = match (&run.dataset, run.conditions.is_empty()) {
        (_, false) => (desk_body(), run.conditions.clone()),
        (Some(dir), true) => {
            let ds = Dataset::open(dir)?;
            let raw = ds.frames(run.subset.into()).map(|f| f.condition.clone()).collect();
            (ds.body, raw)
        }
        (None, true) => return Err(invalid("give `conditions` or a `dataset` to draw them from")),
    };
    let raw: Vec<Vec<f64>> = raw.into_iter().take(run.limit.unwrap_or(usize::MAX)).collect();
    if raw.is_empty() {
        return Err(invalid("no conditions to sample"));
    }
    let conds: Vec<ConditionVector> = raw
        .iter()
        .map(|v| ConditionVector::from_slice(v, body.shape_dim(), body.joint_count()))
        .collect::<wrinkle_core::Result<_>>()?;
    create_dir(&run.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut index = 0;
    for chunk in conds.chunks(SAMPLE_CHUNK) {
        for (tex, c) in sample(&model, chunk, &space, &sched, &mut rng, run.mode)?.into_iter().zip(chunk) {
            let mut provenance = Map::new();
            provenance.insert("index".into(), index.into());
            provenance.insert("condition".into(), c.to_vec().into());
            write_disp(
                &run.out.join(format!("sample_{index:05}.disp")),
                &DispFile {
                    texture: tex,
                    normalization: Some(space.normalization),
                    provenance,
                },
            )?;
            index += 1;
        }
    }
    log::info!("wrote {index} samples to {}", run.out.display());
    Ok(())
}

pub fn rollout_cmd(run: RolloutRun) -> Result<()> {
    let (model, manifest, space) = open_checkpoint(&run.checkpoint)?;
    let sched = manifest.schedule.build()?;
    let ds = Dataset::open(&run.dataset)?;
    let clip = ds.clip(run.design, run.sequence);
    if clip.is_empty() {
        return Err(invalid(format!("dataset has no clip for design {} sequence {}", run.design, run.sequence)));
    }
    let fps = ds.manifest.sequences[run.sequence].fps;
    let conds: Vec<ConditionVector> = clip.iter().map(|f| ds.condition(f)).collect::<wrinkle_core::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let textures = if model.config().context_channels > 0 {
        rollout(&model, &conds, &space, &sched, &mut rng, run.mode)?
    } else {
        static_rollout(&model, &conds, &space, &sched, &mut rng, run.mode)?
    };
    let seq = SequenceSample {
        fps,
        frames: clip
            .iter()
            .zip(conds)
            .zip(textures)
            .map(|((f, condition), texture)| SequenceFrame {
                time: f.frame as f64 / fps,
                condition,
                texture,
            })
            .collect(),
    };
    write_sequence(&run.out, &seq, Some(&space.normalization))?;
    log::info!("wrote {} frames to {}", seq.frames.len(), run.out.display());
    Ok(())
}

pub fn eval_cmd(run: EvalRun) -> Result<()> {
    if run.predictions.is_empty() {
        return Err(invalid("no predictions to evaluate"));
    }
    let ds = Dataset::open(&run.dataset)?;
    let oracle = ds.oracle()?;
    let clip = ds.clip(run.design, run.sequence);
    if clip.is_empty() {
        return Err(invalid(format!("dataset has no clip for design {} sequence {}", run.design, run.sequence)));
    }
    let rig = oracle.rig(&ds.manifest.designs[run.design])?;
    let gt: Vec<GarmentMesh> = clip
        .iter()
        .map(|f| ds.ground_truth(&oracle, &rig, f))
        .collect::<wrinkle_core::Result<_>>()?;
    let seq_name = format!("d{:02}_s{:02}", run.design, run.sequence);
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    for p in &run.predictions {
        let seq = read_sequence(&p.dir)?;
        if seq.frames.len() != gt.len() {
            return Err(Error::Structural(format!(
                "{}: {} frames, the ground truth has {}",
                p.label,
                seq.frames.len(),
                gt.len()
            ))
            .into());
        }
        let meshes: Vec<GarmentMesh> = seq
            .frames
            .iter()
            .map(|f| {
                let c = &f.condition;
                reconstruct_garment(&f.texture, &ds.template, &c.design, &rig.weights, &ds.body, &c.shape, &c.pose)
            })
            .collect::<wrinkle_core::Result<_>>()?;
        let pos = position_curve(&meshes, &gt, run.reduction, &p.label, &seq_name)?;
        let vel = velocity_error_by(&meshes, &gt, run.reduction, &p.label, &seq_name)?;
        log::info!(
            "{}: position error mean {:.3e} m (variance {:.3e}), velocity error mean {:.3e} m/frame",
            p.label,
            pos.mean(),
            pos.variance(),
            vel.mean()
        );
        positions.push(pos);
        velocities.push(vel);
    }
    create_dir(&run.out)?;
    report(&positions, &run.out.join("position.csv"), run.overwrite)?;
    report(&velocities, &run.out.join("velocity.csv"), run.overwrite)?;
    Ok(())
}

pub fn export_png_cmd(run: ExportPngRun) -> Result<()> {
    let inputs: Vec<PathBuf> = if run.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&run.input)
            .with_context(|| format!("listing {}", run.input.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e == "disp"));
        v.sort();
        v
    } else {
        vec![run.input.clone()]
    };
    if inputs.is_empty() {
        return Err(invalid(format!("no .disp files in {}", run.input.display())));
    }
    let fallback = match &run.dataset {
        Some(d) => Some(Dataset::open(d)?.manifest.normalization),
        None => None,
    };
    create_dir(&run.out)?;
    for path in &inputs {
        let file = read_disp(path)?;
        let norm = match file.normalization.or(fallback) {
            Some(n) => n,
            None => NormalizationSpec::fit([&file.texture])?,
        };
        let t = &file.texture;
        let img = image::RgbImage::from_raw(t.width() as u32, t.height() as u32, preview_rgb(t, &norm))
            .context("preview buffer size")?;
        let out = run.out.join(format!("{}.png", stem(path)?));
        img.save_with_format(&out, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    log::info!("wrote {} images to {}", inputs.len(), run.out.display());
    Ok(())
}
