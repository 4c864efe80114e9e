//! Training data: procedural or ingested garment frames baked into
//! displacement textures, with a manifest describing designs, motions and
//! the train/validation split.

mod ingest;
mod oracle;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ingest::{read_ingest_dir, write_ingest_dir, IngestedSequence, CONDITIONS_FILE};
pub use oracle::{
    generate_procedural, DesignRig, MotionParams, WrinkleConfig, WrinkleOracle, POSE_LIPSCHITZ,
};

use crate::bake::{bake, read_disp, write_disp, DispFile, DisplacementTexture, NormalizationSpec};
use crate::denoiser::TrainExample;
use crate::design::{load_dtpl, save_dtpl, DesignParams, DesignTemplate, GeneratorParams};
use crate::diffusion::{ConditionVector, TextureSpace};
use crate::error::{structural, validation, Error, Result};
use crate::geometry::{desk_body, obj, BodyModel, GarmentMesh, Pose, ShapeCoefficients};
use crate::temporal::{SequenceFrame, SequenceSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BODY_FILE: &str = "body.json";
pub const TEMPLATE_FILE: &str = "template.dtpl";
const FORMAT: &str = "wrinkle-dataset";
const VERSION: u32 = 1;

/// An externally simulated sequence to bake alongside the procedural ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// Directory holding `frame_%05d.obj` files and the conditions CSV.
    pub dir: PathBuf,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    30.0
}

/// What [`build_dataset`] generates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub resolution: usize,
    /// Explicit designs; when empty, `design_count` designs are drawn uniformly.
    pub designs: Vec<DesignParams>,
    pub design_count: usize,
    /// The last this-many designs are held out.
    pub validation_designs: usize,
    pub sequence_count: usize,
    /// The last this-many procedural sequences are held out.
    pub validation_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub wrinkle: WrinkleConfig,
    pub generator: GeneratorParams,
    /// Ingested sequences join the training split.
    pub ingest: Vec<IngestConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            resolution: 32,
            designs: Vec::new(),
            design_count: 6,
            validation_designs: 2,
            sequence_count: 4,
            validation_sequences: 1,
            frames: 30,
            fps: 30.0,
            wrinkle: WrinkleConfig::default(),
            generator: GeneratorParams::default(),
            ingest: Vec::new(),
        }
    }
}

impl DatasetConfig {
    fn design_total(&self) -> usize {
        if self.designs.is_empty() {
            self.design_count
        } else {
            self.designs.len()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(validation!("resolution must be positive"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(validation!("fps must be positive, got {}", self.fps));
        }
        let procedural = self.design_total() * self.sequence_count * self.frames;
        if procedural == 0 && self.ingest.is_empty() {
            return Err(validation!("the dataset description produces no frames"));
        }
        if procedural > 0 {
            if self.validation_designs >= self.design_total() && self.validation_designs > 0 {
                return Err(validation!("all {} designs are held out", self.design_total()));
            }
            if self.validation_sequences >= self.sequence_count && self.validation_sequences > 0 {
                return Err(validation!("all {} sequences are held out", self.sequence_count));
            }
        }
        for p in &self.designs {
            p.validate()?;
        }
        self.wrinkle.validate()?;
        self.generator.validate()
    }
}

/// How a sequence's frames were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SequenceSource {
    Procedural { motion: MotionParams, wrinkle_seed: u64 },
    Ingested { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub fps: f64,
    pub frames: usize,
    pub shape: ShapeCoefficients,
    pub source: SequenceSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train_designs: Vec<usize>,
    pub validation_designs: Vec<usize>,
    pub train_sequences: Vec<usize>,
    pub validation_sequences: Vec<usize>,
}

impl Split {
    /// A (design, sequence) pair trains only when both are training members.
    pub fn is_train(&self, design: usize, sequence: usize) -> bool {
        self.train_designs.contains(&design) && self.train_sequences.contains(&sequence)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// `.disp` path relative to the dataset root.
    pub file: String,
    pub design: usize,
    pub sequence: usize,
    pub frame: usize,
    pub condition: Vec<f64>,
}

/// `manifest.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub body: String,
    pub template: String,
    pub wrinkle: WrinkleConfig,
    pub designs: Vec<DesignParams>,
    pub sequences: Vec<SequenceRecord>,
    pub split: Split,
    pub normalization: NormalizationSpec,
    /// Texel coverage shared by every frame, one `'0'`/`'1'` per texel.
    pub mask: String,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let designs: BTreeSet<_> = self.split.train_designs.iter().collect();
        let sequences: BTreeSet<_> = self.split.train_sequences.iter().collect();
        if self.split.validation_designs.iter().any(|d| designs.contains(d))
            || self.split.validation_sequences.iter().any(|s| sequences.contains(s))
        {
            return Err(validation!("train and validation splits overlap"));
        }
        if self.mask.len() != self.resolution * self.resolution {
            return Err(structural!("mask of {} texels at resolution {}", self.mask.len(), self.resolution));
        }
        for f in &self.frames {
            if f.design >= self.designs.len() || f.sequence >= self.sequences.len() {
                return Err(structural!("frame {} refers to a missing design or sequence", f.file));
            }
        }
        self.normalization.validate()
    }
}

fn frame_file(design: usize, sequence: usize, frame: usize) -> String {
    format!("frames/d{design:02}_s{sequence:02}_f{frame:05}.disp")
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
}

/// Quantizes to the float32 values `.disp` files store, so in-memory and
/// on-disk textures agree exactly.
fn quantize(tex: DisplacementTexture) -> Result<DisplacementTexture> {
    let offsets = tex.offsets().iter().map(|o| o.map(|x| x as f32 as f64)).collect();
    tex.with_offsets(offsets)
}

struct Job {
    design: usize,
    sequence: usize,
    frame: usize,
    shape: ShapeCoefficients,
    pose: Pose,
    wrinkle_seed: u64,
}

/// Generates every frame in memory, fits the normalization and only then
/// writes `out_dir`. Any failure is reported per item and leaves nothing
/// on disk.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let body = desk_body();
    let template = DesignTemplate::new(cfg.generator.clone())?;
    let oracle = WrinkleOracle::new(body.clone(), template.clone(), cfg.wrinkle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut designs: Vec<DesignParams> = if cfg.designs.is_empty() {
        (0..cfg.design_count)
            .map(|_| DesignParams::new(rng.random(), rng.random(), rng.random()))
            .collect::<Result<_>>()?
    } else {
        cfg.designs.clone()
    };
    let mut sequences: Vec<SequenceRecord> = (0..cfg.sequence_count)
        .map(|_| SequenceRecord {
            fps: cfg.fps,
            frames: cfg.frames,
            shape: ShapeCoefficients(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            source: SequenceSource::Procedural {
                motion: MotionParams::random(&mut rng),
                wrinkle_seed: rng.random(),
            },
        })
        .collect();
    let n_train_designs = designs.len() - cfg.validation_designs.min(designs.len());
    let n_train_sequences = sequences.len() - cfg.validation_sequences.min(sequences.len());
    let mut split = Split {
        train_designs: (0..n_train_designs).collect(),
        validation_designs: (n_train_designs..designs.len()).collect(),
        train_sequences: (0..n_train_sequences).collect(),
        validation_sequences: (n_train_sequences..sequences.len()).collect(),
    };

    let mut jobs = Vec::new();
    for d in 0..designs.len() {
        for (s, seq) in sequences.iter().enumerate() {
            let SequenceSource::Procedural { motion, wrinkle_seed } = &seq.source else {
                unreachable!("only procedural sequences exist so far")
            };
            for f in 0..seq.frames {
                jobs.push(Job {
                    design: d,
                    sequence: s,
                    frame: f,
                    shape: seq.shape.clone(),
                    pose: motion.pose(f as f64 / seq.fps, body.joint_count()),
                    wrinkle_seed: *wrinkle_seed,
                });
            }
        }
    }
    let rigs: Vec<DesignRig> = designs.iter().map(|p| oracle.rig(p)).collect::<Result<_>>()?;
    let results: Vec<Result<DisplacementTexture>> = jobs
        .par_iter()
        .map(|j| {
            let rig = &rigs[j.design];
            let mesh = oracle.generate(rig, &j.shape, &j.pose, j.wrinkle_seed)?;
            quantize(bake(&mesh, &rig.canonical, &rig.weights, &body, &j.shape, &j.pose, cfg.resolution)?)
        })
        .collect();
    let mut failures = Vec::new();
    let mut baked: Vec<(FrameRecord, DisplacementTexture)> = Vec::with_capacity(jobs.len());
    for (j, r) in jobs.iter().zip(results) {
        let file = frame_file(j.design, j.sequence, j.frame);
        match r {
            Ok(tex) => {
                let condition = ConditionVector {
                    shape: j.shape.clone(),
                    pose: j.pose.clone(),
                    design: designs[j.design],
                };
                baked.push((
                    FrameRecord {
                        file,
                        design: j.design,
                        sequence: j.sequence,
                        frame: j.frame,
                        condition: condition.to_vec(),
                    },
                    tex,
                ));
            }
            Err(e) => failures.push((file, e)),
        }
    }

    for ing in &cfg.ingest {
        let items = match read_ingest_dir(&ing.dir, &body, &template) {
            Ok(seq) => seq,
            Err(Error::Itemized { failures: inner }) => {
                failures.extend(inner);
                continue;
            }
            Err(e) => {
                failures.push((ing.dir.display().to_string(), e));
                continue;
            }
        };
        let d = designs.len();
        let s = sequences.len();
        designs.push(items.design);
        split.train_designs.push(d);
        split.train_sequences.push(s);
        sequences.push(SequenceRecord {
            fps: ing.fps,
            frames: items.frames.len(),
            shape: items.shape.clone(),
            source: SequenceSource::Ingested { dir: ing.dir.clone() },
        });
        let rig = oracle.rig(&items.design)?;
        let results: Vec<Result<DisplacementTexture>> = items
            .frames
            .par_iter()
            .map(|(path, pose, mesh)| {
                bake(mesh, &rig.canonical, &rig.weights, &body, &items.shape, pose, cfg.resolution)
                    .and_then(quantize)
                    .map_err(|e| e.in_file(path))
            })
            .collect();
        for (k, ((path, pose, _), r)) in items.frames.iter().zip(results).enumerate() {
            match r {
                Ok(tex) => {
                    let condition = ConditionVector {
                        shape: items.shape.clone(),
                        pose: pose.clone(),
                        design: items.design,
                    };
                    baked.push((
                        FrameRecord {
                            file: frame_file(d, s, k),
                            design: d,
                            sequence: s,
                            frame: k,
                            condition: condition.to_vec(),
                        },
                        tex,
                    ));
                }
                Err(e) => failures.push((path.display().to_string(), e)),
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Itemized { failures });
    }
    if baked.is_empty() {
        return Err(validation!("the dataset description produces no frames"));
    }

    let mask = baked[0].1.mask().to_vec();
    if let Some((rec, _)) = baked.iter().find(|(_, t)| t.mask() != mask.as_slice()) {
        return Err(structural!("{} has a different texel coverage", rec.file));
    }
    let normalization = NormalizationSpec::fit(baked.iter().map(|(_, t)| t))?;
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: cfg.seed,
        resolution: cfg.resolution,
        body: BODY_FILE.into(),
        template: TEMPLATE_FILE.into(),
        wrinkle: cfg.wrinkle,
        designs,
        sequences,
        split,
        normalization,
        mask: mask_string(&mask),
        frames: baked.iter().map(|(r, _)| r.clone()).collect(),
    };
    manifest.validate()?;

    write_dataset(out_dir, &manifest, &body, &template, &baked)?;
    Ok(manifest)
}

fn write_dataset(
    out_dir: &Path,
    manifest: &DatasetManifest,
    body: &BodyModel,
    template: &DesignTemplate,
    baked: &[(FrameRecord, DisplacementTexture)],
) -> Result<()> {
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::from(e).in_file(&frames_dir))?;
    body.save_json(&out_dir.join(BODY_FILE))?;
    save_dtpl(&out_dir.join(TEMPLATE_FILE), template, None)?;
    baked.par_iter().try_for_each(|(rec, tex)| {
        let mut provenance = serde_json::Map::new();
        provenance.insert("design".into(), rec.design.into());
        provenance.insert("sequence".into(), rec.sequence.into());
        provenance.insert("frame".into(), rec.frame.into());
        provenance.insert("condition".into(), rec.condition.clone().into());
        write_disp(
            &out_dir.join(&rec.file),
            &DispFile {
                texture: tex.clone(),
                normalization: Some(manifest.normalization),
                provenance,
            },
        )
    })?;
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::from(e).in_file(&path))
}

/// Which frames to draw from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Validation,
    All,
}

/// A built dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub body: BodyModel,
    pub template: DesignTemplate,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::from(e).in_file(&path))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format {
                kind: "dataset manifest",
                msg: format!("unsupported {} v{}", manifest.format, manifest.version),
            }
            .in_file(&path));
        }
        manifest.validate().map_err(|e| e.in_file(&path))?;
        let missing: Vec<(String, Error)> = manifest
            .frames
            .iter()
            .filter(|f| !root.join(&f.file).is_file())
            .map(|f| (f.file.clone(), validation!("frame file is missing")))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Itemized { failures: missing });
        }
        let body = BodyModel::load_json(&root.join(&manifest.body))?;
        let (template, _) = load_dtpl(&root.join(&manifest.template))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            body,
            template,
        })
    }

    pub fn texture_space(&self) -> TextureSpace {
        TextureSpace {
            resolution: self.manifest.resolution,
            mask: self.manifest.mask.chars().map(|c| c == '1').collect(),
            normalization: self.manifest.normalization,
        }
    }

    pub fn shape_dim(&self) -> usize {
        self.body.shape_dim()
    }

    pub fn cond_dim(&self) -> usize {
        ConditionVector::dim(self.body.shape_dim(), self.body.joint_count())
    }

    pub fn condition(&self, f: &FrameRecord) -> Result<ConditionVector> {
        ConditionVector::from_slice(&f.condition, self.body.shape_dim(), self.body.joint_count())
    }

    pub fn texture(&self, f: &FrameRecord) -> Result<DisplacementTexture> {
        Ok(read_disp(&self.root.join(&f.file))?.texture)
    }

    pub fn in_subset(&self, f: &FrameRecord, subset: Subset) -> bool {
        match subset {
            Subset::All => true,
            Subset::Train => self.manifest.split.is_train(f.design, f.sequence),
            Subset::Validation => !self.manifest.split.is_train(f.design, f.sequence),
        }
    }

    pub fn frames(&self, subset: Subset) -> impl Iterator<Item = &FrameRecord> {
        self.manifest.frames.iter().filter(move |f| self.in_subset(f, subset))
    }

    /// Frames of one (design, sequence) pair in time order.
    pub fn clip(&self, design: usize, sequence: usize) -> Vec<&FrameRecord> {
        let mut v: Vec<_> = self
            .manifest
            .frames
            .iter()
            .filter(|f| f.design == design && f.sequence == sequence)
            .collect();
        v.sort_by_key(|f| f.frame);
        v
    }

    /// Distinct (design, sequence) pairs of a subset, sorted.
    pub fn clips(&self, subset: Subset) -> Vec<(usize, usize)> {
        self.frames(subset)
            .map(|f| (f.design, f.sequence))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Normalized single-frame examples for the static model.
    pub fn static_examples(&self, subset: Subset) -> Result<Vec<TrainExample>> {
        let space = self.texture_space();
        self.frames(subset)
            .map(|f| {
                Ok(TrainExample {
                    y0: space.encode(&self.texture(f)?),
                    cond: f.condition.iter().map(|&x| x as f32).collect(),
                    context: None,
                })
            })
            .collect()
    }

    pub fn sequence_sample(&self, design: usize, sequence: usize) -> Result<SequenceSample> {
        let fps = self
            .manifest
            .sequences
            .get(sequence)
            .ok_or_else(|| validation!("no sequence {sequence}"))?
            .fps;
        let frames = self
            .clip(design, sequence)
            .into_iter()
            .map(|f| {
                Ok(SequenceFrame {
                    time: f.frame as f64 / fps,
                    condition: self.condition(f)?,
                    texture: self.texture(f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SequenceSample { fps, frames })
    }

    pub fn sequence_samples(&self, subset: Subset) -> Result<Vec<SequenceSample>> {
        self.clips(subset)
            .into_iter()
            .map(|(d, s)| self.sequence_sample(d, s))
            .collect()
    }

    pub fn oracle(&self) -> Result<WrinkleOracle> {
        WrinkleOracle::new(self.body.clone(), self.template.clone(), self.manifest.wrinkle)
    }

    /// The posed mesh a frame was baked from.
    pub fn ground_truth(&self, oracle: &WrinkleOracle, rig: &DesignRig, f: &FrameRecord) -> Result<GarmentMesh> {
        let c = self.condition(f)?;
        match &self.manifest.sequences[f.sequence].source {
            SequenceSource::Procedural { wrinkle_seed, .. } => oracle.generate(rig, &c.shape, &c.pose, *wrinkle_seed),
            SequenceSource::Ingested { dir } => obj::read_garment(&dir.join(ingest::frame_obj_name(f.frame))),
        }
    }
}
