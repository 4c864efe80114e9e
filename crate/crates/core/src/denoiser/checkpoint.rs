use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::{UNet, UNetConfig};
use crate::bake::NormalizationSpec;
use crate::diffusion::{DifferentiableDenoiser, ScheduleConfig, TextureSpace};
use crate::error::{Error, Result};

const FORMAT: &str = "wrinkle-unet";
const VERSION: u32 = 1;

/// Texture space stored alongside a model so sampling needs nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpaceRecord {
    pub resolution: usize,
    pub normalization: NormalizationSpec,
    /// One `'0'`/`'1'` character per texel, row-major.
    pub mask: String,
}

impl From<&TextureSpace> for TextureSpaceRecord {
    fn from(s: &TextureSpace) -> Self {
        TextureSpaceRecord {
            resolution: s.resolution,
            normalization: s.normalization,
            mask: s.mask.iter().map(|&m| if m { '1' } else { '0' }).collect(),
        }
    }
}

impl TextureSpaceRecord {
    pub fn to_space(&self) -> Result<TextureSpace> {
        let mask: Vec<bool> = self
            .mask
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(format_err(format!("mask character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if mask.len() != self.resolution * self.resolution {
            return Err(format_err(format!("mask of {} texels at resolution {}", mask.len(), self.resolution)));
        }
        self.normalization.validate()?;
        Ok(TextureSpace {
            resolution: self.resolution,
            mask,
            normalization: self.normalization,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `tensors.bin`, in float32 elements.
    pub offset: usize,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: UNetConfig,
    pub step: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub texture_space: Option<TextureSpaceRecord>,
    pub tensors: Vec<TensorRecord>,
}

/// What a checkpoint records besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub texture_space: Option<TextureSpaceRecord>,
}

fn format_err(msg: String) -> Error {
    Error::Format { kind: "checkpoint", msg }
}

/// Writes `manifest.json` and `tensors.bin` (little-endian float32) into `dir`.
pub fn save_checkpoint(dir: &Path, model: &UNet<f32>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(model.parameter_count() * 4);
    let mut offset = 0;
    for (_, name, t) in model.params().iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.config().clone(),
        step: meta.step,
        seed: meta.seed,
        schedule: meta.schedule,
        texture_space: meta.texture_space.clone(),
        tensors,
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&mpath, json).map_err(|e| Error::from(e).in_file(&mpath))?;
    let bpath = dir.join("tensors.bin");
    std::fs::write(&bpath, blob).map_err(|e| Error::from(e).in_file(&bpath))
}

pub fn load_checkpoint(dir: &Path) -> Result<(UNet<f32>, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read(&mpath).map_err(|e| Error::from(e).in_file(&mpath))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::from(e).in_file(&mpath))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format_err(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)).in_file(&mpath));
    }
    let bpath = dir.join("tensors.bin");
    let bytes = std::fs::read(&bpath).map_err(|e| Error::from(e).in_file(&bpath))?;
    if bytes.len() % 4 != 0 {
        return Err(format_err("tensor blob length is not a multiple of 4".into()).in_file(&bpath));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut model = UNet::<f32>::new(manifest.architecture.clone(), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.in_file(&mpath))?;
    let expected = model.params().len();
    if manifest.tensors.len() != expected {
        return Err(format_err(format!("{} tensors listed, architecture has {expected}", manifest.tensors.len())).in_file(&mpath));
    }
    for rec in &manifest.tensors {
        let id = model
            .params()
            .find(&rec.name)
            .ok_or_else(|| format_err(format!("unknown tensor {}", rec.name)).in_file(&mpath))?;
        let t = model.params_mut().get_mut(id);
        if t.shape() != rec.shape.as_slice() {
            return Err(format_err(format!("tensor {} has shape {:?}, expected {:?}", rec.name, rec.shape, t.shape())).in_file(&mpath));
        }
        let end = rec.offset + t.numel();
        if end > floats.len() {
            return Err(format_err(format!("tensor {} runs past the blob", rec.name)).in_file(&bpath));
        }
        t.data_mut().copy_from_slice(&floats[rec.offset..end]);
    }
    Ok((model, manifest))
}
