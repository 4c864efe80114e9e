//! Frame-to-frame coherent generation: the denoiser additionally sees the
//! previous frame's texture, perturbed during training so that the model
//! cannot simply copy it.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bake::{read_disp, write_disp, DispFile, DisplacementTexture, NormalizationSpec};
use crate::denoiser::{train, BatchSource, CheckpointSink, Shuffled, TrainConfig, TrainExample, TrainReport, UNet};
use crate::diffusion::{
    condition_tensor, sample_normalized, ConditionVector, NoisePredictor, NoiseSchedule,
    SamplingMode, TextureSpace,
};
use crate::error::{structural, validation, Error, Result};
use crate::nn::Tensor;

/// Random perturbations applied to the previous-frame input during training.
///
/// Each operation fires independently with its probability. Values are in
/// normalized texture units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Gaussian blur standard deviation range, in texels.
    pub blur_sigma: [f64; 2],
    pub blur_prob: f64,
    /// Per-channel multiplicative jitter range.
    pub jitter_scale: [f64; 2],
    /// Per-channel additive jitter range.
    pub jitter_offset: [f64; 2],
    pub jitter_prob: f64,
    /// Number of erased rectangles, inclusive range.
    pub erase_count: [usize; 2],
    /// Area of each rectangle as a fraction of the texture.
    pub erase_fraction: [f64; 2],
    pub erase_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            blur_sigma: [0.5, 2.0],
            blur_prob: 0.5,
            jitter_scale: [0.9, 1.1],
            jitter_offset: [-0.05, 0.05],
            jitter_prob: 0.5,
            erase_count: [1, 3],
            erase_fraction: [0.05, 0.25],
            erase_prob: 0.3,
        }
    }
}

impl AugmentationConfig {
    /// Every probability zero.
    pub fn disabled() -> Self {
        AugmentationConfig {
            blur_prob: 0.0,
            jitter_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("blur", self.blur_prob), ("jitter", self.jitter_prob), ("erase", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(validation!("{name} probability {p} outside [0, 1]"));
            }
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.blur_sigma) || self.blur_sigma[0] < 0.0 {
            return Err(validation!("blur sigma range {:?} is invalid", self.blur_sigma));
        }
        if !ordered(self.jitter_scale) || !ordered(self.jitter_offset) {
            return Err(validation!("jitter ranges are invalid"));
        }
        if self.erase_count[0] > self.erase_count[1] {
            return Err(validation!("erase count range {:?} is invalid", self.erase_count));
        }
        if !ordered(self.erase_fraction) || self.erase_fraction[0] < 0.0 || self.erase_fraction[1] >= 1.0 {
            return Err(validation!("erase fraction range {:?} must lie in [0, 1)", self.erase_fraction));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Mask-aware Gaussian blur of a channel-major `[C, H, W]` buffer: each
/// covered texel becomes the kernel-weighted mean of covered neighbours.
fn blur(data: &[f32], c: usize, h: usize, w: usize, mask: &[bool], sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| if sigma > 0.0 { (-((d * d) as f64) / (2.0 * sigma * sigma)).exp() } else { f64::from(d == 0) })
        .collect();
    let n = h * w;
    let mut out = data.to_vec();
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let mut acc = vec![0.0f64; c];
            let mut total = 0.0;
            for (di, ki) in (-radius..=radius).zip(&kernel) {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for (dj, kj) in (-radius..=radius).zip(&kernel) {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let k = ii as usize * w + jj as usize;
                    let wt = ki * kj;
                    if !mask[k] || wt == 0.0 {
                        continue;
                    }
                    total += wt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wt * data[ch * n + k] as f64;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out[ch * n + i * w + j] = (a / total) as f32;
            }
        }
    }
    out
}

/// An axis-aligned texel rectangle `rows x cols` at `(top, left)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

fn erase_rect<R: Rng + ?Sized>(h: usize, w: usize, fraction: f64, rng: &mut R) -> EraseRect {
    let area = fraction * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let rows = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let cols = ((area / rows as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - rows);
    let left = rng.random_range(0..=w - cols);
    EraseRect { top, left, rows, cols }
}

/// Perturbs a normalized `[C, H, W]` texture: blur, then per-channel
/// jitter, then rectangle erasure. Uncovered texels stay zero.
pub fn augment_normalized<R: Rng + ?Sized>(
    t: &Tensor<f32>,
    mask: &[bool],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    augment_traced(t, mask, cfg, rng).map(|(t, _)| t)
}

/// [`augment_normalized`] that also reports the erased rectangles.
pub fn augment_traced<R: Rng + ?Sized>(
    t: &Tensor<f32>,
    mask: &[bool],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<EraseRect>)> {
    let shape = t.shape();
    if shape.len() != 3 || shape[1] * shape[2] != mask.len() {
        return Err(structural!("texture {shape:?} does not fit a mask of {}", mask.len()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let mut data = t.data().to_vec();
    if rng.random_bool(cfg.blur_prob) {
        let sigma = uniform(rng, cfg.blur_sigma);
        data = blur(&data, c, h, w, mask, sigma);
    }
    if rng.random_bool(cfg.jitter_prob) {
        for ch in 0..c {
            let s = uniform(rng, cfg.jitter_scale) as f32;
            let o = uniform(rng, cfg.jitter_offset) as f32;
            for k in 0..n {
                if mask[k] {
                    data[ch * n + k] = data[ch * n + k] * s + o;
                }
            }
        }
    }
    let mut rects = Vec::new();
    if rng.random_bool(cfg.erase_prob) {
        let count = rng.random_range(cfg.erase_count[0]..=cfg.erase_count[1]);
        for _ in 0..count {
            let r = erase_rect(h, w, uniform(rng, cfg.erase_fraction), rng);
            for i in r.top..r.top + r.rows {
                for j in r.left..r.left + r.cols {
                    for ch in 0..c {
                        data[ch * n + i * w + j] = 0.0;
                    }
                }
            }
            rects.push(r);
        }
    }
    for (k, &m) in mask.iter().enumerate() {
        if !m {
            for ch in 0..c {
                data[ch * n + k] = 0.0;
            }
        }
    }
    Ok((Tensor::new(shape, data)?, rects))
}

/// [`augment_normalized`] on a texture in meters, perturbing in the units
/// given by `norm`.
pub fn augment<R: Rng + ?Sized>(
    tex: &DisplacementTexture,
    norm: &NormalizationSpec,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<DisplacementTexture> {
    let t = augment_normalized(&tex.to_normalized(norm), tex.mask(), cfg, rng)?;
    DisplacementTexture::from_normalized(&t, tex.mask(), norm)
}

/// One frame of a [`SequenceSample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    /// Seconds from the start of the sequence.
    pub time: f64,
    pub condition: ConditionVector,
    pub texture: DisplacementTexture,
}

/// Ordered frames of one garment over one motion.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub fps: f64,
    pub frames: Vec<SequenceFrame>,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(validation!("fps must be positive, got {}", self.fps));
        }
        if let Some(first) = self.frames.first() {
            for (k, f) in self.frames.iter().enumerate() {
                if f.texture.resolution() != first.texture.resolution() || f.texture.mask() != first.texture.mask() {
                    return Err(structural!("frame {k} does not share the texture layout of frame 0"));
                }
                if f.condition.len() != first.condition.len() {
                    return Err(structural!("frame {k} has a condition of a different length"));
                }
            }
            if self.frames.windows(2).any(|p| p[1].time <= p[0].time) {
                return Err(validation!("frame times must increase"));
            }
        }
        Ok(())
    }
}

/// Teacher-forced examples: each frame paired with the ground-truth previous
/// frame, the first frame with zeros. Sequences under two frames are skipped.
pub fn temporal_examples(sequences: &[SequenceSample], space: &TextureSpace) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        seq.validate()?;
        if seq.frames.len() < 2 {
            log::warn!("skipping sequence {s}: {} frame(s), need at least 2", seq.frames.len());
            continue;
        }
        let mut prev = Tensor::zeros(&space.shape());
        for f in &seq.frames {
            if f.texture.mask() != space.mask.as_slice() {
                return Err(structural!("sequence {s} uses a different texel mask"));
            }
            let y0 = space.encode(&f.texture);
            out.push(TrainExample {
                y0: y0.clone(),
                cond: f.condition.to_vec().into_iter().map(|x| x as f32).collect(),
                context: Some(prev),
            });
            prev = y0;
        }
    }
    if out.is_empty() {
        return Err(validation!("no sequence has at least two frames"));
    }
    Ok(out)
}

/// Trains a model whose extra input is the previous frame. Previous frames
/// come from the ground truth and pass through `aug` each time they are drawn;
/// the all-zero first-frame input is left untouched.
pub fn train_temporal(
    model: &mut UNet<f32>,
    sequences: &[SequenceSample],
    space: &TextureSpace,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainReport> {
    aug.validate()?;
    let texture_channels = model.config().channels_out;
    if model.config().context_channels != texture_channels {
        return Err(structural!(
            "temporal model needs {texture_channels} context channels, has {}",
            model.config().context_channels
        ));
    }
    let examples = temporal_examples(sequences, space)?;
    let mask = space.mask.clone();
    let mut source = Shuffled::new(&examples)?.with_context_transform(move |ctx, rng: &mut ChaCha8Rng| {
        if ctx.data().iter().all(|&v| v == 0.0) {
            return ctx.clone();
        }
        augment_normalized(ctx, &mask, aug, rng).expect("context shape checked when the examples were built")
    });
    train(model, &mut source as &mut dyn BatchSource, sched, cfg, sink)
}

/// Autoregressive sampling in normalized units: frame `n` sees the model's
/// own frame `n - 1` (masked), frame 0 sees zeros.
pub fn rollout_normalized<P: NoisePredictor<f32> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    conditions: &[ConditionVector],
    space: &TextureSpace,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Vec<Tensor<f32>>> {
    let [c, h, w] = space.shape();
    let mut prev = Tensor::<f32>::zeros(&[1, c, h, w]);
    let mut out = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let cond = condition_tensor(std::slice::from_ref(cond))?;
        let mut y = sample_normalized(f, &cond, Some(&prev), space.shape(), sched, rng, mode)?;
        space.apply_mask(&mut y);
        out.push(y.unstack().remove(0));
        prev = y;
    }
    Ok(out)
}

/// [`rollout_normalized`], decoded to textures.
pub fn rollout<P: NoisePredictor<f32> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    conditions: &[ConditionVector],
    space: &TextureSpace,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Vec<DisplacementTexture>> {
    rollout_normalized(f, conditions, space, sched, rng, mode)?
        .iter()
        .map(|t| space.decode(t))
        .collect()
}

/// Samples every frame independently with a model that has no
/// previous-frame input, for comparison against [`rollout`].
pub fn static_rollout<P: NoisePredictor<f32> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    conditions: &[ConditionVector],
    space: &TextureSpace,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Vec<DisplacementTexture>> {
    conditions
        .iter()
        .map(|c| {
            let cond = condition_tensor(std::slice::from_ref(c))?;
            let mut y = sample_normalized(f, &cond, None, space.shape(), sched, rng, mode)?;
            space.apply_mask(&mut y);
            space.decode(&y.unstack()[0])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifestFrame {
    pub file: String,
    pub time: f64,
    pub condition: Vec<f64>,
}

/// `sequence.json` of a sequence directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub fps: f64,
    pub shape_dim: usize,
    pub joint_count: usize,
    pub frames: Vec<SequenceManifestFrame>,
}

pub const SEQUENCE_MANIFEST: &str = "sequence.json";

/// Writes `frame_NNNNN.disp` files and `sequence.json` into `dir`.
pub fn write_sequence(dir: &Path, seq: &SequenceSample, norm: Option<&NormalizationSpec>) -> Result<()> {
    seq.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let first = seq.frames.first().ok_or_else(|| validation!("sequence has no frames"))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (k, f) in seq.frames.iter().enumerate() {
        let file = format!("frame_{k:05}.disp");
        let mut provenance = serde_json::Map::new();
        provenance.insert("frame".into(), k.into());
        provenance.insert("time".into(), f.time.into());
        write_disp(
            &dir.join(&file),
            &DispFile {
                texture: f.texture.clone(),
                normalization: norm.copied(),
                provenance,
            },
        )?;
        frames.push(SequenceManifestFrame {
            file,
            time: f.time,
            condition: f.condition.to_vec(),
        });
    }
    let manifest = SequenceManifest {
        fps: seq.fps,
        shape_dim: first.condition.shape.len(),
        joint_count: first.condition.pose.joint_count(),
        frames,
    };
    let path = dir.join(SEQUENCE_MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::from(e).in_file(&path))
}

pub fn read_sequence(dir: &Path) -> Result<SequenceSample> {
    let path = dir.join(SEQUENCE_MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
    let m: SequenceManifest = serde_json::from_slice(&text).map_err(|e| Error::from(e).in_file(&path))?;
    let frames = m
        .frames
        .iter()
        .map(|f| {
            Ok(SequenceFrame {
                time: f.time,
                condition: ConditionVector::from_slice(&f.condition, m.shape_dim, m.joint_count)
                    .map_err(|e| e.in_file(&path))?,
                texture: read_disp(&dir.join(&f.file))?.texture,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = SequenceSample { fps: m.fps, frames };
    seq.validate().map_err(|e| e.in_file(&path))?;
    Ok(seq)
}
