//! The conditional texture UNet and its training loop.

mod checkpoint;
mod unet;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, CheckpointMeta, TensorRecord, TextureSpaceRecord,
};
pub use unet::{TimeEncoding, UNet, UNetConfig, LEVELS};

use crate::diffusion::{training_loss, DifferentiableDenoiser, NoiseSchedule, SamplingMode};
use crate::error::{structural, validation, Error, Result};
use crate::nn::{Adam, AdamConfig, Tensor};

/// Optimization and architecture settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub widths: [usize; LEVELS],
    pub resolution: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub time_encoding: TimeEncoding,
    pub attention_level: Option<usize>,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    /// The learning rate ramps linearly from zero over this many steps.
    pub warmup_steps: usize,
    /// Decay of the exponential moving average of the weights that becomes
    /// the trained model and its snapshots. `None` keeps the raw weights.
    pub ema_decay: Option<f64>,
    /// Log the running loss every this many steps (0 disables).
    pub log_every: usize,
    /// Snapshot parameters every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Reverse update used when this model is sampled.
    pub sampling_mode: SamplingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 2e-4,
            steps: 2000,
            widths: [16, 16, 32, 32, 64, 64],
            resolution: 32,
            seed: 0,
            embed_dim: 128,
            time_encoding: TimeEncoding::Sinusoidal,
            attention_level: Some(4),
            grad_clip: Some(1.0),
            warmup_steps: 0,
            ema_decay: Some(0.995),
            log_every: 100,
            checkpoint_every: 500,
            sampling_mode: SamplingMode::StandardDdpm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(validation!("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(validation!("learning rate {} is not a nonnegative number", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(validation!("gradient clip {c} must be positive"));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(validation!("EMA decay {d} is outside [0, 1)"));
            }
        }
        let m = 1 << (LEVELS - 1);
        if self.resolution == 0 || self.resolution % m != 0 {
            return Err(validation!("resolution {} is not a positive multiple of {m}", self.resolution));
        }
        self.unet_config(1, 0, 1).validate()
    }

    pub fn unet_config(&self, cond_dim: usize, context_channels: usize, diffusion_steps: usize) -> UNetConfig {
        UNetConfig {
            widths: self.widths,
            embed_dim: self.embed_dim,
            time_encoding: self.time_encoding,
            attention_level: self.attention_level,
            diffusion_steps,
            ..UNetConfig::desk(cond_dim, context_channels)
        }
    }

    /// A freshly initialized network seeded from `self.seed`.
    pub fn init_model(&self, cond_dim: usize, context_channels: usize, diffusion_steps: usize) -> Result<UNet<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        UNet::new(self.unet_config(cond_dim, context_channels, diffusion_steps), &mut rng)
    }
}

/// One supervised item: a clean normalized texture `[C, H, W]`, its
/// condition vector and an optional context image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub y0: Tensor<f32>,
    pub cond: Vec<f32>,
    pub context: Option<Tensor<f32>>,
}

/// A stacked minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub y0: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub context: Option<Tensor<f32>>,
}

impl Batch {
    pub fn stack(items: &[&TrainExample]) -> Result<Batch> {
        let first = items.first().ok_or_else(|| validation!("empty batch"))?;
        let d = first.cond.len();
        let mut cond = Vec::with_capacity(items.len() * d);
        for it in items {
            if it.cond.len() != d || it.context.is_some() != first.context.is_some() {
                return Err(structural!("inconsistent training examples in one batch"));
            }
            cond.extend_from_slice(&it.cond);
        }
        let y0 = Tensor::stack(&items.iter().map(|it| it.y0.clone()).collect::<Vec<_>>())?;
        let context = match first.context {
            Some(_) => Some(Tensor::stack(
                &items.iter().filter_map(|it| it.context.clone()).collect::<Vec<_>>(),
            )?),
            None => None,
        };
        Ok(Batch {
            y0,
            cond: Tensor::new(&[items.len(), d], cond)?,
            context,
        })
    }
}

/// Supplies minibatches to [`train`].
pub trait BatchSource {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
}

type ContextTransform<'a> = Box<dyn FnMut(&Tensor<f32>, &mut ChaCha8Rng) -> Tensor<f32> + 'a>;

/// Walks a fixed example list in reshuffled epochs, optionally perturbing
/// each context image as it is drawn.
pub struct Shuffled<'a> {
    examples: &'a [TrainExample],
    order: Vec<usize>,
    cursor: usize,
    transform: Option<ContextTransform<'a>>,
}

impl<'a> Shuffled<'a> {
    pub fn new(examples: &'a [TrainExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(validation!("training set is empty"));
        }
        Ok(Shuffled {
            examples,
            order: Vec::new(),
            cursor: 0,
            transform: None,
        })
    }

    pub fn with_context_transform(
        mut self,
        f: impl FnMut(&Tensor<f32>, &mut ChaCha8Rng) -> Tensor<f32> + 'a,
    ) -> Self {
        self.transform = Some(Box::new(f));
        self
    }
}

impl BatchSource for Shuffled<'_> {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.examples.len()).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            picked.push(&self.examples[self.order[self.cursor]]);
            self.cursor += 1;
        }
        let mut batch = Batch::stack(&picked)?;
        if let (Some(f), Some(ctx)) = (self.transform.as_mut(), batch.context.as_ref()) {
            let items: Vec<Tensor<f32>> = ctx.unstack().iter().map(|c| f(c, rng)).collect();
            batch.context = Some(Tensor::stack(&items)?);
        }
        Ok(batch)
    }
}

/// Where periodic checkpoints go and what they record.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

impl CheckpointSink {
    pub fn path_for(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}"))
    }
}

/// Per-step losses of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean over the last `window` steps.
    pub fn trailing_mean(&self, window: usize) -> f64 {
        let n = window.min(self.losses.len()).max(1);
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean loss of the last 100 steps, the figure reported as "final loss".
    pub fn final_loss(&self) -> f64 {
        self.trailing_mean(100)
    }
}

/// Adam on the noise-prediction loss. Each step draws a minibatch, a
/// diffusion step and noise per item.
///
/// On success the model holds the weight average when `ema_decay` is set.
/// A non-finite loss or gradient restores the parameters of the most recent
/// snapshot (or the initial ones) and returns [`Error::Divergence`].
pub fn train(
    model: &mut UNet<f32>,
    source: &mut dyn BatchSource,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config().check_resolution(cfg.resolution, cfg.resolution)?;
    if model.config().diffusion_steps != sched.steps() {
        return Err(structural!(
            "model built for {} diffusion steps, schedule has {}",
            model.config().diffusion_steps,
            sched.steps()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut last_good = model.params().clone();
    let mut ema = cfg.ema_decay.map(|_| model.params().clone());
    let mut last_good_path: Option<PathBuf> = None;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = source.next_batch(cfg.batch_size, &mut rng)?;
        let (_, _, h, w) = batch.y0.dims4()?;
        if (h, w) != (cfg.resolution, cfg.resolution) {
            return Err(structural!("batch of {h}x{w} textures for a resolution {} run", cfg.resolution));
        }
        let mut out = training_loss(model, &batch.y0, &batch.cond, batch.context.as_ref(), sched, &mut rng)?;
        let bad_tensor = out.gradients.first_non_finite();
        if !out.loss.is_finite() || bad_tensor.is_some() {
            model.params_mut().load_from(&last_good)?;
            return Err(Error::Divergence {
                step,
                tensor: bad_tensor.map(|id| model.params().name(id).to_string()),
                reason: if out.loss.is_finite() {
                    "non-finite gradient".into()
                } else {
                    format!("loss is {}", out.loss)
                },
                last_good: last_good_path,
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = out.gradients.global_norm();
            if norm > clip {
                out.gradients.scale((clip / norm) as f32);
            }
        }
        if step <= cfg.warmup_steps {
            opt.set_lr(cfg.learning_rate * step as f64 / cfg.warmup_steps as f64);
        }
        opt.update(model.params_mut(), &out.gradients);
        if let (Some(avg), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
            // Short memory early on so the average is not anchored to the
            // initial weights.
            let d = d.min((1 + step) as f64 / (10 + step) as f64);
            avg.blend_towards(model.params(), d);
        }
        losses.push(out.loss);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let window = &losses[losses.len() - cfg.log_every..];
            log::info!("step {step}: loss {:.5}", window.iter().sum::<f64>() / window.len() as f64);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            last_good.clone_from(ema.as_ref().unwrap_or(model.params()));
            if let Some(sink) = sink {
                let path = sink.path_for(step);
                let meta = CheckpointMeta { step, ..sink.meta.clone() };
                match &ema {
                    Some(avg) => {
                        let mut averaged = model.clone();
                        averaged.params_mut().load_from(avg)?;
                        save_checkpoint(&path, &averaged, &meta)?;
                    }
                    None => save_checkpoint(&path, model, &meta)?,
                }
                last_good_path = Some(path);
            }
        }
    }
    if let Some(avg) = &ema {
        model.params_mut().load_from(avg)?;
    }
    Ok(TrainReport { losses })
}

/// `step,loss` rows, one per optimization step starting at 1.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
        }
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| e.in_file(path))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let run = || -> Result<Vec<f64>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v = rec
                .get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format {
                    kind: "loss csv",
                    msg: format!("bad row {:?}", rec),
                })?;
            out.push(v);
        }
        Ok(out)
    };
    run().map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests;
