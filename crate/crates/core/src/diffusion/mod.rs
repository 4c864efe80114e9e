//! DDPM over normalized displacement textures: schedule, forward noising,
//! the noise-prediction objective and ancestral sampling.

mod condition;
mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use condition::ConditionVector;
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig, DEFAULT_OFFSET_NOISE};

use crate::bake::{DisplacementTexture, NormalizationSpec};
use crate::error::{structural, Result};
use crate::nn::{Gradients, Graph, ParamStore, Scalar, Tensor, Var};

/// Magnitude bound applied to finished samples before denormalization.
pub const SAMPLE_CLAMP: f64 = 3.0;

/// Inputs of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct DenoiseBatch<T> {
    /// Noisy textures `[N, C, H, W]`.
    pub y_t: Tensor<T>,
    /// Flat condition vectors `[N, D]`.
    pub cond: Tensor<T>,
    /// Diffusion step per item, in `1..=T`.
    pub steps: Vec<usize>,
    /// Extra image channels `[N, C', H, W]` (the previous frame for the temporal model).
    pub context: Option<Tensor<T>>,
}

impl<T: Scalar> DenoiseBatch<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let (n, _, h, w) = self.y_t.dims4()?;
        if self.steps.len() != n || self.cond.shape().len() != 2 || self.cond.shape()[0] != n {
            return Err(structural!(
                "batch of {n} textures with {} steps and conditions {:?}",
                self.steps.len(),
                self.cond.shape()
            ));
        }
        if let Some(ctx) = &self.context {
            let (cn, _, ch, cw) = ctx.dims4()?;
            if (cn, ch, cw) != (n, h, w) {
                return Err(structural!("context {:?} does not match textures {:?}", ctx.shape(), self.y_t.shape()));
            }
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `y_t`.
pub trait NoisePredictor<T: Scalar> {
    /// Returns a tensor shaped like `batch.y_t`.
    fn predict(&self, batch: &DenoiseBatch<T>) -> Result<Tensor<T>>;
}

/// A noise predictor whose forward pass can be recorded for backpropagation.
pub trait DifferentiableDenoiser<T: Scalar>: NoisePredictor<T> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Records the forward pass and returns the prediction node.
    fn build(&self, g: &mut Graph<T>, batch: &DenoiseBatch<T>) -> Result<Var>;
}

/// `sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise<T: Scalar>(y0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    noise_with(y0, eps, ab)
}

fn noise_with<T: Scalar>(y0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if y0.shape() != eps.shape() {
        return Err(structural!("noise {:?} does not match data {:?}", eps.shape(), y0.shape()));
    }
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    y0.zip_map(eps, |y, e| a * y + b * e)
}

/// Draws `eps` for `shape = [.., H, W]`: standard normal texels plus, when
/// the schedule asks for it, one normal offset per `H x W` plane.
pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(shape: &[usize], sched: &NoiseSchedule, rng: &mut R) -> Tensor<T> {
    let mut eps = Tensor::<T>::randn(shape, rng);
    let s = sched.offset_noise();
    if s > 0.0 && shape.len() >= 2 {
        let plane: usize = shape[shape.len() - 2..].iter().product();
        if plane > 0 {
            let offsets = Tensor::<T>::randn(&[eps.numel() / plane], rng);
            for (chunk, &o) in eps.data_mut().chunks_mut(plane).zip(offsets.data()) {
                let o = T::lit(s) * o;
                chunk.iter_mut().for_each(|v| *v += o);
            }
        }
    }
    eps
}

/// Noise-prediction objective for one draw of steps and noise.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub gradients: Gradients<T>,
    pub steps: Vec<usize>,
}

/// Mean squared error between `eps` and the prediction on
/// `forward_noise(y0, steps, eps)`, with gradients for every parameter.
pub fn noise_loss<T: Scalar, D: DifferentiableDenoiser<T> + ?Sized>(
    f: &D,
    y0: &Tensor<T>,
    cond: &Tensor<T>,
    context: Option<&Tensor<T>>,
    steps: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients<T>)> {
    let (n, _, _, _) = y0.dims4()?;
    if steps.len() != n || eps.shape() != y0.shape() {
        return Err(structural!("{} steps and noise {:?} for data {:?}", steps.len(), eps.shape(), y0.shape()));
    }
    let noisy: Vec<Tensor<T>> = y0
        .unstack()
        .iter()
        .zip(eps.unstack())
        .zip(steps)
        .map(|((y, e), &t)| forward_noise(y, t, &e, sched))
        .collect::<Result<_>>()?;
    let batch = DenoiseBatch {
        y_t: Tensor::stack(&noisy)?,
        cond: cond.clone(),
        steps: steps.to_vec(),
        context: context.cloned(),
    };
    batch.check()?;
    let mut g = Graph::new();
    let pred = f.build(&mut g, &batch)?;
    let loss = g.mse(pred, eps.clone())?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?.into_gradients(f.params());
    Ok((value, grads))
}

/// Draws `t ~ U{1..T}` per item and `eps ~ N(0, I)`, then evaluates [`noise_loss`].
pub fn training_loss<T: Scalar, D: DifferentiableDenoiser<T> + ?Sized, R: Rng + ?Sized>(
    f: &D,
    y0: &Tensor<T>,
    cond: &Tensor<T>,
    context: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let (n, _, _, _) = y0.dims4()?;
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = draw_noise(y0.shape(), sched, rng);
    let (loss, gradients) = noise_loss(f, y0, cond, context, &steps, &eps, sched)?;
    Ok(LossOutput { loss, gradients, steps })
}

/// Which reverse update to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// `(y_t - sqrt(1 - alpha_t) f) / sqrt(alpha_t)`, no added noise.
    PaperLiteral,
    /// DDPM posterior mean plus `sqrt(beta_t) z` for `t > 1`.
    #[default]
    StandardDdpm,
}

/// One reverse step `y_t -> y_{t-1}` for the whole batch at step `t`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    y_t: &Tensor<T>,
    cond: &Tensor<T>,
    context: Option<&Tensor<T>>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let (n, _, _, _) = y_t.dims4()?;
    let batch = DenoiseBatch {
        y_t: y_t.clone(),
        cond: cond.clone(),
        steps: vec![t; n],
        context: context.cloned(),
    };
    batch.check()?;
    let pred = f.predict(&batch)?;
    if pred.shape() != y_t.shape() {
        return Err(structural!("denoiser returned {:?} for input {:?}", pred.shape(), y_t.shape()));
    }
    let alpha = sched.alpha(t);
    let inv_sqrt_alpha = T::lit(1.0 / alpha.sqrt());
    match mode {
        SamplingMode::PaperLiteral => {
            let c = T::lit((1.0 - alpha).sqrt());
            y_t.zip_map(&pred, |y, e| (y - c * e) * inv_sqrt_alpha)
        }
        SamplingMode::StandardDdpm => {
            let c = T::lit((1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt());
            let mean = y_t.zip_map(&pred, |y, e| (y - c * e) * inv_sqrt_alpha)?;
            if t > 1 {
                let sigma = T::lit(sched.beta(t).sqrt());
                let z = draw_noise::<T, R>(y_t.shape(), sched, rng);
                mean.zip_map(&z, |m, z| m + sigma * z)
            } else {
                Ok(mean)
            }
        }
    }
}

/// Runs the reverse chain from `y_T ~ N(0, I)` down to `t = 1` and clamps
/// the result to `[-3, 3]`. Returns `[N, C, H, W]` in normalized units.
#[allow(clippy::too_many_arguments)]
pub fn sample_normalized<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    cond: &Tensor<T>,
    context: Option<&Tensor<T>>,
    texture_shape: [usize; 3],
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Tensor<T>> {
    let shape = cond.shape();
    if shape.len() != 2 {
        return Err(structural!("conditions must be [N, D], got {shape:?}"));
    }
    let [c, h, w] = texture_shape;
    let mut y = draw_noise::<T, R>(&[shape[0], c, h, w], sched, rng);
    for t in (1..=sched.steps()).rev() {
        y = reverse_step(f, &y, cond, context, t, sched, rng, mode)?;
    }
    let lim = T::lit(SAMPLE_CLAMP);
    Ok(y.map(|v| if v.is_nan() { T::zero() } else { v.max(-lim).min(lim) }))
}

/// Texel coverage and value mapping shared by every texture of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpace {
    pub resolution: usize,
    pub mask: Vec<bool>,
    pub normalization: NormalizationSpec,
}

impl TextureSpace {
    pub fn shape(&self) -> [usize; 3] {
        [3, self.resolution, self.resolution]
    }

    pub fn decode(&self, normalized: &Tensor<f32>) -> Result<DisplacementTexture> {
        DisplacementTexture::from_normalized(normalized, &self.mask, &self.normalization)
    }

    pub fn encode(&self, tex: &DisplacementTexture) -> Tensor<f32> {
        tex.to_normalized(&self.normalization)
    }

    /// Zeroes uncovered texels of a normalized `[.., 3, H, W]` tensor in place.
    pub fn apply_mask(&self, t: &mut Tensor<f32>) {
        let n = self.mask.len();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            if !self.mask[k % n] {
                *v = 0.0;
            }
        }
    }
}

/// Flat condition vectors as an `[N, D]` tensor.
pub fn condition_tensor(conds: &[ConditionVector]) -> Result<Tensor<f32>> {
    let d = conds.first().map_or(0, |c| c.len());
    let mut data = Vec::with_capacity(conds.len() * d);
    for c in conds {
        if c.len() != d {
            return Err(structural!("condition vectors of lengths {d} and {}", c.len()));
        }
        data.extend(c.to_vec().into_iter().map(|x| x as f32));
    }
    Tensor::new(&[conds.len(), d], data)
}

/// Samples one texture per condition, denormalized and masked.
pub fn sample<P: NoisePredictor<f32> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    conds: &[ConditionVector],
    space: &TextureSpace,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<Vec<DisplacementTexture>> {
    let cond = condition_tensor(conds)?;
    let y = sample_normalized(f, &cond, None, space.shape(), sched, rng, mode)?;
    y.unstack().iter().map(|t| space.decode(t)).collect()
}

#[cfg(test)]
mod tests;
