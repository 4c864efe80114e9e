use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Adam, AdamConfig, ParamId};

/// Predicts zero everywhere.
struct Zero {
    params: ParamStore<f64>,
}

impl NoisePredictor<f64> for Zero {
    fn predict(&self, batch: &DenoiseBatch<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(batch.y_t.shape()))
    }
}

impl DifferentiableDenoiser<f64> for Zero {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
    fn build(&self, g: &mut Graph<f64>, batch: &DenoiseBatch<f64>) -> Result<Var> {
        Ok(g.input(Tensor::zeros(batch.y_t.shape())))
    }
}

/// Knows the clean data and recovers the exact noise.
struct Oracle {
    y0: Tensor<f64>,
    sched: NoiseSchedule,
    params: ParamStore<f64>,
}

impl NoisePredictor<f64> for Oracle {
    fn predict(&self, batch: &DenoiseBatch<f64>) -> Result<Tensor<f64>> {
        let items: Vec<Tensor<f64>> = batch
            .y_t
            .unstack()
            .iter()
            .zip(self.y0.unstack())
            .zip(&batch.steps)
            .map(|((yt, y0), &t)| {
                let ab = self.sched.alpha_bar(t);
                yt.zip_map(&y0, |a, b| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()).unwrap()
            })
            .collect();
        Tensor::stack(&items)
    }
}

impl DifferentiableDenoiser<f64> for Oracle {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
    fn build(&self, g: &mut Graph<f64>, batch: &DenoiseBatch<f64>) -> Result<Var> {
        Ok(g.input(self.predict(batch)?))
    }
}

/// Four parameters: a 1x1 convolution (weight, bias) on the noisy texture
/// plus a per-item bias from a linear map of the condition.
struct Toy {
    params: ParamStore<f64>,
    conv_w: ParamId,
    conv_b: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
}

impl Toy {
    fn new(values: [f64; 4]) -> Self {
        let mut params = ParamStore::new();
        let conv_w = params.add("conv.weight", Tensor::full(&[1, 1, 1, 1], values[0]));
        let conv_b = params.add("conv.bias", Tensor::full(&[1], values[1]));
        let cond_w = params.add("cond.weight", Tensor::full(&[1, 1], values[2]));
        let cond_b = params.add("cond.bias", Tensor::full(&[1], values[3]));
        Toy {
            params,
            conv_w,
            conv_b,
            cond_w,
            cond_b,
        }
    }
}

impl<T: Scalar> NoisePredictor<T> for ToyOf<T> {
    fn predict(&self, batch: &DenoiseBatch<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.build(&mut g, batch)?;
        Ok(g.take_value(v))
    }
}

/// The toy denoiser for any scalar type.
struct ToyOf<T> {
    params: ParamStore<T>,
    ids: [ParamId; 4],
}

impl Toy {
    fn of<T: Scalar>(&self) -> ToyOf<T> {
        ToyOf {
            params: self.params.cast(),
            ids: [self.conv_w, self.conv_b, self.cond_w, self.cond_b],
        }
    }
}

impl<T: Scalar> DifferentiableDenoiser<T> for ToyOf<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
    fn build(&self, g: &mut Graph<T>, batch: &DenoiseBatch<T>) -> Result<Var> {
        let [cw, cb, lw, lb] = self.ids.map(|id| g.param(&self.params, id));
        let y = g.input(batch.y_t.clone());
        let conv = g.conv2d(y, cw, Some(cb), 1, 0)?;
        let c = g.input(batch.cond.clone());
        let shift = g.linear(c, lw, Some(lb))?;
        g.add_channel_bias(conv, shift)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn forward_noise_limits() {
    let mut r = rng(1);
    let y0 = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut r);
    let eps = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut r);
    assert_eq!(noise_with(&y0, &eps, 1.0).unwrap(), y0);
    let sched = ScheduleConfig::default().build().unwrap();
    let zero = Tensor::zeros(&[2, 3, 4, 4]);
    let out = forward_noise(&zero, 40, &eps, &sched).unwrap();
    let k = (1.0 - sched.alpha_bar(40)).sqrt();
    assert!(out.data().iter().zip(eps.data()).all(|(o, e)| *o == k * e));
    assert!(forward_noise(&zero, 0, &eps, &sched).unwrap_err().is_validation());
    assert!(forward_noise(&zero, 3, &Tensor::zeros(&[1]), &sched).is_err());
}

#[test]
fn forward_noise_preserves_unit_variance() {
    let sched = ScheduleConfig::default().build().unwrap();
    let mut r = rng(2);
    let n = 100_000;
    for t in [1, 50, 100] {
        let y0 = Tensor::<f64>::randn(&[n], &mut r);
        let eps = Tensor::<f64>::randn(&[n], &mut r);
        let out = forward_noise(&y0, t, &eps, &sched).unwrap();
        let mean = out.mean_f64();
        let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard error of a sample variance of N(0, 1) data is sqrt(2 / n).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "t={t}: var {var}");
    }
}

#[test]
fn zero_and_oracle_predictors() {
    let sched = ScheduleConfig {
        offset_noise: 0.0,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    let mut r = rng(3);
    let y0 = Tensor::<f64>::randn(&[4, 3, 16, 16], &mut r);
    let cond = Tensor::zeros(&[4, 2]);
    let zero = Zero {
        params: ParamStore::new(),
    };
    let mut r1 = rng(9);
    let out = training_loss(&zero, &y0, &cond, None, &sched, &mut r1).unwrap();
    // Replay the same draws to get the noise itself.
    let mut r2 = rng(9);
    let _: Vec<usize> = (0..4).map(|_| r2.random_range(1..=100)).collect();
    let eps = Tensor::<f64>::randn(y0.shape(), &mut r2);
    let mean_sq = eps.data().iter().map(|e| e * e).sum::<f64>() / eps.numel() as f64;
    assert!((out.loss - mean_sq).abs() < 1e-12);
    assert!((out.loss - 1.0).abs() < 0.1);

    let oracle = Oracle {
        y0: y0.clone(),
        sched: sched.clone(),
        params: ParamStore::new(),
    };
    let out = training_loss(&oracle, &y0, &cond, None, &sched, &mut rng(4)).unwrap();
    assert!(out.loss < 1e-24, "{}", out.loss);
}

#[test]
fn toy_gradients_match_finite_differences() {
    let sched = ScheduleConfig::default().build().unwrap();
    let mut r = rng(5);
    let y0 = Tensor::<f64>::randn(&[3, 1, 5, 5], &mut r);
    let cond = Tensor::<f64>::randn(&[3, 1], &mut r);
    let eps = Tensor::<f64>::randn(&[3, 1, 5, 5], &mut r);
    let steps = [3, 50, 97];
    let toy = Toy::new([0.3, -0.2, 0.7, 0.1]).of::<f64>();
    let (_, grads) = noise_loss(&toy, &y0, &cond, None, &steps, &eps, &sched).unwrap();
    let h = 1e-5;
    for id in toy.params.ids().collect::<Vec<_>>() {
        let mut plus = ToyOf {
            params: toy.params.clone(),
            ids: toy.ids,
        };
        plus.params.get_mut(id).data_mut()[0] += h;
        let mut minus = ToyOf {
            params: toy.params.clone(),
            ids: toy.ids,
        };
        minus.params.get_mut(id).data_mut()[0] -= h;
        let lp = noise_loss(&plus, &y0, &cond, None, &steps, &eps, &sched).unwrap().0;
        let lm = noise_loss(&minus, &y0, &cond, None, &steps, &eps, &sched).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.get(id).data()[0];
        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()), "{}: fd {fd} vs {an}", toy.params.name(id));
    }
}

#[test]
fn reverse_step_special_cases() {
    let sched = ScheduleConfig::default().build().unwrap();
    let mut r = rng(6);
    let y = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut r);
    let cond = Tensor::zeros(&[2, 1]);
    let zero = Zero {
        params: ParamStore::new(),
    };
    let out = reverse_step(&zero, &y, &cond, None, 37, &sched, &mut r, SamplingMode::PaperLiteral).unwrap();
    let s = sched.alpha(37).sqrt();
    assert!(out.data().iter().zip(y.data()).all(|(o, v)| (o - v / s).abs() < 1e-15));

    let a = reverse_step(&zero, &y, &cond, None, 1, &sched, &mut rng(1), SamplingMode::StandardDdpm).unwrap();
    let b = reverse_step(&zero, &y, &cond, None, 1, &sched, &mut rng(2), SamplingMode::StandardDdpm).unwrap();
    assert_eq!(a, b);
    let c = reverse_step(&zero, &y, &cond, None, 2, &sched, &mut rng(1), SamplingMode::StandardDdpm).unwrap();
    let d = reverse_step(&zero, &y, &cond, None, 2, &sched, &mut rng(2), SamplingMode::StandardDdpm).unwrap();
    assert_ne!(c, d);
    for t in [0, 101] {
        let err = reverse_step(&zero, &y, &cond, None, t, &sched, &mut r, SamplingMode::StandardDdpm).unwrap_err();
        assert!(err.is_validation());
    }
}

/// Returns an enormous prediction to provoke overflow.
struct Wild;

impl NoisePredictor<f32> for Wild {
    fn predict(&self, batch: &DenoiseBatch<f32>) -> Result<Tensor<f32>> {
        Ok(batch.y_t.map(|v| v * 1e3 - 7.0))
    }
}

#[test]
fn samples_are_deterministic_and_bounded() {
    let sched = ScheduleConfig::default().build().unwrap();
    let cond = Tensor::zeros(&[2, 4]);
    let a = sample_normalized(&Wild, &cond, None, [3, 4, 4], &sched, &mut rng(7), SamplingMode::StandardDdpm).unwrap();
    let b = sample_normalized(&Wild, &cond, None, [3, 4, 4], &sched, &mut rng(7), SamplingMode::StandardDdpm).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| v.is_finite() && v.abs() <= 3.0));
}

#[test]
fn one_step_chain_recovers_constant_data() {
    let sched = make_schedule(1, 0.02, 0.02).unwrap();
    let constant = 0.6;
    let mut model = Toy::new([0.0, 0.0, 0.0, 0.0]).of::<f64>();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        &model.params,
    );
    let mut r = rng(8);
    let y0 = Tensor::full(&[8, 1, 4, 4], constant);
    let cond = Tensor::zeros(&[8, 1]);
    let mut last = f64::INFINITY;
    for step in 0..1500 {
        let out = training_loss(&model, &y0, &cond, None, &sched, &mut r).unwrap();
        adam.set_lr(0.05 * (1.0 - step as f64 / 1500.0));
        adam.update(&mut model.params, &out.gradients);
        last = out.loss;
    }
    assert!(last < 0.02, "loss {last}");
    let y = sample_normalized(&model, &Tensor::zeros(&[4, 1]), None, [1, 4, 4], &sched, &mut r, SamplingMode::StandardDdpm).unwrap();
    assert!(y.data().iter().all(|v| (v - constant).abs() < 0.05));
}
