use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DesignParams;
use crate::error::{structural, validation, Error, Result};
use crate::geometry::{GarmentMesh, Vec2, Vec3};
use crate::nn::{init_normal, Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor};

/// Training knobs for [`fit_design_mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignFitConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of samples held out to report generalization error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DesignFitConfig {
    fn default() -> Self {
        DesignFitConfig {
            hidden: vec![256, 256],
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// MLP from design parameters to canonical vertex positions.
///
/// Outputs are predicted in a normalized space (`mean + scale * y`) and the
/// last layer starts at zero, so an untrained model returns the mean mesh.
#[derive(Debug, Clone)]
pub struct DesignRegressor {
    hidden: Vec<usize>,
    params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
    mean: Vec<f64>,
    scale: f64,
    faces: Vec<[usize; 3]>,
    uv: Vec<Vec2>,
    /// Mean vertex error (meters) on held-out samples, or on the training set
    /// when nothing was held out.
    pub held_out_error: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RegressorHeader {
    hidden: Vec<usize>,
    vertex_count: usize,
    scale: f64,
    held_out_error: f64,
    faces: Vec<[usize; 3]>,
    uv: Vec<[f64; 2]>,
}

fn encode_input(p: &DesignParams) -> [f32; 3] {
    p.to_array().map(|v| (2.0 * v - 1.0) as f32)
}

impl DesignRegressor {
    fn init(hidden: &[usize], outputs: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f32>, Vec<(ParamId, ParamId)>) {
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = 3;
        for (i, &width) in hidden.iter().chain(std::iter::once(&outputs)).enumerate() {
            let last = i == hidden.len();
            let w = if last {
                Tensor::zeros(&[width, fan_in])
            } else {
                init_normal(&[width, fan_in], fan_in, 2f64.sqrt(), rng)
            };
            let wid = params.add(format!("layer{i}.weight"), w);
            let bid = params.add(format!("layer{i}.bias"), Tensor::zeros(&[width]));
            layers.push((wid, bid));
            fan_in = width;
        }
        (params, layers)
    }

    fn build(&self, g: &mut Graph<f32>, inputs: &[DesignParams]) -> Result<crate::nn::Var> {
        let data = inputs.iter().flat_map(encode_input).collect();
        let mut x = g.input(Tensor::new(&[inputs.len(), 3], data)?);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, w);
            let b = g.param(&self.params, b);
            x = g.linear(x, w, Some(b))?;
            if i + 1 < self.layers.len() {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    pub fn vertex_count(&self) -> usize {
        self.uv.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn predict(&self, p: &DesignParams) -> Result<GarmentMesh> {
        p.validate()?;
        let mut g = Graph::new();
        let out = self.build(&mut g, std::slice::from_ref(p))?;
        let y = g.value(out).data();
        let vertices = (0..self.vertex_count())
            .map(|v| {
                Vec3::from_fn(|k, _| self.mean[3 * v + k] + self.scale * y[3 * v + k] as f64)
            })
            .collect();
        Ok(GarmentMesh {
            vertices,
            faces: self.faces.clone(),
            uv: self.uv.clone(),
        })
    }

    pub(super) fn to_parts(&self) -> (RegressorHeader, Vec<f32>) {
        let header = RegressorHeader {
            hidden: self.hidden.clone(),
            vertex_count: self.vertex_count(),
            scale: self.scale,
            held_out_error: self.held_out_error,
            faces: self.faces.clone(),
            uv: self.uv.iter().map(|t| [t.x, t.y]).collect(),
        };
        let mut floats: Vec<f32> = self.mean.iter().map(|&m| m as f32).collect();
        for (_, _, t) in self.params.iter() {
            floats.extend_from_slice(t.data());
        }
        (header, floats)
    }

    pub(super) fn from_parts(h: RegressorHeader, floats: &[f32]) -> Result<Self> {
        let outputs = 3 * h.vertex_count;
        if h.uv.len() != h.vertex_count {
            return Err(structural!("regressor header has {} uvs for {} vertices", h.uv.len(), h.vertex_count));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, layers) = Self::init(&h.hidden, outputs, &mut rng);
        let expected = outputs + params.numel();
        if floats.len() != expected {
            return Err(Error::Format {
                kind: "dtpl",
                msg: format!("expected {expected} weights, found {}", floats.len()),
            });
        }
        let mean = floats[..outputs].iter().map(|&m| m as f64).collect();
        let mut offset = outputs;
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let n = t.numel();
            t.data_mut().copy_from_slice(&floats[offset..offset + n]);
            offset += n;
        }
        Ok(DesignRegressor {
            hidden: h.hidden,
            params,
            layers,
            mean,
            scale: h.scale,
            faces: h.faces,
            uv: h.uv.into_iter().map(Vec2::from).collect(),
            held_out_error: h.held_out_error,
        })
    }
}

fn mean_vertex_error(a: &GarmentMesh, b: &GarmentMesh) -> f64 {
    a.vertices.iter().zip(&b.vertices).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.vertices.len() as f64
}

/// Fits a [`DesignRegressor`] to `(p, mesh)` samples with Adam.
///
/// The learning rate decays linearly to zero over `steps`. A random
/// `holdout` fraction of the samples (at least one when there are two or
/// more) is kept out of training and used to report the error.
pub fn fit_design_mlp(samples: &[(DesignParams, GarmentMesh)], config: &DesignFitConfig) -> Result<DesignRegressor> {
    let Some((_, first)) = samples.first() else {
        return Err(validation!("design regression needs at least one sample"));
    };
    for (i, (p, m)) in samples.iter().enumerate() {
        p.validate()?;
        first
            .check_same_topology(m, &format!("design sample {i}"))?;
        if m.uv != first.uv {
            return Err(structural!("design sample {i}: uv layout differs from sample 0"));
        }
    }
    if config.batch == 0 || !(0.0..1.0).contains(&config.holdout) || !(config.lr >= 0.0) {
        return Err(validation!("design fit needs batch >= 1, holdout in [0, 1) and lr >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if samples.len() >= 2 {
        ((samples.len() as f64 * config.holdout).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (held, train) = order.split_at(n_hold);

    let outputs = 3 * first.vertex_count();
    let mut mean = vec![0.0; outputs];
    for &i in train {
        for (v, p) in samples[i].1.vertices.iter().enumerate() {
            for k in 0..3 {
                mean[3 * v + k] += p[k];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sq = 0.0;
    for &i in train {
        for (v, p) in samples[i].1.vertices.iter().enumerate() {
            for k in 0..3 {
                sq += (p[k] - mean[3 * v + k]).powi(2);
            }
        }
    }
    let rms = (sq / (train.len() * outputs) as f64).sqrt();
    let scale = if rms > 1e-9 { rms } else { 1.0 };

    let (params, layers) = DesignRegressor::init(&config.hidden, outputs, &mut rng);
    let mut model = DesignRegressor {
        hidden: config.hidden.clone(),
        params,
        layers,
        mean,
        scale,
        faces: first.faces.clone(),
        uv: first.uv.clone(),
        held_out_error: 0.0,
    };
    let targets: Vec<Vec<f32>> = samples
        .iter()
        .map(|(_, m)| {
            m.vertices
                .iter()
                .enumerate()
                .flat_map(|(v, p)| (0..3).map(move |k| (v, k, p[k])))
                .map(|(v, k, x)| ((x - model.mean[3 * v + k]) / scale) as f32)
                .collect()
        })
        .collect();

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let batch = config.batch.min(train.len());
    let mut cursor = train.len();
    let mut pool = train.to_vec();
    for step in 0..config.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == pool.len() {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(pool[cursor]);
            cursor += 1;
        }
        let inputs: Vec<DesignParams> = picked.iter().map(|&i| samples[i].0).collect();
        let target: Vec<f32> = picked.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let mut g = Graph::new();
        let out = model.build(&mut g, &inputs)?;
        let loss = g.mse(out, Tensor::new(&[batch, outputs], target)?)?;
        if !g.value(loss).is_finite() {
            return Err(Error::Divergence {
                step,
                tensor: None,
                reason: "design regression loss is not finite".into(),
                last_good: None,
            });
        }
        let grads = g.backward(loss)?.into_gradients(&model.params);
        adam.set_lr(config.lr * (1.0 - step as f64 / config.steps as f64));
        adam.update(&mut model.params, &grads);
    }

    let eval: &[usize] = if held.is_empty() { train } else { held };
    let mut total = 0.0;
    for &i in eval {
        total += mean_vertex_error(&model.predict(&samples[i].0)?, &samples[i].1);
    }
    model.held_out_error = total / eval.len() as f64;
    log::info!(
        "design regressor: {} parameters, mean vertex error {:.3e} m on {} {} samples",
        model.parameter_count(),
        model.held_out_error,
        eval.len(),
        if held.is_empty() { "training" } else { "held-out" }
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{design_mesh, DesignTemplate, GeneratorParams};

    fn small_template() -> DesignTemplate {
        DesignTemplate::new(GeneratorParams {
            torso_segments: 8,
            torso_rows: 6,
            sleeve_segments: 6,
            sleeve_rows: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn single_sample_is_memorized() {
        let t = small_template();
        let p = DesignParams::new(0.3, 0.7, 0.2).unwrap();
        let m = design_mesh(&t, &p).unwrap();
        let cfg = DesignFitConfig {
            steps: 5,
            ..Default::default()
        };
        let r = fit_design_mlp(&[(p, m.clone())], &cfg).unwrap();
        assert!(mean_vertex_error(&r.predict(&p).unwrap(), &m) < 1e-3);
    }

    #[test]
    fn constant_dataset_gives_constant_output() {
        let t = small_template();
        let m = design_mesh(&t, &DesignParams::new(0.5, 0.5, 0.5).unwrap()).unwrap();
        let samples: Vec<_> = (0..5)
            .map(|i| (DesignParams::new(i as f64 / 4.0, 0.1, 0.9).unwrap(), m.clone()))
            .collect();
        let cfg = DesignFitConfig {
            steps: 50,
            ..Default::default()
        };
        let r = fit_design_mlp(&samples, &cfg).unwrap();
        for q in [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.2, 0.8, 0.4)] {
            let out = r.predict(&DesignParams::new(q.0, q.1, q.2).unwrap()).unwrap();
            let worst = out.vertices.iter().zip(&m.vertices).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(worst < 1e-3, "{worst}");
        }
    }

    #[test]
    fn topology_mismatch_is_structural() {
        let t = small_template();
        let p = DesignParams::default();
        let a = design_mesh(&t, &p).unwrap();
        let b = design_mesh(&DesignTemplate::default(), &p).unwrap();
        let err = fit_design_mlp(&[(p, a), (p, b)], &DesignFitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn regressor_survives_dtpl() {
        let t = small_template();
        let samples: Vec<_> = (0..4)
            .map(|i| {
                let p = DesignParams::new(i as f64 / 3.0, 0.5, 0.0).unwrap();
                (p, design_mesh(&t, &p).unwrap())
            })
            .collect();
        let cfg = DesignFitConfig {
            hidden: vec![16, 16],
            steps: 20,
            ..Default::default()
        };
        let r = fit_design_mlp(&samples, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.dtpl");
        crate::design::save_dtpl(&path, &t, Some(&r)).unwrap();
        let (_, back) = crate::design::load_dtpl(&path).unwrap();
        let back = back.unwrap();
        let p = DesignParams::new(0.4, 0.5, 0.0).unwrap();
        let a = r.predict(&p).unwrap();
        let b = back.predict(&p).unwrap();
        // The mean is stored as f32.
        assert!(mean_vertex_error(&a, &b) < 1e-6);
        assert_eq!(back.held_out_error, r.held_out_error);
    }
}
