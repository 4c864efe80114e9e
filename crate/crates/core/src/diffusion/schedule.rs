use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Parameters of a linear beta schedule, as stored in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Standard deviation of a per-image, per-channel constant added to the
    /// Gaussian noise, in training and sampling alike.
    pub offset_noise: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            offset_noise: DEFAULT_OFFSET_NOISE,
        }
    }
}

/// With `T = 100` and these betas `alpha_bar(T)` stays near 0.37, so `y_T`
/// keeps much of the image mean while sampling starts from zero mean. Noise
/// with a random per-channel offset teaches the model to move that mean.
pub const DEFAULT_OFFSET_NOISE: f64 = 0.3;

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if !(self.offset_noise >= 0.0 && self.offset_noise.is_finite()) {
            return Err(validation!("offset_noise must be finite and >= 0, got {}", self.offset_noise));
        }
        let mut sched = make_schedule(self.steps, self.beta_start, self.beta_end)?;
        sched.offset_noise = self.offset_noise;
        Ok(sched)
    }
}

/// Forward-process variances. Steps are 1-based: `beta(1) .. beta(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    offset_noise: f64,
}

/// Linear betas from `beta_start` to `beta_end`; `alpha_bar` is the running
/// product of `alpha = 1 - beta`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(validation!("noise schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(validation!(
            "noise schedule needs 0 < beta_start <= beta_end < 1, got {beta_start} .. {beta_end}"
        ));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sched = NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        offset_noise: 0.0,
    };
    sched.check()?;
    Ok(sched)
}

impl NoiseSchedule {
    fn check(&self) -> Result<()> {
        if let Some(w) = self.alpha_bar.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(validation!("alpha_bar is not strictly decreasing at step {}", w + 2));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.index(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.index(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.index(t)]
    }

    pub fn offset_noise(&self) -> f64 {
        self.offset_noise
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(validation!("diffusion step {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}
