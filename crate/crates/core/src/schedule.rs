//! Squared-cosine noise schedule and deterministic DDIM updates for a model
//! that predicts the clean sample.
//!
//! Index convention: `alpha_bar[0] = 1` is the clean signal and steps
//! `1..=K` are increasingly noisy.

use std::f64::consts::FRAC_PI_2;

use bdc_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `beta_k = 1 − ᾱ_k / ᾱ_{k−1}` for `k ≥ 1`.
    pub fn beta(&self, k: usize) -> f64 {
        1.0 - self.alpha_bar[k] / self.alpha_bar[k - 1]
    }

    fn check_step(&self, k: usize, lo: usize) -> Result<()> {
        if k < lo || k > self.steps {
            return Err(invalid(format!(
                "diffusion step {k} outside [{lo}, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// `ᾱ_k = f(k)/f(0)` with `f(k) = cos²(((k/K + s)/(1 + s))·π/2)`, with each
/// implied beta clamped to 0.999 and `ᾱ` rebuilt from the clamped betas.
pub fn build_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(invalid("schedule needs at least one step"));
    }
    let f = |k: usize| {
        let t = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (t * FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let raw: Vec<f64> = (0..=steps).map(|k| f(k) / f0).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for k in 1..=steps {
        let beta = (1.0 - raw[k] / raw[k - 1]).min(MAX_BETA);
        let prev = alpha_bar[k - 1];
        alpha_bar.push(prev * (1.0 - beta));
    }
    Ok(NoiseSchedule { steps, alpha_bar })
}

fn same_shape<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱ_k·x0 + √(1−ᾱ_k)·ε`.
pub fn forward_noise<S: Real>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape(x0, eps)?;
    sched.check_step(k, 1)?;
    if x0.data().iter().any(|v| v.abs() > S::one()) {
        log::warn!("forward_noise: clean sample outside [-1, 1]");
    }
    Ok(noise_at(x0, eps, sched.alpha_bar(k)))
}

fn noise_at<S: Real>(x0: &Tensor<S>, eps: &Tensor<S>, alpha_bar: f64) -> Tensor<S> {
    let a = S::lit(alpha_bar.sqrt());
    let b = S::lit((1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data).expect("same shape")
}

/// Deterministic (η = 0) DDIM update from step `k` to `k_prev` given the
/// model's clean-sample estimate. Lands exactly on the (clamped) estimate when
/// `k_prev = 0`.
pub fn ddim_step<S: Real>(
    x_k: &Tensor<S>,
    x0_hat: &Tensor<S>,
    k: usize,
    k_prev: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor<S>> {
    same_shape(x_k, x0_hat)?;
    if k_prev >= k {
        return Err(invalid(format!("k_prev {k_prev} must be below k {k}")));
    }
    sched.check_step(k, 1)?;
    let x0 = if clip {
        x0_hat.map(|v| v.max(-S::one()).min(S::one()))
    } else {
        x0_hat.clone()
    };
    if k_prev == 0 {
        return Ok(x0);
    }
    let ab = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k_prev);
    let (sa, sb) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    let (pa, pb) = (S::lit(ab_prev.sqrt()), S::lit((1.0 - ab_prev).sqrt()));
    let data = x_k
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&x, &c)| {
            let eps = (x - sa * c) / sb;
            pa * c + pb * eps
        })
        .collect();
    Ok(Tensor::new(x_k.shape(), data)?)
}

/// Strictly decreasing inference steps from `K` down to a terminal `0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceTimesteps {
    steps: Vec<usize>,
}

impl InferenceTimesteps {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Number of denoiser evaluations.
    pub fn count(&self) -> usize {
        self.steps.len() - 1
    }

    /// Consecutive `(k, k_prev)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `[⌊i·K/S⌋ for i = S..1] ++ [0]` with adjacent duplicates removed.
pub fn make_inference_timesteps(total: usize, count: usize) -> Result<InferenceTimesteps> {
    if count < 1 || count > total {
        return Err(invalid(format!(
            "inference step count {count} must be in [1, {total}]"
        )));
    }
    let mut steps: Vec<usize> = (1..=count).rev().map(|i| i * total / count).collect();
    steps.push(0);
    steps.dedup();
    Ok(InferenceTimesteps { steps })
}
