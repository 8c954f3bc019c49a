//! A small conditional diffusion head over one scalar, used to check that
//! the sampler keeps every mode of a multimodal target distribution.

use bdc_tensor::{GradAccumulator, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::eval::{sample_chunk, Denoiser};
use crate::model::{sinusoid, Builder, DecoderOutput, Linear};
use crate::rng::keyed_rng;
use crate::schedule::{build_cosine_schedule, forward_noise, make_inference_timesteps, NoiseSchedule};
use crate::train::AdamW;

const STEP_DIM: usize = 16;
const STEP_BASE: f64 = 1_000.0;
const TAG_DATA: u64 = 21;
const TAG_SAMPLE: u64 = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarHeadConfig {
    pub hidden: usize,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ScalarHeadConfig {
    fn default() -> Self {
        Self { hidden: 64, diffusion_steps: 100, batch_size: 256, train_steps: 1500, lr: 2e-3, seed: 0 }
    }
}

/// MLP x0-predictor over `[x_k, condition, step encoding]`.
#[derive(Clone, Debug)]
pub struct ScalarDiffusionHead {
    params: ParamStore<f64>,
    layers: [Linear; 3],
    schedule: NoiseSchedule,
}

/// Draws `(condition, target)` pairs.
pub trait ScalarDataset {
    fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64);
}

/// Targets `±mode` with equal probability, independent of a uniform condition.
#[derive(Clone, Copy, Debug)]
pub struct TwoModes {
    pub mode: f64,
}

impl ScalarDataset for TwoModes {
    fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let c = rng.gen_range(-1.0..1.0);
        let x = if rng.gen_bool(0.5) { self.mode } else { -self.mode };
        (c, x)
    }
}

impl ScalarDiffusionHead {
    pub fn new(cfg: &ScalarHeadConfig) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(invalid("hidden width must be positive"));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut bld = Builder { store: &mut params, rng: &mut rng };
        let layers = [
            Linear::new(&mut bld, "in", 2 + STEP_DIM, cfg.hidden),
            Linear::new(&mut bld, "mid", cfg.hidden, cfg.hidden),
            Linear::new(&mut bld, "out", cfg.hidden, 1),
        ];
        Ok(Self { params, layers, schedule: build_cosine_schedule(cfg.diffusion_steps)? })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn inputs(x: &[f64], cond: &[f64], steps: &[usize]) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = x
            .iter()
            .zip(cond)
            .zip(steps)
            .map(|((&x, &c), &k)| {
                let mut r = vec![x, c];
                r.extend(sinusoid(k as f64, STEP_DIM, STEP_BASE));
                r
            })
            .collect();
        Tensor::from_rows(&rows).expect("uniform rows")
    }

    fn forward(&self, tape: &mut Tape<f64>, input: Tensor<f64>) -> Result<bdc_tensor::Var> {
        let mut h = tape.constant(input);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.params, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    /// x0 estimates for a batch of noisy scalars.
    pub fn predict(&self, x: &[f64], cond: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, Self::inputs(x, cond, steps))?;
        Ok(tape.value(out).to_vec())
    }

    /// Minimizes the x0 mean squared error; returns the loss of every step.
    pub fn fit<D: ScalarDataset>(&mut self, data: &D, cfg: &ScalarHeadConfig) -> Result<Vec<f64>> {
        let k_max = self.schedule.steps();
        let mut opt = AdamW::new(&self.params, 0.0);
        let mut losses = Vec::with_capacity(cfg.train_steps);
        for step in 0..cfg.train_steps {
            let mut rng = keyed_rng(cfg.seed, step as u64, 0, TAG_DATA);
            let (mut xk, mut cond, mut ks, mut x0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for _ in 0..cfg.batch_size {
                let (c, x) = data.sample(&mut rng);
                let k = rng.gen_range(1..=k_max);
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                let noisy = forward_noise(&Tensor::new(&[1], vec![x])?, &Tensor::new(&[1], vec![eps])?, k, &self.schedule)?;
                xk.push(noisy.data()[0]);
                cond.push(c);
                ks.push(k);
                x0.push(x);
            }
            let mut tape = Tape::new();
            let pred = self.forward(&mut tape, Self::inputs(&xk, &cond, &ks))?;
            let target = tape.constant(Tensor::new(&[cfg.batch_size, 1], x0)?);
            let loss = tape.mse_loss(pred, target)?;
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss)?;
            let mut acc = GradAccumulator::new(&self.params);
            acc.add(&grads);
            opt.step(&mut self.params, &acc, cfg.lr);
        }
        Ok(losses)
    }

    /// One DDIM sample per seed with `inference_steps` denoising steps.
    pub fn sample(&self, cond: f64, seeds: impl IntoIterator<Item = u64>, inference_steps: usize) -> Result<Vec<f64>> {
        let ts = make_inference_timesteps(self.schedule.steps(), inference_steps)?;
        let den = Conditioned { head: self, cond };
        seeds
            .into_iter()
            .map(|s| {
                let obs = Tensor::zeros(&[1, 1]);
                let x = sample_chunk(&den, &obs, &self.schedule, &ts, keyed_rng(s, 0, 0, TAG_SAMPLE).gen(), false)?;
                Ok(x.data()[0])
            })
            .collect()
    }
}

struct Conditioned<'a> {
    head: &'a ScalarDiffusionHead,
    cond: f64,
}

impl Denoiser<f64> for Conditioned<'_> {
    fn action_shape(&self) -> [usize; 2] {
        [1, 1]
    }

    fn latent_shape(&self) -> Option<[usize; 2]> {
        None
    }

    fn requires_latents(&self) -> bool {
        false
    }

    fn denoise(
        &self,
        _obs: &Tensor<f64>,
        k: usize,
        actions: &Tensor<f64>,
        _latents: Option<&Tensor<f64>>,
    ) -> Result<DecoderOutput<f64>> {
        let a0 = self.head.predict(actions.data(), &[self.cond], &[k])?;
        Ok(DecoderOutput { a0_hat: Tensor::new(&[1, 1], a0)?, v0_hat: None })
    }
}
