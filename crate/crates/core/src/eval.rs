//! Action-only DDIM inference, open-loop chunk rollouts, success-rate
//! evaluation and inference timing.

use std::path::Path;
use std::time::Instant;

use bdc_sim::{check_success, render, reset, scripted_expert, step, ActionVec, Image, TaskSpec, WorldState};
use bdc_tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latents::Normalizer;
use crate::model::{AttentionMode, Checkpoint, DecoderOutput, PolicyModel};
use crate::rng::keyed_rng;
use crate::schedule::{build_cosine_schedule, ddim_step, make_inference_timesteps, InferenceTimesteps, NoiseSchedule};
use crate::train::{gaussian, image_tensor};

const TAG_ACTION_NOISE: u64 = 11;
const TAG_LATENT_NOISE: u64 = 12;
const TAG_RANDOM_POLICY: u64 = 13;
const EVAL_SEED_BASE: u64 = 1_000_000_000;
const WARMUP_CALLS: usize = 5;
const MIN_TRIALS: usize = 10;

/// Anything that maps noisy inputs at step `k` to clean-sample estimates.
pub trait Denoiser<S: Real> {
    fn action_shape(&self) -> [usize; 2];
    /// `None` when the denoiser predicts no latent tokens.
    fn latent_shape(&self) -> Option<[usize; 2]>;
    fn requires_latents(&self) -> bool;
    fn denoise(
        &self,
        obs: &Tensor<S>,
        k: usize,
        actions: &Tensor<S>,
        latents: Option<&Tensor<S>>,
    ) -> Result<DecoderOutput<S>>;
}

impl<S: Real> Denoiser<S> for PolicyModel<S> {
    fn action_shape(&self) -> [usize; 2] {
        [self.config().chunk_size, self.config().action_dim]
    }

    fn latent_shape(&self) -> Option<[usize; 2]> {
        let c = self.config();
        c.has_latents().then(|| [c.frame_token_count(), c.latent_dim])
    }

    fn requires_latents(&self) -> bool {
        self.config().attention_mode == AttentionMode::Full && self.config().has_latents()
    }

    fn denoise(
        &self,
        obs: &Tensor<S>,
        k: usize,
        actions: &Tensor<S>,
        latents: Option<&Tensor<S>>,
    ) -> Result<DecoderOutput<S>> {
        self.denoise_forward(obs, k, actions, latents)
    }
}

/// DDIM from seeded standard-normal noise to a normalized action chunk.
/// With `co_denoise` the latent tokens are denoised alongside the actions;
/// otherwise they are omitted whenever the attention mode allows it.
pub fn sample_chunk<S: Real, D: Denoiser<S> + ?Sized>(
    den: &D,
    obs: &Tensor<S>,
    sched: &NoiseSchedule,
    timesteps: &InferenceTimesteps,
    seed: u64,
    co_denoise: bool,
) -> Result<Tensor<S>> {
    let mut a = gaussian(&mut keyed_rng(seed, 0, 0, TAG_ACTION_NOISE), &den.action_shape());
    let with_latents = co_denoise || den.requires_latents();
    let mut v = match (with_latents, den.latent_shape()) {
        (true, Some(shape)) => Some(gaussian(&mut keyed_rng(seed, 0, 0, TAG_LATENT_NOISE), &shape)),
        _ => None,
    };
    for (k, k_prev) in timesteps.pairs() {
        let out = den.denoise(obs, k, &a, v.as_ref())?;
        a = ddim_step(&a, &out.a0_hat, k, k_prev, sched, true)?;
        if let (Some(cur), Some(pred)) = (&v, &out.v0_hat) {
            v = Some(ddim_step(cur, pred, k, k_prev, sched, true)?);
        }
    }
    Ok(a)
}

/// Denormalizes an `[N, A]` chunk row by row.
pub fn denormalize_chunk<S: Real>(chunk: &Tensor<S>, normalizer: &Normalizer) -> Result<Tensor<f64>> {
    normalizer.action()?.denormalize(&chunk.cast())
}

/// A checkpoint ready for rollouts.
#[derive(Clone, Debug)]
pub struct DiffusionPolicy {
    pub model: PolicyModel<f32>,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
    pub timesteps: InferenceTimesteps,
    /// Denoise latent tokens even when the mask makes them unnecessary.
    pub co_denoise: bool,
}

impl DiffusionPolicy {
    pub fn new(model: PolicyModel<f32>, normalizer: Normalizer, inference_steps: usize) -> Result<Self> {
        let k = model.config().diffusion_steps;
        Ok(Self {
            schedule: build_cosine_schedule(k)?,
            timesteps: make_inference_timesteps(k, inference_steps)?,
            model,
            normalizer,
            co_denoise: false,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, inference_steps: usize) -> Result<Self> {
        Self::new(ckpt.model, ckpt.normalizer, inference_steps)
    }

    /// Whether latent tokens are processed at inference.
    pub fn uses_latents(&self) -> bool {
        self.model.config().has_latents() && (self.co_denoise || self.model.requires_latents())
    }

    /// Decoder tokens per denoiser call.
    pub fn decoder_tokens(&self) -> usize {
        let c = self.model.config();
        c.chunk_size + if self.uses_latents() { c.frame_token_count() } else { 0 }
    }

    pub fn mode_label(&self) -> String {
        self.model.config().attention_mode.to_string()
    }

    /// Denormalized `[N, A]` chunk for one observation.
    pub fn infer_action_chunk(&self, image: &Image, proprio: &[f64], seed: u64) -> Result<Tensor<f64>> {
        self.normalizer.action()?;
        let img = image_tensor::<f32>(image);
        let p: Vec<f32> = proprio.iter().map(|&v| v as f32).collect();
        let obs = self.model.encode_observation(&img, &p)?;
        let chunk = sample_chunk(&self.model, &obs, &self.schedule, &self.timesteps, seed, self.co_denoise)?;
        denormalize_chunk(&chunk, &self.normalizer)
    }
}

/// Free-function form of [`DiffusionPolicy::infer_action_chunk`] for any precision.
#[allow(clippy::too_many_arguments)]
pub fn infer_action_chunk<S: Real>(
    model: &PolicyModel<S>,
    normalizer: &Normalizer,
    image: &Tensor<S>,
    proprio: &[S],
    sched: &NoiseSchedule,
    timesteps: &InferenceTimesteps,
    seed: u64,
    co_denoise: bool,
) -> Result<Tensor<f64>> {
    normalizer.action()?;
    let obs = model.encode_observation(image, proprio)?;
    let chunk = sample_chunk(model, &obs, sched, timesteps, seed, co_denoise)?;
    denormalize_chunk(&chunk, normalizer)
}

/// Produces a chunk of actions to execute open-loop.
pub trait ChunkPolicy {
    fn act(&mut self, state: &WorldState, image: &Image, seed: u64) -> Result<Vec<ActionVec>>;
}

impl ChunkPolicy for DiffusionPolicy {
    fn act(&mut self, state: &WorldState, image: &Image, seed: u64) -> Result<Vec<ActionVec>> {
        let chunk = self.infer_action_chunk(image, &state.proprio(), seed)?;
        let (n, _) = chunk.dims2();
        Ok((0..n).map(|i| ActionVec::from_slice(chunk.row(i))).collect())
    }
}

/// The scripted expert as a one-step-chunk policy.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertPolicy;

impl ChunkPolicy for ExpertPolicy {
    fn act(&mut self, state: &WorldState, _image: &Image, _seed: u64) -> Result<Vec<ActionVec>> {
        Ok(vec![scripted_expert(state)?])
    }
}

/// Uniform random actions in `[-1, 1]` per coordinate.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub chunk: usize,
}

impl ChunkPolicy for RandomPolicy {
    fn act(&mut self, _state: &WorldState, _image: &Image, seed: u64) -> Result<Vec<ActionVec>> {
        let mut rng = keyed_rng(seed, 0, 0, TAG_RANDOM_POLICY);
        Ok((0..self.chunk)
            .map(|_| ActionVec(std::array::from_fn(|_| rng.gen_range(-1.0..=1.0))))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub success: bool,
    pub proprio: Vec<[f64; 6]>,
    pub actions: Vec<[f64; 6]>,
    /// Number of chunks requested from the policy.
    pub calls: usize,
    pub inference_ms: f64,
}

/// Observe, infer a chunk, execute it open-loop, repeat until the episode
/// ends. Success is judged on the terminal state.
pub fn rollout_episode<P: ChunkPolicy + ?Sized>(policy: &mut P, spec: &TaskSpec, seed: u64) -> Result<Rollout> {
    let mut state = reset(spec, seed);
    let mut out = Rollout { success: false, proprio: Vec::new(), actions: Vec::new(), calls: 0, inference_ms: 0.0 };
    while !state.is_terminal() {
        let image = render(&state);
        let start = Instant::now();
        let chunk = policy.act(&state, &image, keyed_seed(seed, out.calls as u64))?;
        out.inference_ms += start.elapsed().as_secs_f64() * 1e3;
        out.calls += 1;
        if chunk.is_empty() {
            return Err(invalid("policy returned an empty chunk"));
        }
        for a in chunk {
            if state.is_terminal() {
                break;
            }
            if !a.is_finite() {
                return Err(Error::NonFinite("policy action".into()));
            }
            out.proprio.push(state.proprio());
            out.actions.push(a.0);
            state = step(&state, &a)?;
        }
    }
    out.success = check_success(&state);
    Ok(out)
}

fn keyed_seed(seed: u64, call: u64) -> u64 {
    keyed_rng(seed, call, 0, 0).gen()
}

/// Seed of episode `e` under evaluation seed `seed`; disjoint from the
/// low demonstration seeds.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    EVAL_SEED_BASE + seed * 100_000 + e as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: String,
    pub episodes_per_seed: usize,
    pub seeds: Vec<u64>,
    /// Percent successes per seed.
    pub success_rates: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub outcomes: Vec<Vec<bool>>,
    /// Mean wall time of one chunk inference, milliseconds.
    pub inference_ms: f64,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Copy with the timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self { inference_ms: 0.0, ..self.clone() }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// One row per seed: `task, mode, seed, success_rate, episodes`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task", "mode", "seed", "success_rate", "episodes"])?;
        for (seed, rate) in self.seeds.iter().zip(&self.success_rates) {
            w.write_record([
                self.task.clone(),
                self.mode.clone(),
                seed.to_string(),
                rate.to_string(),
                self.episodes_per_seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `episodes` rollouts per seed.
pub fn evaluate<P: ChunkPolicy + ?Sized>(
    policy: &mut P,
    spec: &TaskSpec,
    episodes: usize,
    seeds: &[u64],
    mode: &str,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(invalid("need at least one episode per seed"));
    }
    let mut rates = Vec::with_capacity(seeds.len());
    let mut outcomes = Vec::with_capacity(seeds.len());
    let (mut ms, mut calls) = (0.0, 0usize);
    for &seed in seeds {
        let mut wins = Vec::with_capacity(episodes);
        for e in 0..episodes {
            let r = rollout_episode(policy, spec, episode_seed(seed, e))?;
            ms += r.inference_ms;
            calls += r.calls;
            wins.push(r.success);
        }
        rates.push(100.0 * wins.iter().filter(|&&w| w).count() as f64 / episodes as f64);
        outcomes.push(wins);
        log::info!("{} seed {seed}: {:.1}%", spec.id, rates.last().copied().unwrap_or(0.0));
    }
    let (mean, std) = mean_std(&rates);
    Ok(EvalReport {
        task: spec.id.to_string(),
        mode: mode.to_string(),
        episodes_per_seed: episodes,
        seeds: seeds.to_vec(),
        success_rates: rates,
        mean,
        std,
        outcomes,
        inference_ms: if calls == 0 { 0.0 } else { ms / calls as f64 },
        config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceTiming {
    pub label: String,
    pub decoder_tokens: usize,
    pub mean_ms: f64,
    /// Median of five block means.
    pub median_of_means_ms: f64,
}

/// Wall-clock cost of [`DiffusionPolicy::infer_action_chunk`] on a fixed
/// observation, after `5` untimed warm-up calls.
pub fn measure_inference_time(
    policies: &[(&str, &DiffusionPolicy)],
    image: &Image,
    proprio: &[f64],
    trials: usize,
) -> Result<Vec<InferenceTiming>> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!("need at least {MIN_TRIALS} timed trials, got {trials}")));
    }
    let mut out = Vec::new();
    for (label, policy) in policies {
        for w in 0..WARMUP_CALLS {
            policy.infer_action_chunk(image, proprio, w as u64)?;
        }
        let mut times = Vec::with_capacity(trials);
        for t in 0..trials {
            let start = Instant::now();
            policy.infer_action_chunk(image, proprio, t as u64)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / trials as f64;
        let block = trials / 5;
        let mut means: Vec<f64> = (0..5)
            .map(|b| times[b * block..(b + 1) * block].iter().sum::<f64>() / block as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        out.push(InferenceTiming {
            label: label.to_string(),
            decoder_tokens: policy.decoder_tokens(),
            mean_ms: mean,
            median_of_means_ms: means[2],
        });
    }
    Ok(out)
}
