//! Demonstration collection, batch assembly, the joint denoising loss and the
//! training loop.

mod config;
mod data;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use bdc_tensor::{GradAccumulator, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latents::{
    fit_linear_autoencoder, FrameSamplePlan, LatentTokenizer, MinMax, Normalizer, TokenizerVariant,
};
use crate::model::{save_checkpoint, Checkpoint, ModelConfig, PolicyModel};
use crate::rng::keyed_rng;
use crate::schedule::{build_cosine_schedule, forward_noise, NoiseSchedule};

pub use config::{TrainConfig, TrainPrecision};
pub use data::{
    collect_demos, random_shift_augment, shift_image, Dataset, Manifest, ManifestEntry, MANIFEST_FILE,
};
pub use optim::{lr_at, AdamW};

pub(crate) use data::image_tensor;
use data::{prepare_episode, window, PreparedEpisode};

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BEST_CHECKPOINT_FILE: &str = "checkpoint_best.bin";

const TAG_BATCH: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_VAL: u64 = 3;
const VAL_SAMPLES: usize = 64;

/// One training example with its sampled diffusion step and noises.
#[derive(Clone, Debug)]
pub struct TrainSample<S> {
    /// `[H, W, C]` in `[0, 1]`.
    pub image: Tensor<S>,
    /// `[1, P]`.
    pub proprio: Tensor<S>,
    /// Clean normalized actions `[N, A]`.
    pub actions: Tensor<S>,
    /// Clean normalized latent tokens `[M, D_v]`.
    pub latents: Option<Tensor<S>>,
    pub k: usize,
    pub eps_actions: Tensor<S>,
    pub eps_latents: Option<Tensor<S>>,
}

#[derive(Clone, Debug, Default)]
pub struct Batch<S> {
    pub samples: Vec<TrainSample<S>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub action: f64,
    /// Unweighted latent MSE (0 when no latents are predicted).
    pub video: f64,
    pub total: f64,
}

pub(crate) fn gaussian<S: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Handles of one sample's loss terms on a tape.
pub struct SampleLoss {
    pub action: Var,
    pub video: Option<Var>,
    pub total: Var,
    /// Noisy latent input leaf, when latents are present.
    pub latent_input: Option<Var>,
}

/// Builds `mean|â0 − a| + w·mean(v̂0 − v)²` for one sample.
pub fn sample_loss<S: Real>(
    model: &PolicyModel<S>,
    tape: &mut Tape<S>,
    sample: &TrainSample<S>,
    sched: &NoiseSchedule,
    weight: f64,
) -> Result<SampleLoss> {
    let img = tape.constant(sample.image.clone());
    let prop = tape.constant(sample.proprio.clone());
    let obs = model.encode_observation_var(tape, img, prop)?;
    let noisy_a = forward_noise(&sample.actions, &sample.eps_actions, sample.k, sched)?;
    let a = tape.constant(noisy_a);
    let latent_input = match (&sample.latents, &sample.eps_latents) {
        (Some(v), Some(e)) => Some(tape.leaf(forward_noise(v, e, sample.k, sched)?, true)),
        _ => None,
    };
    let spec = model.config().mask_spec();
    let out = model.denoise_forward_var(tape, obs, sample.k, a, latent_input, &spec)?;
    let clean_a = tape.constant(sample.actions.clone());
    let action = tape.l1_loss(out.actions, clean_a)?;
    let video = match (out.latents, &sample.latents) {
        (Some(pred), Some(v)) => {
            let clean_v = tape.constant(v.clone());
            Some(tape.mse_loss(pred, clean_v)?)
        }
        _ => None,
    };
    let total = match video {
        Some(v) if weight != 0.0 => {
            let wv = tape.scale(v, weight)?;
            tape.add(action, wv)?
        }
        _ => action,
    };
    Ok(SampleLoss { action, video, total, latent_input })
}

/// Gradient of the action loss alone with respect to the noisy latent inputs.
pub fn action_grad_wrt_latents<S: Real>(
    model: &PolicyModel<S>,
    sample: &TrainSample<S>,
    sched: &NoiseSchedule,
) -> Result<Option<Tensor<S>>> {
    let mut tape = Tape::new();
    let loss = sample_loss(model, &mut tape, sample, sched, 0.0)?;
    let Some(leaf) = loss.latent_input else { return Ok(None) };
    let grads = tape.backward(loss.action)?;
    Ok(grads.wrt(leaf).cloned())
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} ({v})")))
    }
}

/// Batch losses and their parameter gradients (averaged over the batch).
pub fn batch_gradients<S: Real>(
    model: &PolicyModel<S>,
    batch: &Batch<S>,
    sched: &NoiseSchedule,
    weight: f64,
) -> Result<(StepLosses, GradAccumulator<S>)> {
    if batch.samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = GradAccumulator::new(model.params());
    let mut sums = StepLosses::default();
    for sample in &batch.samples {
        let mut tape = Tape::new();
        let loss = sample_loss(model, &mut tape, sample, sched, weight)?;
        let a = check_finite("action_loss", tape.value(loss.action).item().as_f64())?;
        let v = match loss.video {
            Some(v) => check_finite("video_loss", tape.value(v).item().as_f64())?,
            None => 0.0,
        };
        let t = check_finite("total_loss", tape.value(loss.total).item().as_f64())?;
        sums.action += a;
        sums.video += v;
        sums.total += t;
        acc.add(&tape.backward(loss.total)?);
    }
    let n = batch.samples.len() as f64;
    acc.scale(S::lit(1.0 / n));
    Ok((
        StepLosses { action: sums.action / n, video: sums.video / n, total: sums.total / n },
        acc,
    ))
}

/// One optimizer update on `batch`.
pub fn train_step<S: Real>(
    model: &mut PolicyModel<S>,
    batch: &Batch<S>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    lr: f64,
) -> Result<StepLosses> {
    if cfg!(debug_assertions) && opt.steps() == 0 && model.config().attention_mode.allows_latent_skip() {
        if let Some(g) = action_grad_wrt_latents(model, &batch.samples[0], sched)? {
            debug_assert!(
                g.data().iter().all(|v| *v == S::zero()),
                "action loss leaks gradient into latent tokens"
            );
        }
    }
    let (losses, mut grads) = batch_gradients(model, batch, sched, cfg.prediction_weight)?;
    if cfg.grad_clip > 0.0 {
        let norm = grads.global_norm();
        if norm > cfg.grad_clip {
            grads.scale(S::lit(cfg.grad_clip / norm));
        }
    }
    opt.step(model.params_mut(), &grads, lr);
    Ok(losses)
}

/// Everything derived from the training split before the first step.
pub struct Prepared<S> {
    pub model_config: ModelConfig,
    pub normalizer: Normalizer,
    pub tokenizer: Option<LatentTokenizer>,
    pub plan: FrameSamplePlan,
    train: Vec<PreparedEpisode>,
    val: Vec<PreparedEpisode>,
    index: Vec<(usize, usize)>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Real> Prepared<S> {
    pub fn from_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.manifest.task != cfg.task {
            return Err(Error::Config(format!(
                "dataset holds {} demos but config task is {}",
                data.manifest.task, cfg.task
            )));
        }
        let (train_idx, val_idx) = data.split();
        if train_idx.is_empty() {
            return Err(Error::Config("dataset has no training episodes".into()));
        }
        let first = &data.episodes[train_idx[0]];
        let header = first.header();
        let plan = FrameSamplePlan::uniform(cfg.chunk_size, cfg.frame_count)?;

        let action_rows = train_idx.iter().flat_map(|&i| data.episodes[i].actions.iter().map(Vec::as_slice));
        let action_stats = MinMax::fit(action_rows, header.action_dim)
            .map_err(|_| Error::Config("action dimension differs between episodes".into()))?;

        let tokenizer = if plan.frame_count() > 0 {
            let base = match cfg.tokenizer {
                TokenizerVariant::DownsamplePatch => {
                    LatentTokenizer::downsample_patch(cfg.spatial_factor, cfg.patch_size, header.channels)
                }
                TokenizerVariant::LinearAutoencoder => {
                    LatentTokenizer::linear_autoencoder(cfg.spatial_factor, cfg.patch_size, header.channels)
                }
            };
            Some(match cfg.tokenizer {
                TokenizerVariant::DownsamplePatch => base,
                TokenizerVariant::LinearAutoencoder => fit_linear_autoencoder(
                    &base,
                    train_idx.iter().flat_map(|&i| data.episodes[i].images.iter()),
                    cfg.latent_dim,
                    cfg.seed,
                )?,
            })
        } else {
            None
        };
        let (tokens_per_frame, latent_dim) = match &tokenizer {
            Some(t) => (t.patches_per_frame(header.height, header.width)?, t.latent_dim()?),
            None => (0, 0),
        };
        let latent_stats = match &tokenizer {
            Some(t) => {
                let mut rows = Vec::new();
                for &i in &train_idx {
                    for img in &data.episodes[i].images {
                        rows.extend(t.tokenize_frame(img)?);
                    }
                }
                Some(MinMax::fit(rows.iter().map(Vec::as_slice), latent_dim)?)
            }
            None => None,
        };
        let normalizer = Normalizer { action: Some(action_stats), latent: latent_stats };

        let prep = |idx: &[usize]| -> Result<Vec<PreparedEpisode>> {
            idx.iter()
                .map(|&i| {
                    let ep = &data.episodes[i];
                    if ep.header().action_dim != header.action_dim || ep.is_empty() {
                        return Err(Error::Config(format!("episode {i} is empty or has a different action size")));
                    }
                    prepare_episode(ep, tokenizer.as_ref(), normalizer.action()?, normalizer.latent.as_ref())
                })
                .collect()
        };
        let train = prep(&train_idx)?;
        let val = prep(&val_idx)?;
        let index = train
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
            .collect();

        let model_config = ModelConfig {
            width: cfg.width,
            heads: cfg.heads,
            encoder_layers: cfg.encoder_layers,
            decoder_layers: cfg.decoder_layers,
            image_height: header.height,
            image_width: header.width,
            image_channels: header.channels,
            cnn_channels: vec![16, 32, 32],
            proprio_dim: header.proprio_dim,
            chunk_size: cfg.chunk_size,
            action_dim: header.action_dim,
            frame_timestamps: plan.timestamps.clone(),
            tokens_per_frame,
            latent_dim,
            attention_mode: cfg.attention_mode,
            mask_granularity: cfg.mask_granularity,
            diffusion_steps: cfg.diffusion_steps,
        };
        model_config.validate()?;
        Ok(Self {
            model_config,
            normalizer,
            tokenizer,
            plan,
            train,
            val,
            index,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn train_samples(&self) -> usize {
        self.index.len()
    }

    pub fn val_episodes(&self) -> usize {
        self.val.len()
    }

    fn make_sample<R: Rng>(
        &self,
        ep: &PreparedEpisode,
        t: usize,
        cfg: &TrainConfig,
        rng: &mut R,
        augment: bool,
    ) -> Result<TrainSample<S>> {
        let img = if augment {
            random_shift_augment(&ep.images[t], cfg.shift_max, rng)?
        } else {
            ep.images[t].clone()
        };
        let (actions, latents) = window(ep, t, cfg.chunk_size, &self.plan, self.model_config.latent_dim)?;
        let k = rng.gen_range(1..=cfg.diffusion_steps);
        let eps_actions = gaussian(rng, actions.shape());
        let eps_latents = latents.as_ref().map(|l| gaussian(rng, l.shape()));
        Ok(TrainSample {
            image: image_tensor(&img),
            proprio: Tensor::new(&[1, ep.proprio[t].len()], ep.proprio[t].iter().map(|&v| S::lit(v)).collect())?,
            actions,
            latents,
            k,
            eps_actions,
            eps_latents,
        })
    }

    /// Deterministic batch for optimizer step `step`.
    pub fn batch(&self, cfg: &TrainConfig, step: usize) -> Result<Batch<S>> {
        let mut pick = keyed_rng(cfg.seed, step as u64, 0, TAG_BATCH);
        let samples = (0..cfg.batch_size)
            .map(|i| {
                let (e, t) = self.index[pick.gen_range(0..self.index.len())];
                let mut rng = keyed_rng(cfg.seed, step as u64, i as u64, TAG_SAMPLE);
                self.make_sample(&self.train[e], t, cfg, &mut rng, true)
            })
            .collect::<Result<_>>()?;
        Ok(Batch { samples })
    }

    /// Fixed held-out batch (no augmentation), empty without validation episodes.
    pub fn validation_batch(&self, cfg: &TrainConfig) -> Result<Batch<S>> {
        let index: Vec<(usize, usize)> = self
            .val
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
            .collect();
        if index.is_empty() {
            return Ok(Batch::default());
        }
        let stride = (index.len() / VAL_SAMPLES).max(1);
        let samples = index
            .iter()
            .step_by(stride)
            .take(VAL_SAMPLES)
            .enumerate()
            .map(|(i, &(e, t))| {
                let mut rng = keyed_rng(cfg.seed, 0, i as u64, TAG_VAL);
                self.make_sample(&self.val[e], t, cfg, &mut rng, false)
            })
            .collect::<Result<_>>()?;
        Ok(Batch { samples })
    }
}

/// Mean losses of a batch without updating anything.
pub fn evaluate_losses<S: Real>(
    model: &PolicyModel<S>,
    batch: &Batch<S>,
    sched: &NoiseSchedule,
    weight: f64,
) -> Result<StepLosses> {
    let mut sums = StepLosses::default();
    for sample in &batch.samples {
        let mut tape = Tape::new();
        let loss = sample_loss(model, &mut tape, sample, sched, weight)?;
        sums.action += tape.value(loss.action).item().as_f64();
        sums.video += loss.video.map_or(0.0, |v| tape.value(v).item().as_f64());
        sums.total += tape.value(loss.total).item().as_f64();
    }
    let n = batch.samples.len().max(1) as f64;
    Ok(StepLosses { action: sums.action / n, video: sums.video / n, total: sums.total / n })
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub action_loss: f64,
    pub video_loss: f64,
    pub total_loss: f64,
    /// Elapsed time; kept out of the CSV so identical runs write identical files.
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Paths and final statistics of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub best_val_loss: Option<f64>,
}

/// Full training run: fit statistics on the training split, optimize, log
/// window-averaged losses every `log_every` steps and write checkpoints.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = Dataset::load(&cfg.data_dir)?;
    match cfg.precision {
        TrainPrecision::F32 => train_on::<f32>(cfg, &data),
        TrainPrecision::F64 => train_on::<f64>(cfg, &data),
    }
}

fn to_checkpoint<S: Real>(model: &PolicyModel<S>, prep: &Prepared<S>, step: usize) -> Checkpoint {
    Checkpoint {
        model: model.cast(),
        normalizer: prep.normalizer.clone(),
        tokenizer: prep.tokenizer.clone(),
        step,
    }
}

pub fn train_on<S: Real>(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let prep = Prepared::<S>::from_dataset(data, cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let sched = build_cosine_schedule(cfg.diffusion_steps)?;
    let mut model = PolicyModel::<S>::new(prep.model_config.clone(), cfg.seed)?;
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let val_batch = prep.validation_batch(cfg)?;
    log::info!(
        "training {} on {} samples ({} params, {} validation episodes)",
        cfg.task,
        prep.train_samples(),
        model.params().num_elements(),
        prep.val_episodes()
    );

    let metrics = cfg.out_dir.join(METRICS_FILE);
    let best_path = cfg.out_dir.join(BEST_CHECKPOINT_FILE);
    let mut writer = csv::Writer::from_path(&metrics)?;
    let start = Instant::now();
    let mut window_sum = StepLosses::default();
    let mut window_len = 0usize;
    let mut rows = Vec::new();
    let mut best: Option<f64> = None;
    for step in 1..=cfg.total_steps {
        let lr = lr_at(step, cfg);
        let batch = prep.batch(cfg, step)?;
        let l = train_step(&mut model, &batch, &sched, cfg, &mut opt, lr)?;
        window_sum.action += l.action;
        window_sum.video += l.video;
        window_sum.total += l.total;
        window_len += 1;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let n = window_len as f64;
            let row = MetricsRow {
                step,
                lr,
                action_loss: window_sum.action / n,
                video_loss: window_sum.video / n,
                total_loss: window_sum.total / n,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            log::info!(
                "step {step}: action {:.5} video {:.5} total {:.5} ({:.1} s)",
                row.action_loss,
                row.video_loss,
                row.total_loss,
                row.wall_ms as f64 / 1000.0
            );
            writer.serialize(&row)?;
            writer.flush()?;
            rows.push(row);
            window_sum = StepLosses::default();
            window_len = 0;
        }
        if !val_batch.samples.is_empty() && (step % cfg.val_every == 0 || step == cfg.total_steps) {
            let v = evaluate_losses(&model, &val_batch, &sched, cfg.prediction_weight)?.total;
            if best.is_none_or(|b| v < b) {
                best = Some(v);
                save_checkpoint(&to_checkpoint(&model, &prep, step), &best_path)?;
            }
        }
    }
    let final_path = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&to_checkpoint(&model, &prep, cfg.total_steps), &final_path)?;
    if best.is_none() {
        std::fs::copy(&final_path, &best_path)?;
    }
    Ok(TrainOutcome { checkpoint: final_path, best_checkpoint: best_path, metrics, rows, best_val_loss: best })
}

/// One `metrics.csv` row: step, lr, action loss, video loss, total loss.
pub type MetricsRecord = (usize, f64, f64, f64, f64);

/// Reads a metrics CSV back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad metrics field {i}")))
        };
        out.push((f(0)? as usize, f(1)?, f(2)?, f(3)?, f(4)?));
    }
    Ok(out)
}
