use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bdc_sim::TaskId;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latents::TokenizerVariant;
use crate::model::{AttentionMode, MaskGranularity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPrecision {
    F32,
    F64,
}

/// Every training hyperparameter. Serialized as flat `key = value` text whose
/// keys are exactly the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskId,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub chunk_size: usize,
    pub frame_count: usize,
    pub prediction_weight: f64,
    pub attention_mode: AttentionMode,
    pub mask_granularity: MaskGranularity,
    pub tokenizer: TokenizerVariant,
    pub latent_dim: usize,
    pub spatial_factor: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub diffusion_steps: usize,
    pub inference_steps: usize,
    pub shift_max: usize,
    pub log_every: usize,
    pub val_every: usize,
    pub seed: u64,
    pub precision: TrainPrecision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Handover,
            data_dir: PathBuf::from("data/handover"),
            out_dir: PathBuf::from("runs/train"),
            chunk_size: 20,
            frame_count: 8,
            prediction_weight: 0.2,
            attention_mode: AttentionMode::Unidirectional,
            mask_granularity: MaskGranularity::PerFrame,
            tokenizer: TokenizerVariant::LinearAutoencoder,
            latent_dim: 16,
            spatial_factor: 4,
            patch_size: 4,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 3,
            batch_size: 32,
            total_steps: 15_000,
            base_lr: 1e-4,
            warmup_steps: 500,
            weight_decay: 1e-2,
            grad_clip: 0.0,
            diffusion_steps: 100,
            inference_steps: 10,
            shift_max: 3,
            log_every: 100,
            val_every: 1000,
            seed: 0,
            precision: TrainPrecision::F32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 29] = [
        "task",
        "data_dir",
        "out_dir",
        "chunk_size",
        "frame_count",
        "prediction_weight",
        "attention_mode",
        "mask_granularity",
        "tokenizer",
        "latent_dim",
        "spatial_factor",
        "patch_size",
        "width",
        "heads",
        "encoder_layers",
        "decoder_layers",
        "batch_size",
        "total_steps",
        "base_lr",
        "warmup_steps",
        "weight_decay",
        "grad_clip",
        "diffusion_steps",
        "inference_steps",
        "shift_max",
        "log_every",
        "val_every",
        "seed",
        "precision",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse().map_err(|_| Error::Config(format!("unknown task {v:?}")))?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "chunk_size" => self.chunk_size = parse(key, v)?,
            "frame_count" => self.frame_count = parse(key, v)?,
            "prediction_weight" => self.prediction_weight = parse(key, v)?,
            "attention_mode" => self.attention_mode = v.parse()?,
            "mask_granularity" => self.mask_granularity = v.parse()?,
            "tokenizer" => self.tokenizer = v.parse()?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "spatial_factor" => self.spatial_factor = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "inference_steps" => self.inference_steps = parse(key, v)?,
            "shift_max" => self.shift_max = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => TrainPrecision::F32,
                    "f64" => TrainPrecision::F64,
                    _ => return Err(Error::Config(format!("unknown precision {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let prec = match self.precision {
            TrainPrecision::F32 => "f32",
            TrainPrecision::F64 => "f64",
        };
        let pairs: [(&str, String); 29] = [
            ("task", self.task.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("chunk_size", self.chunk_size.to_string()),
            ("frame_count", self.frame_count.to_string()),
            ("prediction_weight", self.prediction_weight.to_string()),
            ("attention_mode", self.attention_mode.to_string()),
            ("mask_granularity", self.mask_granularity.to_string()),
            ("tokenizer", self.tokenizer.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("spatial_factor", self.spatial_factor.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("inference_steps", self.inference_steps.to_string()),
            ("shift_max", self.shift_max.to_string()),
            ("log_every", self.log_every.to_string()),
            ("val_every", self.val_every.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", prec.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.prediction_weight >= 0.0 && self.prediction_weight.is_finite()) {
            return bad(format!("prediction_weight must be >= 0, got {}", self.prediction_weight));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.frame_count > self.chunk_size {
            return bad(format!(
                "frame_count {} exceeds chunk_size {}",
                self.frame_count, self.chunk_size
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.val_every == 0 {
            return bad("batch_size, log_every and val_every must be positive".into());
        }
        if self.inference_steps == 0 || self.inference_steps > self.diffusion_steps {
            return bad("inference_steps must be in [1, diffusion_steps]".into());
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("base_lr, weight_decay and grad_clip must be nonnegative".into());
        }
        Ok(())
    }
}
