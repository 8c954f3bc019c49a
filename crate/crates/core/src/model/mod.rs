//! The joint denoising policy: a strided CNN + transformer observation
//! encoder and a transformer decoder that denoises action and future-latent
//! tokens together under a configurable self-attention mask.

mod checkpoint;
mod layers;
mod mask;

use bdc_tensor::{ConvGeometry, Mask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{
    sinusoid, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
pub use mask::{
    build_attention_mask, render_mask, AttentionMaskSpec, AttentionMode, FrameGroup,
    MaskGranularity,
};

pub(crate) use layers::Builder;

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PADDING: usize = 1;
const TIME_BASE: f64 = 10_000.0;
const PATCH_BASE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub cnn_channels: Vec<usize>,
    pub proprio_dim: usize,
    pub chunk_size: usize,
    pub action_dim: usize,
    /// Chunk-relative timestamps `s_j` of the predicted frames.
    pub frame_timestamps: Vec<usize>,
    pub tokens_per_frame: usize,
    pub latent_dim: usize,
    pub attention_mode: AttentionMode,
    pub mask_granularity: MaskGranularity,
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 3,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            cnn_channels: vec![16, 32, 32],
            proprio_dim: 6,
            chunk_size: 20,
            action_dim: 6,
            frame_timestamps: vec![3, 5, 8, 10, 13, 15, 18, 20],
            tokens_per_frame: 4,
            latent_dim: 16,
            attention_mode: AttentionMode::Unidirectional,
            mask_granularity: MaskGranularity::PerFrame,
            diffusion_steps: 100,
        }
    }
}

impl ModelConfig {
    /// Total latent tokens `M`.
    pub fn frame_token_count(&self) -> usize {
        self.frame_timestamps.len() * self.tokens_per_frame
    }

    pub fn has_latents(&self) -> bool {
        self.frame_token_count() > 0
    }

    fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let (mut h, mut w, mut c) = (self.image_height, self.image_width, self.image_channels);
        let mut out = Vec::new();
        for &next in &self.cnn_channels {
            let g = ConvGeometry {
                height: h,
                width: w,
                channels: c,
                kernel: CONV_KERNEL,
                stride: CONV_STRIDE,
                padding: CONV_PADDING,
            };
            (h, w, c) = (g.out_height(), g.out_width(), next);
            out.push(g);
        }
        out
    }

    /// `(rows, cols, channels)` of the final CNN feature map.
    pub fn feature_map(&self) -> (usize, usize, usize) {
        let geoms = self.conv_geometries();
        match (geoms.last(), self.cnn_channels.last()) {
            (Some(g), Some(&c)) => (g.out_height(), g.out_width(), c),
            _ => (self.image_height, self.image_width, self.image_channels),
        }
    }

    /// Spatial tokens plus the proprio token.
    pub fn observation_tokens(&self) -> usize {
        let (h, w, _) = self.feature_map();
        h * w + 1
    }

    pub fn mask_spec(&self) -> AttentionMaskSpec {
        AttentionMaskSpec::new(
            self.attention_mode,
            self.chunk_size,
            &self.frame_timestamps,
            self.tokens_per_frame,
            self.mask_granularity,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be a positive multiple of heads");
        }
        if !self.width.is_multiple_of(4) {
            return bad("width must be divisible by 4 for the 2-D positional encoding");
        }
        if self.chunk_size == 0 || self.action_dim == 0 || self.proprio_dim == 0 {
            return bad("chunk size, action dim and proprio dim must be positive");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion steps must be positive");
        }
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            return bad("empty image");
        }
        if self.has_latents() && self.latent_dim == 0 {
            return bad("latent dim must be positive when frames are predicted");
        }
        self.mask_spec().validate()
    }
}

/// Denoised outputs in normalized units.
#[derive(Clone, Debug)]
pub struct DecoderOutput<S> {
    pub a0_hat: Tensor<S>,
    pub v0_hat: Option<Tensor<S>>,
}

/// Tape handles of the decoder heads.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub actions: Var,
    pub latents: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct PolicyModel<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    convs: Vec<Conv>,
    feature_proj: Linear,
    proprio_proj: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_ln: LayerNorm,
    step_mlp: [Linear; 2],
    action_in: Linear,
    latent_in: Option<Linear>,
    decoder: Vec<DecoderLayer>,
    decoder_ln: LayerNorm,
    action_head: Linear,
    pred_head: Option<[Linear; 2]>,
    spatial_pe: Tensor<S>,
    action_pe: Tensor<S>,
    latent_pe: Option<Tensor<S>>,
}

fn pe_tensor<S: Real>(rows: Vec<Vec<f64>>, dim: usize) -> Tensor<S> {
    let data: Vec<S> = rows.into_iter().flatten().map(S::lit).collect();
    Tensor::new(&[data.len() / dim.max(1), dim], data).expect("positional encoding shape")
}

impl<S: Real> PolicyModel<S> {
    /// Randomly initialized model: weights `U(±1/√fan_in)`, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.width;

        let mut convs = Vec::new();
        for (i, geom) in config.conv_geometries().into_iter().enumerate() {
            let fan_in = geom.patch_len();
            let out = config.cnn_channels[i];
            convs.push(Conv {
                w: bld.uniform(
                    &format!("cnn{i}.w"),
                    &[fan_in, out],
                    1.0 / (fan_in as f64).sqrt(),
                ),
                b: bld.constant(&format!("cnn{i}.b"), &[out], 0.0),
                geom,
            });
        }
        let (fh, fw, fc) = config.feature_map();
        let feature_proj = Linear::new(&mut bld, "obs.feature", fc, d);
        let proprio_proj = Linear::new(&mut bld, "obs.proprio", config.proprio_dim, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut bld, &format!("enc{i}"), d, config.heads))
            .collect();
        let encoder_ln = LayerNorm::new(&mut bld, "enc.ln", d);
        let step_mlp = [
            Linear::new(&mut bld, "step.l1", d, d),
            Linear::new(&mut bld, "step.l2", d, d),
        ];
        let action_in = Linear::new(&mut bld, "dec.action_in", config.action_dim, d);
        let latent_in = config
            .has_latents()
            .then(|| Linear::new(&mut bld, "dec.latent_in", config.latent_dim, d));
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut bld, &format!("dec{i}"), d, config.heads))
            .collect();
        let decoder_ln = LayerNorm::new(&mut bld, "dec.ln", d);
        let action_head = Linear::new(&mut bld, "head.action", d, config.action_dim);
        let pred_head = config.has_latents().then(|| {
            [
                Linear::new(&mut bld, "head.pred1", d, d),
                Linear::new(&mut bld, "head.pred2", d, config.latent_dim),
            ]
        });

        let half = d / 2;
        let spatial_pe = pe_tensor(
            (0..fh * fw)
                .map(|i| {
                    let mut v = sinusoid((i / fw) as f64, half, TIME_BASE);
                    v.extend(sinusoid((i % fw) as f64, half, TIME_BASE));
                    v
                })
                .collect(),
            d,
        );
        let action_pe = pe_tensor(
            (0..config.chunk_size)
                .map(|i| sinusoid(i as f64, d, TIME_BASE))
                .collect(),
            d,
        );
        let latent_pe = config.has_latents().then(|| {
            pe_tensor(
                config
                    .frame_timestamps
                    .iter()
                    .flat_map(|&s| {
                        (0..config.tokens_per_frame).map(move |p| {
                            let t = sinusoid((s - 1) as f64, d, TIME_BASE);
                            let q = sinusoid(p as f64, d, PATCH_BASE);
                            t.iter().zip(&q).map(|(a, b)| a + b).collect()
                        })
                    })
                    .collect(),
                d,
            )
        });

        Ok(Self {
            config,
            params: store,
            convs,
            feature_proj,
            proprio_proj,
            encoder,
            encoder_ln,
            step_mlp,
            action_in,
            latent_in,
            decoder,
            decoder_ln,
            action_head,
            pred_head,
            spatial_pe,
            action_pe,
            latent_pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Replaces every parameter by name. Names and shapes must match exactly.
    pub fn load_params(&mut self, source: &ParamStore<S>) -> Result<()> {
        if source.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                source.len()
            )));
        }
        for (_, name, t) in source.iter() {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            self.params.set(id, t.clone());
        }
        Ok(())
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Real>(&self) -> PolicyModel<T> {
        PolicyModel {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            feature_proj: self.feature_proj,
            proprio_proj: self.proprio_proj,
            encoder: self.encoder.clone(),
            encoder_ln: self.encoder_ln,
            step_mlp: self.step_mlp,
            action_in: self.action_in,
            latent_in: self.latent_in,
            decoder: self.decoder.clone(),
            decoder_ln: self.decoder_ln,
            action_head: self.action_head,
            pred_head: self.pred_head,
            spatial_pe: self.spatial_pe.cast(),
            action_pe: self.action_pe.cast(),
            latent_pe: self.latent_pe.as_ref().map(Tensor::cast),
        }
    }

    /// Observation tokens before the transformer encoder: projected CNN
    /// features with 2-D positional encoding, then the proprio token.
    pub fn observation_tokens_var(
        &self,
        tape: &mut Tape<S>,
        image: Var,
        proprio: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let expect = [c.image_height, c.image_width, c.image_channels];
        if tape.shape(image) != expect {
            return Err(Error::Shape(format!(
                "image shape {:?}, expected {expect:?}",
                tape.shape(image)
            )));
        }
        if tape.shape(proprio) != [1, c.proprio_dim] {
            return Err(Error::Shape(format!(
                "proprio shape {:?}, expected [1, {}]",
                tape.shape(proprio),
                c.proprio_dim
            )));
        }
        let mut x = image;
        for conv in &self.convs {
            let w = tape.param(&self.params, conv.w);
            let b = tape.param(&self.params, conv.b);
            x = tape.conv2d(x, w, b, conv.geom)?;
            x = tape.gelu(x)?;
        }
        let (fh, fw, fc) = c.feature_map();
        let flat = tape.reshape(x, &[fh * fw, fc])?;
        let spatial = self.feature_proj.forward(tape, &self.params, flat)?;
        let pe = tape.constant(self.spatial_pe.clone());
        let spatial = tape.add(spatial, pe)?;
        let p = self.proprio_proj.forward(tape, &self.params, proprio)?;
        Ok(tape.concat(&[spatial, p], 0)?)
    }

    /// Observation embedding `e`: `[H'·W' + 1, d]`.
    pub fn encode_observation_var(
        &self,
        tape: &mut Tape<S>,
        image: Var,
        proprio: Var,
    ) -> Result<Var> {
        let mut x = self.observation_tokens_var(tape, image, proprio)?;
        for layer in &self.encoder {
            x = layer.forward(tape, &self.params, x)?;
        }
        self.encoder_ln.forward(tape, &self.params, x)
    }

    /// `image` is `[H, W, C]` in `[0, 1]`.
    pub fn encode_observation(&self, image: &Tensor<S>, proprio: &[S]) -> Result<Tensor<S>> {
        if !image.all_finite() || proprio.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation input".into()));
        }
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let p = tape.constant(Tensor::new(&[1, proprio.len()], proprio.to_vec())?);
        let e = self.encode_observation_var(&mut tape, img, p)?;
        Ok(tape.value(e).clone())
    }

    /// Interleaved sinusoid of `k` before the step perceptron.
    pub fn step_sinusoid(&self, k: usize) -> Vec<f64> {
        sinusoid(k as f64, self.config.width, TIME_BASE)
    }

    pub fn embed_diffusion_step_var(&self, tape: &mut Tape<S>, k: usize) -> Result<Var> {
        if k > self.config.diffusion_steps {
            return Err(invalid(format!(
                "diffusion step {k} outside [0, {}]",
                self.config.diffusion_steps
            )));
        }
        let raw: Vec<S> = self.step_sinusoid(k).into_iter().map(S::lit).collect();
        let x = tape.constant(Tensor::new(&[1, self.config.width], raw)?);
        let h = self.step_mlp[0].forward(tape, &self.params, x)?;
        let h = tape.gelu(h)?;
        self.step_mlp[1].forward(tape, &self.params, h)
    }

    pub fn embed_diffusion_step(&self, k: usize) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = self.embed_diffusion_step_var(&mut tape, k)?;
        Ok(tape.value(v).clone())
    }

    /// One denoiser evaluation on the tape. `latents` may be omitted in the
    /// decoupled and unidirectional modes, in which case only the action
    /// tokens are decoded.
    pub fn denoise_forward_var(
        &self,
        tape: &mut Tape<S>,
        obs: Var,
        k: usize,
        actions: Var,
        latents: Option<Var>,
        spec: &AttentionMaskSpec,
    ) -> Result<DecoderVars> {
        let c = &self.config;
        if tape.shape(actions) != [c.chunk_size, c.action_dim] {
            return Err(Error::Shape(format!(
                "noisy actions {:?}, expected [{}, {}]",
                tape.shape(actions),
                c.chunk_size,
                c.action_dim
            )));
        }
        if tape.shape(obs) != [c.observation_tokens(), c.width] {
            return Err(Error::Shape(format!(
                "observation embedding {:?}, expected [{}, {}]",
                tape.shape(obs),
                c.observation_tokens(),
                c.width
            )));
        }
        let m = c.frame_token_count();
        let spec = match latents {
            Some(_) => spec.clone(),
            None if spec.mode == AttentionMode::Full && m > 0 => return Err(Error::MissingLatents),
            None => spec.without_frames(),
        };
        if spec.n_actions != c.chunk_size {
            return Err(Error::Shape(
                "mask spec action count differs from chunk size".into(),
            ));
        }
        if let Some(l) = latents {
            if self.latent_in.is_none() {
                return Err(Error::Shape("model has no latent tokens configured".into()));
            }
            if tape.shape(l) != [m, c.latent_dim] || spec.frame_tokens() != m {
                return Err(Error::Shape(format!(
                    "noisy latents {:?}, expected [{m}, {}]",
                    tape.shape(l),
                    c.latent_dim
                )));
            }
        }
        let mask: Mask = build_attention_mask(&spec)?;

        let step = self.embed_diffusion_step_var(tape, k)?;
        let memory = tape.concat(&[obs, step], 0)?;

        let a = self.action_in.forward(tape, &self.params, actions)?;
        let ape = tape.constant(self.action_pe.clone());
        let a = tape.add(a, ape)?;
        let mut x = match (latents, self.latent_in, &self.latent_pe) {
            (Some(l), Some(proj), Some(pe)) => {
                let v = proj.forward(tape, &self.params, l)?;
                let vpe = tape.constant(pe.clone());
                let v = tape.add(v, vpe)?;
                tape.concat(&[v, a], 0)?
            }
            _ => a,
        };
        for layer in &self.decoder {
            x = layer.forward(tape, &self.params, x, memory, &mask)?;
        }
        let x = self.decoder_ln.forward(tape, &self.params, x)?;
        let n_frames = spec.frame_tokens();
        let act_rows = if n_frames > 0 {
            tape.slice_rows(x, n_frames, c.chunk_size)?
        } else {
            x
        };
        let actions = self.action_head.forward(tape, &self.params, act_rows)?;
        let latents = match (latents, self.pred_head) {
            (Some(_), Some([l1, l2])) => {
                let rows = tape.slice_rows(x, 0, n_frames)?;
                let h = l1.forward(tape, &self.params, rows)?;
                let h = tape.gelu(h)?;
                Some(l2.forward(tape, &self.params, h)?)
            }
            _ => None,
        };
        Ok(DecoderVars { actions, latents })
    }

    /// Gradient-free evaluation of [`denoise_forward_var`](Self::denoise_forward_var)
    /// with the model's own mask spec.
    pub fn denoise_forward(
        &self,
        obs: &Tensor<S>,
        k: usize,
        actions: &Tensor<S>,
        latents: Option<&Tensor<S>>,
    ) -> Result<DecoderOutput<S>> {
        self.denoise_with_spec(obs, k, actions, latents, &self.config.mask_spec())
    }

    pub fn denoise_with_spec(
        &self,
        obs: &Tensor<S>,
        k: usize,
        actions: &Tensor<S>,
        latents: Option<&Tensor<S>>,
        spec: &AttentionMaskSpec,
    ) -> Result<DecoderOutput<S>> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let a = tape.constant(actions.clone());
        let l = latents.map(|l| tape.constant(l.clone()));
        let out = self.denoise_forward_var(&mut tape, o, k, a, l, spec)?;
        Ok(DecoderOutput {
            a0_hat: tape.value(out.actions).clone(),
            v0_hat: out.latents.map(|v| tape.value(v).clone()),
        })
    }
}
