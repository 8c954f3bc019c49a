//! Future-frame targets: which frames to predict, how frames become latent
//! tokens, and min/max scaling of actions and tokens into `[-1, 1]`.

use bdc_sim::{Episode, Image};
use bdc_tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniformly spaced frame offsets within an action chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSamplePlan {
    pub chunk: usize,
    pub timestamps: Vec<usize>,
}

impl FrameSamplePlan {
    /// `timestamps[j] = round((j+1)·N/F)`, duplicates collapsed. `F = 0`
    /// gives an empty plan (action-only model).
    pub fn uniform(chunk: usize, frames: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        if frames > chunk {
            return Err(invalid(format!(
                "frame count {frames} exceeds chunk size {chunk}"
            )));
        }
        // round half up in integers: floor((2·(j+1)·N + F) / 2F)
        let mut timestamps: Vec<usize> = (0..frames)
            .map(|j| (2 * (j + 1) * chunk + frames) / (2 * frames))
            .collect();
        timestamps.dedup();
        Ok(Self { chunk, timestamps })
    }

    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }
}

/// Frames at absolute steps `t + s_j`; indices past the end of the episode
/// repeat the last recorded frame.
pub fn sample_future_frames<'a>(
    episode: &'a Episode,
    t: usize,
    plan: &FrameSamplePlan,
) -> Result<(Vec<&'a Image>, Vec<usize>)> {
    if t >= episode.len() {
        return Err(invalid(format!(
            "step {t} beyond episode of length {}",
            episode.len()
        )));
    }
    let last = episode.len() - 1;
    let frames = plan
        .timestamps
        .iter()
        .map(|&s| &episode.images[(t + s).min(last)])
        .collect();
    Ok((frames, plan.timestamps.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerVariant {
    /// Average-pool then raw patches ("pixels").
    DownsamplePatch,
    /// Pool, patch, then project onto fitted principal directions ("latents").
    LinearAutoencoder,
}

impl std::str::FromStr for TokenizerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsample_patch" => Ok(Self::DownsamplePatch),
            "linear_autoencoder" => Ok(Self::LinearAutoencoder),
            _ => Err(invalid(format!("unknown tokenizer {s:?}"))),
        }
    }
}

impl std::fmt::Display for TokenizerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DownsamplePatch => "downsample_patch",
            Self::LinearAutoencoder => "linear_autoencoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearAutoencoder {
    pub mean: Vec<f64>,
    /// Row-major `[patch_dim, latent_dim]`; columns are orthonormal.
    pub basis: Vec<f64>,
    pub latent_dim: usize,
    /// Mean squared reconstruction error per element on the fitting set.
    pub recon_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTokenizer {
    pub variant: TokenizerVariant,
    pub spatial_factor: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub autoencoder: Option<LinearAutoencoder>,
}

impl LatentTokenizer {
    pub fn downsample_patch(spatial_factor: usize, patch_size: usize, channels: usize) -> Self {
        Self {
            variant: TokenizerVariant::DownsamplePatch,
            spatial_factor,
            patch_size,
            channels,
            autoencoder: None,
        }
    }

    /// Unfitted autoencoder tokenizer; call [`fit_linear_autoencoder`] first.
    pub fn linear_autoencoder(spatial_factor: usize, patch_size: usize, channels: usize) -> Self {
        Self {
            variant: TokenizerVariant::LinearAutoencoder,
            ..Self::downsample_patch(spatial_factor, patch_size, channels)
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn latent_dim(&self) -> Result<usize> {
        match self.variant {
            TokenizerVariant::DownsamplePatch => Ok(self.patch_dim()),
            TokenizerVariant::LinearAutoencoder => self
                .autoencoder
                .as_ref()
                .map(|a| a.latent_dim)
                .ok_or(Error::NotFitted("linear autoencoder")),
        }
    }

    fn block(&self) -> usize {
        self.spatial_factor * self.patch_size
    }

    pub fn patches_per_frame(&self, height: usize, width: usize) -> Result<usize> {
        let b = self.block();
        if b == 0 || !height.is_multiple_of(b) || !width.is_multiple_of(b) {
            return Err(invalid(format!(
                "{height}x{width} frame not divisible by {}·{}",
                self.spatial_factor, self.patch_size
            )));
        }
        Ok((height / b) * (width / b))
    }

    /// Average-pools a frame by `spatial_factor`; HWC output in `[0, 1]`.
    pub fn pool(&self, img: &Image) -> Result<(Vec<f64>, usize, usize)> {
        self.patches_per_frame(img.height, img.width)?;
        if img.channels != self.channels {
            return Err(invalid(format!(
                "frame has {} channels, tokenizer expects {}",
                img.channels, self.channels
            )));
        }
        let f = self.spatial_factor;
        let (ph, pw) = (img.height / f, img.width / f);
        let mut out = vec![0.0; ph * pw * self.channels];
        let denom = (f * f * 255) as f64;
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..self.channels {
                    let mut acc = 0u32;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += img.get(y * f + dy, x * f + dx, c) as u32;
                        }
                    }
                    out[(y * pw + x) * self.channels + c] = acc as f64 / denom;
                }
            }
        }
        Ok((out, ph, pw))
    }

    /// Non-overlapping `patch_size²` patches of an HWC map, row-major over the
    /// patch grid, each flattened in (row, col, channel) order.
    pub fn patchify(&self, map: &[f64], height: usize, width: usize) -> Vec<Vec<f64>> {
        let (p, c) = (self.patch_size, self.channels);
        let mut patches = Vec::new();
        for gy in 0..height / p {
            for gx in 0..width / p {
                let mut v = Vec::with_capacity(p * p * c);
                for y in 0..p {
                    for x in 0..p {
                        let base = ((gy * p + y) * width + gx * p + x) * c;
                        v.extend_from_slice(&map[base..base + c]);
                    }
                }
                patches.push(v);
            }
        }
        patches
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn unpatchify(&self, patches: &[Vec<f64>], height: usize, width: usize) -> Vec<f64> {
        let (p, c) = (self.patch_size, self.channels);
        let mut map = vec![0.0; height * width * c];
        let gw = width / p;
        for (i, patch) in patches.iter().enumerate() {
            let (gy, gx) = (i / gw, i % gw);
            for y in 0..p {
                for x in 0..p {
                    let base = ((gy * p + y) * width + gx * p + x) * c;
                    let src = (y * p + x) * c;
                    map[base..base + c].copy_from_slice(&patch[src..src + c]);
                }
            }
        }
        map
    }

    fn frame_patches(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        let (pooled, h, w) = self.pool(img)?;
        Ok(self.patchify(&pooled, h, w))
    }

    fn encode_patch(&self, patch: &[f64]) -> Result<Vec<f64>> {
        match self.variant {
            TokenizerVariant::DownsamplePatch => Ok(patch.to_vec()),
            TokenizerVariant::LinearAutoencoder => {
                let ae = self
                    .autoencoder
                    .as_ref()
                    .ok_or(Error::NotFitted("linear autoencoder"))?;
                Ok(project(ae, patch))
            }
        }
    }

    /// Tokens of one frame, `patches_per_frame × latent_dim`.
    pub fn tokenize_frame(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        self.frame_patches(img)?
            .iter()
            .map(|p| self.encode_patch(p))
            .collect()
    }

    /// `M × D_v` token matrix with `M = F · patches_per_frame`.
    pub fn tokenize_frames(&self, frames: &[&Image]) -> Result<Tensor<f64>> {
        let mut rows = Vec::new();
        for f in frames {
            rows.extend(self.tokenize_frame(f)?);
        }
        if rows.is_empty() {
            return Err(invalid("no frames to tokenize"));
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Patch reconstruction from tokens (identity for the raw-patch variant).
    pub fn decode_token(&self, token: &[f64]) -> Result<Vec<f64>> {
        match self.variant {
            TokenizerVariant::DownsamplePatch => Ok(token.to_vec()),
            TokenizerVariant::LinearAutoencoder => {
                let ae = self
                    .autoencoder
                    .as_ref()
                    .ok_or(Error::NotFitted("linear autoencoder"))?;
                Ok(reconstruct(ae, token))
            }
        }
    }
}

fn project(ae: &LinearAutoencoder, patch: &[f64]) -> Vec<f64> {
    let l = ae.latent_dim;
    let mut z = vec![0.0; l];
    for (i, (&x, &m)) in patch.iter().zip(&ae.mean).enumerate() {
        let c = x - m;
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += c * ae.basis[i * l + j];
        }
    }
    z
}

fn reconstruct(ae: &LinearAutoencoder, z: &[f64]) -> Vec<f64> {
    let l = ae.latent_dim;
    ae.mean
        .iter()
        .enumerate()
        .map(|(i, &m)| m + (0..l).map(|j| ae.basis[i * l + j] * z[j]).sum::<f64>())
        .collect()
}

const MIN_PATCHES: usize = 100;
const MAX_FIT_PATCHES: usize = 50_000;

/// Fits a PCA projection on pooled patches of `frames`.
pub fn fit_linear_autoencoder<'a>(
    tokenizer: &LatentTokenizer,
    frames: impl IntoIterator<Item = &'a Image>,
    latent_dim: usize,
    seed: u64,
) -> Result<LatentTokenizer> {
    let mut patches = Vec::new();
    for f in frames {
        patches.extend(tokenizer.frame_patches(f)?);
    }
    fit_patches(tokenizer, patches, latent_dim, seed)
}

/// Same as [`fit_linear_autoencoder`] on already-extracted patch vectors.
pub fn fit_patches(
    tokenizer: &LatentTokenizer,
    mut patches: Vec<Vec<f64>>,
    latent_dim: usize,
    seed: u64,
) -> Result<LatentTokenizer> {
    let dim = tokenizer.patch_dim();
    if latent_dim == 0 || latent_dim > dim {
        return Err(invalid(format!(
            "latent dim {latent_dim} must be in [1, {dim}]"
        )));
    }
    if patches.len() < MIN_PATCHES {
        return Err(invalid(format!(
            "need at least {MIN_PATCHES} patches, got {}",
            patches.len()
        )));
    }
    if patches.iter().any(|p| p.len() != dim) {
        return Err(invalid("patch dimension mismatch"));
    }
    if patches.len() > MAX_FIT_PATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, patches.len(), MAX_FIT_PATCHES).into_vec();
        keep.sort_unstable();
        patches = keep.into_iter().map(|i| std::mem::take(&mut patches[i])).collect();
    }
    let n = patches.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in &patches {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in &patches {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = vec![0.0; dim * latent_dim];
    for (j, &col) in order.iter().take(latent_dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis[i * latent_dim + j] = sign * v[i];
        }
    }
    let mut ae = LinearAutoencoder {
        mean,
        basis,
        latent_dim,
        recon_error: 0.0,
    };
    let mut err = 0.0;
    for p in &patches {
        let r = reconstruct(&ae, &project(&ae, p));
        err += r.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    ae.recon_error = err / (n * dim as f64);
    Ok(LatentTokenizer {
        variant: TokenizerVariant::LinearAutoencoder,
        autoencoder: Some(ae),
        ..tokenizer.clone()
    })
}

/// Per-dimension min/max statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        for row in rows {
            if row.len() != dim {
                return Err(invalid(format!("row of length {} for dim {dim}", row.len())));
            }
            any = true;
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        if !any {
            return Err(invalid("cannot fit normalizer on empty data"));
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize_value(&self, d: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[d], self.max[d]);
        if hi <= lo {
            return 0.0;
        }
        (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, d: usize, y: f64) -> f64 {
        let (lo, hi) = (self.min[d], self.max[d]);
        if hi <= lo {
            return lo;
        }
        (y + 1.0) / 2.0 * (hi - lo) + lo
    }

    fn apply(&self, x: &Tensor<f64>, f: impl Fn(usize, f64) -> f64) -> Result<Tensor<f64>> {
        let (_, cols) = x.dims2();
        if cols != self.dim() {
            return Err(invalid(format!(
                "matrix has {cols} columns, statistics have {}",
                self.dim()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % cols, v))
            .collect();
        Ok(Tensor::new(x.shape(), data)?)
    }

    pub fn normalize(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.apply(x, |d, v| self.normalize_value(d, v))
    }

    pub fn denormalize(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.apply(y, |d, v| self.denormalize_value(d, v))
    }
}

/// Action and latent-token scaling, fitted on the training split only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub action: Option<MinMax>,
    pub latent: Option<MinMax>,
}

impl Normalizer {
    pub fn action(&self) -> Result<&MinMax> {
        self.action.as_ref().ok_or(Error::NotFitted("action normalizer"))
    }

    pub fn latent(&self) -> Result<&MinMax> {
        self.latent.as_ref().ok_or(Error::NotFitted("latent normalizer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(v: u8, h: usize, w: usize, c: usize) -> Image {
        Image { height: h, width: w, channels: c, data: vec![v; h * w * c] }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(FrameSamplePlan::uniform(8, 4).unwrap().timestamps, vec![2, 4, 6, 8]);
        assert_eq!(FrameSamplePlan::uniform(5, 5).unwrap().timestamps, vec![1, 2, 3, 4, 5]);
        assert_eq!(FrameSamplePlan::uniform(20, 1).unwrap().timestamps, vec![20]);
        assert_eq!(FrameSamplePlan::uniform(20, 8).unwrap().timestamps, vec![3, 5, 8, 10, 13, 15, 18, 20]);
        assert!(FrameSamplePlan::uniform(4, 5).is_err());
        assert!(FrameSamplePlan::uniform(4, 0).unwrap().timestamps.is_empty());
    }

    #[test]
    fn single_channel_shape_arithmetic() {
        let tok = LatentTokenizer::downsample_patch(4, 4, 1);
        let img = constant_image(51, 32, 32, 1);
        let frames = vec![&img; 4];
        let t = tok.tokenize_frames(&frames).unwrap();
        assert_eq!(t.shape(), &[16, 16]);
        assert!(t.data().iter().all(|&v| v == 51.0 / 255.0));
        assert!(tok.patches_per_frame(30, 32).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let mm = MinMax { min: vec![-1.5], max: vec![0.5] };
        assert_eq!(mm.normalize_value(0, -0.5), 0.0);
        assert_eq!(mm.normalize_value(0, 3.0), 1.0);
        let c = MinMax { min: vec![2.5], max: vec![2.5] };
        assert_eq!(c.normalize_value(0, 2.5), 0.0);
        assert_eq!(c.denormalize_value(0, 0.73), 2.5);
        assert!(Normalizer::default().action().is_err());
    }

    #[test]
    fn unfitted_autoencoder_errors() {
        let tok = LatentTokenizer::linear_autoencoder(4, 4, 3);
        let img = constant_image(0, 32, 32, 3);
        assert!(matches!(tok.tokenize_frame(&img), Err(Error::NotFitted(_))));
        assert!(tok.latent_dim().is_err());
    }
}
