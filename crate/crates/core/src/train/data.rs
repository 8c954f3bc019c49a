use std::path::{Path, PathBuf};

use bdc_sim::{record_expert_episode, Episode, Image, TaskId};
use bdc_tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latents::{FrameSamplePlan, LatentTokenizer, MinMax};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub success: bool,
    pub length: usize,
}

/// Directory-level index of a demonstration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskId,
    pub seed: u64,
    pub requested: usize,
    pub attempts: usize,
    pub successes: usize,
    /// Fraction of attempts in which the expert succeeded.
    pub success_rate: f64,
    pub episodes: Vec<ManifestEntry>,
}

/// Rolls out the scripted expert with seeds `seed, seed+1, …` and stores the
/// first `n` successful episodes in `dir`. Aborts once more than half of the
/// first `5n` attempts have failed.
pub fn collect_demos(task: TaskId, n: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let spec = task.spec();
    let mut episodes = Vec::with_capacity(n);
    let (mut attempts, mut failures) = (0usize, 0usize);
    while episodes.len() < n {
        let ep_seed = seed + attempts as u64;
        attempts += 1;
        let (ep, ok) = record_expert_episode(&spec, ep_seed)?;
        if !ok {
            failures += 1;
            if 2 * failures > 5 * n {
                return Err(Error::Collection(format!(
                    "expert succeeded on {} of {attempts} {task} attempts (below 50% of the first {})",
                    attempts - failures,
                    5 * n
                )));
            }
            continue;
        }
        let file = format!("episode_{:04}.ppep", episodes.len());
        ep.write(&dir.join(&file))?;
        episodes.push(ManifestEntry { file, seed: ep_seed, success: true, length: ep.len() });
    }
    let manifest = Manifest {
        task,
        seed,
        requested: n,
        attempts,
        successes: attempts - failures,
        success_rate: if attempts == 0 { 1.0 } else { (attempts - failures) as f64 / attempts as f64 },
        episodes,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    log::info!(
        "collected {} {task} demos in {attempts} attempts into {}",
        manifest.episodes.len(),
        dir.display()
    );
    Ok(manifest)
}

/// A loaded demonstration set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(
            &std::fs::read(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?,
        )?;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for entry in &manifest.episodes {
            let ep = Episode::read(&dir.join(&entry.file))?;
            if ep.task != manifest.task {
                return Err(invalid(format!("{} is a {} episode", entry.file, ep.task)));
            }
            episodes.push(ep);
        }
        Ok(Self { manifest, episodes })
    }

    /// Episode-level 9:1 split: every tenth episode is held out.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.episodes.len()).partition(|i| i % 10 != 9)
    }
}

/// Edge-replicated shift: output pixel `(y, x)` reads source pixel
/// `(y + dy − shift_max, x + dx − shift_max)` clamped to the image.
pub fn shift_image(img: &Image, dy: usize, dx: usize, shift_max: usize) -> Image {
    let mut out = Image::blank(img.height, img.width, img.channels);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for y in 0..img.height {
        let sy = clamp(y as isize + dy as isize - shift_max as isize, img.height);
        for x in 0..img.width {
            let sx = clamp(x as isize + dx as isize - shift_max as isize, img.width);
            for c in 0..img.channels {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

/// Pads by `shift_max` with edge replication and crops at a uniform offset in
/// `[0, 2·shift_max]²`.
pub fn random_shift_augment<R: Rng>(img: &Image, shift_max: usize, rng: &mut R) -> Result<Image> {
    if 2 * shift_max >= img.height.min(img.width) && shift_max > 0 {
        return Err(invalid(format!(
            "shift_max {shift_max} too large for {}x{} image",
            img.height, img.width
        )));
    }
    if shift_max == 0 {
        return Ok(img.clone());
    }
    let dy = rng.gen_range(0..=2 * shift_max);
    let dx = rng.gen_range(0..=2 * shift_max);
    Ok(shift_image(img, dy, dx, shift_max))
}

pub(crate) fn image_tensor<S: Real>(img: &Image) -> Tensor<S> {
    Tensor::new(
        &[img.height, img.width, img.channels],
        img.data.iter().map(|&v| S::lit(v as f64 / 255.0)).collect(),
    )
    .expect("image shape")
}

/// One episode with normalized actions and per-frame normalized tokens.
#[derive(Clone, Debug)]
pub(crate) struct PreparedEpisode {
    pub images: Vec<Image>,
    pub proprio: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Per step: `tokens_per_frame · D_v` values, row-major.
    pub frame_tokens: Vec<Vec<f64>>,
}

impl PreparedEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }
}

/// Normalized views of a set of episodes.
pub(crate) fn prepare_episode(
    ep: &Episode,
    tokenizer: Option<&LatentTokenizer>,
    action_stats: &MinMax,
    latent_stats: Option<&MinMax>,
) -> Result<PreparedEpisode> {
    let actions = ep
        .actions
        .iter()
        .map(|a| a.iter().enumerate().map(|(d, &v)| action_stats.normalize_value(d, v)).collect())
        .collect();
    let frame_tokens = match (tokenizer, latent_stats) {
        (Some(tok), Some(stats)) => ep
            .images
            .iter()
            .map(|img| {
                let rows = tok.tokenize_frame(img)?;
                Ok(rows
                    .iter()
                    .flat_map(|r| r.iter().enumerate().map(|(d, &v)| stats.normalize_value(d, v)))
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?,
        _ => Vec::new(),
    };
    Ok(PreparedEpisode {
        images: ep.images.clone(),
        proprio: ep.proprio.clone(),
        actions,
        frame_tokens,
    })
}

/// Clean targets for a window starting at `t`; steps past the end repeat the
/// final action and frame.
pub(crate) fn window<S: Real>(
    ep: &PreparedEpisode,
    t: usize,
    chunk: usize,
    plan: &FrameSamplePlan,
    latent_dim: usize,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let last = ep.len() - 1;
    let a_dim = ep.actions[0].len();
    let mut a = Vec::with_capacity(chunk * a_dim);
    for i in 0..chunk {
        a.extend(ep.actions[(t + i).min(last)].iter().map(|&v| S::lit(v)));
    }
    let actions = Tensor::new(&[chunk, a_dim], a)?;
    if plan.frame_count() == 0 || ep.frame_tokens.is_empty() {
        return Ok((actions, None));
    }
    let mut v = Vec::new();
    for &s in &plan.timestamps {
        v.extend(ep.frame_tokens[(t + s).min(last)].iter().map(|&x| S::lit(x)));
    }
    let rows = v.len() / latent_dim;
    Ok((actions, Some(Tensor::new(&[rows, latent_dim], v)?)))
}
