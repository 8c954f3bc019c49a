use std::fmt;

use bdc_tensor::Mask;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Cross-modal visibility rule for the decoder's self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    Decoupled,
    Unidirectional,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [Self::Full, Self::Decoupled, Self::Unidirectional];

    /// Whether action outputs can be computed without any latent tokens.
    pub fn allows_latent_skip(self) -> bool {
        !matches!(self, Self::Full)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Decoupled => "decoupled",
            Self::Unidirectional => "unidirectional",
        })
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "decoupled" => Ok(Self::Decoupled),
            "unidirectional" => Ok(Self::Unidirectional),
            _ => Err(invalid(format!("unknown attention mode {s:?}"))),
        }
    }
}

/// How frame tokens see prior actions under unidirectional attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// Each frame group sees actions before its own timestamp.
    #[default]
    PerFrame,
    /// Every frame sees the actions before the earliest timestamp.
    Block,
}

impl fmt::Display for MaskGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerFrame => "per_frame",
            Self::Block => "block",
        })
    }
}

impl std::str::FromStr for MaskGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(Self::PerFrame),
            "block" => Ok(Self::Block),
            _ => Err(invalid(format!("unknown mask granularity {s:?}"))),
        }
    }
}

/// One predicted frame: its chunk-relative timestamp and how many tokens it
/// contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGroup {
    pub timestamp: usize,
    pub tokens: usize,
}

/// Layout of the decoder sequence: all frame tokens (grouped by frame) followed
/// by `n_actions` action tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMaskSpec {
    pub mode: AttentionMode,
    pub n_actions: usize,
    pub frame_groups: Vec<FrameGroup>,
    pub granularity: MaskGranularity,
}

impl AttentionMaskSpec {
    pub fn new(
        mode: AttentionMode,
        n_actions: usize,
        timestamps: &[usize],
        tokens_per_frame: usize,
        granularity: MaskGranularity,
    ) -> Self {
        Self {
            mode,
            n_actions,
            frame_groups: timestamps
                .iter()
                .map(|&timestamp| FrameGroup {
                    timestamp,
                    tokens: tokens_per_frame,
                })
                .collect(),
            granularity,
        }
    }

    /// Same spec with the frames dropped (action-only decoding).
    pub fn without_frames(&self) -> Self {
        Self {
            frame_groups: Vec::new(),
            ..self.clone()
        }
    }

    pub fn frame_tokens(&self) -> usize {
        self.frame_groups.iter().map(|g| g.tokens).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.frame_tokens() + self.n_actions
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_actions == 0 {
            return Err(invalid("mask needs at least one action token"));
        }
        let mut prev = 0;
        for g in &self.frame_groups {
            if g.timestamp < 1 || g.timestamp > self.n_actions {
                return Err(invalid(format!(
                    "frame timestamp {} outside [1, {}]",
                    g.timestamp, self.n_actions
                )));
            }
            if g.timestamp < prev {
                return Err(invalid("frame timestamps must be nondecreasing"));
            }
            if g.tokens == 0 {
                return Err(invalid("frame group with zero tokens"));
            }
            prev = g.timestamp;
        }
        Ok(())
    }

    /// Frame group index of each frame token, in sequence order.
    fn token_groups(&self) -> Vec<usize> {
        self.frame_groups
            .iter()
            .enumerate()
            .flat_map(|(j, g)| std::iter::repeat_n(j, g.tokens))
            .collect()
    }
}

/// Boolean `[T, T]` query×key visibility matrix for the decoder.
pub fn build_attention_mask(spec: &AttentionMaskSpec) -> Result<Mask> {
    spec.validate()?;
    let groups = spec.token_groups();
    let m = groups.len();
    let t = m + spec.n_actions;
    let split = spec
        .frame_groups
        .iter()
        .map(|g| g.timestamp)
        .min()
        .unwrap_or(0);
    let mask = Mask::from_fn(t, t, |q, k| {
        let (q_frame, k_frame) = (q < m, k < m);
        match spec.mode {
            AttentionMode::Full => true,
            AttentionMode::Decoupled => q_frame == k_frame,
            AttentionMode::Unidirectional => match (q_frame, k_frame) {
                (false, k_frame) => !k_frame,
                (true, true) => true,
                (true, false) => {
                    let limit = match spec.granularity {
                        MaskGranularity::PerFrame => spec.frame_groups[groups[q]].timestamp,
                        MaskGranularity::Block => split,
                    };
                    k - m < limit
                }
            },
        }
    });
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::Shape(format!("mask row {row} has no visible keys")));
    }
    Ok(mask)
}

/// Labeled text grid: `■` where attention is allowed and `·` where blocked.
/// Frame tokens are labeled `f<group>`; actions `a<index>`, with a `'` suffix
/// for post-frame actions.
pub fn render_mask(spec: &AttentionMaskSpec, mask: &Mask) -> String {
    let groups = spec.token_groups();
    let split = spec.frame_groups.iter().map(|g| g.timestamp).min();
    let labels: Vec<String> = groups
        .iter()
        .map(|j| format!("f{j}"))
        .chain((0..spec.n_actions).map(|i| match split {
            Some(s) if i >= s => format!("a{i}'"),
            _ => format!("a{i}"),
        }))
        .collect();
    let w = labels.iter().map(String::len).max().unwrap_or(1).max(1);
    let mut out = format!("{:w$}", "");
    for l in &labels {
        out.push_str(&format!(" {l:>w$}"));
    }
    out.push('\n');
    for (r, l) in labels.iter().enumerate() {
        out.push_str(&format!("{l:w$}"));
        for c in 0..labels.len() {
            let cell = if mask.get(r, c) { "■" } else { "·" };
            out.push_str(&format!(" {cell:>w$}"));
        }
        out.push('\n');
    }
    out
}
