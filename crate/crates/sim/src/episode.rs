//! Binary episode container.
//!
//! ```text
//! "PPEP" | version u32 | task u32 | T u32 | H u32 | W u32 | C u32 | P u32 | A u32
//! T × ( image: H·W·C bytes | proprio: P × f64 | action: A × f64 )
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::expert::scripted_expert;
use crate::render::{render, Image};
use crate::task::{TaskId, TaskSpec};
use crate::world::{check_success, reset, step, ACTION_DIM, PROPRIO_DIM};

pub const EPISODE_MAGIC: &[u8; 4] = b"PPEP";
pub const EPISODE_VERSION: u32 = 1;

/// Steps recorded after the expert first succeeds, so demonstrations show the
/// arms settling.
const SETTLE_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeHeader {
    pub task: TaskId,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
}

/// One demonstration: `(image, proprio, action)` per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub images: Vec<Image>,
    pub proprio: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn header(&self) -> EpisodeHeader {
        let img = self.images.first();
        EpisodeHeader {
            task: self.task,
            len: self.len(),
            height: img.map_or(0, |i| i.height),
            width: img.map_or(0, |i| i.width),
            channels: img.map_or(0, |i| i.channels),
            proprio_dim: self.proprio.first().map_or(PROPRIO_DIM, Vec::len),
            action_dim: self.actions.first().map_or(ACTION_DIM, Vec::len),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(EPISODE_MAGIC);
        for v in [
            EPISODE_VERSION,
            h.task.code(),
            h.len as u32,
            h.height as u32,
            h.width as u32,
            h.channels as u32,
            h.proprio_dim as u32,
            h.action_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in 0..self.len() {
            out.extend_from_slice(&self.images[t].data);
            for v in &self.proprio[t] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &self.actions[t] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let mut u32s = [0u32; 8];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, task, len, height, width, channels, pdim, adim] = u32s.map(|v| v as usize);
        if version as u32 != EPISODE_VERSION {
            return Err(SimError::Format(format!("unsupported version {version}")));
        }
        let task = TaskId::from_code(task as u32)
            .ok_or_else(|| SimError::Format(format!("unknown task code {task}")))?;
        let record = height * width * channels + 8 * (pdim + adim);
        if r.len() != record * len {
            return Err(SimError::Format(format!(
                "expected {} payload bytes, found {}",
                record * len,
                r.len()
            )));
        }
        let read_f64s = |r: &mut &[u8], n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect()
        };
        let mut ep = Episode {
            task,
            images: Vec::with_capacity(len),
            proprio: Vec::with_capacity(len),
            actions: Vec::with_capacity(len),
        };
        for _ in 0..len {
            let mut data = vec![0u8; height * width * channels];
            r.read_exact(&mut data)?;
            ep.images.push(Image {
                height,
                width,
                channels,
                data,
            });
            ep.proprio.push(read_f64s(&mut r, pdim)?);
            ep.actions.push(read_f64s(&mut r, adim)?);
        }
        Ok(ep)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Rolls out the scripted expert from `reset(spec, seed)`. Recording stops a
/// few steps after the first success or at the task horizon. Returns the
/// episode and whether the final state is a success.
pub fn record_expert_episode(spec: &TaskSpec, seed: u64) -> Result<(Episode, bool)> {
    let mut state = reset(spec, seed);
    let mut ep = Episode {
        task: spec.id,
        images: Vec::new(),
        proprio: Vec::new(),
        actions: Vec::new(),
    };
    let mut settle = None;
    while !state.is_terminal() {
        let action = scripted_expert(&state)?;
        ep.images.push(render(&state));
        ep.proprio.push(state.proprio().to_vec());
        ep.actions.push(action.0.to_vec());
        state = step(&state, &action)?;
        if settle.is_none() && check_success(&state) {
            settle = Some(state.step_count + SETTLE_STEPS);
        }
        if settle.is_some_and(|s| state.step_count >= s) {
            break;
        }
    }
    let ok = check_success(&state);
    Ok((ep, ok))
}
