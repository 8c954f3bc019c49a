use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::CounterRng;
use crate::task::{TaskId, TaskSpec, LEFT_HOME, MAX_STEP, RIGHT_HOME};

pub const ACTION_DIM: usize = 6;
pub const PROPRIO_DIM: usize = 6;

const TAG_SPAWN: u64 = 1;
const TAG_SIDE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Holder {
    None,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub pos: [f64; 2],
    pub held_by: Holder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub left_ee: [f64; 2],
    pub right_ee: [f64; 2],
    /// `<= 0` open, `> 0` closed.
    pub left_grip: f64,
    pub right_grip: f64,
    pub blocks: Vec<Block>,
    pub spec: TaskSpec,
    pub step_count: usize,
}

impl WorldState {
    pub fn task(&self) -> TaskId {
        self.spec.id
    }

    pub fn is_terminal(&self) -> bool {
        self.step_count >= self.spec.episode_len
    }

    /// `(left_x, left_y, left_grip, right_x, right_y, right_grip)`.
    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        [
            self.left_ee[0],
            self.left_ee[1],
            self.left_grip,
            self.right_ee[0],
            self.right_ee[1],
            self.right_grip,
        ]
    }

    pub fn held_by(&self, arm: Holder) -> Option<usize> {
        self.blocks.iter().position(|b| b.held_by == arm)
    }
}

/// `(dx, dy, grip)` for the left arm followed by the right arm. Translations
/// are clamped to `[-MAX_STEP, MAX_STEP]` on execution; grip is a position
/// command in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ActionVec(pub [f64; ACTION_DIM]);

impl ActionVec {
    pub fn zero() -> Self {
        Self([0.0; ACTION_DIM])
    }

    pub fn from_arms(left: [f64; 3], right: [f64; 3]) -> Self {
        Self([left[0], left[1], left[2], right[0], right[1], right[2]])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a.copy_from_slice(&v[..ACTION_DIM]);
        Self(a)
    }

    pub fn left(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn right(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn reset(spec: &TaskSpec, seed: u64) -> WorldState {
    let rng = CounterRng::new(seed);
    let blocks = spec
        .spawn
        .iter()
        .enumerate()
        .map(|(i, regions)| {
            let region = if regions.len() == 1 {
                regions[0]
            } else {
                let u = rng.uniform(0, TAG_SIDE, i as u64);
                regions[((u * regions.len() as f64) as usize).min(regions.len() - 1)]
            };
            let u = rng.uniform(0, TAG_SPAWN, 2 * i as u64);
            let v = rng.uniform(0, TAG_SPAWN, 2 * i as u64 + 1);
            Block {
                pos: region.sample(u, v),
                held_by: Holder::None,
            }
        })
        .collect();
    WorldState {
        left_ee: LEFT_HOME,
        right_ee: RIGHT_HOME,
        left_grip: 0.0,
        right_grip: 0.0,
        blocks,
        spec: spec.clone(),
        step_count: 0,
    }
}

fn clamp_step(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-MAX_STEP, MAX_STEP)
    }
}

fn move_arm(state: &mut WorldState, arm: Holder, cmd: [f64; 3]) {
    let (x_lo, x_hi) = match arm {
        Holder::Left => (0.0, state.spec.left_x_max),
        _ => (state.spec.right_x_min, 1.0),
    };
    let ee = match arm {
        Holder::Left => state.left_ee,
        _ => state.right_ee,
    };
    let target = [
        (ee[0] + clamp_step(cmd[0])).clamp(x_lo, x_hi),
        (ee[1] + clamp_step(cmd[1])).clamp(0.0, 1.0),
    ];
    let disp = [target[0] - ee[0], target[1] - ee[1]];
    for b in state.blocks.iter_mut().filter(|b| b.held_by == arm) {
        b.pos[0] += disp[0];
        b.pos[1] += disp[1];
    }
    let grip = if cmd[2].is_nan() { 0.0 } else { cmd[2].clamp(-1.0, 1.0) };
    match arm {
        Holder::Left => {
            state.left_ee = target;
            state.left_grip = grip;
        }
        _ => {
            state.right_ee = target;
            state.right_grip = grip;
        }
    }
}

fn update_grasp(state: &mut WorldState, arm: Holder) {
    let (ee, grip) = match arm {
        Holder::Left => (state.left_ee, state.left_grip),
        _ => (state.right_ee, state.right_grip),
    };
    let held = state.held_by(arm);
    if grip <= 0.0 {
        if let Some(i) = held {
            state.blocks[i].held_by = Holder::None;
        }
        return;
    }
    if held.is_some() {
        return;
    }
    let r = state.spec.grasp_radius;
    let nearest = state
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.held_by == Holder::None)
        .map(|(i, b)| (i, dist(b.pos, ee)))
        .filter(|&(_, d)| d <= r)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((i, _)) = nearest {
        state.blocks[i].held_by = arm;
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Kinematic update: translate both effectors (carrying held blocks rigidly),
/// apply gripper commands, then resolve grasps and releases.
pub fn step(state: &WorldState, action: &ActionVec) -> Result<WorldState> {
    if state.is_terminal() {
        return Err(SimError::Terminal(state.step_count));
    }
    let mut next = state.clone();
    move_arm(&mut next, Holder::Left, action.left());
    move_arm(&mut next, Holder::Right, action.right());
    update_grasp(&mut next, Holder::Left);
    update_grasp(&mut next, Holder::Right);
    next.step_count += 1;
    debug_assert!(invariants_hold(&next));
    Ok(next)
}

pub(crate) fn invariants_hold(s: &WorldState) -> bool {
    let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
    let left_n = s.blocks.iter().filter(|b| b.held_by == Holder::Left).count();
    let right_n = s.blocks.iter().filter(|b| b.held_by == Holder::Right).count();
    inside(s.left_ee)
        && inside(s.right_ee)
        && s.left_ee[0] <= s.spec.left_x_max
        && s.right_ee[0] >= s.spec.right_x_min
        && left_n <= 1
        && right_n <= 1
}

pub fn check_success(state: &WorldState) -> bool {
    let goals = &state.spec.goals;
    state
        .blocks
        .iter()
        .zip(goals)
        .all(|(b, g)| g.contains(b.pos) && b.held_by == Holder::None)
}
