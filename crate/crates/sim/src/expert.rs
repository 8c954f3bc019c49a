//! Waypoint experts. The phase is read off the state (who holds what, where
//! the blocks are), so the expert is a pure function of the world state.

use crate::error::{Result, SimError};
use crate::task::{TaskId, LEFT_HOME, MAX_STEP, RIGHT_HOME};
use crate::world::{check_success, dist, ActionVec, Holder, WorldState};

const ARRIVE_TOL: f64 = 0.01;
const OPEN: f64 = -1.0;
const CLOSED: f64 = 1.0;

/// Proportional move towards `target`, clamped to the per-step limit.
fn toward(from: [f64; 2], to: [f64; 2], grip: f64) -> [f64; 3] {
    [
        (to[0] - from[0]).clamp(-MAX_STEP, MAX_STEP),
        (to[1] - from[1]).clamp(-MAX_STEP, MAX_STEP),
        grip,
    ]
}

fn hold(grip: f64) -> [f64; 3] {
    [0.0, 0.0, grip]
}

fn arrived(a: [f64; 2], b: [f64; 2]) -> bool {
    dist(a, b) < ARRIVE_TOL
}

fn ee(state: &WorldState, arm: Holder) -> [f64; 2] {
    match arm {
        Holder::Left => state.left_ee,
        _ => state.right_ee,
    }
}

/// Approach → grasp → carry → release for one arm and one block. Returns a
/// hold command once the block rests in its goal.
fn pick_place(state: &WorldState, arm: Holder, block: usize, goal: [f64; 2]) -> Result<[f64; 3]> {
    let b = state.blocks[block];
    let pos = ee(state, arm);
    let goal_rect = state.spec.goals[block.min(state.spec.goals.len() - 1)];
    match b.held_by {
        h if h == arm => {
            if arrived(pos, goal) {
                Ok(hold(OPEN))
            } else {
                Ok(toward(pos, goal, CLOSED))
            }
        }
        Holder::None if goal_rect.contains(b.pos) => Ok(hold(OPEN)),
        Holder::None => {
            if arrived(pos, b.pos) {
                Ok(hold(CLOSED))
            } else {
                Ok(toward(pos, b.pos, OPEN))
            }
        }
        other => Err(SimError::ImpossiblePhase(format!(
            "block {block} held by {other:?}, expected {arm:?}"
        ))),
    }
}

fn handover(state: &WorldState) -> Result<ActionVec> {
    let spec = &state.spec;
    let b = state.blocks[0];
    let rv = spec.rendezvous();
    let wait = [rv[0] + 0.1, rv[1]];
    let goal = spec.goals[0].center();
    let (l, r) = (state.left_ee, state.right_ee);
    let in_right_reach = b.pos[0] >= spec.right_x_min;

    let (left, right) = match b.held_by {
        Holder::Left => {
            let left = if arrived(l, rv) { hold(OPEN) } else { toward(l, rv, CLOSED) };
            (left, toward(r, wait, OPEN))
        }
        Holder::None if !in_right_reach => {
            let left = if arrived(l, b.pos) { hold(CLOSED) } else { toward(l, b.pos, OPEN) };
            (left, toward(r, wait, OPEN))
        }
        Holder::None => {
            // released in the shared strip: right takes over, left backs off
            let right = if arrived(r, b.pos) { hold(CLOSED) } else { toward(r, b.pos, OPEN) };
            (toward(l, LEFT_HOME, OPEN), right)
        }
        Holder::Right => {
            if state.left_grip > 0.0 {
                return Err(SimError::ImpossiblePhase(
                    "right arm holds the block while the left gripper is closed".into(),
                ));
            }
            let right = if arrived(r, goal) { hold(OPEN) } else { toward(r, goal, CLOSED) };
            (toward(l, LEFT_HOME, OPEN), right)
        }
    };
    Ok(ActionVec::from_arms(left, right))
}

fn dual_pick(state: &WorldState) -> Result<ActionVec> {
    let left = pick_place(state, Holder::Left, 0, state.spec.goals[0].center())?;
    let right = pick_place(state, Holder::Right, 1, state.spec.goals[1].center())?;
    Ok(ActionVec::from_arms(left, right))
}

fn side_pick(state: &WorldState) -> Result<ActionVec> {
    let b = state.blocks[0];
    let acting = match b.held_by {
        Holder::None => {
            if b.pos[0] < 0.5 {
                Holder::Left
            } else {
                Holder::Right
            }
        }
        h => h,
    };
    let goal = state.spec.goals[0].center();
    let cmd = pick_place(state, acting, 0, goal)?;
    Ok(match acting {
        Holder::Left => ActionVec::from_arms(cmd, toward(state.right_ee, RIGHT_HOME, OPEN)),
        _ => ActionVec::from_arms(toward(state.left_ee, LEFT_HOME, OPEN), cmd),
    })
}

/// Scripted demonstrator for every task.
pub fn scripted_expert(state: &WorldState) -> Result<ActionVec> {
    if state.blocks.len() != state.spec.spawn.len() {
        return Err(SimError::ImpossiblePhase("block count does not match task".into()));
    }
    if check_success(state) {
        return Ok(ActionVec::from_arms(hold(OPEN), hold(OPEN)));
    }
    match state.task() {
        TaskId::Handover => handover(state),
        TaskId::DualPick => dual_pick(state),
        TaskId::SidePick => side_pick(state),
    }
}
