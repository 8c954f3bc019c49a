use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Per-step translation limit for each effector.
pub const MAX_STEP: f64 = 0.05;
/// A closed gripper grasps a free block whose centre is within this distance.
pub const GRASP_RADIUS: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Handover,
    DualPick,
    SidePick,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Handover, TaskId::DualPick, TaskId::SidePick];

    pub fn code(self) -> u32 {
        match self {
            TaskId::Handover => 0,
            TaskId::DualPick => 1,
            TaskId::SidePick => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Handover => "handover",
            TaskId::DualPick => "dual_pick",
            TaskId::SidePick => "side_pick",
        }
    }

    pub fn spec(self) -> TaskSpec {
        TaskSpec::new(self)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| SimError::UnknownTask(s.to_string()))
    }
}

/// Axis-aligned rectangle, inclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 2] {
        [self.x0 + u * (self.x1 - self.x0), self.y0 + v * (self.y1 - self.y0)]
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

pub const LEFT_HOME: [f64; 2] = [0.2, 0.85];
pub const RIGHT_HOME: [f64; 2] = [0.8, 0.85];

/// Static description of a task: horizon, reach limits, goals and spawn areas.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub episode_len: usize,
    /// Largest x the left effector may reach.
    pub left_x_max: f64,
    /// Smallest x the right effector may reach.
    pub right_x_min: f64,
    /// Goal `i` belongs to block `i`; single-block tasks have one goal.
    pub goals: Vec<Rect>,
    /// Candidate spawn regions per block; side_pick draws one of two.
    pub spawn: Vec<Vec<Rect>>,
    pub grasp_radius: f64,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        match id {
            TaskId::Handover => Self {
                id,
                episode_len: 120,
                left_x_max: 0.55,
                right_x_min: 0.45,
                goals: vec![Rect::new(0.72, 0.12, 0.92, 0.32)],
                spawn: vec![vec![Rect::new(0.1, 0.15, 0.35, 0.45)]],
                grasp_radius: GRASP_RADIUS,
            },
            TaskId::DualPick => Self {
                id,
                episode_len: 80,
                left_x_max: 1.0,
                right_x_min: 0.0,
                goals: vec![Rect::new(0.1, 0.05, 0.3, 0.25), Rect::new(0.7, 0.05, 0.9, 0.25)],
                spawn: vec![
                    vec![Rect::new(0.1, 0.45, 0.35, 0.7)],
                    vec![Rect::new(0.65, 0.45, 0.9, 0.7)],
                ],
                grasp_radius: GRASP_RADIUS,
            },
            TaskId::SidePick => Self {
                id,
                episode_len: 80,
                left_x_max: 1.0,
                right_x_min: 0.0,
                goals: vec![Rect::new(0.4, 0.08, 0.6, 0.28)],
                spawn: vec![vec![Rect::new(0.08, 0.4, 0.3, 0.75), Rect::new(0.7, 0.4, 0.92, 0.75)]],
                grasp_radius: GRASP_RADIUS,
            },
        }
    }

    /// Point where the left arm hands the block over in the shared strip.
    pub fn rendezvous(&self) -> [f64; 2] {
        [(self.left_x_max + self.right_x_min) / 2.0, 0.5]
    }
}
