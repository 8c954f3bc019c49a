//! PlanarPair: a kinematic two-effector tabletop in the unit square.
//!
//! Three tasks cover the coordination categories the policy is evaluated on:
//!
//! | task        | category          | episode length |
//! |-------------|-------------------|----------------|
//! | `handover`  | sequential        | 120            |
//! | `dual_pick` | synchronous       | 80             |
//! | `side_pick` | dominant-arm pick | 80             |
//!
//! Everything is deterministic: initial states come from a counter-based
//! generator keyed by the seed, and dynamics are pure functions of
//! `(state, action)`.

mod episode;
mod error;
mod expert;
mod render;
mod rng;
mod task;
mod world;

pub use episode::{record_expert_episode, Episode, EpisodeHeader, EPISODE_MAGIC, EPISODE_VERSION};
pub use error::{Result, SimError};
pub use expert::scripted_expert;
pub use render::{render, Image, IMAGE_CHANNELS, IMAGE_SIZE};
pub use rng::CounterRng;
pub use task::{Rect, TaskId, TaskSpec, GRASP_RADIUS, MAX_STEP};
pub use world::{check_success, reset, step, ActionVec, Block, Holder, WorldState, ACTION_DIM, PROPRIO_DIM};
