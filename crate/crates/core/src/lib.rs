//! Contact planning for legged robots on stepping stones.
//!
//! The crate is organised bottom-up:
//!
//! - [`terrain`] generates and mutates randomized stepping-stone worlds.
//! - [`kinematics`] defines stances, actions and the kinematic pruning used
//!   while growing the search tree.
//! - [`feasibility`] decides whether a contact transition (or a whole plan)
//!   is dynamically achievable. The built-in oracle is closed-form; an
//!   external process can be plugged in instead.
//! - [`search`] is the Monte Carlo tree search contact planner.
//! - [`baseline`] is a naive Raibert-heuristic planner used for comparison.
//! - [`dataset`] turns planner output into supervised-learning records.
//! - [`harness`] runs seeded batch experiments and writes CSV/JSON reports.
//! - [`session`] is the interactive replanning state machine and its
//!   line-delimited JSON protocol.

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod feasibility;
pub mod geometry;
pub mod harness;
pub mod kinematics;
pub mod rng;
pub mod search;
pub mod session;
pub mod terrain;
mod timing;

pub use error::{Error, Result};
pub use geometry::Vec3;
pub use terrain::StoneId;

/// Number of end-effectors of the quadruped.
pub const NUM_FEET: usize = 4;
