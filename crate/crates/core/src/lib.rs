//! Replicable reinforcement learning on tabular MDPs.
//!
//! Two runs that share an internal seed but draw fresh samples return the
//! same Q-table, model or policy with high probability. The building block is
//! [`rstat::rstat`], a randomized-rounding mean estimator; [`rpvi`],
//! [`reprmax`] and [`rep_mdp`] lift it to whole learning algorithms.

pub mod gridworld;
pub mod lab;
pub mod mdp;
pub mod rep_mdp;
pub mod reprmax;
pub mod rpvi;
pub mod rstat;
pub mod sampling;
pub mod streams;

pub use mdp::{Policy, QTable, TabularMdp};
pub use streams::{RandTree, Role, Seed, Stream, StreamPath};
