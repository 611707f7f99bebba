//! Conveyor material-handling simulation and heuristic-interleaved multi-agent
//! PPO for event-based dispatching.

pub mod sim;
pub mod topology;
pub mod env;
pub mod heuristics;
pub mod neural;
pub mod marl;
pub mod harness;
