//! Neurosymbolic grid-world reinforcement learning workbench.

pub mod agent;
pub mod gridworld;
pub mod harness;
pub mod ltn;
pub mod numcore;
pub mod perception;
