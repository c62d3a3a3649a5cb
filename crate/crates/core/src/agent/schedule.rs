use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::gridworld::Action;

/// What happens to exploration at a phase boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonPolicy {
    /// Restart the decay at every phase.
    Reset,
    /// One decay over the whole run.
    Hold,
}

impl fmt::Display for EpsilonPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpsilonPolicy::Reset => "reset",
            EpsilonPolicy::Hold => "hold",
        })
    }
}

impl FromStr for EpsilonPolicy {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reset" => Ok(EpsilonPolicy::Reset),
            "hold" => Ok(EpsilonPolicy::Hold),
            other => Err(AgentError::Config(format!("unknown epsilon policy `{other}`"))),
        }
    }
}

/// Linear ε decay from `start` to `end` over `horizon` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
    pub policy: EpsilonPolicy,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, horizon: u64, policy: EpsilonPolicy) -> Result<Self, AgentError> {
        if !(0.0..=1.0).contains(&end) || !(end..=1.0).contains(&start) || horizon == 0 {
            return Err(AgentError::Config(format!(
                "epsilon schedule {start} -> {end} over {horizon} steps"
            )));
        }
        Ok(Self {
            start,
            end,
            horizon,
            policy,
        })
    }

    /// ε at global step `t` inside a phase that began at `phase_start`.
    pub fn value(&self, t: u64, phase_start: u64) -> f64 {
        let clock = match self.policy {
            EpsilonPolicy::Reset => t.saturating_sub(phase_start),
            EpsilonPolicy::Hold => t,
        };
        if clock >= self.horizon {
            return self.end;
        }
        let frac = clock as f64 / self.horizon as f64;
        (self.start + (self.end - self.start) * frac).max(self.end)
    }
}

/// Greedy action, ties to the lowest index.
pub fn greedy(q: &[f64; Action::COUNT]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice over four actions.
pub fn select_action<R: Rng + ?Sized>(q: &[f64; Action::COUNT], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..Action::COUNT)
    } else {
        greedy(q)
    }
}
