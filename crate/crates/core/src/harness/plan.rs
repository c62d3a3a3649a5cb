use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{Condition, HarnessError, Result};
use crate::agent::{AgentConfig, EpsilonPolicy, EpsilonSchedule};
use crate::gridworld::{Scenario, Setting};
use crate::ltn::{scenario_theory, Theory, TrainConfig};

/// Environment steps per evaluation period at desk scale.
pub const DESK_EVAL_EVERY: u64 = 2_000;
pub const DESK_PHASE_EPOCHS: u64 = 20;
pub const DESK_PHASE_STEPS: u64 = DESK_EVAL_EVERY * DESK_PHASE_EPOCHS;
const DESK_PHASES: usize = 4;
const DESK_SEEDS: u64 = 5;
const DESK_EPSILON_HORIZON: u64 = 10_000;
const DESK_EVAL_TRAJECTORIES: usize = 50;

/// Full-scale cadence the desk preset is scaled from.
const FULL_EVAL_EVERY: u64 = 200_000;
const FULL_PHASE_EPOCHS: u64 = 50;

/// Which factor changes between phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    /// Visual settings change under a fixed scenario.
    I,
    /// Scenarios change under a fixed setting.
    II,
}

impl Experiment {
    /// Default visit order: settings 1, 3, 2, 4 under scenario 1, or
    /// scenarios 1, 2, 3, 4 under setting 1.
    pub fn default_order(self) -> [(u8, u8); 4] {
        match self {
            Experiment::I => [(1, 1), (1, 3), (1, 2), (1, 4)],
            Experiment::II => [(1, 1), (2, 1), (3, 1), (4, 1)],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::I => "I",
            Experiment::II => "II",
        })
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "I" | "i" => Ok(Experiment::I),
            "2" | "II" | "ii" => Ok(Experiment::II),
            other => Err(HarnessError::Plan(format!("unknown experiment `{other}`"))),
        }
    }
}

/// A stretch of training on one scenario/setting pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub scenario: u8,
    pub setting: u8,
    pub steps: u64,
}

impl Phase {
    pub fn new(scenario: u8, setting: u8, steps: u64) -> Self {
        Self {
            scenario,
            setting,
            steps,
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::preset(self.scenario).ok_or_else(|| HarnessError::Plan(format!("no scenario {}", self.scenario)))
    }

    pub fn setting(&self) -> Result<Setting> {
        Setting::preset(self.setting).ok_or_else(|| HarnessError::Plan(format!("no setting {}", self.setting)))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub experiment: Experiment,
    pub phases: Vec<Phase>,
    pub condition: Condition,
    pub epsilon: EpsilonSchedule,
    pub seeds: Vec<u64>,
    /// Environment steps per epoch; one evaluation closes each epoch.
    pub eval_every: u64,
    pub eval_trajectories: usize,
    pub eval_epsilon: f64,
    pub agent: AgentConfig,
    pub ltn: TrainConfig,
    /// Theory used to fit `goto`/`avoid` for each scenario.
    pub theories: BTreeMap<u8, Theory>,
}

impl ExperimentPlan {
    /// Desk-scale preset: four phases of 20 epochs of 2000 steps, five seeds.
    pub fn desk(experiment: Experiment, condition: Condition, policy: EpsilonPolicy) -> Self {
        let phases = experiment
            .default_order()
            .into_iter()
            .take(DESK_PHASES)
            .map(|(sc, st)| Phase::new(sc, st, DESK_PHASE_STEPS))
            .collect();
        Self {
            experiment,
            phases,
            condition,
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.1,
                horizon: DESK_EPSILON_HORIZON,
                policy,
            },
            seeds: (0..DESK_SEEDS).collect(),
            eval_every: DESK_EVAL_EVERY,
            eval_trajectories: DESK_EVAL_TRAJECTORIES,
            eval_epsilon: super::EVAL_EPSILON,
            agent: AgentConfig::default(),
            ltn: TrainConfig::default(),
            theories: (1..=4).filter_map(|n| Some((n, scenario_theory(n)?))).collect(),
        }
    }

    /// Replaces the phases with the given `(scenario, setting)` visits.
    pub fn with_order(mut self, order: &[(u8, u8)], steps: u64) -> Self {
        self.phases = order.iter().map(|&(sc, st)| Phase::new(sc, st, steps)).collect();
        self
    }

    pub fn set_phase_steps(&mut self, steps: u64) {
        for p in &mut self.phases {
            p.steps = steps;
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn theory(&self, scenario: u8) -> Result<&Theory> {
        self.theories
            .get(&scenario)
            .ok_or_else(|| HarnessError::Plan(format!("no theory for scenario {scenario}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Plan(m));
        if self.phases.is_empty() {
            return fail("no phases".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 {
                return fail(format!("phase {} has no steps", i + 1));
            }
            p.scenario()?;
            p.setting()?;
            if self.condition.uses_facts() {
                self.theory(p.scenario)?;
            }
        }
        if self.seeds.is_empty() {
            return fail("no seeds".into());
        }
        if self.eval_every == 0 || self.eval_trajectories == 0 {
            return fail("evaluation period and trajectory count must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return fail(format!("evaluation epsilon {}", self.eval_epsilon));
        }
        EpsilonSchedule::new(self.epsilon.start, self.epsilon.end, self.epsilon.horizon, self.epsilon.policy)?;
        self.agent.validate()?;
        Ok(())
    }

    /// Run description, including how the cadence relates to full scale.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let phase_epochs = self.phases[0].steps as f64 / self.eval_every as f64;
        let order: Vec<String> = self.phases.iter().map(|p| format!("{}/{}", p.scenario, p.setting)).collect();
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("experiment", self.experiment.to_string()),
            kv("condition", self.condition.to_string()),
            kv("epsilon_policy", self.epsilon.policy.to_string()),
            kv("epsilon_horizon", self.epsilon.horizon.to_string()),
            kv("phases", order.join(",")),
            kv("phase_steps", self.phases[0].steps.to_string()),
            kv("eval_every", self.eval_every.to_string()),
            kv("eval_trajectories", self.eval_trajectories.to_string()),
            kv("eval_epsilon", self.eval_epsilon.to_string()),
            kv("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            kv("train_every", self.agent.train_every.to_string()),
            kv("eval_every_scale", format!("{}", FULL_EVAL_EVERY as f64 / self.eval_every as f64)),
            kv("phase_epochs", format!("{phase_epochs}")),
            kv("phase_epochs_scale", format!("{}", FULL_PHASE_EPOCHS as f64 / phase_epochs)),
        ]
    }
}
