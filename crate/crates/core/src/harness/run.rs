use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CompactInput, Condition, EvalRecord, ExperimentPlan, HarnessError, Result};
use crate::agent::{Agent, QNetConfig, QNetwork, Transition};
use crate::gridworld::{max_potential_reward, Action, Cell, GridState, Scenario, Setting, GRID};
use crate::ltn::{train_groundings, Groundings, RenderedCells};

/// Exploration rate used while evaluating a learned policy.
pub const EVAL_EPSILON: f64 = 0.05;

pub trait Policy {
    fn act<R: Rng + ?Sized>(&mut self, state: &GridState, setting: &Setting, rng: &mut R) -> Result<Action>;
}

/// Uniform over the four moves.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act<R: Rng + ?Sized>(&mut self, _: &GridState, _: &Setting, rng: &mut R) -> Result<Action> {
        Ok(Action::ALL[rng.gen_range(0..Action::COUNT)])
    }
}

/// Scripted policy with full state access: walks a shortest path to the
/// nearest target and never steps on an avoid object.
#[derive(Debug, Clone, Copy)]
pub struct OraclePolicy {
    pub scenario: Scenario,
}

fn moved(cell: Cell, a: Action) -> Cell {
    let (dr, dc) = a.delta();
    let clamp = |v: usize, d: isize| (v as isize + d).clamp(0, GRID as isize - 1) as usize;
    (clamp(cell.0, dr), clamp(cell.1, dc))
}

impl OraclePolicy {
    fn blocked(&self, state: &GridState, cell: Cell) -> bool {
        state.object_at(cell).is_some_and(|t| self.scenario.avoid().contains(t))
    }

    /// First move of a shortest safe path to the nearest target, if one is
    /// reachable.
    fn first_move(&self, state: &GridState) -> Option<Action> {
        let start = state.agent();
        let mut first: [[Option<Action>; GRID]; GRID] = [[None; GRID]; GRID];
        let mut seen = [[false; GRID]; GRID];
        seen[start.0][start.1] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(cell) = queue.pop_front() {
            if cell != start && state.object_at(cell).is_some_and(|t| self.scenario.target().contains(t)) {
                return first[cell.0][cell.1];
            }
            for a in Action::ALL {
                let next = moved(cell, a);
                if seen[next.0][next.1] || self.blocked(state, next) {
                    continue;
                }
                seen[next.0][next.1] = true;
                first[next.0][next.1] = if cell == start { Some(a) } else { first[cell.0][cell.1] };
                queue.push_back(next);
            }
        }
        None
    }
}

impl Policy for OraclePolicy {
    fn act<R: Rng + ?Sized>(&mut self, state: &GridState, _: &Setting, _: &mut R) -> Result<Action> {
        if let Some(a) = self.first_move(state) {
            return Ok(a);
        }
        // Walled in by avoid objects: wait on a safe cell.
        Ok(Action::ALL
            .into_iter()
            .find(|&a| !self.blocked(state, moved(state.agent(), a)))
            .unwrap_or(Action::Up))
    }
}

/// ε-greedy over a trained agent's Q-values.
pub struct AgentPolicy<'a> {
    pub agent: &'a Agent<CompactInput>,
    pub condition: Condition,
    pub groundings: Option<&'a Groundings>,
    pub epsilon: f64,
}

impl Policy for AgentPolicy<'_> {
    fn act<R: Rng + ?Sized>(&mut self, state: &GridState, setting: &Setting, rng: &mut R) -> Result<Action> {
        let input = CompactInput::encode(state.clone(), *setting, self.condition, self.groundings)?;
        let a = self.agent.act(&input, self.epsilon, rng)?;
        Ok(Action::from_index(a).expect("agent returns a valid action"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    /// Normal-approximation 95% half-width, zero for a single episode.
    pub ci95: f64,
    pub scores: Vec<f64>,
}

impl EvalSummary {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let ci95 = if scores.len() < 2 {
            0.0
        } else {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        };
        Self { mean, ci95, scores }
    }
}

/// Plays `n_traj` fresh episodes and scores each by total reward over the
/// number of targets it started with.
pub fn evaluate<P: Policy, R: Rng + ?Sized>(
    policy: &mut P,
    scenario: &Scenario,
    setting: &Setting,
    n_traj: usize,
    rng: &mut R,
) -> Result<EvalSummary> {
    if n_traj == 0 {
        return Err(HarnessError::Plan("evaluation needs at least one trajectory".into()));
    }
    let mut scores = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut state = GridState::reset(rng, scenario);
        let max = max_potential_reward(&state);
        let mut total = 0i64;
        while !state.is_done(scenario) {
            let a = policy.act(&state, setting, rng)?;
            let step = state.step(a, scenario)?;
            total += step.reward as i64;
            state = step.state;
        }
        let score = total as f64 / max as f64;
        if score > 1.0 {
            return Err(HarnessError::Invariant(format!("episode score {score} above 1")));
        }
        scores.push(score);
    }
    Ok(EvalSummary::from_scores(scores))
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Online network at the end of each phase.
    pub checkpoints: Vec<QNetwork>,
    /// Groundings fitted at the start of each phase.
    pub groundings: Vec<Groundings>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub runs: Vec<SeedRun>,
}

impl RunReport {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.runs.iter().flat_map(|r| r.records.iter().cloned()).collect()
    }
}

const ENV_STREAM: u64 = 0;
const AGENT_STREAM: u64 = 1;
const LTN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains and evaluates one fresh agent through every phase of the plan.
pub fn run_seed(plan: &ExperimentPlan, seed: u64) -> Result<SeedRun> {
    plan.validate()?;
    let mut env_rng = stream(seed, ENV_STREAM);
    let mut agent_rng = stream(seed, AGENT_STREAM);
    let mut ltn_rng = stream(seed, LTN_STREAM);
    let mut eval_rng = stream(seed, EVAL_STREAM);

    let condition = plan.condition;
    let net = QNetConfig::standard(condition.in_channels());
    let mut agent: Agent<CompactInput> = Agent::new(plan.agent, net, &mut agent_rng)?;
    if agent.online().in_channels() != condition.in_channels() {
        return Err(HarnessError::Invariant("network input width differs from the condition".into()));
    }

    let mut run = SeedRun {
        seed,
        records: Vec::new(),
        checkpoints: Vec::new(),
        groundings: Vec::new(),
    };
    let mut t: u64 = 0;
    for (pi, phase) in plan.phases.iter().enumerate() {
        let scenario = phase.scenario()?;
        let setting = phase.setting()?;
        let groundings = if condition.uses_facts() {
            let mut source = RenderedCells { scenario, setting };
            let trained = train_groundings(plan.theory(phase.scenario)?, &mut source, &plan.ltn, &mut ltn_rng)?;
            run.groundings.push(trained.groundings.clone());
            Some(trained.groundings)
        } else {
            None
        };
        let g = groundings.as_ref();
        let encode = |s: GridState| CompactInput::encode(s, setting, condition, g);

        let phase_start = t;
        let mut input = encode(GridState::reset(&mut env_rng, &scenario))?;
        for _ in 0..phase.steps {
            let eps = plan.epsilon.value(t, phase_start);
            let action = agent.act(&input, eps, &mut agent_rng)?;
            let step = input
                .state
                .step(Action::from_index(action).expect("valid action"), &scenario)?;
            let next = encode(step.state)?;
            agent.remember(Transition {
                state: input.clone(),
                action,
                reward: step.reward,
                next: next.clone(),
                done: step.done,
            })?;
            t += 1;
            if t % plan.agent.train_every == 0 {
                agent.train_event(&mut agent_rng)?;
            }
            input = if step.done {
                encode(GridState::reset(&mut env_rng, &scenario))?
            } else {
                next
            };
            if t % plan.eval_every == 0 {
                let mut policy = AgentPolicy {
                    agent: &agent,
                    condition,
                    groundings: g,
                    epsilon: plan.eval_epsilon,
                };
                let summary = evaluate(&mut policy, &scenario, &setting, plan.eval_trajectories, &mut eval_rng)?;
                run.records.push(EvalRecord {
                    seed,
                    epoch: t / plan.eval_every,
                    phase: pi + 1,
                    condition,
                    epsilon_policy: plan.epsilon.policy,
                    normalized_reward_mean: summary.mean,
                    ci95: summary.ci95,
                });
            }
        }
        run.checkpoints.push(agent.online().clone());
    }
    Ok(run)
}

/// Runs every seed of the plan as an independent worker.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<RunReport> {
    plan.validate()?;
    let runs = plan
        .seeds
        .par_iter()
        .map(|&seed| run_seed(plan, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::EpsilonPolicy;
    use crate::harness::{Experiment, Phase};

    fn state(text: &str, scenario: &Scenario) -> GridState {
        GridState::from_text(text, scenario).unwrap()
    }

    #[test]
    fn oracle_steps_around_avoid() {
        let sc = Scenario::preset(1).unwrap();
        // circle target behind a cross
        let s = state("+xo..\n.....\n.....\n.....\n.....", &sc);
        let mut o = OraclePolicy { scenario: sc };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = Setting::preset(1).unwrap();
        assert_eq!(o.act(&s, &st, &mut rng).unwrap(), Action::Down);
        let s = state("..o..\n.....\n..+..\n.....\n.....", &sc);
        assert_eq!(o.act(&s, &st, &mut rng).unwrap(), Action::Up);
    }

    #[test]
    fn oracle_waits_when_walled_in() {
        let sc = Scenario::preset(1).unwrap();
        let s = state("+x...\nx....\n.....\n.....\n....o", &sc);
        let mut o = OraclePolicy { scenario: sc };
        let a = o
            .act(&s, &Setting::preset(1).unwrap(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(matches!(a, Action::Up | Action::Left));
    }

    #[test]
    fn single_trajectory_has_zero_ci() {
        let sc = Scenario::preset(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = evaluate(&mut RandomPolicy, &sc, &Setting::preset(1).unwrap(), 1, &mut rng).unwrap();
        assert_eq!(s.ci95, 0.0);
        assert!(evaluate(&mut RandomPolicy, &sc, &Setting::preset(1).unwrap(), 0, &mut rng).is_err());
    }

    fn tiny_plan(condition: Condition) -> ExperimentPlan {
        let mut p = ExperimentPlan::desk(Experiment::II, condition, EpsilonPolicy::Reset)
            .with_order(&[(1, 1), (2, 1)], 60);
        p.seeds = vec![7];
        p.eval_every = 30;
        p.eval_trajectories = 2;
        p.agent.train_every = 20;
        p.agent.updates_per_train = 1;
        p.agent.batch_size = 4;
        p.agent.replay_capacity = 50;
        p.ltn.iterations = 20;
        p
    }

    #[test]
    fn tiny_run_bookkeeping() {
        let plan = tiny_plan(Condition::TypesFacts);
        let run = run_seed(&plan, 7).unwrap();
        assert_eq!(run.groundings.len(), 2);
        assert_eq!(run.checkpoints.len(), 2);
        let idx: Vec<(u64, usize)> = run.records.iter().map(|r| (r.epoch, r.phase)).collect();
        assert_eq!(idx, [(1, 1), (2, 1), (3, 2), (4, 2)]);
        assert!(run.records.iter().all(|r| r.normalized_reward_mean <= 1.0));
        assert_eq!(run.checkpoints[0].in_channels(), 9);
    }

    #[test]
    fn no_groundings_without_facts() {
        let run = run_seed(&tiny_plan(Condition::Types), 7).unwrap();
        assert!(run.groundings.is_empty());
        let mut plan = tiny_plan(Condition::None);
        plan.phases = vec![Phase::new(1, 4, 30)];
        assert_eq!(run_seed(&plan, 1).unwrap().records.len(), 1);
    }
}
