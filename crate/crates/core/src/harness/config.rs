use std::str::FromStr;

use super::{ExperimentPlan, HarnessError, Result};

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Config {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(HarnessError::Config {
                line: i + 1,
                message: "empty key or value".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config {
        line,
        message: format!("bad value `{v}` for `{key}`"),
    })
}

/// Overrides agent and plan defaults from a config file. Unknown keys are
/// rejected.
pub fn apply_config(plan: &mut ExperimentPlan, text: &str) -> Result<()> {
    for (line, key, v) in parse_config(text)? {
        let v = v.as_str();
        match key.as_str() {
            "gamma" => plan.agent.gamma = value(line, &key, v)?,
            "batch_size" => plan.agent.batch_size = value(line, &key, v)?,
            "replay_capacity" => plan.agent.replay_capacity = value(line, &key, v)?,
            "target_sync" => plan.agent.target_sync = value(line, &key, v)?,
            "train_every" => plan.agent.train_every = value(line, &key, v)?,
            "updates_per_train" => plan.agent.updates_per_train = value(line, &key, v)?,
            "huber_delta" => plan.agent.huber_delta = value(line, &key, v)?,
            "learning_rate" => plan.agent.optimizer.lr = value(line, &key, v)?,
            "epsilon_start" => plan.epsilon.start = value(line, &key, v)?,
            "epsilon_end" => plan.epsilon.end = value(line, &key, v)?,
            "epsilon_horizon" => plan.epsilon.horizon = value(line, &key, v)?,
            "epsilon_policy" => {
                plan.epsilon.policy = v.parse().map_err(|e| HarnessError::Config {
                    line,
                    message: format!("{e}"),
                })?
            }
            "eval_every" => plan.eval_every = value(line, &key, v)?,
            "eval_trajectories" => plan.eval_trajectories = value(line, &key, v)?,
            "eval_epsilon" => plan.eval_epsilon = value(line, &key, v)?,
            "phase_steps" => plan.set_phase_steps(value(line, &key, v)?),
            "seeds" => plan.seeds = (0..value::<u64>(line, &key, v)?).collect(),
            "ltn_iterations" => plan.ltn.iterations = value(line, &key, v)?,
            "ltn_learning_rate" => plan.ltn.optimizer.lr = value(line, &key, v)?,
            _ => {
                return Err(HarnessError::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
    }
    Ok(())
}
