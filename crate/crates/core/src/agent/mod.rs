//! Double dueling DQN: ε-greedy acting, uniform replay, Huber-loss updates
//! of the online network and periodic copies into the target network.

mod qnet;
mod replay;
mod schedule;

pub use qnet::{QNetConfig, QNetwork, QOutputs};
pub use replay::{ReplayBuffer, Transition};
pub use schedule::{greedy, select_action, EpsilonPolicy, EpsilonSchedule};

use rand::Rng;
use thiserror::Error;

use crate::gridworld::Action;
use crate::numcore::{Adam, AdamConfig, Graph, NumError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input of {got} values for a batch of {batch}; the network takes {expected} per sample ({channels} channels)")]
    InputShape {
        expected: usize,
        channels: usize,
        got: usize,
        batch: usize,
    },
    #[error("networks disagree on input channels ({online} vs {target})")]
    ChannelMismatch { online: usize, target: usize },
    #[error("action {0} out of range")]
    BadAction(usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Something that can be expanded into a network input.
///
/// The input is `[image | cells]` along channels, where the cell channels
/// are constant over every 10×10 cell and are written once per cell.
pub trait InputEncoding {
    fn image_channels(&self) -> usize;
    fn cell_channels(&self) -> usize;
    /// Writes the `H×W×image_channels` part, channels-last.
    fn write_image(&self, out: &mut [f64]);
    /// Writes the `(H/10)×(W/10)×cell_channels` part, channels-last.
    fn write_cells(&self, out: &mut [f64]);
}

/// A plain `[H, W, C]` tensor: every channel is an image channel.
impl InputEncoding for Tensor {
    fn image_channels(&self) -> usize {
        *self.shape().last().unwrap_or(&0)
    }

    fn cell_channels(&self) -> usize {
        0
    }

    fn write_image(&self, out: &mut [f64]) {
        out.copy_from_slice(self.data());
    }

    fn write_cells(&self, _out: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Copy online → target after this many gradient updates.
    pub target_sync: u64,
    /// Environment steps between training events.
    pub train_every: u64,
    /// Gradient updates per training event.
    pub updates_per_train: usize,
    pub huber_delta: f64,
    pub optimizer: AdamConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 500,
            train_every: 200,
            updates_per_train: 50,
            huber_delta: 1.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.gamma)
            && self.batch_size > 0
            && self.replay_capacity >= self.batch_size
            && self.target_sync > 0
            && self.train_every > 0
            && self.updates_per_train > 0
            && self.huber_delta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AgentError::Config(format!("{self:?}")))
        }
    }
}

/// Double-DQN regression targets from next-state Q-values of both networks.
///
/// `y = r` for terminal samples, otherwise
/// `y = r + γ · Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_dqn_targets(
    rewards: &[f64],
    dones: &[bool],
    q_online_next: &[[f64; Action::COUNT]],
    q_target_next: &[[f64; Action::COUNT]],
    gamma: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(q_online_next.iter().zip(q_target_next))
        .map(|((&r, &done), (on, tg))| if done { r } else { r + gamma * tg[greedy(on)] })
        .collect()
}

/// Learner with online and target networks and its own replay memory.
#[derive(Debug, Clone)]
pub struct Agent<S> {
    config: AgentConfig,
    online: QNetwork,
    target: QNetwork,
    optimizer: Adam,
    replay: ReplayBuffer<Transition<S>>,
    updates: u64,
}

impl<S: InputEncoding> Agent<S> {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, net: QNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(net, rng)?;
        let target = online.clone();
        let optimizer = Adam::new(config.optimizer, online.params())?;
        Ok(Self {
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            online,
            target,
            optimizer,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut QNetwork {
        &mut self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer<Transition<S>> {
        &self.replay
    }

    /// Gradient updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Image and cell buffers for a batch.
    fn encode(&self, items: &[&S]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.online.config();
        let (il, cl) = (c.image_len(), c.cells_len());
        let mut image = vec![0.0; il * items.len()];
        let mut cells = vec![0.0; cl * items.len()];
        for (i, item) in items.iter().enumerate() {
            if item.image_channels() != c.image_channels() || item.cell_channels() != c.cell_channels {
                return Err(AgentError::InputShape {
                    expected: c.input_len(),
                    channels: c.in_channels,
                    got: (item.image_channels() + item.cell_channels()) * c.height * c.width,
                    batch: 1,
                });
            }
            item.write_image(&mut image[i * il..(i + 1) * il]);
            item.write_cells(&mut cells[i * cl..(i + 1) * cl]);
        }
        Ok((image, cells))
    }

    fn q_of(&self, net: &QNetwork, items: &[&S]) -> Result<Vec<[f64; Action::COUNT]>> {
        let (image, cells) = self.encode(items)?;
        net.q_batch_blocks(image, cells, items.len())
    }

    pub fn q_values(&self, state: &S) -> Result<[f64; Action::COUNT]> {
        Ok(self.q_of(&self.online, &[state])?[0])
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &S, epsilon: f64, rng: &mut R) -> Result<usize> {
        // Skip the forward pass when the move is random anyway.
        if rng.gen::<f64>() < epsilon {
            return Ok(rng.gen_range(0..Action::COUNT));
        }
        Ok(greedy(&self.q_values(state)?))
    }

    pub fn remember(&mut self, t: Transition<S>) -> Result<()> {
        if t.action >= Action::COUNT {
            return Err(AgentError::BadAction(t.action));
        }
        self.replay.push(t);
        Ok(())
    }

    /// Targets for a batch of transitions using the current networks.
    pub fn targets(&self, batch: &[&Transition<S>]) -> Result<Vec<f64>> {
        if self.online.in_channels() != self.target.in_channels() {
            return Err(AgentError::ChannelMismatch {
                online: self.online.in_channels(),
                target: self.target.in_channels(),
            });
        }
        let next: Vec<&S> = batch.iter().map(|t| &t.next).collect();
        let q_online = self.q_of(&self.online, &next)?;
        let q_target = self.q_of(&self.target, &next)?;
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward as f64).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
        Ok(double_dqn_targets(&rewards, &dones, &q_online, &q_target, self.config.gamma))
    }

    /// One Huber-loss update of the online network on a uniform batch.
    /// Returns `None` without touching anything while the replay holds
    /// fewer transitions than a batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        let Some(batch) = self.replay.sample(self.config.batch_size, rng) else {
            return Ok(None);
        };
        let y = self.targets(&batch)?;
        let states: Vec<&S> = batch.iter().map(|t| &t.state).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let (image, cells) = self.encode(&states)?;
        let n = batch.len();

        let (loss, grads) = {
            let mut g = Graph::new(self.online.params());
            let (img, cells) = self.online.block_inputs(&mut g, image, cells, n)?;
            let out = self.online.forward_blocks(&mut g, img, cells)?;
            let taken = g.gather(out.q, &actions)?;
            let loss = g.huber(taken, &y, self.config.huber_delta)?;
            let value = g.value(loss)[0];
            (value, g.backward(loss)?)
        };
        let params = self.online.params_mut();
        for p in params.iter_mut() {
            p.zero_grad();
        }
        grads.accumulate_into(params)?;
        self.optimizer.step(params)?;
        self.updates += 1;
        Ok(Some(loss))
    }

    pub fn sync_target(&mut self) {
        self.target
            .copy_from(&self.online)
            .expect("online and target share a configuration");
    }

    /// A training event: `updates_per_train` updates, syncing the target
    /// network whenever the update count reaches a multiple of
    /// `target_sync`. Returns the mean loss, or `None` if replay was too
    /// short to train.
    pub fn train_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..self.config.updates_per_train {
            match self.train_step(rng)? {
                Some(l) => {
                    total += l;
                    count += 1;
                }
                None => break,
            }
            if self.updates % self.config.target_sync == 0 {
                self.sync_target();
            }
        }
        Ok((count > 0).then(|| total / count as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> QNetConfig {
        QNetConfig {
            in_channels: 1,
            cell_channels: 0,
            height: 10,
            width: 10,
            conv1: 2,
            conv2: 2,
            hidden: 4,
        }
    }

    fn input(v: f64) -> Tensor {
        Tensor::new(vec![10, 10, 1], vec![v; 100]).unwrap()
    }

    fn filled_agent(seed: u64) -> Agent<Tensor> {
        let cfg = AgentConfig {
            batch_size: 4,
            replay_capacity: 16,
            target_sync: 3,
            updates_per_train: 5,
            ..AgentConfig::default()
        };
        let mut agent = Agent::new(cfg, tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..8 {
            agent
                .remember(Transition {
                    state: input(i as f64 / 8.0),
                    action: i % 4,
                    reward: [1, 0, -1][i % 3],
                    next: input((i + 1) as f64 / 8.0),
                    done: i == 7,
                })
                .unwrap();
        }
        agent
    }

    #[test]
    fn worked_double_target() {
        let y = double_dqn_targets(
            &[1.0, -1.0],
            &[false, true],
            &[[0.2, 0.5, 0.1, 0.4], [9.0; 4]],
            &[[0.0, 0.3, 0.0, 0.0], [9.0; 4]],
            0.9,
        );
        assert!((y[0] - 1.27).abs() < 1e-12);
        assert_eq!(y[1], -1.0);
    }

    #[test]
    fn same_networks_reduce_to_max() {
        let q = [[0.3, -1.0, 0.7, 0.2]];
        let y = double_dqn_targets(&[0.0], &[false], &q, &q, 0.5);
        assert_eq!(y[0], 0.35);
    }

    #[test]
    fn train_step_leaves_target_and_is_deterministic() {
        let mut a = filled_agent(1);
        let mut b = filled_agent(1);
        let before = a.target().clone();
        let la = a.train_step(&mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap();
        let lb = b.train_step(&mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap();
        assert!(la >= 0.0);
        assert_eq!(la, lb);
        assert_eq!(a.online(), b.online());
        assert_eq!(a.target(), &before);
        assert_ne!(a.online(), &before);
    }

    #[test]
    fn short_replay_skips() {
        let cfg = AgentConfig {
            batch_size: 4,
            replay_capacity: 16,
            ..AgentConfig::default()
        };
        let mut agent: Agent<Tensor> = Agent::new(cfg, tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(agent.train_step(&mut ChaCha8Rng::seed_from_u64(0)).unwrap(), None);
        assert_eq!(agent.train_event(&mut ChaCha8Rng::seed_from_u64(0)).unwrap(), None);
        assert_eq!(agent.updates(), 0);
    }

    #[test]
    fn sync_cadence() {
        let mut agent = filled_agent(2);
        agent.train_event(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(agent.updates(), 5);
        // Synced at update 3, then two more updates moved the online net.
        assert_ne!(agent.online(), agent.target());
        agent.sync_target();
        agent.sync_target();
        assert_eq!(agent.online(), agent.target());
    }

    #[test]
    fn synced_targets_match_single_network() {
        let mut agent = filled_agent(3);
        agent.train_step(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        agent.sync_target();
        let batch: Vec<&Transition<Tensor>> = agent.replay().iter().collect();
        let y = agent.targets(&batch).unwrap();
        for (t, y) in batch.iter().zip(y) {
            let q = agent.online().q_values(t.next.data()).unwrap();
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let want = if t.done { t.reward as f64 } else { t.reward as f64 + 0.9 * max };
            assert!((y - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_action_rejected() {
        let mut agent = filled_agent(0);
        let t = Transition {
            state: input(0.0),
            action: 4,
            reward: 0,
            next: input(0.0),
            done: false,
        };
        assert_eq!(agent.remember(t), Err(AgentError::BadAction(4)));
    }
}
