//! DQN training: experience replay, a periodically synced target network and
//! linear ε/γ schedules over the first part of training.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depthcam::NoiseModel;
use crate::dqn::{
    select_action, td_target, write_checkpoint, Checkpoint, ForwardCache, InputBatch,
    QNetworkParams, NUM_ACTIONS,
};
use crate::env_rl::{EnvConfig, NavEnv, Observation, Status};
use crate::error::{Error, Result};
use crate::tensor_nn::{adam_step, huber_loss, AdamState};
use crate::world::{builtin, load_world, WorldSpec};

pub const SEED_ENV_VAR: &str = "PRIMNAV_SEED";
pub const EPISODE_PRESETS: [usize; 5] = [100, 200, 500, 1000, 2000];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_episodes: usize,
    pub max_steps_per_episode: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub schedule_fraction: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_interval: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Builtin names (`env1_open`, `env2`, `2`) or world file paths.
    pub worlds: Vec<String>,
    /// Gaussian depth noise during training; 0 disables it.
    pub noise_sigma: f64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_episodes: 2000,
            max_steps_per_episode: 120,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            gamma_start: 0.01,
            gamma_end: 0.99,
            schedule_fraction: 0.8,
            replay_capacity: 10_000,
            batch_size: 32,
            target_sync_interval: 200,
            learning_rate: 0.001,
            seed: 0,
            worlds: vec!["env1_open".into()],
            noise_sigma: 0.0,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.total_episodes == 0 {
            return fail("total_episodes must be at least 1".into());
        }
        if !(self.schedule_fraction > 0.0 && self.schedule_fraction <= 1.0) {
            return fail(format!(
                "schedule_fraction {} outside (0, 1]",
                self.schedule_fraction
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return fail(format!(
                "batch_size {} must be in 1..={} (replay_capacity)",
                self.batch_size, self.replay_capacity
            ));
        }
        if self.max_steps_per_episode == 0 || self.target_sync_interval == 0 {
            return fail("max_steps_per_episode and target_sync_interval must be positive".into());
        }
        if self.checkpoint_interval == 0 {
            return fail("checkpoint_interval must be positive".into());
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("gamma_start", self.gamma_start),
            ("gamma_end", self.gamma_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if self.worlds.is_empty() {
            return fail("at least one world is required".into());
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment. `worlds` takes a
    /// comma-separated list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected key = value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse {
                line: line_no,
                message: format!("{key}: `{value}` is not {what}"),
            };
            let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let real = || value.parse::<f64>().map_err(|_| bad("a number"));
            match key {
                "total_episodes" => config.total_episodes = int()?,
                "max_steps_per_episode" => config.max_steps_per_episode = int()?,
                "epsilon_start" => config.epsilon_start = real()?,
                "epsilon_end" => config.epsilon_end = real()?,
                "gamma_start" => config.gamma_start = real()?,
                "gamma_end" => config.gamma_end = real()?,
                "schedule_fraction" => config.schedule_fraction = real()?,
                "replay_capacity" => config.replay_capacity = int()?,
                "batch_size" => config.batch_size = int()?,
                "target_sync_interval" => config.target_sync_interval = int()?,
                "learning_rate" => config.learning_rate = real()?,
                "seed" => config.seed = value.parse().map_err(|_| bad("a seed"))?,
                "noise_sigma" => config.noise_sigma = real()?,
                "checkpoint_interval" => config.checkpoint_interval = int()?,
                "worlds" => {
                    config.worlds = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_episodes = {}", self.total_episodes);
        let _ = writeln!(out, "max_steps_per_episode = {}", self.max_steps_per_episode);
        let _ = writeln!(out, "epsilon_start = {}", self.epsilon_start);
        let _ = writeln!(out, "epsilon_end = {}", self.epsilon_end);
        let _ = writeln!(out, "gamma_start = {}", self.gamma_start);
        let _ = writeln!(out, "gamma_end = {}", self.gamma_end);
        let _ = writeln!(out, "schedule_fraction = {}", self.schedule_fraction);
        let _ = writeln!(out, "replay_capacity = {}", self.replay_capacity);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "target_sync_interval = {}", self.target_sync_interval);
        let _ = writeln!(out, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "worlds = {}", self.worlds.join(", "));
        let _ = writeln!(out, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(out, "checkpoint_interval = {}", self.checkpoint_interval);
        out
    }

    /// Applies `PRIMNAV_SEED` if set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Some(seed) = seed_override()? {
            self.seed = seed;
        }
        Ok(self)
    }
}

/// The seed from `PRIMNAV_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}=`{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV_VAR}: {e}"))),
    }
}

/// A builtin world by name, or a world file.
pub fn resolve_world(name_or_path: &str) -> Result<WorldSpec> {
    if let Some(w) = builtin(name_or_path) {
        return Ok(w);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "`{name_or_path}` is neither a builtin world nor an existing file"
        )));
    }
    load_world(&std::fs::read_to_string(path)?)
}

/// Exploration rate and discount for `episode` (0-based).
pub fn schedule(episode: usize, config: &TrainConfig) -> (f64, f64) {
    let ramp = config.schedule_fraction * config.total_episodes as f64;
    let e = episode as f64;
    if e >= ramp {
        return (config.epsilon_end, config.gamma_end);
    }
    let t = e / ramp;
    (
        config.epsilon_start + (config.epsilon_end - config.epsilon_start) * t,
        config.gamma_start + (config.gamma_end - config.gamma_start) * t,
    )
}

/// Trailing mean over `min(window, i + 1)` entries.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Argument("moving average window must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<Observation>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Arc<Observation>,
    /// No bootstrapping from `next_state`. Timeouts are not terminal here: the
    /// episode cap is not part of the state.
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        if self.capacity > 0 {
            self.items.push_back(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `batch` distinct indices, uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch > self.items.len() {
            return Err(Error::Argument(format!(
                "cannot sample {batch} from {} transitions",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub world: String,
    pub total_reward: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub status: Status,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
}

pub const LOG_HEADER: &str = "episode,total_reward,epsilon,gamma,status,steps";

impl TrainLog {
    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_reward).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.episode, e.total_reward, e.epsilon, e.gamma, e.status, e.steps
            );
        }
        out
    }
}

/// Rows of a training log CSV as `(episode, total_reward)`.
pub fn parse_log_csv(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == LOG_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{LOG_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (fields.len() == 6)
            .then(|| Some((fields[0].parse().ok()?, fields[1].parse().ok()?)))
            .flatten();
        rows.push(parsed.ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("malformed log row `{line}`"),
        })?);
    }
    Ok(rows)
}

/// Training state; [`train`] drives it to completion.
pub struct Trainer {
    config: TrainConfig,
    worlds: Vec<WorldSpec>,
    env_config: EnvConfig,
    online: QNetworkParams,
    target: QNetworkParams,
    adam: AdamState,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    gradient_steps: u64,
    log: TrainLog,
    checkpoint_dir: Option<PathBuf>,
    // reusable buffers
    act_cache: ForwardCache,
    online_cache: ForwardCache,
    target_cache: ForwardCache,
    states: InputBatch,
    next_states: InputBatch,
    grads: Vec<f64>,
    q_grad: Vec<f64>,
}

/// Offset mixed into the seed for the environment/exploration stream so it
/// differs from the initialization stream.
const ROLLOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let worlds = config
            .worlds
            .iter()
            .map(|w| resolve_world(w))
            .collect::<Result<Vec<_>>>()?;
        let env_config = EnvConfig {
            max_steps: config.max_steps_per_episode,
            noise: if config.noise_sigma > 0.0 {
                NoiseModel::Gaussian {
                    sigma: config.noise_sigma,
                }
            } else {
                NoiseModel::None
            },
            ..EnvConfig::default()
        };
        for w in &worlds {
            NavEnv::new(w, env_config.clone())?;
        }
        let online = QNetworkParams::build(config.seed);
        let n = online.len();
        Ok(Self {
            target: online.clone(),
            online,
            adam: AdamState::with_learning_rate(n, config.learning_rate),
            replay: ReplayBuffer::new(config.replay_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ ROLLOUT_STREAM),
            gradient_steps: 0,
            log: TrainLog::default(),
            checkpoint_dir: None,
            act_cache: ForwardCache::default(),
            online_cache: ForwardCache::default(),
            target_cache: ForwardCache::default(),
            states: InputBatch::with_capacity(config.batch_size),
            next_states: InputBatch::with_capacity(config.batch_size),
            grads: vec![0.0; n],
            q_grad: vec![0.0; config.batch_size * NUM_ACTIONS],
            worlds,
            env_config,
            config,
        })
    }

    /// Periodic and final checkpoints go to `dir`.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn online(&self) -> &QNetworkParams {
        &self.online
    }

    pub fn target(&self) -> &QNetworkParams {
        &self.target
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn episodes_done(&self) -> usize {
        self.log.episodes.len()
    }

    /// Runs the next episode and returns its log entry.
    pub fn run_episode(&mut self) -> Result<EpisodeLog> {
        let episode = self.log.episodes.len();
        if episode >= self.config.total_episodes {
            return Err(Error::Usage(format!(
                "all {} episodes already ran",
                self.config.total_episodes
            )));
        }
        let started = Instant::now();
        let (epsilon, gamma) = schedule(episode, &self.config);
        let world_idx = self.rng.gen_range(0..self.worlds.len());
        let worlds = std::mem::take(&mut self.worlds);
        let result = self.rollout(&worlds[world_idx], epsilon, gamma);
        self.worlds = worlds;
        let (status, steps, total_reward, mean_loss) = result?;

        let entry = EpisodeLog {
            episode,
            world: self.worlds[world_idx].name.clone(),
            total_reward,
            epsilon,
            gamma,
            status,
            steps,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.log.episodes.push(entry.clone());
        let done = episode + 1;
        if done.is_multiple_of(self.config.checkpoint_interval) {
            self.save_checkpoint(&format!("checkpoint_ep{done:05}.bin"))?;
        }
        Ok(entry)
    }

    fn rollout(
        &mut self,
        world: &WorldSpec,
        epsilon: f64,
        gamma: f64,
    ) -> Result<(Status, usize, f64, Option<f64>)> {
        let env = NavEnv::new(world, self.env_config.clone())?;
        let (mut state, obs) = env.reset(&mut self.rng);
        let mut obs = Arc::new(obs);
        let mut loss_sum = 0.0;
        let mut losses = 0usize;
        loop {
            let q = self.online.forward_single(&obs.depth, &obs.relative_position, &mut self.act_cache)?;
            let action = select_action(&q, epsilon, &mut self.rng);
            let outcome = env.step(&mut state, action, &mut self.rng)?;
            let next = Arc::new(outcome.observation);
            self.replay.push(Transition {
                state: Arc::clone(&obs),
                action,
                reward: outcome.reward,
                next_state: Arc::clone(&next),
                terminal: matches!(
                    state.status,
                    Status::Crashed | Status::Deviated | Status::GoalReached
                ),
            });
            if self.replay.len() >= self.config.batch_size {
                loss_sum += self.gradient_step(gamma)?;
                losses += 1;
            }
            obs = next;
            if outcome.terminal {
                break;
            }
        }
        let mean_loss = (losses > 0).then(|| loss_sum / losses as f64);
        Ok((state.status, state.step_index, state.cumulative_reward, mean_loss))
    }

    /// One Adam step on a replay batch; returns the mean Huber loss.
    fn gradient_step(&mut self, gamma: f64) -> Result<f64> {
        let batch = self.config.batch_size;
        let picks = self.replay.sample_indices(batch, &mut self.rng)?;
        self.states.clear();
        self.next_states.clear();
        for &i in &picks {
            let t = &self.replay.items[i];
            self.states.push(&t.state.depth, &t.state.relative_position);
            self.next_states.push(&t.next_state.depth, &t.next_state.relative_position);
        }
        let next_q = self.target.forward_batch(&self.next_states, &mut self.target_cache)?;
        let targets: Vec<f64> = picks
            .iter()
            .enumerate()
            .map(|(n, &i)| {
                let t = &self.replay.items[i];
                td_target(
                    t.reward,
                    &next_q[n * NUM_ACTIONS..(n + 1) * NUM_ACTIONS],
                    gamma,
                    t.terminal,
                )
            })
            .collect();

        self.online.forward_batch(&self.states, &mut self.online_cache)?;
        self.q_grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (n, &i) in picks.iter().enumerate() {
            let slot = n * NUM_ACTIONS + self.replay.items[i].action;
            let pred = self.online_cache.q_values()[slot];
            let (l, g) = match huber_loss(pred, targets[n]) {
                Ok(v) => v,
                Err(e) => return Err(self.abort(e)),
            };
            loss += l / batch as f64;
            self.q_grad[slot] = g / batch as f64;
        }
        if !loss.is_finite() {
            return Err(self.abort(Error::Training(format!("non-finite loss {loss}"))));
        }

        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.online
            .backward_batch(&mut self.online_cache, &self.q_grad, &mut self.grads);
        if let Err(e) = adam_step(self.online.values_mut(), &self.grads, &mut self.adam) {
            return Err(self.abort(e));
        }
        self.gradient_steps += 1;
        if self.gradient_steps.is_multiple_of(self.config.target_sync_interval as u64) {
            self.target.clone_from(&self.online);
        }
        Ok(loss)
    }

    /// Saves a diagnostic checkpoint and converts `cause` into a training error.
    fn abort(&self, cause: Error) -> Error {
        let episode = self.log.episodes.len();
        let saved = self
            .save_checkpoint(&format!("diagnostic_ep{episode:05}.bin"))
            .map(|p| {
                p.map(|p| format!("; diagnostic checkpoint {}", p.display()))
                    .unwrap_or_default()
            })
            .unwrap_or_else(|e| format!("; diagnostic checkpoint failed: {e}"));
        Error::Training(format!(
            "episode {episode}, gradient step {}: {cause}{saved}",
            self.gradient_steps
        ))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.online.clone(),
            adam: Some(self.adam.clone()),
            metadata: vec![
                ("seed".into(), self.config.seed.to_string()),
                ("episodes".into(), self.log.episodes.len().to_string()),
                ("gradient_steps".into(), self.gradient_steps.to_string()),
            ],
        }
    }

    fn save_checkpoint(&self, file: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(file);
        write_checkpoint(&path, &self.checkpoint())?;
        Ok(Some(path))
    }

    /// Runs the remaining episodes, then writes `final.bin` when a checkpoint
    /// directory is set.
    pub fn train_to_end(mut self) -> Result<(QNetworkParams, TrainLog)> {
        while self.log.episodes.len() < self.config.total_episodes {
            self.run_episode()?;
        }
        self.save_checkpoint("final.bin")?;
        Ok((self.online, self.log))
    }
}

pub fn train(config: &TrainConfig) -> Result<(QNetworkParams, TrainLog)> {
    Trainer::new(config.clone())?.train_to_end()
}
