//! Evaluation protocol, result tables, reward-curve plots and the `primnav`
//! command line.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depthcam::{add_noise, render, NoiseModel};
use crate::dqn::{argmax, read_checkpoint, ForwardCache, QNetworkParams};
use crate::env_rl::{EnvConfig, NavEnv, Observation, Status};
use crate::error::{Error, Result};
use crate::trainer::{
    moving_average, parse_log_csv, resolve_world, seed_override, TrainConfig, Trainer,
};
use crate::world::{builtin_envs, path_progress, WorldSpec};
use crate::Vec3;

pub const RESULTS_HEADER: &str = "env,trial,navigation_distance_m,navigation_time_s,crash,total_reward";

/// One evaluation episode, in the units of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub env: String,
    pub trial: usize,
    pub navigation_distance: f64,
    pub navigation_time: f64,
    pub crash: bool,
    pub total_reward: f64,
    pub status: Status,
    pub steps: usize,
}

impl EpisodeResult {
    /// Checks the row against the world's path length and the step cap.
    pub fn validate(&self, path_length: f64, max_time: f64) -> Result<()> {
        let ok = (0.0..=path_length).contains(&self.navigation_distance)
            && (0.0..=max_time).contains(&self.navigation_time)
            && self.total_reward.is_finite()
            && self.crash == (self.status == Status::Crashed)
            && self.status.is_terminal();
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("inconsistent result {self:?}")))
        }
    }
}

/// Chooses a primitive for each observation.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<usize>;
}

/// Argmax of the Q-network (ε = 0).
pub struct GreedyPolicy<'a> {
    params: &'a QNetworkParams,
    cache: ForwardCache,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(params: &'a QNetworkParams) -> Self {
        Self {
            params,
            cache: ForwardCache::default(),
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<usize> {
        let q = self
            .params
            .forward_single(&obs.depth, &obs.relative_position, &mut self.cache)?;
        Ok(argmax(&q))
    }
}

/// Flies the same primitive every step.
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn act(&mut self, _obs: &Observation) -> Result<usize> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    pub base_seed: u64,
    pub max_steps: usize,
    /// Per-pixel Gaussian depth noise; the only source of trial-to-trial
    /// variation for a deterministic policy.
    pub noise_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            base_seed: 0,
            max_steps: 120,
            noise_sigma: 0.02,
        }
    }
}

impl EvalConfig {
    fn env_config(&self) -> EnvConfig {
        EnvConfig {
            max_steps: self.max_steps,
            noise: if self.noise_sigma > 0.0 {
                NoiseModel::Gaussian {
                    sigma: self.noise_sigma,
                }
            } else {
                NoiseModel::None
            },
            ..EnvConfig::default()
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one trial, from the base seed, world name and trial index.
pub fn trial_seed(base_seed: u64, env: &str, trial: usize) -> u64 {
    let name = env
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    mix(mix(base_seed ^ name) ^ trial as u64)
}

/// Runs `config.trials` episodes of `policy` in `world`.
pub fn evaluate(
    policy: &mut dyn Policy,
    world: &WorldSpec,
    config: &EvalConfig,
) -> Result<Vec<EpisodeResult>> {
    if config.trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::Argument(format!("bad noise sigma {}", config.noise_sigma)));
    }
    let env = NavEnv::new(world, config.env_config())?;
    let mut results = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(config.base_seed, &world.name, trial));
        let (mut state, mut obs) = env.reset(&mut rng);
        while !state.status.is_terminal() {
            let action = policy.act(&obs)?;
            obs = env.step(&mut state, action, &mut rng)?.observation;
        }
        let length = env.path().length;
        results.push(EpisodeResult {
            env: world.name.clone(),
            trial,
            navigation_distance: path_progress(env.path(), &state.vehicle_position).clamp(0.0, length),
            navigation_time: state.step_index as f64 * env.config().step_duration,
            crash: state.status == Status::Crashed,
            total_reward: state.cumulative_reward,
            status: state.status,
            steps: state.step_index,
        });
    }
    Ok(results)
}

pub fn results_to_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{:.3},{},{},{:.4}",
            r.env,
            r.trial,
            r.navigation_distance,
            r.navigation_time,
            if r.crash { "Y" } else { "N" },
            r.total_reward
        );
    }
    out
}

/// One results row as read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub env: String,
    pub trial: usize,
    pub navigation_distance: f64,
    pub navigation_time: f64,
    pub crash: bool,
    pub total_reward: f64,
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RESULTS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{RESULTS_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let row = (f.len() == 6)
                .then(|| {
                    Some(ResultRow {
                        env: f[0].to_string(),
                        trial: f[1].parse().ok()?,
                        navigation_distance: f[2].parse().ok()?,
                        navigation_time: f[3].parse().ok()?,
                        crash: match f[4] {
                            "Y" => true,
                            "N" => false,
                            _ => return None,
                        },
                        total_reward: f[5].parse().ok()?,
                    })
                })
                .flatten();
            row.ok_or_else(|| Error::Parse {
                line: i + 2,
                message: format!("malformed result row `{line}`"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSummary {
    pub env: String,
    pub trials: usize,
    pub success_rate: f64,
    pub crash_rate: f64,
    pub timeout_rate: f64,
    pub deviation_rate: f64,
    pub mean_distance: f64,
    pub mean_time: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub per_env: Vec<EnvSummary>,
    /// All trials pooled; `1 - crash_rate` is the collision-free percentage.
    pub overall: EnvSummary,
}

fn summarize_group(env: &str, rows: &[&EpisodeResult]) -> EnvSummary {
    let n = rows.len() as f64;
    let rate = |s: Status| rows.iter().filter(|r| r.status == s).count() as f64 / n;
    let mean = |f: fn(&EpisodeResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    EnvSummary {
        env: env.to_string(),
        trials: rows.len(),
        success_rate: rate(Status::GoalReached),
        crash_rate: rate(Status::Crashed),
        timeout_rate: rate(Status::TimedOut),
        deviation_rate: rate(Status::Deviated),
        mean_distance: mean(|r| r.navigation_distance),
        mean_time: mean(|r| r.navigation_time),
        mean_reward: mean(|r| r.total_reward),
    }
}

/// Per-environment rates and means, in first-seen environment order.
pub fn summarize(results: &[EpisodeResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::Argument("nothing to summarize".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.env.as_str()) {
            order.push(&r.env);
        }
    }
    let per_env = order
        .iter()
        .map(|env| {
            let rows: Vec<&EpisodeResult> = results.iter().filter(|r| r.env == *env).collect();
            summarize_group(env, &rows)
        })
        .collect();
    let all: Vec<&EpisodeResult> = results.iter().collect();
    Ok(Summary {
        per_env,
        overall: summarize_group("all", &all),
    })
}

pub fn format_summary(summary: &Summary) -> String {
    let mut out = String::from(
        "env                      trials success crash timeout deviate  dist_m  time_s  reward\n",
    );
    for s in summary.per_env.iter().chain(std::iter::once(&summary.overall)) {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>7.2} {:>5.2} {:>7.2} {:>7.2} {:>7.2} {:>7.1} {:>7.3}",
            s.env,
            s.trials,
            s.success_rate,
            s.crash_rate,
            s.timeout_rate,
            s.deviation_rate,
            s.mean_distance,
            s.mean_time,
            s.mean_reward
        );
    }
    out
}

/// Reward curve: raw per-episode rewards as dots and their moving average as
/// a polyline with one vertex per episode.
pub fn curves_svg(rewards: &[f64], window: usize) -> Result<String> {
    if rewards.is_empty() {
        return Err(Error::Argument("reward log is empty".into()));
    }
    let smooth = moving_average(rewards, window)?;
    let (w, h, pad) = (800.0, 400.0, 40.0);
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = rewards.len();
    let x = |i: usize| pad + (w - 2.0 * pad) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>",
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">episode</text>\n<text x=\"4\" y=\"{}\" font-size=\"12\">reward</text>",
        w / 2.0,
        h - 8.0,
        pad - 8.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.1}\" font-size=\"10\">{hi:.2}</text>\n<text x=\"4\" y=\"{:.1}\" font-size=\"10\">{lo:.2}</text>",
        y(hi),
        y(lo)
    );
    let _ = writeln!(svg, "<g fill=\"#9bb\">");
    for (i, v) in rewards.iter().enumerate() {
        let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\"/>", x(i), y(*v));
    }
    let _ = writeln!(svg, "</g>");
    let points: Vec<String> = smooth
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Parses `"x y z yaw"`.
pub fn parse_pose(text: &str) -> Result<(Vec3, f64)> {
    let v: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("pose `{text}` is not four numbers")))?;
    match v.as_slice() {
        [x, y, z, yaw] if v.iter().all(|c| c.is_finite()) => Ok((Vec3::new(*x, *y, *z), *yaw)),
        _ => Err(Error::Argument(format!("pose `{text}` needs exactly `x y z yaw`"))),
    }
}

#[derive(Parser, Debug)]
#[command(name = "primnav", version, about = "Motion-primitive DQN navigation: train, evaluate, render")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a Q-network from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or an untrained network) and write a results CSV.
    Eval(EvalArgs),
    /// Render the depth image seen from a pose to a PGM file.
    RenderWorld {
        #[command(flatten)]
        world: WorldArg,
        /// "x y z yaw" (meters, radians).
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plot a training log's reward curve to SVG.
    Curves {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 20)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the builtin environments as world files.
    ExportWorlds {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct WorldArg {
    /// World file.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Builtin environment name, number, or `all`.
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to load; without one an untrained network seeded with the
    /// base seed is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    world: WorldArg,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    /// Base seed for per-trial noise; defaults to PRIMNAV_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 120)]
    max_steps: usize,
    /// Fly this primitive every step instead of querying the network.
    #[arg(long)]
    constant_action: Option<usize>,
}

impl WorldArg {
    fn resolve(&self) -> Result<Vec<WorldSpec>> {
        match (&self.world, &self.builtin) {
            (Some(path), _) => {
                if !path.exists() {
                    return Err(Error::Usage(format!("world file {} not found", path.display())));
                }
                Ok(vec![resolve_world(&path.to_string_lossy())?])
            }
            (None, Some(name)) if name == "all" => Ok(builtin_envs()),
            (None, Some(name)) => crate::world::builtin(name)
                .map(|w| vec![w])
                .ok_or_else(|| Error::Usage(format!("no builtin environment `{name}`"))),
            (None, None) => Err(Error::Usage("one of --world or --builtin is required".into())),
        }
    }
}

/// Exit status for an error: 2 for usage problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Argument(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::InvalidInput(_) => "invalid_input",
        Error::Argument(_) => "argument",
        Error::Parse { .. } => "parse",
        Error::Validation(_) => "validation",
        Error::Checkpoint(_) => "checkpoint",
        Error::Training(_) => "training",
        Error::Usage(_) => "usage",
        Error::Io(_) => "io",
    }
}

fn one_line(kind: &str, message: &str) -> String {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error kind={kind} message={flat:?}")
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("file {} not found", path.display())))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<O: Write, E: Write>(argv: &[String], out: &mut O, err: &mut E) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", one_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", one_line(error_kind(&e), &e.to_string()));
            exit_code(&e)
        }
    }
}

/// Entry point for the binary.
pub fn cli_main() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    run(&argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn dispatch<O: Write>(command: Command, out: &mut O) -> Result<()> {
    match command {
        Command::Train { config, out: dir } => {
            require_file(&config)?;
            let cfg = TrainConfig::parse(&std::fs::read_to_string(&config)?)?.with_env_overrides()?;
            writeln!(out, "# resolved config\n{}", cfg.to_text().trim_end())?;
            writeln!(out, "seed = {}", cfg.seed)?;
            std::fs::create_dir_all(&dir)?;
            write_file(&dir.join("config.txt"), cfg.to_text())?;
            let total = cfg.total_episodes;
            let mut trainer = Trainer::new(cfg)?.with_checkpoint_dir(&dir);
            while trainer.episodes_done() < total {
                let e = trainer.run_episode()?;
                if (e.episode + 1) % 10 == 0 || e.episode + 1 == total {
                    writeln!(
                        out,
                        "episode {:>5}  reward {:>8.3}  eps {:.3}  gamma {:.3}  {:<12} steps {:>3}  {}",
                        e.episode, e.total_reward, e.epsilon, e.gamma, e.status, e.steps, e.world
                    )?;
                }
            }
            write_file(&dir.join("train_log.csv"), trainer.log().to_csv())?;
            trainer.train_to_end()?;
            writeln!(out, "wrote {}", dir.display())?;
            Ok(())
        }
        Command::Eval(args) => {
            let worlds = args.world.resolve()?;
            let seed = match args.seed {
                Some(s) => s,
                None => seed_override()?.unwrap_or(0),
            };
            let config = EvalConfig {
                trials: args.trials,
                base_seed: seed,
                max_steps: args.max_steps,
                noise_sigma: args.noise_sigma,
            };
            let params = match &args.checkpoint {
                Some(path) => {
                    require_file(path)?;
                    read_checkpoint(path)?.params
                }
                None => QNetworkParams::build(seed),
            };
            writeln!(
                out,
                "# resolved config\ncheckpoint = {}\nworlds = {}\ntrials = {}\nmax_steps = {}\nnoise_sigma = {}\npolicy = {}",
                args.checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none (untrained network)".into()),
                worlds.iter().map(|w| w.name.as_str()).collect::<Vec<_>>().join(", "),
                config.trials,
                config.max_steps,
                config.noise_sigma,
                args.constant_action
                    .map(|a| format!("constant {a}"))
                    .unwrap_or_else(|| "greedy".into()),
            )?;
            writeln!(out, "seed = {seed}")?;
            let mut results = Vec::new();
            for world in &worlds {
                let rows = match args.constant_action {
                    Some(a) => evaluate(&mut ConstantPolicy(a), world, &config)?,
                    None => evaluate(&mut GreedyPolicy::new(&params), world, &config)?,
                };
                results.extend(rows);
            }
            write_file(&args.out, results_to_csv(&results))?;
            write!(out, "{}", format_summary(&summarize(&results)?))?;
            writeln!(out, "wrote {} rows to {}", results.len(), args.out.display())?;
            Ok(())
        }
        Command::RenderWorld {
            world,
            pose,
            out: path,
            noise_sigma,
            seed,
        } => {
            let worlds = world.resolve()?;
            let [world] = worlds.as_slice() else {
                return Err(Error::Usage("render-world needs a single world".into()));
            };
            let (position, yaw) = parse_pose(&pose)?;
            if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                return Err(Error::Argument(format!("bad noise sigma {noise_sigma}")));
            }
            let camera = EnvConfig::default().camera;
            writeln!(
                out,
                "# resolved config\nworld = {}\npose = {} {} {} {}\nnoise_sigma = {noise_sigma}\nseed = {seed}",
                world.name, position.x, position.y, position.z, yaw
            )?;
            let mut image = render(world, &position, yaw, &camera);
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                image = add_noise(&image, NoiseModel::Gaussian { sigma: noise_sigma }, &mut rng);
            }
            write_file(&path, image.to_pgm())?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(())
        }
        Command::Curves { log, window, out: path } => {
            require_file(&log)?;
            let rows = parse_log_csv(&std::fs::read_to_string(&log)?)?;
            let rewards: Vec<f64> = rows.iter().map(|r| r.1).collect();
            writeln!(
                out,
                "# resolved config\nlog = {}\nwindow = {window}\nepisodes = {}\nseed = none",
                log.display(),
                rewards.len()
            )?;
            write_file(&path, curves_svg(&rewards, window)?)?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(())
        }
        Command::ExportWorlds { out: dir } => {
            writeln!(out, "# resolved config\nout = {}\nseed = none", dir.display())?;
            std::fs::create_dir_all(&dir)?;
            for w in builtin_envs() {
                let path = dir.join(format!("{}.world", w.name));
                write_file(&path, w.to_text())?;
                writeln!(out, "wrote {}", path.display())?;
            }
            Ok(())
        }
    }
}
