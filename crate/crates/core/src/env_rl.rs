//! Navigation MDP: one motion primitive per step, a setpoint moving along the
//! rough path, and the distance-based reward with deviation and collision
//! punishments.

use std::fmt;

use rand::Rng;

use crate::depthcam::{add_noise, render, CameraIntrinsics, DepthImage, NoiseModel};
use crate::error::{Error, Result};
use crate::primitives::{
    action_set, primitive_to_curve, sample_curve, world_to_body, MotionPrimitive,
};
use crate::world::{
    collision_check, path_deviation, path_progress, sweep_collision, RoughPath, WorldSpec,
    VEHICLE_RADIUS,
};
use crate::Vec3;

/// Constants of the reward function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    /// Reward bound reached when the distance grows by at least `delta_d_u`.
    pub r_lower: f64,
    /// Reward bound reached when the distance shrinks by at least `-delta_d_l`.
    pub r_upper: f64,
    pub delta_d_lower: f64,
    pub delta_d_upper: f64,
    pub deviation_punishment: f64,
    pub collision_punishment: f64,
    pub deviation_limit: f64,
    /// Lower clamp on the distance divisor, keeps rewards bounded near the setpoint.
    pub d_min_clamp: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            r_lower: 0.0,
            r_upper: 0.5,
            delta_d_lower: -1.0,
            delta_d_upper: 1.0,
            deviation_punishment: -0.5,
            collision_punishment: -1.0,
            deviation_limit: 5.0,
            d_min_clamp: 1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.r_lower < self.r_upper
            && self.delta_d_lower < self.delta_d_upper
            && self.collision_punishment <= self.deviation_punishment
            && self.deviation_punishment < 0.0
            && self.d_min_clamp > 0.0
            && self.deviation_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("inconsistent reward parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardEvent {
    None,
    Deviation,
    Collision,
}

/// Reward for a step whose distance to the setpoint changed by `delta_d` and
/// ended at `d_t`.
pub fn reward_fn(params: &RewardParams, delta_d: f64, d_t: f64, event: RewardEvent) -> f64 {
    match event {
        RewardEvent::Collision => params.collision_punishment,
        RewardEvent::Deviation => params.deviation_punishment,
        RewardEvent::None => {
            let den = d_t.max(params.d_min_clamp);
            let (lo, hi) = (params.delta_d_lower, params.delta_d_upper);
            if delta_d > hi {
                params.r_lower / den
            } else if delta_d < lo {
                params.r_upper / den
            } else {
                let ramp = (hi - delta_d) / (hi - lo);
                (params.r_lower + (params.r_upper - params.r_lower) * ramp) / den
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    GoalReached,
    Crashed,
    Deviated,
    TimedOut,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::GoalReached => "goal_reached",
            Status::Crashed => "crashed",
            Status::Deviated => "deviated",
            Status::TimedOut => "timed_out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Status::Running,
            Status::GoalReached,
            Status::Crashed,
            Status::Deviated,
            Status::TimedOut,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
    }

    pub fn is_terminal(&self) -> bool {
        *self != Status::Running
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub vehicle_position: Vec3,
    pub setpoint_position: Vec3,
    /// Distance the setpoint has travelled along the path.
    pub setpoint_progress: f64,
    pub step_index: usize,
    pub cumulative_reward: f64,
    pub status: Status,
    /// `|setpoint − vehicle|` at the end of the previous step.
    pub last_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub depth: DepthImage,
    /// Setpoint minus vehicle, in the body frame.
    pub relative_position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub max_steps: usize,
    pub vehicle_radius: f64,
    /// Waypoints checked along each primitive, endpoints included.
    pub sweep_samples: usize,
    pub setpoint_speed: f64,
    pub step_duration: f64,
    pub reward: RewardParams,
    pub camera: CameraIntrinsics,
    pub noise: NoiseModel,
    pub actions: Vec<MotionPrimitive>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 120,
            vehicle_radius: VEHICLE_RADIUS,
            sweep_samples: 11,
            setpoint_speed: 1.0,
            step_duration: 1.0,
            reward: RewardParams::default(),
            camera: CameraIntrinsics::default(),
            noise: NoiseModel::None,
            actions: action_set(1.0).expect("unit scale is valid"),
        }
    }
}

/// One world plus the settings needed to run episodes in it.
#[derive(Debug, Clone)]
pub struct NavEnv<'w> {
    world: &'w WorldSpec,
    path: RoughPath,
    yaw: f64,
    config: EnvConfig,
}

impl<'w> NavEnv<'w> {
    pub fn new(world: &'w WorldSpec, config: EnvConfig) -> Result<Self> {
        world.validate()?;
        config.reward.validate()?;
        if config.max_steps == 0 || config.sweep_samples < 2 || !(config.vehicle_radius > 0.0) {
            return Err(Error::Validation(format!(
                "bad environment settings: max_steps {}, sweep_samples {}, radius {}",
                config.max_steps, config.sweep_samples, config.vehicle_radius
            )));
        }
        if !config.camera.is_valid() {
            return Err(Error::Validation(format!("bad camera {:?}", config.camera)));
        }
        if config.actions.is_empty() {
            return Err(Error::Validation("empty action set".into()));
        }
        let path = world.path()?;
        if collision_check(world, &path.start, config.vehicle_radius) {
            return Err(Error::Validation(format!(
                "start of `{}` is in collision",
                world.name
            )));
        }
        Ok(Self {
            world,
            yaw: path.yaw(),
            path,
            config,
        })
    }

    pub fn world(&self) -> &WorldSpec {
        self.world
    }

    pub fn path(&self) -> &RoughPath {
        &self.path
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn num_actions(&self) -> usize {
        self.config.actions.len()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (SimState, Observation) {
        let state = SimState {
            vehicle_position: self.path.start,
            setpoint_position: self.path.start,
            setpoint_progress: 0.0,
            step_index: 0,
            cumulative_reward: 0.0,
            status: Status::Running,
            last_distance: 0.0,
        };
        let obs = self.make_observation(&state, rng);
        (state, obs)
    }

    /// Depth at the vehicle pose plus the body-frame setpoint offset.
    pub fn make_observation<R: Rng + ?Sized>(&self, state: &SimState, rng: &mut R) -> Observation {
        let clean = render(self.world, &state.vehicle_position, self.yaw, &self.config.camera);
        let depth = match self.config.noise {
            NoiseModel::None => clean,
            model => add_noise(&clean, model, rng),
        };
        Observation {
            depth,
            relative_position: world_to_body(
                self.yaw,
                &(state.setpoint_position - state.vehicle_position),
            ),
        }
    }

    /// Executes primitive `action` and advances the setpoint by one step.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut SimState,
        action: usize,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if state.status.is_terminal() {
            return Err(Error::Usage(format!(
                "step called on a finished episode ({})",
                state.status
            )));
        }
        let prim = self.config.actions.get(action).ok_or_else(|| {
            Error::InvalidInput(format!(
                "action {action} outside 0..{}",
                self.config.actions.len()
            ))
        })?;

        let curve = primitive_to_curve(state.vehicle_position, self.yaw, prim);
        let waypoints = sample_curve(&curve, self.config.sweep_samples)?;
        let hit = sweep_collision(self.world, &waypoints, self.config.vehicle_radius);
        state.vehicle_position = match hit {
            Some(i) => waypoints[i.saturating_sub(1)],
            None => curve.end(),
        };

        state.setpoint_progress = (state.setpoint_progress
            + self.config.setpoint_speed * self.config.step_duration)
            .min(self.path.length);
        state.setpoint_position = self.path.point_at(state.setpoint_progress);

        let d_t = (state.setpoint_position - state.vehicle_position).norm();
        let delta_d = d_t - state.last_distance;
        state.last_distance = d_t;

        let params = &self.config.reward;
        let (reward, status) = if hit.is_some() {
            (
                reward_fn(params, delta_d, d_t, RewardEvent::Collision),
                Status::Crashed,
            )
        } else if path_deviation(&self.path, &state.vehicle_position) > params.deviation_limit {
            (
                reward_fn(params, delta_d, d_t, RewardEvent::Deviation),
                Status::Deviated,
            )
        } else {
            let r = reward_fn(params, delta_d, d_t, RewardEvent::None);
            let status = if path_progress(&self.path, &state.vehicle_position) >= self.path.length {
                Status::GoalReached
            } else if state.step_index + 1 >= self.config.max_steps {
                Status::TimedOut
            } else {
                Status::Running
            };
            (r, status)
        };

        state.step_index += 1;
        state.cumulative_reward += reward;
        state.status = status;
        Ok(StepOutcome {
            observation: self.make_observation(state, rng),
            reward,
            terminal: status.is_terminal(),
        })
    }
}

/// One row of an episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub position: Vec3,
    pub action: usize,
    pub reward: f64,
    pub status: Status,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,x,y,z,action,reward,status\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.position.x, r.position.y, r.position.z, r.action, r.reward, r.status
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{builtin, Aabb, Obstacle};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FORWARD: usize = 0;
    const HOVER: usize = 9;
    const LEFT: usize = 10;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    /// Direct transcription of the piecewise reward with the divisor clamp.
    fn reward_oracle(delta_d: f64, d_t: f64) -> f64 {
        let d = if d_t < 1.0 { 1.0 } else { d_t };
        if 1.0 < delta_d {
            0.0 / d
        } else if delta_d < -1.0 {
            0.5 / d
        } else {
            (0.0 + (0.5 - 0.0) * (1.0 - delta_d) / (1.0 - (-1.0))) / d
        }
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert_eq!(reward_fn(&p, 0.3, 2.0, RewardEvent::Collision), -1.0);
        assert_eq!(reward_fn(&p, 0.3, 2.0, RewardEvent::Deviation), -0.5);
        assert_eq!(reward_fn(&p, 0.0, 2.0, RewardEvent::None), 0.125);
        assert_eq!(reward_fn(&p, -1.5, 0.2, RewardEvent::None), 0.5);
        assert_eq!(reward_fn(&p, 2.0, 4.0, RewardEvent::None), 0.0);
    }

    #[test]
    fn reward_matches_oracle_and_is_continuous() {
        let p = RewardParams::default();
        for i in 0..=120 {
            let dd = -3.0 + 0.05 * i as f64;
            for d_t in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
                let got = reward_fn(&p, dd, d_t, RewardEvent::None);
                assert!((got - reward_oracle(dd, d_t)).abs() < 1e-12);
                assert!((0.0..=0.5).contains(&got));
            }
        }
        for b in [-1.0, 1.0] {
            let lo = reward_fn(&p, b - 1e-9, 1.0, RewardEvent::None);
            let hi = reward_fn(&p, b + 1e-9, 1.0, RewardEvent::None);
            assert!((lo - hi).abs() < 1e-6);
        }
    }

    #[test]
    fn reward_params_validation() {
        assert!(RewardParams::default().validate().is_ok());
        let bad = RewardParams {
            d_min_clamp: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reset_in_open_world() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (state, obs) = env.reset(&mut rng());
        assert_eq!(obs.relative_position, Vec3::zeros());
        assert_eq!(state.step_index, 0);
        assert_eq!(state.cumulative_reward, 0.0);
        assert_eq!(state.status, Status::Running);
        assert_eq!(
            obs.depth,
            render(&w, &w.path_start, 0.0, &CameraIntrinsics::default())
        );
    }

    #[test]
    fn start_in_collision_is_rejected() {
        let mut w = builtin("env1").unwrap();
        w.obstacles.push(Obstacle::Sphere {
            center: w.path_start,
            radius: 1.0,
        });
        assert!(matches!(
            NavEnv::new(&w, EnvConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn hover_from_start() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        let out = env.step(&mut state, HOVER, &mut rng()).unwrap();
        // Setpoint moves 1 m: d_0 = 0, d_1 = 1, so Δd = +1 sits on the upper
        // saturation bound and the reward is R_l / 1 = 0.
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminal);
        assert_eq!(state.last_distance, 1.0);
        assert_eq!(out.observation.relative_position, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn forward_tracks_setpoint() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        let out = env.step(&mut state, FORWARD, &mut rng()).unwrap();
        assert_eq!(out.reward, 0.25);
        assert_eq!(state.vehicle_position, Vec3::new(1.0, 0.0, 6.0));
    }

    #[test]
    fn crash_into_wall() {
        let mut w = builtin("env1").unwrap();
        w.obstacles.push(Obstacle::Box(Aabb::new(
            Vec3::new(1.0, -5.0, 0.0),
            Vec3::new(2.0, 5.0, 12.0),
        )));
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        let out = env.step(&mut state, FORWARD, &mut rng()).unwrap();
        assert_eq!(out.reward, -1.0);
        assert!(out.terminal);
        assert_eq!(state.status, Status::Crashed);
        assert!(!collision_check(&w, &state.vehicle_position, VEHICLE_RADIUS));
        assert!(state.vehicle_position.x < 1.0 - VEHICLE_RADIUS);
        assert!(matches!(
            env.step(&mut state, FORWARD, &mut rng()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn excessive_deviation() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        state.vehicle_position = Vec3::new(0.0, 4.8, 6.0);
        state.last_distance = 4.8;
        let out = env.step(&mut state, LEFT, &mut rng()).unwrap();
        assert_eq!(out.reward, -0.5);
        assert_eq!(state.status, Status::Deviated);
        assert!(out.terminal);
    }

    #[test]
    fn forward_policy_reaches_goal_in_sixty_steps() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        let mut steps = 0;
        while !state.status.is_terminal() {
            env.step(&mut state, FORWARD, &mut rng()).unwrap();
            steps += 1;
        }
        assert_eq!(state.status, Status::GoalReached);
        assert_eq!(steps, 60);
        assert!((state.cumulative_reward - 15.0).abs() < 1e-9);
    }

    #[test]
    fn hover_times_out() {
        let w = builtin("env1").unwrap();
        let config = EnvConfig {
            max_steps: 3,
            ..Default::default()
        };
        let env = NavEnv::new(&w, config).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        for _ in 0..3 {
            env.step(&mut state, HOVER, &mut rng()).unwrap();
        }
        assert_eq!(state.status, Status::TimedOut);
    }

    #[test]
    fn observation_frames() {
        let w = builtin("env1").unwrap();
        let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
        let (mut state, _) = env.reset(&mut rng());
        state.setpoint_position = Vec3::new(3.0, 0.0, 6.0);
        assert_eq!(
            env.make_observation(&state, &mut rng()).relative_position,
            Vec3::new(3.0, 0.0, 0.0)
        );
        state.vehicle_position = Vec3::new(3.0, 2.0, 6.0);
        assert_eq!(
            env.make_observation(&state, &mut rng()).relative_position.y,
            -2.0
        );

        let mut reversed = w.clone();
        std::mem::swap(&mut reversed.path_start, &mut reversed.path_end);
        let env = NavEnv::new(&reversed, EnvConfig::default()).unwrap();
        let state = SimState {
            vehicle_position: Vec3::new(57.0, 0.0, 6.0),
            setpoint_position: Vec3::new(60.0, 0.0, 6.0),
            setpoint_progress: 0.0,
            step_index: 0,
            cumulative_reward: 0.0,
            status: Status::Running,
            last_distance: 0.0,
        };
        let rel = env.make_observation(&state, &mut rng()).relative_position;
        assert!((rel - Vec3::new(-3.0, 0.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn trace_csv() {
        let rows = vec![TraceRow {
            step: 1,
            position: Vec3::new(1.0, 0.0, 6.0),
            action: 0,
            reward: 0.25,
            status: Status::Running,
        }];
        assert_eq!(
            trace_to_csv(&rows),
            "step,x,y,z,action,reward,status\n1,1,0,6,0,0.25,running\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_rollouts_respect_invariants(
            env_index in 1usize..=10,
            actions in prop::collection::vec(0usize..18, 1..80),
        ) {
            let w = builtin(&env_index.to_string()).unwrap();
            let env = NavEnv::new(&w, EnvConfig::default()).unwrap();
            let mut r = rng();
            let (mut state, _) = env.reset(&mut r);
            for a in actions {
                if state.status.is_terminal() {
                    break;
                }
                let out = env.step(&mut state, a, &mut r).unwrap();
                prop_assert!(out.reward.is_finite());
                prop_assert!(
                    !collision_check(&w, &state.vehicle_position, VEHICLE_RADIUS)
                        || state.status == Status::Crashed
                );
                let path = env.path();
                let along = (state.setpoint_position - path.start).dot(&path.direction);
                prop_assert!(path_deviation(path, &state.setpoint_position) < 1e-9);
                prop_assert!((-1e-9..=path.length + 1e-9).contains(&along));
                if out.reward >= 0.0 {
                    prop_assert!(out.reward <= 0.5);
                }
            }
            prop_assert!(state.cumulative_reward <= 0.5 * state.step_index as f64 + 1e-9);
        }
    }
}
