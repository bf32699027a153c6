//! Depth-image deep Q-learning planner for a simulated quadrotor.
//!
//! The agent observes a 32×32 depth image plus the body-frame offset to a
//! setpoint that moves along a straight rough path, and picks one of 18 cubic
//! Bézier motion primitives per step. Modules, bottom-up:
//!
//! - [`tensor_nn`]: conv/dense layers, Huber loss, Adam, gradient checking.
//! - [`dqn`]: the two-lane Q-network, action selection, TD targets, checkpoints.
//! - [`primitives`]: Bernstein/Bézier math and the motion-primitive action set.
//! - [`world`]: obstacle worlds, collision and ray queries, builtin environments.
//! - [`depthcam`]: pinhole depth rendering.
//! - [`env_rl`]: the MDP (observation, primitive execution, reward, termination).
//! - [`trainer`]: replay-buffer DQN training with linear ε/γ schedules.
//! - [`evalcli`]: evaluation harness and the `primnav` command line.

pub mod depthcam;
pub mod dqn;
pub mod env_rl;
pub mod error;
pub mod evalcli;
pub mod primitives;
pub mod tensor_nn;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};

/// World-frame vector in meters: x forward along the default path, y left, z up.
pub type Vec3 = nalgebra::Vector3<f64>;
