//! Deterministic 2D driving world: geometry, vehicle dynamics, waypoint
//! tracking, background-agent scripts and scenario files.

pub mod action;
pub mod geometry;
pub mod idm;
pub mod pid;
pub mod scenario;
pub mod scene;
pub mod vehicle;

pub use action::{DrivingAction, ACTION_DIM, N_PATH, N_SPEED, PATH_SPACING, SPEED_DT};
pub use geometry::{normalize_angle, Obb, Pose2D};
pub use idm::IdmParams;
pub use pid::{pid_actuate, PidConfig, PidState};
pub use scenario::{Family, ScenarioConfig};
pub use scene::{step_world, Agent, Behavior, EventKind, EventTrigger, Lane, Route, Scene, ScriptedEvent, WORLD_DT};
pub use vehicle::{bicycle_step, obb_overlap, ControlSignal, VehicleParams, VehicleState};

use serde::{Deserialize, Serialize};

/// Every tunable constant of the world and its controllers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub vehicle: VehicleParams,
    pub pid: PidConfig,
    pub idm: IdmParams,
}
