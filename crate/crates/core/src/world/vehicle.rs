use serde::{Deserialize, Serialize};

use super::geometry::{normalize_angle, Obb, Pose2D};
use crate::codec::{Reader, Wire};
use crate::error::{Error, Result};

pub const DEFAULT_LENGTH: f64 = 4.5;
pub const DEFAULT_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
}

impl VehicleState {
    pub fn new(pose: Pose2D, speed: f64) -> Self {
        VehicleState {
            pose,
            speed,
            length: DEFAULT_LENGTH,
            width: DEFAULT_WIDTH,
            wheelbase: VehicleParams::default().wheelbase,
        }
    }

    pub fn with_size(mut self, length: f64, width: f64) -> Self {
        self.length = length;
        self.width = width;
        self.wheelbase = self.wheelbase.min(length);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.pose.is_finite()
            && [self.speed, self.length, self.width, self.wheelbase]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite vehicle state".into()));
        }
        if self.length <= 0.0 || self.width <= 0.0 {
            return Err(Error::InvalidInput("vehicle footprint must be positive".into()));
        }
        if self.wheelbase <= 0.0 || self.wheelbase > self.length {
            return Err(Error::InvalidInput("wheelbase must lie in (0, length]".into()));
        }
        if self.speed < 0.0 {
            return Err(Error::InvalidInput("negative speed".into()));
        }
        Ok(())
    }

    pub fn footprint(&self) -> Obb {
        Obb {
            center: self.pose.position(),
            yaw: self.pose.yaw,
            length: self.length,
            width: self.width,
        }
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.pose.yaw.cos(), self.speed * self.pose.yaw.sin()]
    }

    /// Constant-velocity, constant-heading extrapolation.
    pub fn extrapolate(&self, t: f64) -> VehicleState {
        let v = self.velocity();
        let mut out = *self;
        out.pose.x += v[0] * t;
        out.pose.y += v[1] * t;
        out
    }
}

impl Wire for VehicleState {
    fn encode(&self, out: &mut Vec<u8>) {
        self.pose.encode(out);
        [self.speed, self.length, self.width, self.wheelbase].encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let pose = Pose2D::decode(r)?;
        let [speed, length, width, wheelbase] = <[f64; 4]>::decode(r)?;
        Ok(VehicleState {
            pose,
            speed,
            length,
            width,
            wheelbase,
        })
    }
}

/// Separating-axis overlap test of two vehicle footprints.
pub fn obb_overlap(a: &VehicleState, b: &VehicleState) -> bool {
    a.footprint().overlaps(&b.footprint())
}

/// Actuation limits of the kinematic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub max_steer: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.5,
            max_accel: 3.0,
            max_brake: 8.0,
            max_steer: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlSignal {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

impl ControlSignal {
    /// Builds a control from a signed longitudinal command (positive is
    /// throttle, negative is brake), clamping everything into range.
    pub fn from_longitudinal(command: f64, steer: f64, max_steer: f64) -> Self {
        let (throttle, brake) = if command >= 0.0 {
            (command.min(1.0), 0.0)
        } else {
            (0.0, (-command).min(1.0))
        };
        ControlSignal {
            throttle,
            brake,
            steer: steer.clamp(-max_steer, max_steer),
        }
    }

    pub fn full_brake() -> Self {
        ControlSignal {
            throttle: 0.0,
            brake: 1.0,
            steer: 0.0,
        }
    }

    pub fn is_valid(&self, max_steer: f64) -> bool {
        (0.0..=1.0).contains(&self.throttle)
            && (0.0..=1.0).contains(&self.brake)
            && self.throttle * self.brake == 0.0
            && self.steer.abs() <= max_steer
    }
}

/// One forward-Euler step of the kinematic bicycle model.
///
/// Position and heading are integrated with the speed at the start of the
/// step; the speed update is floored at zero so braking never reverses.
pub fn bicycle_step(
    state: &VehicleState,
    control: &ControlSignal,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let finite = [control.throttle, control.brake, control.steer]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidInput("non-finite control signal".into()));
    }
    state.validate()?;

    let steer = control.steer.clamp(-params.max_steer, params.max_steer);
    let accel = params.max_accel * control.throttle.clamp(0.0, 1.0)
        - params.max_brake * control.brake.clamp(0.0, 1.0);
    let v = state.speed;
    let (s, c) = state.pose.yaw.sin_cos();

    let mut next = *state;
    next.pose.x += v * c * dt;
    next.pose.y += v * s * dt;
    if steer != 0.0 && v != 0.0 {
        next.pose.yaw = normalize_angle(state.pose.yaw + v * steer.tan() / state.wheelbase * dt);
    }
    next.speed = (v + accel * dt).max(0.0);
    Ok(next)
}
