//! Waypoint tracking: pure pursuit for steering, PI on speed for throttle/brake.

use serde::{Deserialize, Serialize};

use super::action::DrivingAction;
use super::geometry::dist;
use super::vehicle::{ControlSignal, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    /// Anti-windup bound on the integrated speed error.
    pub integral_limit: f64,
    pub lookahead_min: f64,
    /// Lookahead growth with speed, in seconds.
    pub lookahead_gain: f64,
    /// Target speeds below this demand a full stop.
    pub stop_speed: f64,
    pub speed_dt: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            kp: 0.5,
            ki: 0.05,
            integral_limit: 2.0,
            lookahead_min: 3.0,
            lookahead_gain: 0.5,
            stop_speed: 0.1,
            speed_dt: super::action::SPEED_DT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
}

/// Target speed read off the speed points: the average speed over the
/// interval between the first and second point.
pub fn target_speed(action: &DrivingAction, speed_dt: f64) -> f64 {
    match action.speed.as_slice() {
        [] => 0.0,
        [p] => p[0].hypot(p[1]) / speed_dt,
        [p0, p1, ..] => dist(*p0, *p1) / speed_dt,
    }
}

/// Point on the path polyline (starting at the ego origin) at Euclidean
/// distance `lookahead` from the origin, or the last path point if the path
/// never reaches that far.
fn lookahead_point(path: &[[f64; 2]], lookahead: f64) -> Option<[f64; 2]> {
    let mut prev: [f64; 2] = [0.0, 0.0];
    for &p in path {
        let r_prev = prev[0].hypot(prev[1]);
        let r = p[0].hypot(p[1]);
        if r >= lookahead && r_prev < lookahead {
            // Circle/segment intersection, taking the exit point.
            let d = [p[0] - prev[0], p[1] - prev[1]];
            let a = d[0] * d[0] + d[1] * d[1];
            if a > 0.0 {
                let b = 2.0 * (prev[0] * d[0] + prev[1] * d[1]);
                let c = r_prev * r_prev - lookahead * lookahead;
                let t = ((-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
                return Some([prev[0] + d[0] * t, prev[1] + d[1] * t]);
            }
            return Some(p);
        }
        prev = p;
    }
    path.last().copied()
}

pub fn pure_pursuit_steer(path: &[[f64; 2]], speed: f64, wheelbase: f64, cfg: &PidConfig) -> f64 {
    let ld = cfg.lookahead_min.max(cfg.lookahead_gain * speed);
    let Some(target) = lookahead_point(path, ld) else {
        return 0.0;
    };
    let r = target[0].hypot(target[1]);
    if r < 1e-6 {
        return 0.0;
    }
    let alpha = target[1].atan2(target[0]);
    (2.0 * wheelbase * alpha.sin() / r).atan()
}

/// Converts a waypoint action (in the current ego frame) into a control
/// signal, advancing the PI integrator by `dt`.
pub fn pid_actuate(
    action: &DrivingAction,
    ego: &VehicleState,
    state: PidState,
    cfg: &PidConfig,
    vehicle: &VehicleParams,
    dt: f64,
) -> (ControlSignal, PidState) {
    let steer = pure_pursuit_steer(&action.path, ego.speed, ego.wheelbase, cfg)
        .clamp(-vehicle.max_steer, vehicle.max_steer);

    let degenerate = action
        .speed
        .windows(2)
        .all(|w| dist(w[0], w[1]) < 1e-9);
    let target = target_speed(action, cfg.speed_dt);
    if degenerate || target < cfg.stop_speed {
        let mut c = ControlSignal::full_brake();
        c.steer = steer;
        return (c, PidState::default());
    }

    let err = target - ego.speed;
    let integral = (state.integral + err * dt).clamp(-cfg.integral_limit, cfg.integral_limit);
    let command = cfg.kp * err + cfg.ki * integral;
    (
        ControlSignal::from_longitudinal(command, steer, vehicle.max_steer),
        PidState { integral },
    )
}
