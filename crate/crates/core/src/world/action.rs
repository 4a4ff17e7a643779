use serde::{Deserialize, Serialize};

use super::geometry::{dist, Pose2D};
use crate::codec::{Reader, Wire};
use crate::error::Result;

pub const N_PATH: usize = 10;
pub const PATH_SPACING: f64 = 1.0;
pub const N_SPEED: usize = 10;
pub const SPEED_DT: f64 = 0.2;

/// Number of scalar coordinates in a flattened action.
pub const ACTION_DIM: usize = 2 * (N_PATH + N_SPEED);

/// Decoupled driving action in the ego frame at emission time: path points
/// spaced `PATH_SPACING` apart and speed points `SPEED_DT` apart in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingAction {
    pub path: Vec<[f64; 2]>,
    pub speed: Vec<[f64; 2]>,
}

impl DrivingAction {
    pub fn new(path: Vec<[f64; 2]>, speed: Vec<[f64; 2]>) -> Self {
        DrivingAction { path, speed }
    }

    /// Path straight ahead with speed points for a constant speed.
    pub fn straight(speed: f64) -> Self {
        DrivingAction {
            path: (1..=N_PATH).map(|k| [k as f64 * PATH_SPACING, 0.0]).collect(),
            speed: (1..=N_SPEED).map(|k| [k as f64 * SPEED_DT * speed, 0.0]).collect(),
        }
    }

    /// Straight path with every speed point at the origin.
    pub fn stop() -> Self {
        DrivingAction {
            path: (1..=N_PATH).map(|k| [k as f64 * PATH_SPACING, 0.0]).collect(),
            speed: vec![[0.0, 0.0]; N_SPEED],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.path.iter().chain(self.speed.iter()).flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), ACTION_DIM, "flattened action has wrong length");
        let pts: Vec<[f64; 2]> = v.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        DrivingAction {
            path: pts[..N_PATH].to_vec(),
            speed: pts[N_PATH..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.path.iter().chain(self.speed.iter()).all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Average speed over each speed-waypoint interval, starting from the origin.
    pub fn implied_speeds(&self) -> Vec<f64> {
        let mut prev = [0.0, 0.0];
        self.speed
            .iter()
            .map(|&p| {
                let v = dist(prev, p) / SPEED_DT;
                prev = p;
                v
            })
            .collect()
    }

    /// Mean acceleration implied over the first second of the speed plan.
    /// Averaging over five intervals keeps centimetre jitter in the first
    /// points from reading as hard braking or acceleration.
    pub fn implied_acceleration(&self) -> f64 {
        let v = self.implied_speeds();
        let k = v.len().saturating_sub(1).min(5);
        if k == 0 {
            return 0.0;
        }
        (v[k] - v[0]) / (k as f64 * SPEED_DT)
    }

    /// True when consecutive path points are `PATH_SPACING` apart, allowing
    /// trailing repeats of the final point for a path that ends early.
    pub fn has_valid_path_spacing(&self) -> bool {
        let mut prev = [0.0, 0.0];
        let mut ended = false;
        for &p in &self.path {
            let d = dist(prev, p);
            if ended || d < 1e-9 {
                if d > 1e-9 {
                    return false;
                }
                ended = true;
            } else if (d - PATH_SPACING).abs() > 1e-6 {
                return false;
            }
            prev = p;
        }
        true
    }

    /// Re-expresses this action, emitted at `emitted_at`, relative to `now`
    /// after `elapsed` speed intervals: path points are moved into the new
    /// frame and the speed sequence drops the intervals already consumed
    /// (padding by repeating the last point).
    pub fn rebased(&self, emitted_at: &Pose2D, now: &Pose2D, elapsed: usize) -> DrivingAction {
        let to_now = |p: [f64; 2]| now.to_local(emitted_at.to_world(p));
        let path = self.path.iter().map(|&p| to_now(p)).collect();
        let n = self.speed.len();
        let mut speed: Vec<[f64; 2]> = if elapsed == 0 {
            self.speed.iter().map(|&p| to_now(p)).collect()
        } else {
            self.speed
                .iter()
                .skip(elapsed.min(n))
                .map(|&p| to_now(p))
                .collect()
        };
        let last = self
            .speed
            .last()
            .map(|&p| to_now(p))
            .unwrap_or([0.0, 0.0]);
        while speed.len() < n {
            speed.push(last);
        }
        DrivingAction { path, speed }
    }
}

impl Wire for DrivingAction {
    fn encode(&self, out: &mut Vec<u8>) {
        self.path.encode(out);
        self.speed.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(DrivingAction {
            path: Vec::decode(r)?,
            speed: Vec::decode(r)?,
        })
    }
}
