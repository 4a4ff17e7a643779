//! Scenario configuration files and the bundled scenario families.
//!
//! A scenario file is TOML holding lanes, a route, the ego start state,
//! agents with their behaviour scripts, scripted events and a seed. The
//! optional `jitter` table perturbs agent placement per episode seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Pose2D;
use super::scene::{Agent, Behavior, EventKind, EventTrigger, Lane, Route, Scene, ScriptedEvent};
use super::vehicle::VehicleState;
use crate::codec::fnv1a;
use crate::error::{Error, Result};

pub const LANE_WIDTH: f64 = 3.5;
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// Uniform longitudinal shift bound for agents, meters.
    pub station: f64,
    /// Uniform speed perturbation bound, m/s.
    pub speed: f64,
    /// Uniform shift bound for timed events, seconds.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub family: Family,
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub jitter: Jitter,
    pub lanes: Vec<Lane>,
    pub route: Route,
    pub ego: VehicleState,
    #[serde(default)]
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub events: Vec<ScriptedEvent>,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cruise,
    Follow,
    HardBrake,
    CrossTraffic,
    DenseMerge,
    Custom,
}

impl Family {
    pub const BUNDLED: [Family; 5] = [
        Family::Cruise,
        Family::Follow,
        Family::HardBrake,
        Family::CrossTraffic,
        Family::DenseMerge,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Cruise => "cruise",
            Family::Follow => "follow",
            Family::HardBrake => "hard_brake",
            Family::CrossTraffic => "cross_traffic",
            Family::DenseMerge => "dense_merge",
            Family::Custom => "custom",
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        cfg.base_scene().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Scene exactly as written in the file.
    pub fn base_scene(&self) -> Scene {
        Scene {
            time: 0.0,
            tick: 0,
            ego: self.ego,
            agents: self.agents.clone(),
            lanes: self.lanes.clone(),
            route: self.route.clone(),
            events: self.events.clone(),
        }
    }

    /// Scene for one episode: the base scene perturbed by `jitter` using a
    /// stream derived from the episode seed and the scenario name.
    pub fn scene(&self, episode_seed: u64) -> Scene {
        let mut scene = self.base_scene();
        let j = self.jitter;
        if j == Jitter::default() {
            return scene;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            episode_seed ^ self.seed.rotate_left(17) ^ u64::from(fnv1a(self.name.as_bytes())),
        );
        let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        for a in &mut scene.agents {
            let ds = sym(j.station);
            let (s, c) = a.state.pose.yaw.sin_cos();
            a.state.pose.x += c * ds;
            a.state.pose.y += s * ds;
            let dv = sym(j.speed);
            match &mut a.behavior {
                Behavior::Idm { v0 } => {
                    *v0 = (*v0 + dv).max(1.0);
                    a.state.speed = (a.state.speed + dv).clamp(0.0, *v0);
                }
                Behavior::HardBrake { cruise, .. } => {
                    *cruise = (*cruise + dv).max(1.0);
                    a.state.speed = *cruise;
                }
                Behavior::CrossTraffic { speed } => *speed = (*speed + dv).max(1.0),
                Behavior::Obstacle => {}
            }
        }
        for e in &mut scene.events {
            if let EventTrigger::AtTime { time } = &mut e.trigger {
                *time = (*time + sym(j.time)).max(0.0);
            }
        }
        scene
    }
}

fn lane_pair(limit: f64, length: f64) -> Vec<Lane> {
    let mut right = Lane::straight(0, [-30.0, 0.0], [length, 0.0], LANE_WIDTH, limit);
    let mut left = Lane::straight(1, [-30.0, LANE_WIDTH], [length, LANE_WIDTH], LANE_WIDTH, limit);
    right.left = Some(1);
    left.right = Some(0);
    vec![right, left]
}

fn car(id: u32, x: f64, y: f64, yaw: f64, speed: f64, behavior: Behavior) -> Agent {
    Agent {
        id,
        state: VehicleState::new(Pose2D::new(x, y, yaw), speed),
        behavior,
        active: false,
        timer: 0.0,
    }
}

/// Draws one scenario of `family` from `rng`.
pub fn generate(family: Family, name: String, rng: &mut impl Rng) -> ScenarioConfig {
    let goal_x = 150.0;
    let limit = rng.random_range(8.0..10.0);
    let lanes = lane_pair(limit, 400.0);
    let ego_speed = rng.random_range(3.0..6.0);
    let ego = VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), ego_speed);
    let mut agents = Vec::new();
    let mut events = Vec::new();
    let mut route = Route {
        lanes: vec![0],
        goal: [goal_x, 0.0],
    };

    // Sparse left-lane traffic keeps the adjacent-lane feature slots busy.
    let left_traffic = |agents: &mut Vec<Agent>, rng: &mut dyn rand::RngCore, first_id: u32, n: usize| {
        let mut x = rng.random_range(-40.0..0.0);
        for i in 0..n {
            let v0 = rng.random_range(6.0..9.0);
            agents.push(car(first_id + i as u32, x, LANE_WIDTH, 0.0, v0, Behavior::Idm { v0 }));
            x += rng.random_range(35.0..60.0);
        }
    };

    match family {
        Family::Cruise => {
            let n = rng.random_range(0..3);
            left_traffic(&mut agents, rng, 10, n);
        }
        Family::Follow => {
            let v0 = rng.random_range(3.5..6.0);
            let gap = rng.random_range(15.0..30.0);
            agents.push(car(1, gap, 0.0, 0.0, v0, Behavior::Idm { v0 }));
            left_traffic(&mut agents, rng, 10, 2);
        }
        Family::HardBrake => {
            let cruise = rng.random_range(6.0..8.5);
            let gap = rng.random_range(18.0..28.0);
            agents.push(car(
                1,
                gap,
                0.0,
                0.0,
                cruise,
                Behavior::HardBrake {
                    cruise,
                    decel: rng.random_range(5.0..7.0),
                    hold: rng.random_range(1.5..3.0),
                },
            ));
            events.push(ScriptedEvent {
                trigger: EventTrigger::AtTime {
                    time: rng.random_range(3.0..6.0),
                },
                kind: EventKind::HardBrake { agent: 1 },
                fired: false,
            });
            left_traffic(&mut agents, rng, 10, 1);
        }
        Family::CrossTraffic => {
            let cross_x = rng.random_range(50.0..90.0);
            let from_right = rng.random_bool(0.5);
            let (y, yaw) = if from_right {
                (-9.0, std::f64::consts::FRAC_PI_2)
            } else {
                (LANE_WIDTH + 9.0, -std::f64::consts::FRAC_PI_2)
            };
            let speed = rng.random_range(3.0..5.0);
            agents.push(car(2, cross_x, y, yaw, 0.0, Behavior::CrossTraffic { speed }));
            events.push(ScriptedEvent {
                trigger: EventTrigger::EgoWithin {
                    center: [cross_x, 0.0],
                    radius: rng.random_range(22.0..32.0),
                },
                kind: EventKind::StartCrossing { agent: 2 },
                fired: false,
            });
        }
        Family::DenseMerge => {
            let obstacle_x = rng.random_range(35.0..55.0);
            agents.push(car(1, obstacle_x, 0.0, 0.0, 0.0, Behavior::Obstacle));
            // Shorter route: the merge itself eats much of the time budget.
            route = Route {
                lanes: vec![0, 1],
                goal: [goal_x - 40.0, LANE_WIDTH],
            };
            // Dense platoon in the target lane; every third spacing is wide
            // enough for a gap-accepting merge, the rest are not.
            let v0 = rng.random_range(3.5..5.0);
            let phase = rng.random_range(0..3);
            let mut x = obstacle_x + rng.random_range(10.0..25.0);
            for i in 0..9u32 {
                agents.push(car(10 + i, x, LANE_WIDTH, 0.0, v0, Behavior::Idm { v0 }));
                let spacing = if i % 3 == phase {
                    rng.random_range(40.0..50.0)
                } else {
                    rng.random_range(13.0..18.0)
                };
                x -= spacing;
            }
        }
        Family::Custom => {}
    }

    ScenarioConfig {
        name,
        family,
        seed: rng.random(),
        timeout_s: DEFAULT_TIMEOUT_S,
        jitter: Jitter {
            station: 1.5,
            speed: 0.3,
            time: 0.4,
        },
        lanes,
        route,
        ego,
        agents,
        events,
    }
}

const EVAL_SUITE_SEED: u64 = 0x5EED_E7A1;
pub const EVAL_VARIANTS: usize = 4;

/// The fixed evaluation suite: every bundled family, `EVAL_VARIANTS` draws each.
pub fn eval_suite() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for (fi, fam) in Family::BUNDLED.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SUITE_SEED + fi as u64);
        for v in 0..EVAL_VARIANTS {
            out.push(generate(*fam, format!("{}_{v}", fam.name()), &mut rng));
        }
    }
    out
}

/// Training scenarios, drawn from a stream disjoint from the evaluation suite.
pub fn training_scenarios(count: usize, seed: u64) -> Vec<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x7A41_0000);
    (0..count)
        .map(|i| {
            let fam = Family::BUNDLED[i % Family::BUNDLED.len()];
            generate(fam, format!("train_{}_{i}", fam.name()), &mut rng)
        })
        .collect()
}

/// Loads every `*.toml` scenario in a directory, sorted by file name.
pub fn load_suite(dir: &Path) -> Result<Vec<ScenarioConfig>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| ScenarioConfig::load(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_twenty_valid_scenarios() {
        let suite = eval_suite();
        assert_eq!(suite.len(), 20);
        for s in &suite {
            s.base_scene().validate().unwrap();
            s.scene(3).validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        for s in eval_suite().iter().chain(training_scenarios(5, 1).iter()) {
            let back = ScenarioConfig::from_toml(&s.to_toml()).unwrap();
            assert_eq!(&back, s);
        }
    }

    #[test]
    fn jitter_depends_only_on_seed() {
        let s = &eval_suite()[5];
        assert_eq!(s.scene(9), s.scene(9));
        assert_ne!(s.scene(9), s.scene(10));
    }

    #[test]
    fn training_and_eval_are_disjoint() {
        let eval = eval_suite();
        for t in training_scenarios(40, 0) {
            assert!(eval.iter().all(|e| e.agents != t.agents || e.ego != t.ego));
        }
    }
}
