//! Closed-loop evaluation: route completion, infractions, driving score and
//! time-to-collision safety margins.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expert::{expert_decide, ExpertConfig};
use crate::world::geometry::dist;
use crate::world::{
    obb_overlap, pid_actuate, step_world, DrivingAction, PidState, ScenarioConfig, Scene, WorldConfig,
    WORLD_DT,
};

/// Participants farther than this (center to center) never count for TTC.
pub const TTC_RANGE: f64 = 100.0;
/// World ticks between recorded frames (4 Hz).
pub const FRAME_STRIDE: u64 = 5;
/// Distance along the goal lane within which the goal counts as reached.
pub const GOAL_TOLERANCE: f64 = 2.0;

/// Anything that maps a scene to a waypoint action each tick.
pub trait Driver {
    fn plan(&mut self, scene: &Scene) -> Result<DrivingAction>;
}

/// The privileged expert as a driver.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertDriver(pub ExpertConfig);

impl Driver for ExpertDriver {
    fn plan(&mut self, scene: &Scene) -> Result<DrivingAction> {
        Ok(expert_decide(scene, &self.0)?.action)
    }
}

/// Driver that always demands a standstill.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopDriver;

impl Driver for StopDriver {
    fn plan(&mut self, _: &Scene) -> Result<DrivingAction> {
        Ok(DrivingAction::stop())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    OffRoute,
    Timeout,
}

impl InfractionKind {
    pub fn penalty(self) -> f64 {
        match self {
            InfractionKind::Collision => 0.5,
            InfractionKind::OffRoute => 0.7,
            InfractionKind::Timeout => 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infraction {
    pub kind: InfractionKind,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario: String,
    pub seed: u64,
    pub route_completion: f64,
    pub infractions: Vec<Infraction>,
    pub success: bool,
    pub duration_ticks: u64,
    /// Minimum TTC of every participant that ever qualified, by agent id.
    pub ttc_samples: BTreeMap<u32, f64>,
}

impl EpisodeResult {
    pub fn infraction_score(&self) -> f64 {
        self.infractions.iter().map(|i| i.kind.penalty()).product()
    }

    pub fn driving_score(&self) -> f64 {
        100.0 * self.route_completion * self.infraction_score()
    }

    pub fn timed_out(&self) -> bool {
        self.infractions.iter().any(|i| i.kind == InfractionKind::Timeout)
    }
}

/// Time to collision against every qualifying participant: ahead of the ego
/// in its frame, center distance within [`TTC_RANGE`], and closing.
pub fn compute_ttc(scene: &Scene) -> Vec<(u32, f64)> {
    let ego = &scene.ego;
    let ev = ego.velocity();
    scene
        .agents
        .iter()
        .filter_map(|a| {
            let p = a.state.pose.position();
            if ego.pose.to_local(p)[0] <= 0.0 {
                return None;
            }
            let d = dist(ego.pose.position(), p);
            if d > TTC_RANGE || d == 0.0 {
                return None;
            }
            let av = a.state.velocity();
            let r = [(p[0] - ego.pose.x) / d, (p[1] - ego.pose.y) / d];
            // Rate at which the center distance shrinks.
            let closing = -(r[0] * (av[0] - ev[0]) + r[1] * (av[1] - ev[1]));
            (closing > 0.0).then(|| (a.id, d / closing))
        })
        .collect()
}

/// Folds one frame's TTCs into per-participant minima.
pub fn update_ttc(acc: &mut BTreeMap<u32, f64>, scene: &Scene) {
    for (id, t) in compute_ttc(scene) {
        acc.entry(id).and_modify(|m| *m = m.min(t)).or_insert(t);
    }
}

pub(crate) fn route_span(scene: &Scene) -> Option<(f64, f64)> {
    scene.route_progress()
}

/// Progress fraction along the goal lane since `start`.
pub(crate) fn completion(scene: &Scene, start: f64) -> f64 {
    match route_span(scene) {
        Some((s, goal)) if goal > start => ((s - start) / (goal - start)).clamp(0.0, 1.0),
        _ => 1.0,
    }
}

pub(crate) fn reached_goal(scene: &Scene) -> bool {
    let Some((s, goal)) = route_span(scene) else {
        return false;
    };
    let in_goal_lane = scene
        .locate(scene.ego.pose.position())
        .is_some_and(|(l, _)| Some(l.id) == scene.route.lanes.last().copied());
    in_goal_lane && s >= goal - GOAL_TOLERANCE
}

/// Passed the goal station without being in the goal lane, or left every lane.
pub(crate) fn off_route(scene: &Scene) -> bool {
    match scene.locate(scene.ego.pose.position()) {
        None => true,
        Some((l, _)) => {
            let final_lane = scene.route.lanes.last().copied();
            Some(l.id) != final_lane
                && route_span(scene).is_some_and(|(s, goal)| s > goal + GOAL_TOLERANCE)
        }
    }
}

pub fn colliding(scene: &Scene) -> bool {
    scene.agents.iter().any(|a| obb_overlap(&scene.ego, &a.state))
}

/// Options for [`run_episode_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub timeout_s: f64,
    /// Keep every 4 Hz frame in the returned log.
    pub keep_frames: bool,
}

/// Drives `driver` on the scenario's episode-`seed` scene until goal,
/// collision, off-route or timeout. Returns the result and, if requested,
/// the 4 Hz frames the TTC bookkeeping saw.
pub fn run_episode_with(
    driver: &mut dyn Driver,
    scenario: &ScenarioConfig,
    seed: u64,
    world: &WorldConfig,
    opts: EpisodeOptions,
) -> Result<(EpisodeResult, Vec<Scene>)> {
    let mut scene = scenario.scene(seed);
    let start = route_span(&scene).map_or(0.0, |(s, _)| s);
    let max_ticks = (opts.timeout_s / WORLD_DT).round() as u64;
    let mut pid = PidState::default();
    let mut ttc = BTreeMap::new();
    let mut frames = Vec::new();
    let mut infractions = Vec::new();
    let mut success = false;

    loop {
        if scene.tick.is_multiple_of(FRAME_STRIDE) {
            update_ttc(&mut ttc, &scene);
            if opts.keep_frames {
                frames.push(scene.clone());
            }
        }
        if colliding(&scene) {
            infractions.push(Infraction {
                kind: InfractionKind::Collision,
                tick: scene.tick,
            });
            break;
        }
        if reached_goal(&scene) {
            success = true;
            break;
        }
        if off_route(&scene) {
            infractions.push(Infraction {
                kind: InfractionKind::OffRoute,
                tick: scene.tick,
            });
            break;
        }
        if scene.tick >= max_ticks {
            infractions.push(Infraction {
                kind: InfractionKind::Timeout,
                tick: scene.tick,
            });
            break;
        }
        let action = driver.plan(&scene)?;
        let (control, next_pid) = pid_actuate(&action, &scene.ego, pid, &world.pid, &world.vehicle, WORLD_DT);
        pid = next_pid;
        scene = step_world(&scene, &control, WORLD_DT, &world.vehicle, &world.idm)?;
    }

    let result = EpisodeResult {
        scenario: scenario.name.clone(),
        seed,
        route_completion: if success { 1.0 } else { completion(&scene, start) },
        infractions,
        success,
        duration_ticks: scene.tick,
        ttc_samples: ttc,
    };
    Ok((result, frames))
}

pub fn run_episode(
    driver: &mut dyn Driver,
    scenario: &ScenarioConfig,
    seed: u64,
    world: &WorldConfig,
) -> Result<EpisodeResult> {
    let opts = EpisodeOptions {
        timeout_s: scenario.timeout_s,
        keep_frames: false,
    };
    Ok(run_episode_with(driver, scenario, seed, world, opts)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub ds: f64,
    pub sr: f64,
    pub tr: f64,
    /// `None` when no participant ever qualified.
    pub mean_ttc: Option<f64>,
    pub episodes: Vec<EpisodeResult>,
}

pub fn aggregate(results: Vec<EpisodeResult>) -> SuiteReport {
    let n = results.len().max(1) as f64;
    let ds = results.iter().map(EpisodeResult::driving_score).sum::<f64>() / n;
    let sr = 100.0 * results.iter().filter(|r| r.success).count() as f64 / n;
    let tr = 100.0 * results.iter().filter(|r| r.timed_out()).count() as f64 / n;
    let ttcs: Vec<f64> = results.iter().flat_map(|r| r.ttc_samples.values().copied()).collect();
    let mean_ttc = (!ttcs.is_empty()).then(|| ttcs.iter().sum::<f64>() / ttcs.len() as f64);
    SuiteReport {
        ds,
        sr,
        tr,
        mean_ttc,
        episodes: results,
    }
}

/// Runs every (scenario, seed) pair in parallel, one fresh driver each,
/// and aggregates in suite order.
pub fn evaluate_suite<D, F>(
    make_driver: F,
    suite: &[ScenarioConfig],
    seeds: &[u64],
    world: &WorldConfig,
) -> Result<SuiteReport>
where
    D: Driver,
    F: Fn() -> D + Sync,
{
    let jobs: Vec<(&ScenarioConfig, u64)> = suite
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|(s, seed)| run_episode(&mut make_driver(), s, *seed, world))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(results))
}

impl SuiteReport {
    /// Human-readable block per episode followed by the totals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.episodes {
            let inf: Vec<String> = e
                .infractions
                .iter()
                .map(|i| format!("{:?}@{}", i.kind, i.tick))
                .collect();
            out.push_str(&format!(
                "[{} seed={}]\n  rc={:.3} ds={:.2} success={} ticks={} infractions=[{}] ttc_participants={}\n",
                e.scenario,
                e.seed,
                e.route_completion,
                e.driving_score(),
                e.success,
                e.duration_ticks,
                inf.join(", "),
                e.ttc_samples.len()
            ));
        }
        out.push_str(&format!(
            "[total]\n  DS={:.3} SR={:.2}% TR={:.2}% mean_TTC={}\n",
            self.ds,
            self.sr,
            self.tr,
            self.mean_ttc.map_or("n/a".to_string(), |t| format!("{t:.4}s"))
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scenario::eval_suite;
    use crate::world::{Agent, Behavior, Lane, Pose2D, Route, VehicleState};

    fn scene_with(agents: Vec<Agent>, ego_speed: f64) -> Scene {
        Scene {
            time: 0.0,
            tick: 0,
            ego: VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), ego_speed),
            agents,
            lanes: vec![Lane::straight(0, [-50.0, 0.0], [300.0, 0.0], 3.5, 10.0)],
            route: Route {
                lanes: vec![0],
                goal: [200.0, 0.0],
            },
            events: vec![],
        }
    }

    fn agent(id: u32, x: f64, speed: f64) -> Agent {
        Agent {
            id,
            state: VehicleState::new(Pose2D::new(x, 0.0, 0.0), speed),
            behavior: Behavior::Idm { v0: speed },
            active: false,
            timer: 0.0,
        }
    }

    #[test]
    fn ttc_hand_cases() {
        let s = scene_with(vec![agent(1, 20.0, 5.0)], 10.0);
        let t = compute_ttc(&s);
        assert_eq!(t.len(), 1);
        assert!((t[0].1 - 4.0).abs() < 1e-12);

        let behind = scene_with(vec![agent(1, -20.0, 15.0)], 10.0);
        assert!(compute_ttc(&behind).is_empty());
        let opening = scene_with(vec![agent(1, 20.0, 12.0)], 10.0);
        assert!(compute_ttc(&opening).is_empty());
        let far = scene_with(vec![agent(1, 120.0, 0.0)], 10.0);
        assert!(compute_ttc(&far).is_empty());
    }

    fn result(rc: f64, infractions: Vec<InfractionKind>, ttc: &[f64]) -> EpisodeResult {
        EpisodeResult {
            scenario: "x".into(),
            seed: 0,
            route_completion: rc,
            success: infractions.is_empty() && rc == 1.0,
            infractions: infractions.into_iter().map(|kind| Infraction { kind, tick: 0 }).collect(),
            duration_ticks: 0,
            ttc_samples: ttc.iter().enumerate().map(|(i, t)| (i as u32, *t)).collect(),
        }
    }

    #[test]
    fn aggregate_hand_cases() {
        let perfect = aggregate(vec![result(1.0, vec![], &[]), result(1.0, vec![], &[])]);
        assert_eq!((perfect.sr, perfect.tr, perfect.ds), (100.0, 0.0, 100.0));
        assert_eq!(perfect.mean_ttc, None);

        let mixed = aggregate(vec![
            result(1.0, vec![], &[4.0]),
            result(0.5, vec![InfractionKind::Timeout], &[6.0]),
        ]);
        assert_eq!(mixed.tr, 50.0);
        assert!((mixed.ds - 67.5).abs() < 1e-12);
        assert_eq!(mixed.mean_ttc, Some(5.0));
    }

    #[test]
    fn expert_solves_every_bundled_scenario() {
        let world = WorldConfig::default();
        let suite = eval_suite();
        let report = evaluate_suite(ExpertDriver::default, &suite, &[0, 1, 2], &world).unwrap();
        let failures: Vec<_> = report.episodes.iter().filter(|e| !e.success).collect();
        assert!(failures.is_empty(), "{}", report.render());
    }

    #[test]
    fn stop_policy_times_out() {
        let world = WorldConfig::default();
        let suite = eval_suite();
        let r = run_episode(&mut StopDriver, &suite[0], 0, &world).unwrap();
        assert!(r.timed_out());
        assert!(r.route_completion < 1.0);
        assert!(!r.success);
    }

    #[test]
    fn episodes_are_deterministic() {
        let world = WorldConfig::default();
        let suite = eval_suite();
        let a = run_episode(&mut ExpertDriver::default(), &suite[9], 4, &world).unwrap();
        let b = run_episode(&mut ExpertDriver::default(), &suite[9], 4, &world).unwrap();
        assert_eq!(a, b);
    }
}
