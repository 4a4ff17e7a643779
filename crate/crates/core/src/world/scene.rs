use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Projection};
use super::idm::IdmParams;
use super::vehicle::{bicycle_step, ControlSignal, VehicleParams, VehicleState};
use crate::codec::{Reader, Wire};
use crate::error::{Error, Result};

/// Online environment tick.
pub const WORLD_DT: f64 = 0.05;

/// Lateral slack added to a lane's half width when deciding whether a point
/// is still "on" it.
const ON_LANE_SLACK: f64 = 1.0;

/// Lateral margin around a follower's width within which a vehicle ahead
/// counts as its leader.
const LEADER_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u32,
    #[serde(with = "polyline_points")]
    pub centerline: Polyline,
    pub width: f64,
    pub speed_limit: f64,
    #[serde(default)]
    pub left: Option<u32>,
    #[serde(default)]
    pub right: Option<u32>,
}

mod polyline_points {
    use super::Polyline;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Polyline, s: S) -> Result<S::Ok, S::Error> {
        p.points().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Polyline, D::Error> {
        let pts = Vec::<[f64; 2]>::deserialize(d)?;
        if pts.len() < 2 {
            return Err(serde::de::Error::custom("a lane centerline needs at least two points"));
        }
        Ok(Polyline::new(pts))
    }
}

impl Lane {
    pub fn straight(id: u32, from: [f64; 2], to: [f64; 2], width: f64, speed_limit: f64) -> Self {
        Lane {
            id,
            centerline: Polyline::new(vec![from, to]),
            width,
            speed_limit,
            left: None,
            right: None,
        }
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        self.centerline.project(p)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let pr = self.project(p);
        pr.lateral.abs() <= 0.5 * self.width + ON_LANE_SLACK
            && pr.station >= -ON_LANE_SLACK
            && pr.station <= self.centerline.length() + ON_LANE_SLACK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// Lanes to be driven, in order; the last one holds the goal.
    pub lanes: Vec<u32>,
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Behavior {
    /// IDM car following along the agent's heading.
    Idm { v0: f64 },
    /// Cruises at `cruise`, brakes at `decel` to a standstill once activated,
    /// holds for `hold` seconds, then resumes under IDM.
    HardBrake { cruise: f64, decel: f64, hold: f64 },
    /// Waits until activated, then crosses at constant `speed`.
    CrossTraffic { speed: f64 },
    /// Never moves.
    Obstacle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub state: VehicleState,
    pub behavior: Behavior,
    #[serde(default)]
    pub active: bool,
    /// Seconds since activation.
    #[serde(default)]
    pub timer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventTrigger {
    AtTime { time: f64 },
    EgoWithin { center: [f64; 2], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    HardBrake { agent: u32 },
    StartCrossing { agent: u32 },
}

impl EventKind {
    pub fn agent(&self) -> u32 {
        match *self {
            EventKind::HardBrake { agent } | EventKind::StartCrossing { agent } => agent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub trigger: EventTrigger,
    pub kind: EventKind,
    #[serde(default)]
    pub fired: bool,
}

/// Ground-truth world state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub time: f64,
    pub tick: u64,
    pub ego: VehicleState,
    pub agents: Vec<Agent>,
    pub lanes: Vec<Lane>,
    pub route: Route,
    pub events: Vec<ScriptedEvent>,
}

impl AsRef<Scene> for Scene {
    fn as_ref(&self) -> &Scene {
        self
    }
}

/// A vehicle ahead of some reference vehicle inside its driving corridor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    /// Bumper-to-bumper gap.
    pub gap: f64,
    /// Leader velocity projected onto the follower's heading.
    pub speed: f64,
    /// `None` for the ego vehicle.
    pub agent_id: Option<u32>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.id) {
                return Err(Error::InvalidInput(format!("duplicate agent id {}", a.id)));
            }
            a.state.validate()?;
        }
        self.ego.validate()?;
        if self.route.lanes.is_empty() {
            return Err(Error::InvalidInput("route has no lanes".into()));
        }
        for id in &self.route.lanes {
            if self.lane(*id).is_none() {
                return Err(Error::InvalidInput(format!("route references unknown lane {id}")));
            }
        }
        for l in &self.lanes {
            for n in [l.left, l.right].into_iter().flatten() {
                if self.lane(n).is_none() {
                    return Err(Error::InvalidInput(format!("lane {} references unknown neighbour {n}", l.id)));
                }
            }
        }
        for e in &self.events {
            let agent = self
                .agent(e.kind.agent())
                .ok_or_else(|| Error::InvalidInput(format!("event references unknown agent {}", e.kind.agent())))?;
            let ok = matches!(
                (e.kind, agent.behavior),
                (EventKind::HardBrake { .. }, Behavior::HardBrake { .. })
                    | (EventKind::StartCrossing { .. }, Behavior::CrossTraffic { .. })
            );
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "event {:?} does not match behaviour of agent {}",
                    e.kind, agent.id
                )));
            }
        }
        Ok(())
    }

    pub fn lane(&self, id: u32) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn agent(&self, id: u32) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn goal_lane(&self) -> Option<&Lane> {
        self.route.lanes.last().and_then(|id| self.lane(*id))
    }

    /// The lane whose centerline is laterally closest to `p`, if `p` is on any lane.
    pub fn locate(&self, p: [f64; 2]) -> Option<(&Lane, Projection)> {
        self.lanes
            .iter()
            .filter(|l| l.contains(p))
            .map(|l| (l, l.project(p)))
            .min_by(|a, b| {
                a.1.lateral
                    .abs()
                    .total_cmp(&b.1.lateral.abs())
                    .then(a.0.id.cmp(&b.0.id))
            })
    }

    pub fn ego_lane(&self) -> Result<(&Lane, Projection)> {
        self.locate(self.ego.pose.position())
            .ok_or_else(|| Error::PlannerFailure(format!(
                "ego at ({:.2}, {:.2}) is off all lanes",
                self.ego.pose.x, self.ego.pose.y
            )))
    }

    /// Ego station along the goal lane and the goal's station on it.
    pub fn route_progress(&self) -> Option<(f64, f64)> {
        let lane = self.goal_lane()?;
        Some((
            lane.project(self.ego.pose.position()).station,
            lane.project(self.route.goal).station,
        ))
    }

    /// All vehicles as `(agent id or None for ego, state)`.
    pub fn vehicles(&self) -> impl Iterator<Item = (Option<u32>, &VehicleState)> {
        std::iter::once((None, &self.ego)).chain(self.agents.iter().map(|a| (Some(a.id), &a.state)))
    }

    /// Nearest vehicle ahead of `follower` whose footprint reaches into the
    /// follower's heading corridor (follower width plus a small margin).
    pub fn leader_of(&self, follower: &VehicleState, follower_id: Option<u32>) -> Option<Leader> {
        let heading = follower.pose.yaw;
        let (hs, hc) = heading.sin_cos();
        let along = [hc, hs];
        let across = [-hs, hc];
        let half_corridor = 0.5 * follower.width + LEADER_MARGIN;
        self.vehicles()
            .filter(|(id, _)| *id != follower_id)
            .filter_map(|(id, v)| {
                let local = follower.pose.to_local(v.pose.position());
                let fp = v.footprint();
                let r_lat = fp.radius_on(across);
                let r_lon = fp.radius_on(along);
                if local[0] <= 0.0 || local[1].abs() - r_lat > half_corridor {
                    return None;
                }
                let vel = v.velocity();
                Some(Leader {
                    gap: local[0] - r_lon - 0.5 * follower.length,
                    speed: vel[0] * hc + vel[1] * hs,
                    agent_id: id,
                })
            })
            .min_by(|a, b| a.gap.total_cmp(&b.gap))
    }

    fn event_due(&self, e: &ScriptedEvent) -> bool {
        match e.trigger {
            EventTrigger::AtTime { time } => self.time >= time - 1e-9,
            EventTrigger::EgoWithin { center, radius } => {
                super::geometry::dist(center, self.ego.pose.position()) <= radius
            }
        }
    }
}

/// Acceleration an agent's behaviour script demands in `scene`.
fn agent_accel(scene: &Scene, agent: &Agent, idm: &IdmParams) -> f64 {
    match agent.behavior {
        Behavior::Idm { v0 } => {
            let lead = scene
                .leader_of(&agent.state, Some(agent.id))
                .map(|l| (l.gap, l.speed));
            idm.with_v0(v0).acceleration(agent.state.speed, lead)
        }
        Behavior::HardBrake { cruise, decel, hold } if agent.active => {
            let braking = cruise / decel;
            if agent.timer < braking {
                -decel
            } else if agent.timer < braking + hold {
                0.0
            } else {
                let lead = scene
                    .leader_of(&agent.state, Some(agent.id))
                    .map(|l| (l.gap, l.speed));
                idm.with_v0(cruise).acceleration(agent.state.speed, lead)
            }
        }
        Behavior::HardBrake { .. } | Behavior::CrossTraffic { .. } | Behavior::Obstacle => 0.0,
    }
}

/// Advances the world by one tick: fires due scripted events, moves every
/// agent by its behaviour script, moves the ego with the bicycle model.
pub fn step_world(
    scene: &Scene,
    ego_control: &ControlSignal,
    dt: f64,
    vehicle: &VehicleParams,
    idm: &IdmParams,
) -> Result<Scene> {
    let mut cur = scene.clone();
    let due: Vec<usize> = (0..cur.events.len())
        .filter(|&i| !cur.events[i].fired && cur.event_due(&cur.events[i]))
        .collect();
    for i in due {
        cur.events[i].fired = true;
        let target = cur.events[i].kind.agent();
        if let Some(a) = cur.agents.iter_mut().find(|a| a.id == target) {
            a.active = true;
            if let Behavior::CrossTraffic { speed } = a.behavior {
                a.state.speed = speed;
            }
        }
    }

    let accels: Vec<f64> = cur.agents.iter().map(|a| agent_accel(&cur, a, idm)).collect();
    let mut next = cur.clone();
    for (a, accel) in next.agents.iter_mut().zip(accels) {
        let [vx, vy] = a.state.velocity();
        a.state.pose.x += vx * dt;
        a.state.pose.y += vy * dt;
        a.state.speed = (a.state.speed + accel * dt).max(0.0);
        if a.active {
            a.timer += dt;
        }
    }
    next.ego = bicycle_step(&cur.ego, ego_control, vehicle, dt)?;
    next.time = cur.time + dt;
    next.tick = cur.tick + 1;
    Ok(next)
}

impl Wire for Lane {
    fn encode(&self, out: &mut Vec<u8>) {
        self.id.encode(out);
        self.centerline.points().to_vec().encode(out);
        [self.width, self.speed_limit].encode(out);
        self.left.encode(out);
        self.right.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let id = u32::decode(r)?;
        let pts = Vec::<[f64; 2]>::decode(r)?;
        if pts.len() < 2 {
            return Err(r.error("lane centerline with fewer than two points"));
        }
        let [width, speed_limit] = <[f64; 2]>::decode(r)?;
        Ok(Lane {
            id,
            centerline: Polyline::new(pts),
            width,
            speed_limit,
            left: Option::decode(r)?,
            right: Option::decode(r)?,
        })
    }
}

impl Wire for Behavior {
    fn encode(&self, out: &mut Vec<u8>) {
        match *self {
            Behavior::Idm { v0 } => {
                0u8.encode(out);
                v0.encode(out);
            }
            Behavior::HardBrake { cruise, decel, hold } => {
                1u8.encode(out);
                [cruise, decel, hold].encode(out);
            }
            Behavior::CrossTraffic { speed } => {
                2u8.encode(out);
                speed.encode(out);
            }
            Behavior::Obstacle => 3u8.encode(out),
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match u8::decode(r)? {
            0 => Behavior::Idm { v0: f64::decode(r)? },
            1 => {
                let [cruise, decel, hold] = <[f64; 3]>::decode(r)?;
                Behavior::HardBrake { cruise, decel, hold }
            }
            2 => Behavior::CrossTraffic { speed: f64::decode(r)? },
            3 => Behavior::Obstacle,
            t => return Err(r.error(format!("unknown behaviour tag {t}"))),
        })
    }
}

impl Wire for Agent {
    fn encode(&self, out: &mut Vec<u8>) {
        self.id.encode(out);
        self.state.encode(out);
        self.behavior.encode(out);
        self.active.encode(out);
        self.timer.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Agent {
            id: u32::decode(r)?,
            state: VehicleState::decode(r)?,
            behavior: Behavior::decode(r)?,
            active: bool::decode(r)?,
            timer: f64::decode(r)?,
        })
    }
}

impl Wire for ScriptedEvent {
    fn encode(&self, out: &mut Vec<u8>) {
        match self.trigger {
            EventTrigger::AtTime { time } => {
                0u8.encode(out);
                time.encode(out);
            }
            EventTrigger::EgoWithin { center, radius } => {
                1u8.encode(out);
                center.encode(out);
                radius.encode(out);
            }
        }
        match self.kind {
            EventKind::HardBrake { agent } => {
                0u8.encode(out);
                agent.encode(out);
            }
            EventKind::StartCrossing { agent } => {
                1u8.encode(out);
                agent.encode(out);
            }
        }
        self.fired.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let trigger = match u8::decode(r)? {
            0 => EventTrigger::AtTime { time: f64::decode(r)? },
            1 => EventTrigger::EgoWithin {
                center: <[f64; 2]>::decode(r)?,
                radius: f64::decode(r)?,
            },
            t => return Err(r.error(format!("unknown trigger tag {t}"))),
        };
        let kind = match u8::decode(r)? {
            0 => EventKind::HardBrake { agent: u32::decode(r)? },
            1 => EventKind::StartCrossing { agent: u32::decode(r)? },
            t => return Err(r.error(format!("unknown event tag {t}"))),
        };
        Ok(ScriptedEvent {
            trigger,
            kind,
            fired: bool::decode(r)?,
        })
    }
}

impl Wire for Scene {
    fn encode(&self, out: &mut Vec<u8>) {
        self.time.encode(out);
        self.tick.encode(out);
        self.ego.encode(out);
        self.agents.encode(out);
        self.lanes.encode(out);
        self.route.lanes.encode(out);
        self.route.goal.encode(out);
        self.events.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Scene {
            time: f64::decode(r)?,
            tick: u64::decode(r)?,
            ego: VehicleState::decode(r)?,
            agents: Vec::decode(r)?,
            lanes: Vec::decode(r)?,
            route: Route {
                lanes: Vec::decode(r)?,
                goal: <[f64; 2]>::decode(r)?,
            },
            events: Vec::decode(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::geometry::Pose2D;

    fn one_lane_scene(agents: Vec<Agent>) -> Scene {
        Scene {
            time: 0.0,
            tick: 0,
            ego: VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), 5.0),
            agents,
            lanes: vec![Lane::straight(0, [-10.0, 0.0], [300.0, 0.0], 3.5, 10.0)],
            route: Route {
                lanes: vec![0],
                goal: [200.0, 0.0],
            },
            events: vec![],
        }
    }

    fn step(s: &Scene, c: &ControlSignal) -> Scene {
        step_world(s, c, WORLD_DT, &VehicleParams::default(), &IdmParams::default()).unwrap()
    }

    #[test]
    fn empty_scene_only_time_and_ego_change() {
        let s = one_lane_scene(vec![]);
        let n = step(&s, &ControlSignal::default());
        assert!((n.time - 0.05).abs() < 1e-15);
        assert_eq!(n.tick, 1);
        assert_eq!(n.ego.pose.x, 0.25);
        assert_eq!(n.lanes, s.lanes);
        assert_eq!(n.route, s.route);
    }

    #[test]
    fn scripted_hard_brake() {
        let lead = Agent {
            id: 1,
            state: VehicleState::new(Pose2D::new(30.0, 0.0, 0.0), 8.0),
            behavior: Behavior::HardBrake { cruise: 8.0, decel: 6.0, hold: 100.0 },
            active: false,
            timer: 0.0,
        };
        let mut s = one_lane_scene(vec![lead]);
        s.events.push(ScriptedEvent {
            trigger: EventTrigger::AtTime { time: 3.0 },
            kind: EventKind::HardBrake { agent: 1 },
            fired: false,
        });
        s.validate().unwrap();
        let mut speeds = vec![];
        for _ in 0..120 {
            speeds.push((s.time, s.agents[0].state.speed));
            s = step(&s, &ControlSignal::default());
        }
        for w in speeds.windows(2) {
            let (t0, v0) = w[0];
            let (_, v1) = w[1];
            if t0 < 3.0 - 1e-9 {
                assert_eq!(v1, 8.0);
            } else if v0 > 0.0 {
                assert!((v1 - (v0 - 6.0 * 0.05).max(0.0)).abs() < 1e-12);
            } else {
                assert_eq!(v1, 0.0);
            }
        }
        assert_eq!(s.agents[0].state.speed, 0.0);
    }

    #[test]
    fn validation_catches_bad_references() {
        let mut s = one_lane_scene(vec![]);
        s.route.lanes = vec![7];
        assert!(s.validate().is_err());
        let a = Agent {
            id: 1,
            state: VehicleState::new(Pose2D::new(10.0, 0.0, 0.0), 0.0),
            behavior: Behavior::Obstacle,
            active: false,
            timer: 0.0,
        };
        let mut dup = one_lane_scene(vec![a.clone(), a]);
        assert!(dup.validate().is_err());
        dup.agents.pop();
        dup.events.push(ScriptedEvent {
            trigger: EventTrigger::AtTime { time: 1.0 },
            kind: EventKind::HardBrake { agent: 1 },
            fired: false,
        });
        assert!(dup.validate().is_err());
    }

    #[test]
    fn step_is_deterministic_bytewise() {
        let lead = Agent {
            id: 3,
            state: VehicleState::new(Pose2D::new(25.0, 0.0, 0.0), 4.0),
            behavior: Behavior::Idm { v0: 9.0 },
            active: false,
            timer: 0.0,
        };
        let s = one_lane_scene(vec![lead]);
        let c = ControlSignal {
            throttle: 0.3,
            brake: 0.0,
            steer: 0.01,
        };
        assert_eq!(step(&s, &c).to_bytes(), step(&s, &c).to_bytes());
    }

    #[test]
    fn scene_wire_round_trip() {
        let mut s = one_lane_scene(vec![Agent {
            id: 2,
            state: VehicleState::new(Pose2D::new(25.0, 3.5, 0.0), 4.0),
            behavior: Behavior::CrossTraffic { speed: 3.0 },
            active: true,
            timer: 1.5,
        }]);
        s.events.push(ScriptedEvent {
            trigger: EventTrigger::EgoWithin {
                center: [20.0, 0.0],
                radius: 5.0,
            },
            kind: EventKind::StartCrossing { agent: 2 },
            fired: true,
        });
        let back = Scene::decode(&mut Reader::new(&s.to_bytes())).unwrap();
        assert_eq!(back, s);
    }
}
