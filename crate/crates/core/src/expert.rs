//! Privileged rule-based expert.
//!
//! The expert reads the full scene: IDM against the nearest vehicle in its
//! driving corridor for the longitudinal plan, the lane centerline for the
//! lateral plan, and a gap-acceptance check before any lane change. Each
//! decision carries a language label taken from the rule branch that
//! produced it.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::language::{LanguageAction, MetaAction, Reason};
use crate::world::geometry::{normalize_angle, resample_equidistant, Projection};
use crate::world::{
    pid_actuate, step_world, Behavior, DrivingAction, IdmParams, Lane, PidState, Scene,
    VehicleState, WorldConfig, N_PATH, N_SPEED, PATH_SPACING, SPEED_DT, WORLD_DT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    FollowLane,
    FollowLead,
    Stop,
    ChangeLaneLeft,
    ChangeLaneRight,
    EmergencyStop,
    Wait,
}

impl Intent {
    pub const ALL: [Intent; 7] = [
        Intent::FollowLane,
        Intent::FollowLead,
        Intent::Stop,
        Intent::ChangeLaneLeft,
        Intent::ChangeLaneRight,
        Intent::EmergencyStop,
        Intent::Wait,
    ];

    /// Meta-actions the expert may attach to this intent.
    pub fn allowed_meta(self) -> &'static [MetaAction] {
        use MetaAction::*;
        match self {
            Intent::FollowLane => &[Follow, Accelerate, Start, Decelerate],
            Intent::FollowLead => &[Follow, Decelerate],
            Intent::Stop | Intent::EmergencyStop => &[Stop],
            Intent::ChangeLaneLeft => &[LaneChangeLeft],
            Intent::ChangeLaneRight => &[LaneChangeRight],
            Intent::Wait => &[Wait],
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Intent::ChangeLaneLeft | Intent::ChangeLaneRight)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Intent> {
        Intent::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub idm: IdmParams,
    /// Minimum bumper gap to the new leader for a lane change.
    pub front_gap: f64,
    /// Minimum bumper gap to the new follower for a lane change.
    pub rear_gap: f64,
    /// Seconds of rear closing speed added to `rear_gap`.
    pub rear_closing_margin: f64,
    /// Lateral progress toward the target lane after which a lane change is
    /// finished without re-checking gaps.
    pub commit_offset: f64,
    /// A stationary obstacle closer than this blocks the lane.
    pub blocked_lookahead: f64,
    /// Extra distance kept behind a blocking obstacle while waiting to merge.
    pub merge_standoff: f64,
    /// Crossing vehicles predicted to enter the corridor within this many
    /// seconds are treated as stationary obstacles.
    pub crossing_horizon: f64,
    /// Lateral margin added to corridor checks.
    pub corridor_margin: f64,
    /// Kinematic braking demand above which a stop is an emergency.
    pub emergency_decel: f64,
    pub min_blend_length: f64,
    pub blend_time: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            idm: IdmParams::default(),
            front_gap: 8.0,
            rear_gap: 6.0,
            rear_closing_margin: 1.0,
            commit_offset: 0.5,
            blocked_lookahead: 40.0,
            merge_standoff: 8.0,
            crossing_horizon: 4.0,
            corridor_margin: 0.4,
            emergency_decel: 4.5,
            min_blend_length: 10.0,
            blend_time: 2.0,
        }
    }
}

/// Gap-acceptance evidence for a proposed lane change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeCheck {
    pub target_lane: u32,
    pub front_gap: f64,
    pub rear_gap: f64,
    /// Rear vehicle speed minus ego speed, floored at zero.
    pub rear_closing: f64,
    /// The ego had already started moving toward the target lane; the gap
    /// thresholds are halved (and the closing margin dropped) for it.
    pub underway: bool,
    pub committed: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDecision {
    pub action: DrivingAction,
    pub language: LanguageAction,
    pub intent: Intent,
    /// Commanded longitudinal acceleration behind the speed points.
    pub accel: f64,
    pub lane_change: Option<LaneChangeCheck>,
}

/// A vehicle in a lane-aligned corridor ahead of the ego.
#[derive(Debug, Clone, Copy)]
struct Obstruction {
    gap: f64,
    speed: f64,
    behavior: Behavior,
    /// Predicted crossing rather than currently inside the corridor.
    predicted: bool,
}

/// Lateral and longitudinal half extents of `v` measured in a frame with heading `heading`.
fn half_extents(v: &VehicleState, heading: f64) -> (f64, f64) {
    let rel = v.pose.yaw - heading;
    let (s, c) = rel.sin_cos();
    (
        0.5 * (v.length * c.abs() + v.width * s.abs()),
        0.5 * (v.length * s.abs() + v.width * c.abs()),
    )
}

/// Vehicles ahead of the ego whose footprint overlaps (or is about to
/// overlap) a corridor along `lane` whose lateral offset at `ds` meters
/// ahead of the ego is `center(ds)`.
fn corridor_obstructions(
    scene: &Scene,
    lane: &Lane,
    center: impl Fn(f64) -> f64,
    cfg: &ExpertConfig,
) -> Vec<Obstruction> {
    let ego = &scene.ego;
    let ego_pr = lane.project(ego.pose.position());
    let (ego_lon, ego_lat) = half_extents(ego, ego_pr.heading);
    let (hs, hc) = ego_pr.heading.sin_cos();
    scene
        .agents
        .iter()
        .filter_map(|a| {
            let pr = lane.project(a.state.pose.position());
            let (lon, lat) = half_extents(&a.state, pr.heading);
            let gap = pr.station - ego_pr.station - ego_lon - lon;
            if pr.station - ego_pr.station <= 0.0 {
                return None;
            }
            let corridor = ego_lat + lat + cfg.corridor_margin;
            let offset = pr.lateral - center(pr.station - ego_pr.station);
            let vel = a.state.velocity();
            let v_lon = vel[0] * hc + vel[1] * hs;
            if offset.abs() < corridor {
                return Some(Obstruction {
                    gap,
                    speed: v_lon,
                    behavior: a.behavior,
                    predicted: false,
                });
            }
            // Lateral velocity toward the corridor centre.
            let v_lat = -vel[0] * hs + vel[1] * hc;
            let toward = -offset.signum() * v_lat;
            if toward > 0.2 {
                let t_in = (offset.abs() - corridor) / toward;
                if t_in < cfg.crossing_horizon {
                    return Some(Obstruction {
                        gap,
                        speed: 0.0,
                        behavior: a.behavior,
                        predicted: true,
                    });
                }
            }
            None
        })
        .collect()
}

fn nearest(obs: &[Obstruction]) -> Option<Obstruction> {
    obs.iter().copied().min_by(|a, b| a.gap.total_cmp(&b.gap))
}

/// Nearest vehicles ahead of and behind the ego in `lane`'s corridor, as
/// (bumper gap, speed along the lane).
pub(crate) fn gaps_in_lane(scene: &Scene, lane: &Lane) -> (Option<(f64, f64)>, Option<(f64, f64)>) {
    let ego = &scene.ego;
    let ego_pr = lane.project(ego.pose.position());
    let (ego_lon, _) = half_extents(ego, ego_pr.heading);
    let (hs, hc) = ego_pr.heading.sin_cos();
    let mut front: Option<(f64, f64)> = None;
    let mut rear: Option<(f64, f64)> = None;
    for a in &scene.agents {
        let pr = lane.project(a.state.pose.position());
        let (lon, lat) = half_extents(&a.state, pr.heading);
        if pr.lateral.abs() >= 0.5 * lane.width + lat - 0.2 {
            continue;
        }
        let vel = a.state.velocity();
        let v = vel[0] * hc + vel[1] * hs;
        let ds = pr.station - ego_pr.station;
        let gap = ds.abs() - ego_lon - lon;
        let slot = if ds >= 0.0 { &mut front } else { &mut rear };
        if slot.is_none_or(|(g, _)| gap < g) {
            *slot = Some((gap, v));
        }
    }
    (front, rear)
}

/// Neighbour of `from` one step toward `target`, searching left then right.
pub(crate) fn step_toward(scene: &Scene, from: &Lane, target: u32) -> Option<(u32, bool)> {
    for left in [true, false] {
        let mut cur = Some(from);
        while let Some(l) = cur {
            let next = if left { l.left } else { l.right };
            match next {
                Some(n) if n == target => {
                    return Some((if left { from.left } else { from.right }?, left));
                }
                Some(n) => cur = scene.lane(n),
                None => cur = None,
            }
        }
    }
    None
}

/// Planned lateral offset from a lane centerline: a cubic Hermite segment
/// leaving the ego tangentially and meeting the centerline after `len`.
#[derive(Debug, Clone, Copy)]
struct LateralProfile {
    offset: f64,
    slope: f64,
    len: f64,
}

impl LateralProfile {
    fn new(ego: &VehicleState, pr: &Projection, cfg: &ExpertConfig) -> Self {
        let heading_err = normalize_angle(ego.pose.yaw - pr.heading).clamp(-0.6, 0.6);
        LateralProfile {
            offset: pr.lateral,
            slope: heading_err.tan(),
            len: cfg.min_blend_length.max(cfg.blend_time * ego.speed),
        }
    }

    fn at(&self, ds: f64) -> f64 {
        let u = (ds / self.len).max(0.0);
        if u >= 1.0 {
            return 0.0;
        }
        let h00 = 2.0 * u * u * u - 3.0 * u * u + 1.0;
        let h10 = u * u * u - 2.0 * u * u + u;
        self.offset * h00 + self.len * self.slope * h10
    }
}

/// Path along `lane`, starting at the ego and following `profile`.
fn lane_path(ego: &VehicleState, lane: &Lane, ego_pr: &Projection, profile: &LateralProfile) -> Vec<[f64; 2]> {
    let horizon = (N_PATH as f64 * PATH_SPACING) + 6.0;
    let step = 0.25;
    let n = (horizon / step).ceil() as usize;
    let dense: Vec<[f64; 2]> = (1..=n)
        .map(|k| {
            let ds = k as f64 * step;
            let (p, h) = lane.centerline.sample(ego_pr.station + ds);
            let lat = profile.at(ds);
            let world = [p[0] - h.sin() * lat, p[1] + h.cos() * lat];
            ego.pose.to_local(world)
        })
        .collect();
    resample_equidistant([0.0, 0.0], &dense, PATH_SPACING, N_PATH)
}

/// Distance travelled after `t` seconds from speed `v` at constant `a`,
/// stopping (not reversing) when the speed reaches zero.
fn travelled(v: f64, a: f64, t: f64) -> f64 {
    if a < 0.0 {
        let t_stop = v / -a;
        if t >= t_stop {
            return v * v / (-2.0 * a);
        }
    }
    v * t + 0.5 * a * t * t
}

/// Point at arc length `s` along the polyline origin → path, extrapolating
/// along the final segment.
fn along_path(path: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut prev = [0.0, 0.0];
    let mut acc = 0.0;
    let mut dir = [1.0, 0.0];
    for &p in path {
        let d = [p[0] - prev[0], p[1] - prev[1]];
        let len = d[0].hypot(d[1]);
        if len > 1e-12 {
            dir = [d[0] / len, d[1] / len];
            if acc + len >= s {
                let t = s - acc;
                return [prev[0] + dir[0] * t, prev[1] + dir[1] * t];
            }
            acc += len;
        }
        prev = p;
    }
    let t = s - acc;
    [prev[0] + dir[0] * t, prev[1] + dir[1] * t]
}

fn speed_points(path: &[[f64; 2]], v: f64, a: f64) -> Vec<[f64; 2]> {
    (1..=N_SPEED)
        .map(|k| along_path(path, travelled(v, a, k as f64 * SPEED_DT)))
        .collect()
}

fn obstruction_reason(o: &Obstruction) -> Reason {
    match o.behavior {
        Behavior::Obstacle => Reason::Obstacle,
        Behavior::CrossTraffic { .. } => Reason::CrossTraffic,
        _ if o.predicted => Reason::CrossTraffic,
        _ => Reason::LeadVehicle,
    }
}

/// One expert planning step on `scene`.
pub fn expert_decide(scene: &Scene, cfg: &ExpertConfig) -> Result<ExpertDecision> {
    let (lane, ego_pr) = scene.ego_lane()?;
    let ego = &scene.ego;
    let v = ego.speed;
    let idm = cfg.idm.with_v0(lane.speed_limit);

    let here_profile = LateralProfile::new(ego, &ego_pr, cfg);
    let here = corridor_obstructions(scene, lane, |ds| here_profile.at(ds), cfg);
    // Blockage is judged on the lane itself, not on the ego's offset in it.
    let lane_lead = nearest(&corridor_obstructions(scene, lane, |_| 0.0, cfg));

    // Lane the ego wants to move to, and whether the route or a blockage demands it.
    let route_target = scene.route.lanes.last().copied().unwrap_or(lane.id);
    let blocked = lane_lead
        .is_some_and(|o| matches!(o.behavior, Behavior::Obstacle) && o.gap < cfg.blocked_lookahead);
    let desire = if route_target != lane.id {
        step_toward(scene, lane, route_target)
    } else if blocked {
        lane.left
            .map(|l| (l, true))
            .or(lane.right.map(|r| (r, false)))
    } else {
        None
    };

    let lane_change = desire.and_then(|(target_id, left)| {
        let target = scene.lane(target_id)?;
        let target_pr = target.project(ego.pose.position());
        let (front, rear) = gaps_in_lane(scene, target);
        let front_gap = front.map_or(f64::INFINITY, |f| f.0);
        let (rear_gap, rear_speed) = rear.unwrap_or((f64::INFINITY, 0.0));
        let rear_closing = (rear_speed - v).max(0.0);
        // Progress toward the target lane, measured from the current lane centre.
        let progress = 0.5 * (lane.width + target.width) - target_pr.lateral.abs();
        let committed = progress > cfg.commit_offset;
        // Already moving toward the target lane: keep going unless the gaps
        // have shrunk to half their thresholds.
        let toward = normalize_angle(ego.pose.yaw - target_pr.heading) * if left { 1.0 } else { -1.0 };
        let underway = !committed && (progress > 0.15 || toward > 0.05);
        let fresh = front_gap >= cfg.front_gap
            && rear_gap >= cfg.rear_gap + cfg.rear_closing_margin * rear_closing;
        let continuing = underway && front_gap >= 0.5 * cfg.front_gap && rear_gap >= 0.5 * cfg.rear_gap;
        let accepted = committed || fresh || continuing;
        Some((
            LaneChangeCheck {
                target_lane: target_id,
                front_gap,
                rear_gap,
                rear_closing,
                underway,
                committed,
                accepted,
            },
            left,
            front,
        ))
    });
    let target_front = lane_change.and_then(|(_, _, f)| f);
    let lane_change = lane_change.map(|(c, left, _)| (c, left));

    let changing = lane_change.filter(|(c, _)| c.accepted);
    let (plan_lane, plan_pr) = match changing {
        Some((c, _)) => {
            let t = scene.lane(c.target_lane).expect("target lane checked above");
            (t, t.project(ego.pose.position()))
        }
        None => (lane, ego_pr),
    };

    // Longitudinal plan: most restrictive IDM demand over every relevant corridor.
    let profile = LateralProfile::new(ego, &plan_pr, cfg);
    let obstructions = if changing.is_some() {
        corridor_obstructions(scene, plan_lane, |ds| profile.at(ds), cfg)
    } else {
        here
    };
    let waiting_to_merge = lane_change.is_some_and(|(c, _)| !c.accepted);
    let governing = nearest(&obstructions);
    let mut accel = idm.acceleration(v, None);
    for o in &obstructions {
        let mut gap = o.gap;
        if waiting_to_merge && matches!(o.behavior, Behavior::Obstacle) {
            gap -= cfg.merge_standoff;
        }
        accel = accel.min(idm.acceleration(v, Some((gap, o.speed))));
    }
    // While waiting, drop back behind the nearest target-lane vehicle ahead
    // so that a gap opens up beside the ego.
    if waiting_to_merge {
        if let Some((gap, speed)) = target_front {
            accel = accel.min(idm.acceleration(v, Some((gap.max(0.0), speed))));
        }
    }

    let path = lane_path(ego, plan_lane, &plan_pr, &profile);
    let speed = speed_points(&path, v, accel);
    let action = DrivingAction::new(path, speed);

    let (intent, language) = if let Some((c, left)) = changing {
        let _ = c;
        let intent = if left { Intent::ChangeLaneLeft } else { Intent::ChangeLaneRight };
        let meta = if left { MetaAction::LaneChangeLeft } else { MetaAction::LaneChangeRight };
        (intent, LanguageAction::new(meta, Reason::GapAvailable))
    } else if let Some(o) = governing {
        let closing = (v - o.speed).max(0.0);
        let required = closing * closing / (2.0 * (o.gap - cfg.idm.min_gap).max(0.1));
        let reason = obstruction_reason(&o);
        if v > 2.0 && required > cfg.emergency_decel {
            (Intent::EmergencyStop, LanguageAction::new(MetaAction::Stop, reason))
        } else if waiting_to_merge && matches!(o.behavior, Behavior::Obstacle) && (v < 0.5 || accel < 0.0) {
            (Intent::Wait, LanguageAction::new(MetaAction::Wait, Reason::NoGap))
        } else if o.speed < 0.5 && (accel < -0.5 || v < 0.5) && o.gap < 25.0 {
            (Intent::Stop, LanguageAction::new(MetaAction::Stop, reason))
        } else if o.gap < 40.0 || accel < -0.5 {
            let meta = if accel < -0.5 { MetaAction::Decelerate } else { MetaAction::Follow };
            (Intent::FollowLead, LanguageAction::new(meta, reason))
        } else {
            follow_lane(v, accel, waiting_to_merge)
        }
    } else {
        follow_lane(v, accel, waiting_to_merge)
    };

    Ok(ExpertDecision {
        action,
        language,
        intent,
        accel,
        lane_change: lane_change.map(|(c, _)| c),
    })
}

fn follow_lane(v: f64, accel: f64, route_pending: bool) -> (Intent, LanguageAction) {
    let reason = if route_pending { Reason::RouteTurn } else { Reason::ClearRoad };
    let meta = if v < 0.5 && accel > 0.0 {
        MetaAction::Start
    } else if accel > 0.5 {
        MetaAction::Accelerate
    } else if accel < -0.5 {
        MetaAction::Decelerate
    } else {
        MetaAction::Follow
    };
    (Intent::FollowLane, LanguageAction::new(meta, reason))
}

/// One tick of expert driving: the scene before the tick and the decision
/// taken on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTick {
    pub scene: Scene,
    pub decision: ExpertDecision,
}

/// Closes the loop expert → PID → world for `ticks` ticks, returning the
/// pre-step scene and decision of every tick together with the final scene.
pub fn expert_drive(
    scene: &Scene,
    ticks: usize,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<ExpertTick>, Scene)> {
    let mut cur = scene.clone();
    let mut pid = PidState::default();
    let mut log = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let decision = expert_decide(&cur, expert)?;
        let (control, next_pid) = pid_actuate(&decision.action, &cur.ego, pid, &world.pid, &world.vehicle, WORLD_DT);
        pid = next_pid;
        let next = step_world(&cur, &control, WORLD_DT, &world.vehicle, &world.idm)?;
        log.push(ExpertTick {
            scene: cur,
            decision,
        });
        cur = next;
    }
    Ok((log, cur))
}

/// Ego state sample of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl From<&VehicleState> for TrajectoryPoint {
    fn from(v: &VehicleState) -> Self {
        TrajectoryPoint {
            x: v.pose.x,
            y: v.pose.y,
            yaw: v.pose.yaw,
            speed: v.speed,
        }
    }
}

/// Ego states after each of `horizon_ticks` expert-driven ticks at 20 Hz.
pub fn expert_rollout(
    scene: &Scene,
    horizon_ticks: usize,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<Vec<TrajectoryPoint>> {
    let (log, last) = expert_drive(scene, horizon_ticks, expert, world)?;
    Ok(log
        .iter()
        .skip(1)
        .map(|t| TrajectoryPoint::from(&t.scene.ego))
        .chain(std::iter::once(TrajectoryPoint::from(&last.ego)))
        .collect())
}
