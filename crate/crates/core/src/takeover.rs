//! Shadow-mode monitoring and expert takeover.
//!
//! While the learned policy drives, the expert computes its own decision on
//! every tick without acting. Three triggers compare the two: the expert
//! brakes and the policy does not ([`TriggerKind::Follow`]), a constant
//! velocity prediction shows a crash within a second
//! ([`TriggerKind::Collision`]), or the ego sits still while the expert
//! sees a way forward ([`TriggerKind::Restart`]). A firing trigger hands
//! control to the expert for `takeover_ticks`; the ticks leading up to it
//! become the pre-takeover window.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Wire};
use crate::error::{Error, Result};
use crate::eval::{colliding, off_route, reached_goal, Driver, EpisodeOptions};
use crate::expert::{expert_decide, ExpertConfig, ExpertDecision, Intent};
use crate::language::{LanguageAction, MetaAction, Reason};
use crate::world::{
    obb_overlap, pid_actuate, step_world, DrivingAction, PidState, Scene, WorldConfig,
    WORLD_DT,
};
use crate::world::scenario::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TriggerKind {
    Follow,
    Collision,
    Restart,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 3] = [TriggerKind::Follow, TriggerKind::Collision, TriggerKind::Restart];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TriggerKind::Follow => "follow",
            TriggerKind::Collision => "collision",
            TriggerKind::Restart => "restart",
        }
    }
}

impl std::fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Wire for TriggerKind {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.index() as u8).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match u8::decode(r)? {
            0 => Ok(TriggerKind::Follow),
            1 => Ok(TriggerKind::Collision),
            2 => Ok(TriggerKind::Restart),
            t => Err(r.error(format!("unknown trigger kind {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TakeoverConfig {
    pub takeover_ticks: usize,
    pub pre_ticks: usize,
    /// Consecutive non-responding ticks before Follow fires.
    pub follow_ticks: u32,
    /// The expert counts as braking below this commanded acceleration.
    pub follow_expert_decel: f64,
    /// The policy counts as responding at or below this implied acceleration.
    pub follow_policy_decel: f64,
    /// A plan whose first speed interval is below this is executed as a hold
    /// by the controller: it counts as responding to a Follow situation and
    /// as ignoring a Restart cue.
    pub stop_speed: f64,
    pub collision_horizon_s: f64,
    pub collision_substep_s: f64,
    pub restart_speed: f64,
    pub restart_ticks: u32,
    /// Shadow monitoring stays off this many ticks after a handback.
    pub cooldown_ticks: u32,
}

impl Default for TakeoverConfig {
    fn default() -> Self {
        TakeoverConfig {
            takeover_ticks: 50,
            pre_ticks: 20,
            follow_ticks: 10,
            follow_expert_decel: -0.5,
            follow_policy_decel: -0.1,
            stop_speed: 0.1,
            collision_horizon_s: 1.0,
            collision_substep_s: 0.05,
            restart_speed: 0.3,
            restart_ticks: 60,
            cooldown_ticks: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TakeoverEvent {
    pub trigger: TriggerKind,
    /// World tick (20 Hz) on which the trigger fired.
    pub t_trigger: u64,
    pub takeover_ticks: usize,
    pub pre_ticks: usize,
}

impl TakeoverEvent {
    pub fn validate(&self) -> Result<()> {
        if self.takeover_ticks == 0 {
            return Err(Error::InvalidInput("takeover_ticks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitorState {
    pub follow_nonresponse_ticks: u32,
    pub restart_stuck_ticks: u32,
    /// The expert proposed an accepted lane change or a start during the
    /// current stuck stretch.
    pub restart_cue: bool,
    pub cooldown: u32,
    pub last_decision: Option<ExpertDecision>,
}

impl MonitorState {
    fn reset_counters(&mut self) {
        self.follow_nonresponse_ticks = 0;
        self.restart_stuck_ticks = 0;
        self.restart_cue = false;
    }
}

/// Brute-force constant-velocity prediction: does the ego overlap any agent
/// at some substep `k·dt`, `k = 0..=horizon/dt`?
pub fn predicts_collision(scene: &Scene, horizon_s: f64, substep_s: f64) -> bool {
    let steps = (horizon_s / substep_s).round() as usize;
    (0..=steps).any(|k| {
        let t = k as f64 * substep_s;
        let ego = scene.ego.extrapolate(t);
        scene
            .agents
            .iter()
            .any(|a| obb_overlap(&ego, &a.state.extrapolate(t)))
    })
}

fn expert_braking(d: &ExpertDecision, cfg: &TakeoverConfig) -> bool {
    let decel_intent = matches!(
        d.intent,
        Intent::FollowLead | Intent::Stop | Intent::EmergencyStop | Intent::Wait
    ) || d.language.meta == MetaAction::Decelerate;
    decel_intent && d.accel < cfg.follow_expert_decel
}

fn restart_cue(d: &ExpertDecision) -> bool {
    d.lane_change.is_some_and(|c| c.accepted) || d.language.meta == MetaAction::Start
}

/// One monitoring tick. Returns the highest-priority trigger that fired
/// (Collision > Follow > Restart) and the updated monitor.
pub fn check_triggers(
    scene: &Scene,
    policy_action: &DrivingAction,
    expert: &ExpertDecision,
    mon: &MonitorState,
    cfg: &TakeoverConfig,
) -> (Option<TriggerKind>, MonitorState) {
    let mut m = mon.clone();
    m.last_decision = Some(expert.clone());
    if m.cooldown > 0 {
        m.cooldown -= 1;
        return (None, m);
    }

    let holding = policy_action.implied_speeds().first().is_none_or(|&v| v < cfg.stop_speed);
    let responding = holding || policy_action.implied_acceleration() <= cfg.follow_policy_decel;
    if expert_braking(expert, cfg) && !responding {
        m.follow_nonresponse_ticks += 1;
    } else {
        m.follow_nonresponse_ticks = 0;
    }

    if scene.ego.speed < cfg.restart_speed {
        m.restart_stuck_ticks += 1;
        // Only a cue the policy ignores counts.
        m.restart_cue |= holding && restart_cue(expert);
    } else {
        m.restart_stuck_ticks = 0;
        m.restart_cue = false;
    }

    let fired = if predicts_collision(scene, cfg.collision_horizon_s, cfg.collision_substep_s) {
        Some(TriggerKind::Collision)
    } else if m.follow_nonresponse_ticks >= cfg.follow_ticks {
        Some(TriggerKind::Follow)
    } else if m.restart_stuck_ticks >= cfg.restart_ticks && m.restart_cue {
        Some(TriggerKind::Restart)
    } else {
        None
    };
    if fired.is_some() {
        m.reset_counters();
    }
    (fired, m)
}

/// Trigger-specific rewrite of the expert's label. Idempotent.
pub fn enhance_label(original: LanguageAction, trigger: TriggerKind) -> LanguageAction {
    match trigger {
        TriggerKind::Collision => LanguageAction::new(MetaAction::EmergencyStop, Reason::CollisionRisk),
        TriggerKind::Follow => LanguageAction::new(MetaAction::Decelerate, Reason::LeadVehicleClosing),
        TriggerKind::Restart => {
            let meta = match original.meta {
                m @ (MetaAction::LaneChangeLeft | MetaAction::LaneChangeRight) => m,
                _ => MetaAction::Start,
            };
            LanguageAction::new(meta, Reason::GapAvailable)
        }
    }
}

/// A tick driven by the expert after a trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct TakeoverTick {
    pub scene: Scene,
    /// Carries the expert action and language for the tick.
    pub decision: ExpertDecision,
    pub trigger: TriggerKind,
}

/// Lets the expert drive from `scene` for `event.takeover_ticks` ticks.
/// Returns the logged ticks (pre-step scenes) and the scene at handback.
pub fn execute_takeover(
    scene: &Scene,
    event: &TakeoverEvent,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<TakeoverTick>, Scene)> {
    event.validate()?;
    let mut cur = scene.clone();
    let mut pid = PidState::default();
    let mut out = Vec::with_capacity(event.takeover_ticks);
    for _ in 0..event.takeover_ticks {
        let d = expert_decide(&cur, expert)?;
        let (control, next_pid) = pid_actuate(&d.action, &cur.ego, pid, &world.pid, &world.vehicle, WORLD_DT);
        pid = next_pid;
        let next = step_world(&cur, &control, WORLD_DT, &world.vehicle, &world.idm)?;
        out.push(TakeoverTick {
            scene: cur,
            decision: d,
            trigger: event.trigger,
        });
        cur = next;
    }
    Ok((out, cur))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Controller {
    Policy,
    Expert,
}

/// Everything known about one tick of a shadow-mode episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTick {
    /// Scene before the tick's step.
    pub scene: Scene,
    /// The expert's decision: shadow while the policy drives, acting during
    /// a takeover.
    pub expert: ExpertDecision,
    /// `None` during takeovers.
    pub policy_action: Option<DrivingAction>,
    pub controller: Controller,
    /// Trigger of the takeover this tick belongs to.
    pub trigger: Option<TriggerKind>,
}

impl AsRef<Scene> for ShadowTick {
    fn as_ref(&self) -> &Scene {
        &self.scene
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeEnd {
    Goal,
    Collision,
    OffRoute,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEpisode {
    pub scenario: String,
    pub seed: u64,
    /// Indexed by world tick: `ticks[t].scene.tick == t`.
    pub ticks: Vec<ShadowTick>,
    pub events: Vec<TakeoverEvent>,
    pub end: EpisodeEnd,
}

/// One pre-takeover tick: the scene and the enhanced label, no action.
#[derive(Debug, Clone, PartialEq)]
pub struct PreTakeoverTick {
    pub scene: Scene,
    pub language: LanguageAction,
    pub intent: Intent,
    pub mask: u8,
}

/// Ticks `t − pre_ticks .. t − 1` before `event`, labeled with the enhanced
/// shadow-expert language. The flag is set when history was too short and
/// the window got truncated.
pub fn extract_pre_takeover(log: &[ShadowTick], event: &TakeoverEvent) -> (Vec<PreTakeoverTick>, bool) {
    let t = event.t_trigger as usize;
    let start = t.saturating_sub(event.pre_ticks);
    let truncated = t < event.pre_ticks || t > log.len();
    let out = log[start.min(log.len())..t.min(log.len())]
        .iter()
        .map(|tick| PreTakeoverTick {
            scene: tick.scene.clone(),
            language: enhance_label(tick.expert.language, event.trigger),
            intent: tick.expert.intent,
            mask: 1,
        })
        .collect();
    (out, truncated)
}

/// Runs `policy` on a scenario under shadow monitoring. Triggers hand
/// control to the expert for a full takeover block; terminal conditions are
/// checked on every other tick exactly as in evaluation.
pub fn run_shadow_episode(
    policy: &mut dyn Driver,
    scenario: &ScenarioConfig,
    seed: u64,
    expert: &ExpertConfig,
    world: &WorldConfig,
    cfg: &TakeoverConfig,
    opts: EpisodeOptions,
) -> Result<ShadowEpisode> {
    let mut scene = scenario.scene(seed);
    let max_ticks = (opts.timeout_s / WORLD_DT).round() as u64;
    let mut pid = PidState::default();
    let mut mon = MonitorState::default();
    let mut ticks = Vec::new();
    let mut events = Vec::new();

    let end = loop {
        if colliding(&scene) {
            break EpisodeEnd::Collision;
        }
        if reached_goal(&scene) {
            break EpisodeEnd::Goal;
        }
        if off_route(&scene) {
            break EpisodeEnd::OffRoute;
        }
        if scene.tick >= max_ticks {
            break EpisodeEnd::Timeout;
        }
        let shadow = expert_decide(&scene, expert)?;
        let action = policy.plan(&scene)?;
        let (fired, next_mon) = check_triggers(&scene, &action, &shadow, &mon, cfg);
        mon = next_mon;
        if let Some(trigger) = fired {
            let event = TakeoverEvent {
                trigger,
                t_trigger: scene.tick,
                takeover_ticks: cfg.takeover_ticks,
                pre_ticks: cfg.pre_ticks,
            };
            let (log, next) = execute_takeover(&scene, &event, expert, world)?;
            ticks.extend(log.into_iter().map(|t| ShadowTick {
                scene: t.scene,
                expert: t.decision,
                policy_action: None,
                controller: Controller::Expert,
                trigger: Some(trigger),
            }));
            events.push(event);
            scene = next;
            pid = PidState::default();
            mon = MonitorState {
                cooldown: cfg.cooldown_ticks,
                ..MonitorState::default()
            };
            continue;
        }
        let (control, next_pid) = pid_actuate(&action, &scene.ego, pid, &world.pid, &world.vehicle, WORLD_DT);
        pid = next_pid;
        let next = step_world(&scene, &control, WORLD_DT, &world.vehicle, &world.idm)?;
        ticks.push(ShadowTick {
            scene,
            expert: shadow,
            policy_action: Some(action),
            controller: Controller::Policy,
            trigger: None,
        });
        scene = next;
    };
    Ok(ShadowEpisode {
        scenario: scenario.name.clone(),
        seed,
        ticks,
        events,
        end,
    })
}

#[cfg(test)]
mod tests;
