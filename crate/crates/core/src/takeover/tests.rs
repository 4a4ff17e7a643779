use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eval::{ExpertDriver, StopDriver};
use crate::world::scenario::{eval_suite, Family};
use crate::world::{Agent, Behavior, Lane, Pose2D, Route, VehicleState};

fn scene(ego_speed: f64, agents: Vec<Agent>) -> Scene {
    Scene {
        time: 0.0,
        tick: 0,
        ego: VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), ego_speed),
        agents,
        lanes: vec![Lane::straight(0, [-50.0, 0.0], [500.0, 0.0], 3.5, 10.0)],
        route: Route {
            lanes: vec![0],
            goal: [450.0, 0.0],
        },
        events: vec![],
    }
}

fn stopped(id: u32, x: f64) -> Agent {
    Agent {
        id,
        state: VehicleState::new(Pose2D::new(x, 0.0, 0.0), 0.0),
        behavior: Behavior::Obstacle,
        active: false,
        timer: 0.0,
    }
}

fn cfg() -> TakeoverConfig {
    TakeoverConfig::default()
}

#[test]
fn free_road_matching_policy_never_fires() {
    let s = scene(8.0, vec![]);
    let d = expert_decide(&s, &ExpertConfig::default()).unwrap();
    let mut mon = MonitorState::default();
    for _ in 0..200 {
        let (fired, m) = check_triggers(&s, &d.action, &d, &mon, &cfg());
        assert_eq!(fired, None);
        mon = m;
    }
    assert_eq!(mon.follow_nonresponse_ticks, 0);
    assert_eq!(mon.restart_stuck_ticks, 0);
}

#[test]
fn follow_fires_on_tenth_unresponsive_tick() {
    // Stopped car 30 m ahead (25.5 m bumper gap): the expert brakes, the
    // policy keeps 8 m/s.
    let s = scene(8.0, vec![stopped(1, 30.0)]);
    let d = expert_decide(&s, &ExpertConfig::default()).unwrap();
    assert!(d.accel < -0.5);
    let hold = DrivingAction::straight(8.0);
    let mut mon = MonitorState::default();
    let mut fired_at = None;
    for tick in 1..=11 {
        let (fired, m) = check_triggers(&s, &hold, &d, &mon, &cfg());
        mon = m;
        if fired.is_some() && fired_at.is_none() {
            assert_eq!(fired, Some(TriggerKind::Follow));
            fired_at = Some(tick);
        }
    }
    assert_eq!(fired_at, Some(10));
}

#[test]
fn follow_counter_resets_when_policy_brakes() {
    let s = scene(8.0, vec![stopped(1, 30.0)]);
    let d = expert_decide(&s, &ExpertConfig::default()).unwrap();
    let hold = DrivingAction::straight(8.0);
    let mut mon = MonitorState::default();
    for _ in 0..9 {
        mon = check_triggers(&s, &hold, &d, &mon, &cfg()).1;
    }
    assert_eq!(mon.follow_nonresponse_ticks, 9);
    mon = check_triggers(&s, &d.action, &d, &mon, &cfg()).1;
    assert_eq!(mon.follow_nonresponse_ticks, 0);
}

#[test]
fn collision_prediction_matches_closed_form() {
    // Ego 10 m/s, stopped obstacle with an 8 m bumper gap: covered in 0.8 s.
    let s = scene(10.0, vec![stopped(1, 12.5)]);
    assert!(predicts_collision(&s, 1.0, 0.05));
    let d = expert_decide(&s, &ExpertConfig::default()).unwrap();
    let (fired, _) = check_triggers(&s, &DrivingAction::straight(10.0), &d, &MonitorState::default(), &cfg());
    assert_eq!(fired, Some(TriggerKind::Collision));

    // Aligned boxes on one line: overlap at some substep k·0.05 ≤ 1 s exactly
    // when the gap is at most the distance covered by the last substep.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let v: f64 = rng.random_range(0.0..20.0);
        let gap: f64 = rng.random_range(0.0..25.0);
        if (gap - v).abs() < 1e-6 {
            continue;
        }
        let s = scene(v, vec![stopped(1, gap + 4.5)]);
        assert_eq!(predicts_collision(&s, 1.0, 0.05), gap <= v, "v={v} gap={gap}");
    }
}

#[test]
fn restart_needs_stuck_time_and_a_cue() {
    let cue = ExpertDecision {
        action: DrivingAction::straight(0.5),
        language: LanguageAction::new(MetaAction::Start, Reason::ClearRoad),
        intent: Intent::FollowLane,
        accel: 1.0,
        lane_change: None,
    };
    let mut idle = cue.clone();
    idle.language = LanguageAction::new(MetaAction::Wait, Reason::NoGap);
    idle.intent = Intent::Wait;
    let s = scene(0.0, vec![]);
    let stop = DrivingAction::stop();

    let mut mon = MonitorState::default();
    for _ in 0..100 {
        let (fired, m) = check_triggers(&s, &stop, &idle, &mon, &cfg());
        assert_eq!(fired, None);
        mon = m;
    }
    let mut mon = MonitorState::default();
    let mut at = None;
    for tick in 1..=70 {
        let d = if tick == 5 { &cue } else { &idle };
        let (fired, m) = check_triggers(&s, &stop, d, &mon, &cfg());
        mon = m;
        if fired.is_some() {
            at = Some(tick);
            break;
        }
    }
    assert_eq!(at, Some(60));
}

#[test]
fn cooldown_suppresses_monitoring() {
    let s = scene(10.0, vec![stopped(1, 12.5)]);
    let d = expert_decide(&s, &ExpertConfig::default()).unwrap();
    let mut mon = MonitorState {
        cooldown: 20,
        ..MonitorState::default()
    };
    for _ in 0..20 {
        let (fired, m) = check_triggers(&s, &DrivingAction::straight(10.0), &d, &mon, &cfg());
        assert_eq!(fired, None);
        mon = m;
    }
    assert!(check_triggers(&s, &DrivingAction::straight(10.0), &d, &mon, &cfg()).0.is_some());
}

#[test]
fn enhancement_table() {
    use MetaAction::*;
    let l = LanguageAction::new;
    assert_eq!(
        enhance_label(l(Decelerate, Reason::LeadVehicle), TriggerKind::Collision),
        l(EmergencyStop, Reason::CollisionRisk)
    );
    assert_eq!(enhance_label(l(Wait, Reason::NoGap), TriggerKind::Restart), l(Start, Reason::GapAvailable));
    assert_eq!(
        enhance_label(l(LaneChangeLeft, Reason::Obstacle), TriggerKind::Restart),
        l(LaneChangeLeft, Reason::GapAvailable)
    );
    assert_eq!(
        enhance_label(l(Follow, Reason::ClearRoad), TriggerKind::Follow),
        l(Decelerate, Reason::LeadVehicleClosing)
    );
    for &m in MetaAction::ALL {
        for &r in Reason::ALL {
            for t in TriggerKind::ALL {
                let once = enhance_label(l(m, r), t);
                assert_eq!(enhance_label(once, t), once);
            }
        }
    }
}

#[test]
fn takeover_block_lasts_two_and_a_half_seconds() {
    let s = scene(8.0, vec![stopped(1, 40.0)]);
    let event = TakeoverEvent {
        trigger: TriggerKind::Follow,
        t_trigger: 0,
        takeover_ticks: 50,
        pre_ticks: 20,
    };
    let (log, end) = execute_takeover(&s, &event, &ExpertConfig::default(), &WorldConfig::default()).unwrap();
    assert_eq!(log.len(), 50);
    assert!((end.time - s.time - 2.5).abs() < 1e-9);
    assert!(log.iter().all(|t| !colliding(&t.scene)));
}

#[test]
fn pre_takeover_window() {
    let suite = eval_suite();
    let sc = suite.iter().find(|s| s.family == Family::Follow).unwrap();
    let opts = EpisodeOptions {
        timeout_s: 10.0,
        keep_frames: false,
    };
    let ep = run_shadow_episode(
        &mut ExpertDriver(ExpertConfig::default()),
        sc,
        0,
        &ExpertConfig::default(),
        &WorldConfig::default(),
        &cfg(),
        opts,
    )
    .unwrap();
    let event = TakeoverEvent {
        trigger: TriggerKind::Follow,
        t_trigger: 100,
        takeover_ticks: 50,
        pre_ticks: 20,
    };
    let (pre, truncated) = extract_pre_takeover(&ep.ticks, &event);
    assert!(!truncated);
    assert_eq!(pre.len(), 20);
    assert!((pre[19].scene.time - pre[0].scene.time - 0.95).abs() < 1e-9);
    assert!((ep.ticks[100].scene.time - pre[0].scene.time - 1.0).abs() < 1e-9);
    assert!(pre.iter().all(|p| p.mask == 1 && p.language == enhance_label(p.language, TriggerKind::Follow)));

    let (none, _) = extract_pre_takeover(&ep.ticks, &TakeoverEvent { pre_ticks: 0, ..event });
    assert!(none.is_empty());
    let (short, truncated) = extract_pre_takeover(&ep.ticks, &TakeoverEvent { t_trigger: 7, ..event });
    assert!(truncated);
    assert_eq!(short.len(), 7);
}

#[test]
fn expert_as_policy_is_never_taken_over() {
    let expert = ExpertConfig::default();
    for sc in eval_suite() {
        let opts = EpisodeOptions {
            timeout_s: sc.timeout_s,
            keep_frames: false,
        };
        let ep = run_shadow_episode(&mut ExpertDriver(expert), &sc, 0, &expert, &WorldConfig::default(), &cfg(), opts)
            .unwrap();
        assert!(ep.events.is_empty(), "{} {:?}", sc.name, ep.events);
        assert_eq!(ep.end, EpisodeEnd::Goal, "{}", sc.name);
        for (i, t) in ep.ticks.iter().enumerate() {
            assert_eq!(t.scene.tick, i as u64);
        }
    }
}

#[test]
fn stop_policy_gets_restarted() {
    let expert = ExpertConfig::default();
    let sc = eval_suite().into_iter().find(|s| s.family == Family::Cruise).unwrap();
    let opts = EpisodeOptions {
        timeout_s: 20.0,
        keep_frames: false,
    };
    let ep = run_shadow_episode(&mut StopDriver, &sc, 0, &expert, &WorldConfig::default(), &cfg(), opts).unwrap();
    assert!(!ep.events.is_empty());
    assert!(ep.events.iter().all(|e| e.trigger == TriggerKind::Restart || e.trigger == TriggerKind::Follow));
    let takeover = ep.ticks.iter().filter(|t| t.controller == Controller::Expert).count();
    assert_eq!(takeover, 50 * ep.events.len());
}

#[test]
fn timid_policy_gets_restarted_in_dense_merge() {
    let expert = ExpertConfig::default();
    let timid = ExpertConfig {
        front_gap: 1e9,
        rear_gap: 1e9,
        ..expert
    };
    let sc = eval_suite().into_iter().find(|s| s.family == Family::DenseMerge).unwrap();
    let opts = EpisodeOptions {
        timeout_s: sc.timeout_s,
        keep_frames: false,
    };
    let ep = run_shadow_episode(&mut ExpertDriver(timid), &sc, 0, &expert, &WorldConfig::default(), &cfg(), opts).unwrap();
    assert!(!ep.events.is_empty());
    assert!(ep.events.iter().all(|e| e.trigger == TriggerKind::Restart));
}
