use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::expert::expert_drive;
use crate::language::{MetaAction, Reason};
use crate::policy::featurize;
use crate::world::{Agent, Behavior, Lane, Pose2D, Route, VehicleState};

fn scene(agents: Vec<Agent>) -> Scene {
    Scene {
        time: 0.0,
        tick: 0,
        ego: VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), 6.0),
        agents,
        lanes: vec![Lane::straight(0, [-50.0, 0.0], [500.0, 0.0], 3.5, 10.0)],
        route: Route {
            lanes: vec![0],
            goal: [450.0, 0.0],
        },
        events: vec![],
    }
}

fn agent(id: u32, x: f64, y: f64, v: f64, behavior: Behavior) -> Agent {
    Agent {
        id,
        state: VehicleState::new(Pose2D::new(x, y, 0.0), v),
        behavior,
        active: false,
        timer: 0.0,
    }
}

fn record(id: u64, source: Source, rng: &mut ChaCha8Rng) -> TakeoverRecord {
    use rand::Rng;
    let x: f64 = rng.random_range(10.0..60.0);
    let s = scene(vec![agent(1, x, 0.0, rng.random_range(0.0..9.0), Behavior::Idm { v0: 8.0 })]);
    let trigger = match source {
        Source::Pretrain => None,
        _ => Some(TriggerKind::ALL[rng.random_range(0..3)]),
    };
    TakeoverRecord {
        record_id: id,
        round: 1,
        source,
        trigger,
        intent: Intent::ALL[rng.random_range(0..7)],
        obs: featurize(&s).unwrap(),
        language_label: LanguageAction::new(MetaAction::Follow, Reason::LeadVehicle),
        expert_action: (source != Source::PreTakeover).then(|| DrivingAction::straight(rng.random_range(0.0..10.0))),
        mask: u8::from(source == Source::PreTakeover),
        agent_futures: vec![AgentFuture {
            id: 1,
            poses: (0..10).map(|k| [x + k as f64 * rng.random::<f64>(), 0.0, 1e-300]).collect(),
        }],
        reference_trajectory: (0..10).map(|k| [k as f64 * 1.1, -0.0]).collect(),
        scene: s,
    }
}

fn records(n: usize) -> Vec<TakeoverRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sources = [Source::Pretrain, Source::Takeover, Source::PreTakeover];
    (0..n).map(|i| record(i as u64, sources[i % 3], &mut rng)).collect()
}

#[test]
fn thousand_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let recs = records(1000);
    let m = write_dataset(&path, &recs, 1).unwrap();
    assert_eq!(m.records, 1000);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a, b);
    }
    assert_eq!(Manifest::load(&path).unwrap(), m);
}

#[test]
fn empty_dataset_loads_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    write_dataset(&path, &[], 0).unwrap();
    assert!(load_dataset(&path).unwrap().is_empty());
}

#[test]
fn truncation_names_last_valid_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    write_dataset(&path, &records(5), 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let err = decode_dataset(&bytes[..bytes.len() - 10]).unwrap_err();
    match err {
        Error::Parse { message, .. } => assert!(message.contains("last valid record: #3 id 3"), "{message}"),
        e => panic!("{e}"),
    }
    let mut flipped = bytes.clone();
    flipped[40] ^= 0xff;
    assert!(matches!(decode_dataset(&flipped), Err(Error::Parse { .. })));
}

#[test]
fn inconsistent_records_are_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = record(0, Source::PreTakeover, &mut rng);
    r.mask = 0;
    assert!(r.validate().is_err());
    let mut r = record(0, Source::Takeover, &mut rng);
    r.expert_action = None;
    assert!(r.validate().is_err());
}

#[test]
fn futures_are_subsampled_log_ticks() {
    let s = scene(vec![
        agent(1, 40.0, 3.5, 0.0, Behavior::Obstacle),
        agent(2, -20.0, -3.5, 5.0, Behavior::CrossTraffic { speed: 5.0 }),
    ]);
    let mut moving = s.clone();
    moving.agents[1].active = true;
    let (log, _) = expert_drive(&moving, 60, &ExpertConfig::default(), &WorldConfig::default()).unwrap();
    let scenes: Vec<Scene> = log.into_iter().map(|t| t.scene).collect();
    let (fut, reference) = record_futures(&scenes, 3, &ExpertConfig::default(), &WorldConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(reference.len(), 10);
    // Stationary agent: ten identical poses.
    assert!(fut[0].poses.iter().all(|p| *p == [40.0, 3.5, 0.0]));
    // 5 m/s straight: 1 m per 5 Hz step, exactly the log's tick 3 + 4(k+1).
    for (k, p) in fut[1].poses.iter().enumerate() {
        let a = scenes[3 + 4 * (k + 1)].agent(2).unwrap().state;
        assert_eq!(*p, [a.pose.x, a.pose.y, a.pose.yaw]);
    }
    for w in fut[1].poses.windows(2) {
        assert!((w[1][0] - w[0][0] - 1.0).abs() < 1e-9);
    }
    assert!(record_futures(&scenes, 20, &ExpertConfig::default(), &WorldConfig::default()).unwrap().is_none());
}

#[test]
fn buckets_partition_records() {
    let recs = records(300);
    let b = BucketSet::build(&recs);
    let total: usize = b.pretrain.iter().chain(&b.takeover).map(|b| b.members.len()).sum();
    assert_eq!(total, recs.len());
    assert_eq!(b.takeover.len(), 6);
    for fam in [&b.pretrain, &b.takeover] {
        assert!((fam.iter().map(|b| b.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn family_mix_follows_p() {
    let recs = records(300);
    let b = BucketSet::build(&recs);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let all_pre = sample_batch(&b, 0.0, 500, &mut rng).unwrap();
    assert!(all_pre.indices.iter().all(|&i| recs[i].source == Source::Pretrain));
    let all_to = sample_batch(&b, 1.0, 500, &mut rng).unwrap();
    assert!(all_to.indices.iter().all(|&i| recs[i].source != Source::Pretrain));

    let n = 100_000;
    let batch = sample_batch(&b, 0.2, n, &mut rng).unwrap();
    let k = batch.indices.iter().filter(|&&i| recs[i].source != Source::Pretrain).count() as f64;
    let sd = (n as f64 * 0.2 * 0.8).sqrt();
    assert!((k - 0.2 * n as f64).abs() <= 3.0 * sd);
    assert_eq!(k as usize, batch.takeover_slots());

    let again = sample_batch(&b, 0.2, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(again, sample_batch(&b, 0.2, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
}

#[test]
fn empty_family_is_a_config_error() {
    let recs: Vec<_> = records(30).into_iter().filter(|r| r.source == Source::Pretrain).collect();
    let b = BucketSet::build(&recs);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_batch(&b, 0.2, 8, &mut rng), Err(Error::Config(_))));
    assert!(sample_batch(&b, 0.0, 8, &mut rng).is_ok());
}
