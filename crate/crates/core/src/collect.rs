//! Turning driven episodes into training records.
//!
//! Pretraining data comes from the expert driving alone; takeover data from
//! the learned policy driving under shadow monitoring. Either way frames are
//! kept at 4 Hz and each carries two seconds of recorded agent futures plus
//! the expert's counterfactual trajectory for scenario dreaming.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{record_futures, Source, TakeoverRecord, RECORD_STRIDE};
use crate::error::Result;
use crate::eval::{Driver, EpisodeOptions, ExpertDriver};
use crate::expert::ExpertConfig;
use crate::policy::featurize;
use crate::takeover::{
    enhance_label, extract_pre_takeover, run_shadow_episode, EpisodeEnd, ShadowEpisode, TakeoverConfig,
};
use crate::world::scenario::ScenarioConfig;
use crate::world::{DrivingAction, Scene, WorldConfig, WORLD_DT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub takeover: TakeoverConfig,
    pub keep_takeover: bool,
    pub keep_pre_takeover: bool,
    pub enhance_labels: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            takeover: TakeoverConfig::default(),
            keep_takeover: true,
            keep_pre_takeover: true,
            enhance_labels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollectReport {
    pub episodes: usize,
    pub ends: BTreeMap<String, usize>,
    pub triggers: BTreeMap<String, usize>,
    pub records: BTreeMap<String, usize>,
    /// Frames dropped because the episode ended within two seconds.
    pub dropped_short_future: usize,
    /// Frames dropped because the ego was off every lane.
    pub dropped_off_lane: usize,
    pub truncated_pre_windows: usize,
}

impl CollectReport {
    fn merge(&mut self, other: CollectReport) {
        self.episodes += other.episodes;
        for (a, b) in [
            (&mut self.ends, other.ends),
            (&mut self.triggers, other.triggers),
            (&mut self.records, other.records),
        ] {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
        }
        self.dropped_short_future += other.dropped_short_future;
        self.dropped_off_lane += other.dropped_off_lane;
        self.truncated_pre_windows += other.truncated_pre_windows;
    }

    pub fn total_records(&self) -> usize {
        self.records.values().sum()
    }
}

fn end_name(e: EpisodeEnd) -> String {
    format!("{e:?}").to_lowercase()
}

/// A record before ids are assigned.
struct Draft {
    tick: usize,
    source: Source,
    record: TakeoverRecord,
}

fn make_record(
    ep: &ShadowEpisode,
    tick: usize,
    source: Source,
    round: u32,
    cfg: &CollectConfig,
    expert: &ExpertConfig,
    world: &WorldConfig,
    report: &mut CollectReport,
) -> Result<Option<Draft>> {
    let t = &ep.ticks[tick];
    let Ok(obs) = featurize(&t.scene) else {
        report.dropped_off_lane += 1;
        return Ok(None);
    };
    let Some((agent_futures, reference_trajectory)) = record_futures(&ep.ticks, tick, expert, world)? else {
        report.dropped_short_future += 1;
        return Ok(None);
    };
    let trigger = match source {
        Source::Pretrain => None,
        _ => t.trigger.or_else(|| {
            ep.events
                .iter()
                .find(|e| (e.t_trigger as usize) > tick && (e.t_trigger as usize) <= tick + e.pre_ticks)
                .map(|e| e.trigger)
        }),
    };
    let language_label = match trigger {
        Some(tr) if cfg.enhance_labels => enhance_label(t.expert.language, tr),
        _ => t.expert.language,
    };
    let pre = source == Source::PreTakeover;
    Ok(Some(Draft {
        tick,
        source,
        record: TakeoverRecord {
            record_id: 0,
            round,
            source,
            trigger,
            intent: t.expert.intent,
            obs,
            scene: t.scene.clone(),
            language_label,
            expert_action: (!pre).then(|| t.expert.action.clone()),
            mask: u8::from(pre),
            agent_futures,
            reference_trajectory,
        },
    }))
}

/// Records from one episode: every 4 Hz frame for an expert-only episode,
/// otherwise the 4 Hz frames of takeover blocks and pre-takeover windows.
pub fn episode_records(
    ep: &ShadowEpisode,
    pretrain: bool,
    round: u32,
    cfg: &CollectConfig,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<TakeoverRecord>, CollectReport)> {
    let mut report = CollectReport {
        episodes: 1,
        ..CollectReport::default()
    };
    *report.ends.entry(end_name(ep.end)).or_default() += 1;
    for e in &ep.events {
        *report.triggers.entry(e.trigger.name().to_string()).or_default() += 1;
    }
    let mut drafts = Vec::new();
    let on_stride = |tick: usize| (tick as u64).is_multiple_of(RECORD_STRIDE);
    if pretrain {
        for tick in (0..ep.ticks.len()).filter(|&t| on_stride(t)) {
            drafts.extend(make_record(ep, tick, Source::Pretrain, round, cfg, expert, world, &mut report)?);
        }
    } else {
        for e in &ep.events {
            let t0 = e.t_trigger as usize;
            if cfg.keep_pre_takeover {
                let (window, truncated) = extract_pre_takeover(&ep.ticks, e);
                report.truncated_pre_windows += usize::from(truncated);
                for w in window.iter().filter(|w| on_stride(w.scene.tick as usize)) {
                    let tick = w.scene.tick as usize;
                    drafts.extend(make_record(ep, tick, Source::PreTakeover, round, cfg, expert, world, &mut report)?);
                }
            }
            if cfg.keep_takeover {
                let end = (t0 + e.takeover_ticks).min(ep.ticks.len());
                for tick in (t0..end).filter(|&t| on_stride(t)) {
                    drafts.extend(make_record(ep, tick, Source::Takeover, round, cfg, expert, world, &mut report)?);
                }
            }
        }
    }
    drafts.sort_by_key(|d| (d.tick, d.source));
    let records: Vec<TakeoverRecord> = drafts.into_iter().map(|d| d.record).collect();
    for r in &records {
        *report.records.entry(r.source.name().to_string()).or_default() += 1;
    }
    Ok((records, report))
}

/// Runs every `(scenario, seed)` job in parallel and returns the records in
/// job order with sequential ids starting at `first_id`.
pub fn collect<D, F>(
    make_driver: F,
    jobs: &[(ScenarioConfig, u64)],
    pretrain: bool,
    round: u32,
    first_id: u64,
    cfg: &CollectConfig,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<TakeoverRecord>, CollectReport)>
where
    D: Driver,
    F: Fn() -> D + Sync,
{
    collect_with(|_, _| make_driver(), jobs, pretrain, round, first_id, cfg, expert, world)
}

/// [`collect`] with a driver built per job.
pub fn collect_with<D, F>(
    make_driver: F,
    jobs: &[(ScenarioConfig, u64)],
    pretrain: bool,
    round: u32,
    first_id: u64,
    cfg: &CollectConfig,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<TakeoverRecord>, CollectReport)>
where
    D: Driver,
    F: Fn(&ScenarioConfig, u64) -> D + Sync,
{
    let per_episode = jobs
        .par_iter()
        .map(|(sc, seed)| {
            let opts = EpisodeOptions {
                timeout_s: sc.timeout_s,
                keep_frames: false,
            };
            let mut driver = make_driver(sc, *seed);
            let ep = run_shadow_episode(&mut driver, sc, *seed, expert, world, &cfg.takeover, opts)?;
            episode_records(&ep, pretrain, round, cfg, expert, world)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut report = CollectReport::default();
    for (recs, rep) in per_episode {
        records.extend(recs);
        report.merge(rep);
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.record_id = first_id + i as u64;
    }
    Ok((records, report))
}

/// Perturbations injected into the executed expert plan while collecting
/// demonstrations. The labels stay the clean expert decisions, so the data
/// covers recoveries from states the unperturbed expert never visits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoNoise {
    /// Stationary std of the lateral path shift, meters.
    pub lateral_std: f64,
    /// Stationary std of the relative speed-plan scaling.
    pub speed_std: f64,
    /// Correlation time of both processes, seconds.
    pub tau_s: f64,
}

impl Default for DemoNoise {
    fn default() -> Self {
        DemoNoise {
            lateral_std: 0.5,
            speed_std: 0.1,
            tau_s: 2.0,
        }
    }
}

impl DemoNoise {
    pub const NONE: DemoNoise = DemoNoise {
        lateral_std: 0.0,
        speed_std: 0.0,
        tau_s: 2.0,
    };
}

/// The expert with Ornstein-Uhlenbeck perturbations on its executed plan.
#[derive(Debug, Clone)]
pub struct NoisyExpertDriver {
    pub expert: ExpertConfig,
    pub noise: DemoNoise,
    rng: ChaCha8Rng,
    lateral: f64,
    speed: f64,
}

impl NoisyExpertDriver {
    pub fn new(expert: ExpertConfig, noise: DemoNoise, seed: u64) -> Self {
        NoisyExpertDriver {
            expert,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lateral: 0.0,
            speed: 0.0,
        }
    }
}

impl Driver for NoisyExpertDriver {
    fn plan(&mut self, scene: &Scene) -> Result<DrivingAction> {
        let mut action = ExpertDriver(self.expert).plan(scene)?;
        if self.noise.lateral_std == 0.0 && self.noise.speed_std == 0.0 {
            return Ok(action);
        }
        let a = (-WORLD_DT / self.noise.tau_s).exp();
        let b = (1.0 - a * a).sqrt();
        let n: [f64; 2] = [StandardNormal.sample(&mut self.rng), StandardNormal.sample(&mut self.rng)];
        self.lateral = a * self.lateral + b * self.noise.lateral_std * n[0];
        self.speed = a * self.speed + b * self.noise.speed_std * n[1];
        for p in &mut action.path {
            p[1] += self.lateral;
        }
        let k = (1.0 + self.speed).max(0.0);
        for p in &mut action.speed {
            p[0] *= k;
            p[1] *= k;
        }
        Ok(action)
    }
}

/// Expert demonstrations, driven under `noise`.
pub fn collect_pretrain(
    jobs: &[(ScenarioConfig, u64)],
    first_id: u64,
    noise: &DemoNoise,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<(Vec<TakeoverRecord>, CollectReport)> {
    let cfg = CollectConfig::default();
    collect_with(
        |sc, seed| NoisyExpertDriver::new(*expert, *noise, sc.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        jobs,
        true,
        0,
        first_id,
        &cfg,
        expert,
        world,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::StopDriver;
    use crate::takeover::TriggerKind;
    use crate::world::scenario::{eval_suite, Family};

    fn jobs(family: Family) -> Vec<(ScenarioConfig, u64)> {
        eval_suite()
            .into_iter()
            .filter(|s| s.family == family)
            .take(1)
            .map(|s| (s, 0))
            .collect()
    }

    #[test]
    fn expert_episode_yields_pretrain_frames() {
        let (recs, rep) =
            collect_pretrain(&jobs(Family::Follow), 7, &DemoNoise::NONE, &ExpertConfig::default(), &WorldConfig::default()).unwrap();
        assert!(!recs.is_empty());
        assert_eq!(rep.total_records(), recs.len());
        assert!(rep.triggers.is_empty());
        for (i, r) in recs.iter().enumerate() {
            r.validate().unwrap();
            assert_eq!(r.record_id, 7 + i as u64);
            assert_eq!(r.scene.tick % RECORD_STRIDE, 0);
            assert_eq!(r.source, Source::Pretrain);
        }
    }

    #[test]
    fn stop_policy_yields_takeover_family() {
        let expert = ExpertConfig::default();
        let cfg = CollectConfig::default();
        let (recs, rep) = collect(
            || StopDriver,
            &jobs(Family::Cruise),
            false,
            1,
            0,
            &cfg,
            &expert,
            &WorldConfig::default(),
        )
        .unwrap();
        assert!(rep.triggers.get("restart").copied().unwrap_or(0) > 0);
        let takeover = recs.iter().filter(|r| r.source == Source::Takeover).count();
        let pre = recs.iter().filter(|r| r.source == Source::PreTakeover).count();
        assert!(takeover > 0 && pre > 0);
        for r in &recs {
            r.validate().unwrap();
            assert_eq!(r.trigger, Some(TriggerKind::Restart));
        }

        let no_pre = CollectConfig {
            keep_pre_takeover: false,
            ..cfg
        };
        let (recs, _) =
            collect(|| StopDriver, &jobs(Family::Cruise), false, 1, 0, &no_pre, &expert, &WorldConfig::default())
                .unwrap();
        assert!(recs.iter().all(|r| r.mask == 0));
    }
}
