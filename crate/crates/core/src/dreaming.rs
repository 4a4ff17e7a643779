//! Scenario dreaming: reinforcement fine-tuning inside replayed takeover
//! scenes.
//!
//! A record's two recorded seconds are rebuilt as a 5 Hz pseudo-simulation.
//! The ego executes a sampled candidate action through the deployment PID
//! and the bicycle model. Other agents teleport along their recorded futures.
//! Each candidate is scored against the expert's counterfactual trajectory,
//! and the policy is pushed toward the better candidates of its group, with a
//! KL anchor to the frozen reference policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{TakeoverRecord, FUTURE_STEPS};
use crate::error::{Error, Result};
use crate::language::MetaAction;
use crate::optim::{CosineSchedule, Sgd};
use crate::policy::{backward, log_softmax, softmax, LossGraph, ObservationFeatures, PolicyParams, PolicySample, Seed};
use crate::world::geometry::dist;
use crate::world::{bicycle_step, obb_overlap, pid_actuate, DrivingAction, PidState, VehicleState, WorldConfig};

/// Dream step: 5 Hz.
pub const DREAM_DT: f64 = 0.2;
/// Dream horizon in steps.
pub const DREAM_HORIZON: usize = FUTURE_STEPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_weight: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub epochs: usize,
    /// Records per gradient step.
    pub batch_size: usize,
    pub collision_penalty: f64,
    pub std_floor: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    /// Stop after this many gradient steps; 0 means no cap.
    pub max_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            kl_weight: 0.1,
            gamma: 0.9,
            temperature: 1.0,
            epochs: 1,
            batch_size: 32,
            collision_penalty: 30.0,
            std_floor: 1e-6,
            lr: 1e-2,
            min_lr: 0.0,
            momentum: 0.9,
            max_steps: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group size must be at least 2, got {}", self.group_size)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl weight must be non-negative, got {}", self.kl_weight)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} outside [0, 1)", self.gamma)));
        }
        if !(self.temperature > 0.0) || self.batch_size == 0 || !(self.std_floor > 0.0) {
            return Err(Error::Config("temperature, batch size and std floor must be positive".into()));
        }
        Ok(())
    }
}

/// One pseudo-simulated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamRollout {
    /// Ego `(x, y, yaw, speed)` after each step; frozen after a collision.
    pub ego_traj: Vec<[f64; 4]>,
    /// Non-positive per-step rewards, zero after a collision.
    pub rewards: Vec<f64>,
    pub collided_at: Option<usize>,
    pub ret: f64,
}

/// `Σ γ^τ r_τ`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut sum = 0.0;
    for r in rewards {
        sum += g * r;
        g *= gamma;
    }
    sum
}

/// Rolls `action` (expressed in the record's ego frame, held fixed) through
/// the record's replayed scene.
pub fn pseudo_simulate(
    record: &TakeoverRecord,
    action: &DrivingAction,
    cfg: &GrpoConfig,
    world: &WorldConfig,
) -> Result<DreamRollout> {
    let reference = &record.reference_trajectory;
    if reference.len() != DREAM_HORIZON {
        return Err(Error::Data(format!(
            "record {} has {} reference points, need {DREAM_HORIZON}",
            record.record_id,
            reference.len()
        )));
    }
    let mut agents = Vec::with_capacity(record.agent_futures.len());
    for f in &record.agent_futures {
        let agent = record.scene.agent(f.id).ok_or_else(|| {
            Error::Data(format!("record {}: future for unknown agent {}", record.record_id, f.id))
        })?;
        if f.poses.len() != DREAM_HORIZON {
            return Err(Error::Data(format!("record {}: agent {} future is incomplete", record.record_id, f.id)));
        }
        agents.push((agent.state, &f.poses));
    }

    let start = record.scene.ego;
    let mut ego = start;
    let mut pid = PidState::default();
    let mut out = DreamRollout {
        ego_traj: Vec::with_capacity(DREAM_HORIZON),
        rewards: vec![0.0; DREAM_HORIZON],
        collided_at: None,
        ret: 0.0,
    };
    for tau in 0..DREAM_HORIZON {
        let now = action.rebased(&start.pose, &ego.pose, tau);
        let (control, next_pid) = pid_actuate(&now, &ego, pid, &world.pid, &world.vehicle, DREAM_DT);
        pid = next_pid;
        ego = bicycle_step(&ego, &control, &world.vehicle, DREAM_DT)?;
        out.ego_traj.push([ego.pose.x, ego.pose.y, ego.pose.yaw, ego.speed]);

        let collided = agents.iter().any(|(state, poses)| {
            let p = poses[tau];
            let prev = if tau == 0 {
                [state.pose.x, state.pose.y]
            } else {
                [poses[tau - 1][0], poses[tau - 1][1]]
            };
            let mut s: VehicleState = *state;
            s.pose.x = p[0];
            s.pose.y = p[1];
            s.pose.yaw = p[2];
            s.speed = dist(prev, [p[0], p[1]]) / DREAM_DT;
            obb_overlap(&ego, &s)
        });
        let mut r = -dist(ego.pose.position(), reference[tau]);
        if collided {
            r -= cfg.collision_penalty;
        }
        out.rewards[tau] = r;
        if collided {
            out.collided_at = Some(tau);
            let last = out.ego_traj[tau];
            out.ego_traj.resize(DREAM_HORIZON, last);
            break;
        }
    }
    out.ret = discounted_return(&out.rewards, cfg.gamma);
    if !out.ret.is_finite() {
        return Err(Error::non_finite(format!("dream return of record {}", record.record_id)));
    }
    Ok(out)
}

/// Group-normalized advantages `(R_j − mean) / max(std, ε)` with the
/// population standard deviation; all zero for a degenerate group.
pub fn group_advantages(returns: &[f64], std_floor: f64) -> Vec<f64> {
    if returns.len() < 2 {
        return vec![0.0; returns.len()];
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return vec![0.0; returns.len()];
    }
    returns.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrpoLoss {
    pub policy: f64,
    pub kl: f64,
    pub total: f64,
}

/// `KL(π(·|o) ‖ π_ref(·|o))` in closed form, with its seed scaled by
/// `weight`. The waypoint Gaussians share σ, so conditioned on a meta-action
/// their KL is `‖μ − μ_ref‖² / 2σ²`; the joint KL adds its expectation under
/// the current meta distribution.
pub fn kl_seed(
    params: &PolicyParams,
    reference: &PolicyParams,
    obs: &ObservationFeatures,
    temperature: f64,
    weight: f64,
) -> Result<(f64, crate::policy::Forward, Seed)> {
    let fwd = params.forward(obs)?;
    let rf = reference.forward(obs)?;
    let s2 = params.config.sigma_w * params.config.sigma_w;
    let mut seed = Seed::new();

    let pm = softmax(&fwd.meta_logits, temperature);
    let lpm = log_softmax(&fwd.meta_logits, temperature);
    let lqm = log_softmax(&rf.meta_logits, temperature);
    let mut gauss = vec![0.0; pm.len()];
    for m in MetaAction::ALL {
        let i = m.index();
        let mu = params.waypoint_mean(&fwd, *m);
        let mu_ref = reference.waypoint_mean(&rf, *m);
        gauss[i] = mu.iter().zip(&mu_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * s2);
        let d: Vec<f64> = mu.iter().zip(&mu_ref).map(|(a, b)| weight * pm[i] * (a - b) / s2).collect();
        seed.d_mean.push((*m, d));
    }
    // Per-meta contribution to the joint KL: log-ratio plus waypoint KL.
    let c: Vec<f64> = (0..pm.len()).map(|i| lpm[i] - lqm[i] + gauss[i]).collect();
    let kl_meta_joint: f64 = pm.iter().zip(&c).map(|(p, c)| p * c).sum();
    for i in 0..pm.len() {
        seed.d_meta[i] = weight * pm[i] * (c[i] - kl_meta_joint) / temperature;
    }

    let pr = softmax(&fwd.reason_logits, temperature);
    let lpr = log_softmax(&fwd.reason_logits, temperature);
    let lqr = log_softmax(&rf.reason_logits, temperature);
    let kl_reason: f64 = (0..pr.len()).map(|i| pr[i] * (lpr[i] - lqr[i])).sum();
    for i in 0..pr.len() {
        seed.d_reason[i] = weight * pr[i] * (lpr[i] - lqr[i] - kl_reason) / temperature;
    }
    Ok((kl_meta_joint + kl_reason, fwd, seed))
}

/// `−(1/G) Σ A_j · exp(lp_j − lp_old_j) + λ · KL` for one record's group.
/// The old log-probabilities are the ones stored in each sample and are
/// treated as constants.
pub fn grpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    obs: &ObservationFeatures,
    group: &[(PolicySample, f64)],
    cfg: &GrpoConfig,
) -> Result<(GrpoLoss, LossGraph)> {
    let mut graph = LossGraph::new(params);
    let mut loss = GrpoLoss::default();
    let g = group.len() as f64;
    for (sample, adv) in group {
        let lp = params.logprob(obs, sample, cfg.temperature)?;
        let ratio = (lp - sample.logprob).exp();
        if !ratio.is_finite() {
            return Err(Error::non_finite(format!(
                "importance ratio: logprob {lp}, old logprob {}, sample {:?}",
                sample.logprob, sample.language
            )));
        }
        loss.policy -= adv * ratio / g;
        // d(−A·r/G)/dθ = −(A·r/G) ∇lp.
        let (_, fwd, seed) = params.logprob_seed(obs, sample, cfg.temperature, -adv * ratio / g)?;
        graph.push(fwd, seed);
    }
    if cfg.kl_weight > 0.0 {
        let (kl, fwd, seed) = kl_seed(params, reference, obs, cfg.temperature, cfg.kl_weight)?;
        loss.kl = kl;
        graph.push(fwd, seed);
    } else {
        loss.kl = kl_seed(params, reference, obs, cfg.temperature, 0.0)?.0;
    }
    loss.total = loss.policy + cfg.kl_weight * loss.kl;
    graph.loss = loss.total;
    Ok((loss, graph))
}

/// Scores a candidate for one record.
pub trait Scorer: Sync {
    fn score(&self, record: &TakeoverRecord, sample: &PolicySample) -> Result<DreamRollout>;
}

/// The default scorer: pseudo-simulation against the recorded scene.
#[derive(Debug, Clone, Copy)]
pub struct DreamScorer<'a> {
    pub cfg: &'a GrpoConfig,
    pub world: &'a WorldConfig,
}

impl Scorer for DreamScorer<'_> {
    fn score(&self, record: &TakeoverRecord, sample: &PolicySample) -> Result<DreamRollout> {
        pseudo_simulate(record, &sample.action, self.cfg, self.world)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftStepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_return: f64,
    pub collided_fraction: f64,
    pub mean_kl: f64,
    pub degenerate_rate: f64,
}

struct RecordOutcome {
    loss: GrpoLoss,
    graph: LossGraph,
    mean_return: f64,
    collided: usize,
    degenerate: bool,
}

fn process_record(
    params: &PolicyParams,
    reference: &PolicyParams,
    record: &TakeoverRecord,
    cfg: &GrpoConfig,
    scorer: &impl Scorer,
    seed: u64,
    weight: f64,
) -> Result<RecordOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(cfg.group_size);
    let mut returns = Vec::with_capacity(cfg.group_size);
    let mut collided = 0;
    for _ in 0..cfg.group_size {
        let s = params.sample(&record.obs, cfg.temperature, false, &mut rng)?;
        let roll = scorer.score(record, &s)?;
        collided += usize::from(roll.collided_at.is_some());
        returns.push(roll.ret);
        samples.push(s);
    }
    let adv = group_advantages(&returns, cfg.std_floor);
    let degenerate = adv.iter().all(|&a| a == 0.0);
    let group: Vec<(PolicySample, f64)> = samples.into_iter().zip(adv).collect();
    let scaled = GrpoConfig {
        kl_weight: cfg.kl_weight * weight,
        ..*cfg
    };
    let scaled_group: Vec<(PolicySample, f64)> = group.into_iter().map(|(s, a)| (s, a * weight)).collect();
    let (mut loss, graph) = grpo_loss(params, reference, &record.obs, &scaled_group, &scaled)?;
    // Report unscaled per-record values.
    loss.policy /= weight;
    loss.total /= weight;
    Ok(RecordOutcome {
        loss,
        graph,
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        collided,
        degenerate,
    })
}

/// Reinforcement fine-tuning by scenario dreaming with the default scorer.
pub fn train_rft(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    records: &[TakeoverRecord],
    cfg: &GrpoConfig,
    world: &WorldConfig,
    rng: &mut impl Rng,
) -> Result<Vec<RftStepMetrics>> {
    train_rft_with(params, reference, records, cfg, &DreamScorer { cfg, world }, rng)
}

/// One gradient step per batch of records: sample a group per record from
/// the current parameters (the old policy), score, normalize, and descend
/// the batch-mean GRPO loss. `reference` stays fixed throughout. On
/// divergence the parameters are restored to the last finite step.
pub fn train_rft_with(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    records: &[TakeoverRecord],
    cfg: &GrpoConfig,
    scorer: &impl Scorer,
    rng: &mut impl Rng,
) -> Result<Vec<RftStepMetrics>> {
    cfg.validate()?;
    if cfg.epochs == 0 || records.is_empty() {
        return Ok(Vec::new());
    }
    let mut total_steps = records.len().div_ceil(cfg.batch_size) * cfg.epochs;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        total_steps,
    };
    let mut opt = Sgd::new(params, cfg.momentum);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total_steps {
                return Ok(log);
            }
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let weight = 1.0 / chunk.len() as f64;
            let snapshot: &PolicyParams = params;
            let outcomes = chunk
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| process_record(snapshot, reference, &records[i], cfg, scorer, seed, weight))
                .collect::<Result<Vec<_>>>();
            let lr = schedule.lr(step);
            let last_good = params.clone();
            let result = outcomes.and_then(|outcomes| {
                let mut graph = LossGraph::new(params);
                let mut m = RftStepMetrics {
                    step,
                    lr,
                    loss: 0.0,
                    mean_return: 0.0,
                    collided_fraction: 0.0,
                    mean_kl: 0.0,
                    degenerate_rate: 0.0,
                };
                let n = outcomes.len() as f64;
                for o in outcomes {
                    m.loss += o.loss.total / n;
                    m.mean_return += o.mean_return / n;
                    m.collided_fraction += o.collided as f64 / (n * cfg.group_size as f64);
                    m.mean_kl += o.loss.kl / n;
                    m.degenerate_rate += f64::from(u8::from(o.degenerate)) / n;
                    graph.extend(o.graph)?;
                }
                if !graph.loss.is_finite() {
                    return Err(Error::non_finite("grpo loss"));
                }
                params.zero_grad();
                backward(params, graph)?;
                opt.step(params, lr);
                params.check_finite()?;
                Ok(m)
            });
            match result {
                Ok(m) => log.push(m),
                Err(e) => {
                    *params = last_good;
                    return Err(Error::Diverged {
                        step,
                        detail: e.to_string(),
                    });
                }
            }
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
