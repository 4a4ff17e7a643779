//! Masked supervised fine-tuning.
//!
//! Per record: cross-entropy on the meta-action and reason labels plus,
//! unless the record is a pre-takeover frame (`m = 1`), the smooth-L1
//! distance between the waypoint means and the expert waypoints. The
//! waypoint head is conditioned on the label meta-action (teacher forcing).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{sample_batch, BucketSet, TakeoverRecord};
use crate::error::{Error, Result};
use crate::optim::{CosineSchedule, Sgd};
use crate::policy::{backward, log_softmax, LossGraph, PolicyParams, Seed};
use crate::world::ACTION_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    /// Probability that a batch slot draws from the takeover family.
    pub p: f64,
    pub smooth_l1_beta: f64,
    pub language_weight: f64,
    pub action_weight: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            batch_size: 64,
            epochs: 8,
            samples_per_epoch: 20_000,
            lr: 2e-2,
            min_lr: 0.0,
            momentum: 0.9,
            p: 0.2,
            smooth_l1_beta: 1.0,
            language_weight: 1.0,
            action_weight: 1.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("sft batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("sft p = {} outside [0, 1]", self.p)));
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config("sft beta must be positive and lr non-negative".into()));
        }
        Ok(())
    }
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Batch-mean loss and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SftLoss {
    pub total: f64,
    pub language: f64,
    pub action: f64,
}

/// Per-record terms `(language, action)`; the action term is 0 for `m = 1`.
pub fn record_terms(params: &PolicyParams, r: &TakeoverRecord, beta: f64) -> Result<(f64, f64)> {
    let fwd = params.forward(&r.obs)?;
    let lang = -log_softmax(&fwd.meta_logits, 1.0)[r.language_label.meta.index()]
        - log_softmax(&fwd.reason_logits, 1.0)[r.language_label.reason.index()];
    let action = match (r.mask, &r.expert_action) {
        (1, _) => 0.0,
        (_, Some(a)) => {
            let mu = params.waypoint_mean(&fwd, r.language_label.meta);
            let target = a.flatten();
            mu.iter().zip(&target).map(|(m, t)| smooth_l1(m - t, beta)).sum::<f64>() / ACTION_DIM as f64
        }
        (_, None) => return Err(missing_action(r)),
    };
    Ok((lang, action))
}

fn missing_action(r: &TakeoverRecord) -> Error {
    Error::Data(format!("record {} has m = 0 but no expert action", r.record_id))
}

/// Eq. (1)-style loss over `batch` (temperature 1) with its backward graph.
pub fn sft_loss(params: &PolicyParams, batch: &[&TakeoverRecord], cfg: &SftConfig) -> Result<(SftLoss, LossGraph)> {
    let mut graph = LossGraph::new(params);
    let mut loss = SftLoss::default();
    if batch.is_empty() {
        return Ok((loss, graph));
    }
    let n = batch.len() as f64;
    let beta = cfg.smooth_l1_beta;
    for r in batch {
        let fwd = params.forward(&r.obs)?;
        let mut seed = Seed::new();
        let wl = cfg.language_weight / n;
        for (logits, label, d) in [
            (&fwd.meta_logits, r.language_label.meta.index(), &mut seed.d_meta),
            (&fwd.reason_logits, r.language_label.reason.index(), &mut seed.d_reason),
        ] {
            let lp = log_softmax(logits, 1.0);
            loss.language -= lp[label] / n;
            for (i, l) in lp.iter().enumerate() {
                d[i] = wl * (l.exp() - f64::from(u8::from(i == label)));
            }
        }
        if r.mask == 0 {
            let target = r.expert_action.as_ref().ok_or_else(|| missing_action(r))?.flatten();
            let meta = r.language_label.meta;
            let mu = params.waypoint_mean(&fwd, meta);
            let wa = cfg.action_weight / (n * ACTION_DIM as f64);
            let mut dmu = vec![0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                let d = mu[i] - target[i];
                loss.action += smooth_l1(d, beta) / (n * ACTION_DIM as f64);
                dmu[i] = wa * smooth_l1_grad(d, beta);
            }
            seed.d_mean.push((meta, dmu));
        }
        graph.push(fwd, seed);
    }
    loss.total = cfg.language_weight * loss.language + cfg.action_weight * loss.action;
    graph.loss = loss.total;
    Ok((loss, graph))
}

/// Loss over a whole record set, no graph.
pub fn evaluate_sft(params: &PolicyParams, records: &[TakeoverRecord], cfg: &SftConfig) -> Result<SftLoss> {
    let mut out = SftLoss::default();
    if records.is_empty() {
        return Ok(out);
    }
    let n = records.len() as f64;
    for r in records {
        let (l, a) = record_terms(params, r, cfg.smooth_l1_beta)?;
        out.language += l / n;
        out.action += a / n;
    }
    out.total = cfg.language_weight * out.language + cfg.action_weight * out.action;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: SftLoss,
    pub holdout: Option<SftLoss>,
    /// Fraction of consumed batch slots drawn from the takeover family.
    pub takeover_fraction: f64,
}

/// Trains on a bucket-mixed stream of `train` records. On divergence the
/// parameters are rolled back to the last finite step and
/// [`Error::Diverged`] is returned.
pub fn train_sft(
    params: &mut PolicyParams,
    train: &[TakeoverRecord],
    holdout: &[TakeoverRecord],
    cfg: &SftConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SftEpochMetrics>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::Config("sft needs at least one training record".into()));
    }
    let buckets = BucketSet::build(train);
    let p = if buckets.takeover.is_empty() { 0.0 } else { cfg.p };
    let p = if buckets.pretrain.is_empty() { 1.0 } else { p };
    let steps_per_epoch = cfg.samples_per_epoch.div_ceil(cfg.batch_size).max(1);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        total_steps: steps_per_epoch * cfg.epochs,
    };
    let mut opt = Sgd::new(params, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = SftLoss::default();
        let mut takeover_slots = 0;
        let mut lr = cfg.lr;
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(&buckets, p, cfg.batch_size, rng)?;
            takeover_slots += batch.takeover_slots();
            let recs: Vec<&TakeoverRecord> = batch.indices.iter().map(|&i| &train[i]).collect();
            let last_good = params.clone();
            let (loss, graph) = sft_loss(params, &recs, cfg)?;
            let outcome = if loss.total.is_finite() {
                params.zero_grad();
                backward(params, graph)
            } else {
                Err(Error::non_finite("sft loss"))
            };
            lr = schedule.lr(step);
            if let Err(e) = outcome.and_then(|_| {
                opt.step(params, lr);
                params.check_finite()
            }) {
                *params = last_good;
                return Err(Error::Diverged {
                    step,
                    detail: e.to_string(),
                });
            }
            sum.total += loss.total;
            sum.language += loss.language;
            sum.action += loss.action;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let train_loss = SftLoss {
            total: sum.total / k,
            language: sum.language / k,
            action: sum.action / k,
        };
        let holdout = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_sft(params, holdout, cfg)?)
        };
        log.push(SftEpochMetrics {
            epoch,
            lr,
            train: train_loss,
            holdout,
            takeover_fraction: takeover_slots as f64 / (steps_per_epoch * cfg.batch_size) as f64,
        });
    }
    Ok(log)
}
