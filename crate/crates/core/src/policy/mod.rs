//! The learned language-conditioned driving policy.
//!
//! A two-layer tanh trunk reads the [`ObservationFeatures`]; two categorical
//! heads emit the meta-action and reason; a Gaussian head with fixed
//! standard deviation `sigma_w` emits the 40 waypoint coordinates,
//! conditioned on the meta-action through a learned embedding.
//!
//! Parameters live in one flat vector with a name/shape table, so the
//! optimizer, checkpoints and finite-difference checks can treat them
//! uniformly. Gradients are written by [`backward`] from a [`LossGraph`]
//! whose entries carry the forward caches and the loss gradient with respect
//! to the network outputs.

mod checkpoint;
mod features;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::{featurize, NavCommand, ObservationFeatures, AGENT_SLOTS, FEATURE_DIM, FEATURE_SCALE, SENTINEL_GAP};

use crate::error::{Error, Result};
use crate::eval::Driver;
use crate::language::{LanguageAction, MetaAction, Reason};
use crate::world::{DrivingAction, Scene, ACTION_DIM, N_PATH, N_SPEED, PATH_SPACING, SPEED_DT};

const N_META: usize = MetaAction::COUNT;
const N_REASON: usize = Reason::COUNT;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Waypoint head outputs are `OUTPUT_SCALE · raw + offset`, where the offset
/// is a straight drive at this speed.
pub const OUTPUT_SCALE: f64 = 2.0;
pub const OFFSET_SPEED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub embed: usize,
    pub sigma_w: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            embed: 8,
            sigma_w: 0.3,
        }
    }
}

/// Name and shape of every parameter tensor, in storage order.
pub fn tensor_shapes(cfg: &PolicyConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (h, e) = (cfg.hidden, cfg.embed);
    vec![
        ("trunk.w1", vec![h, FEATURE_DIM]),
        ("trunk.b1", vec![h]),
        ("trunk.w2", vec![h, h]),
        ("trunk.b2", vec![h]),
        ("meta.w", vec![N_META, h]),
        ("meta.b", vec![N_META]),
        ("reason.w", vec![N_REASON, h]),
        ("reason.b", vec![N_REASON]),
        ("waypoint.embed", vec![N_META, e]),
        ("waypoint.w", vec![ACTION_DIM, h + e]),
        ("waypoint.b", vec![ACTION_DIM]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    wm: Range<usize>,
    bm: Range<usize>,
    wr: Range<usize>,
    br: Range<usize>,
    emb: Range<usize>,
    wa: Range<usize>,
    ba: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Layout {
        let mut at = 0;
        let mut r: Vec<Range<usize>> = tensor_shapes(cfg)
            .into_iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                at += n;
                at - n..at
            })
            .collect();
        let mut next = || r.remove(0);
        Layout {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            wm: next(),
            bm: next(),
            wr: next(),
            br: next(),
            emb: next(),
            wa: next(),
            ba: next(),
            total: at,
        }
    }
}

/// Straight drive at [`OFFSET_SPEED`], flattened.
pub fn action_offset() -> [f64; ACTION_DIM] {
    let mut o = [0.0; ACTION_DIM];
    for k in 0..N_PATH {
        o[2 * k] = (k + 1) as f64 * PATH_SPACING;
    }
    for k in 0..N_SPEED {
        o[2 * (N_PATH + k)] = (k + 1) as f64 * SPEED_DT * OFFSET_SPEED;
    }
    o
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    layout: Layout,
    values: Vec<f64>,
    grads: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// Glorot-uniform trunk, zero heads (uniform categoricals, means at the
    /// straight-drive offset), small random meta embeddings.
    pub fn init(config: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(config.sigma_w > 0.0 && config.sigma_w.is_finite()) || config.hidden == 0 {
            return Err(Error::Config(format!("invalid policy config {config:?}")));
        }
        let layout = Layout::new(&config);
        let mut values = vec![0.0; layout.total];
        let h = config.hidden;
        let mut fill = |range: Range<usize>, bound: f64, rng: &mut dyn rand::RngCore| {
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in &mut values[range] {
                *v = u.sample(rng);
            }
        };
        fill(layout.w1.clone(), (6.0 / (FEATURE_DIM + h) as f64).sqrt(), rng);
        fill(layout.w2.clone(), (6.0 / (2 * h) as f64).sqrt(), rng);
        fill(layout.emb.clone(), 0.5, rng);
        Ok(PolicyParams {
            config,
            grads: vec![0.0; layout.total],
            layout,
            values,
            version: 0,
        })
    }

    /// Rebuilds parameters from a flat value vector (checkpoint loading).
    pub fn from_values(config: PolicyConfig, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Data(format!(
                "parameter vector has {} entries, config needs {}",
                values.len(),
                layout.total
            )));
        }
        let p = PolicyParams {
            config,
            grads: vec![0.0; layout.total],
            layout,
            values,
            version: 0,
        };
        p.check_finite()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the values. Bumps the version, so any loss graph
    /// built before the edit becomes stale.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Applies `f(values, grads)` as one optimizer step and bumps the version.
    pub fn apply_update(&mut self, f: impl FnOnce(&mut [f64], &[f64])) {
        f(&mut self.values, &self.grads);
        self.version += 1;
    }

    /// Named views of every tensor, in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut at = 0;
        tensor_shapes(&self.config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                at += n;
                (name, shape, &self.values[at - n..at])
            })
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::non_finite(format!("policy parameter #{i}"))),
        }
    }

    fn w(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }

    /// Trunk and language heads for one observation.
    pub fn forward(&self, obs: &ObservationFeatures) -> Result<Forward> {
        let l = &self.layout;
        let h = self.config.hidden;
        let x = obs.scaled();
        let h1 = affine_tanh(self.w(&l.w1), self.w(&l.b1), &x, h);
        let h2 = affine_tanh(self.w(&l.w2), self.w(&l.b2), &h1, h);
        let meta_logits = affine(self.w(&l.wm), self.w(&l.bm), &h2, N_META);
        let reason_logits = affine(self.w(&l.wr), self.w(&l.br), &h2, N_REASON);
        if meta_logits.iter().chain(&reason_logits).any(|v| !v.is_finite()) {
            self.check_finite()?;
            return Err(Error::non_finite("policy forward pass"));
        }
        Ok(Forward {
            x,
            h1,
            h2,
            meta_logits,
            reason_logits,
        })
    }

    fn head_input(&self, fwd: &Forward, meta: MetaAction) -> Vec<f64> {
        let e = self.config.embed;
        let emb = &self.w(&self.layout.emb)[meta.index() * e..(meta.index() + 1) * e];
        fwd.h2.iter().chain(emb).copied().collect()
    }

    /// Waypoint means (meters, flattened) given a meta-action.
    pub fn waypoint_mean(&self, fwd: &Forward, meta: MetaAction) -> [f64; ACTION_DIM] {
        let z = self.head_input(fwd, meta);
        let raw = affine(self.w(&self.layout.wa), self.w(&self.layout.ba), &z, ACTION_DIM);
        let off = action_offset();
        let mut mu = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            mu[i] = OUTPUT_SCALE * raw[i] + off[i];
        }
        mu
    }

    /// Draws (or, when `greedy`, picks the mode of) a language action and a
    /// waypoint action.
    pub fn sample(
        &self,
        obs: &ObservationFeatures,
        temperature: f64,
        greedy: bool,
        rng: &mut impl Rng,
    ) -> Result<PolicySample> {
        check_temperature(temperature)?;
        let fwd = self.forward(obs)?;
        let (meta, reason) = if greedy {
            (argmax(&fwd.meta_logits), argmax(&fwd.reason_logits))
        } else {
            (
                sample_categorical(&softmax(&fwd.meta_logits, temperature), rng),
                sample_categorical(&softmax(&fwd.reason_logits, temperature), rng),
            )
        };
        let language = LanguageAction::from_indices(meta, reason)?;
        let mu = self.waypoint_mean(&fwd, language.meta);
        let flat: Vec<f64> = if greedy {
            mu.to_vec()
        } else {
            mu.iter()
                .map(|m| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + self.config.sigma_w * n
                })
                .collect()
        };
        let action = DrivingAction::from_flat(&flat);
        let logprob = self.logprob_with(&fwd, language, &flat, temperature).total();
        Ok(PolicySample {
            language,
            action,
            logprob,
        })
    }

    pub fn greedy(&self, obs: &ObservationFeatures) -> Result<PolicySample> {
        // The RNG is never touched in greedy mode.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        self.sample(obs, 1.0, true, &mut rng)
    }

    fn logprob_with(&self, fwd: &Forward, language: LanguageAction, flat: &[f64], temperature: f64) -> LogProb {
        let lm = log_softmax(&fwd.meta_logits, temperature);
        let lr = log_softmax(&fwd.reason_logits, temperature);
        let mu = self.waypoint_mean(fwd, language.meta);
        LogProb {
            meta: lm[language.meta.index()],
            reason: lr[language.reason.index()],
            waypoints: gaussian_logpdf(flat, &mu, self.config.sigma_w),
        }
    }

    /// Joint log-density of `sample` under these parameters.
    pub fn logprob(&self, obs: &ObservationFeatures, sample: &PolicySample, temperature: f64) -> Result<f64> {
        Ok(self.logprob_parts(obs, sample, temperature)?.total())
    }

    /// Log-density plus the seed of `weight · logprob` for [`backward`].
    pub fn logprob_seed(
        &self,
        obs: &ObservationFeatures,
        sample: &PolicySample,
        temperature: f64,
        weight: f64,
    ) -> Result<(LogProb, Forward, Seed)> {
        check_temperature(temperature)?;
        let fwd = self.forward(obs)?;
        let flat = sample.action.flatten();
        let lp = self.logprob_with(&fwd, sample.language, &flat, temperature);
        let mut seed = Seed::new();
        let pm = fwd.meta_probs(temperature);
        let pr = fwd.reason_probs(temperature);
        for i in 0..N_META {
            let hit = f64::from(u8::from(i == sample.language.meta.index()));
            seed.d_meta[i] = weight * (hit - pm[i]) / temperature;
        }
        for i in 0..N_REASON {
            let hit = f64::from(u8::from(i == sample.language.reason.index()));
            seed.d_reason[i] = weight * (hit - pr[i]) / temperature;
        }
        let mu = self.waypoint_mean(&fwd, sample.language.meta);
        let s2 = self.config.sigma_w * self.config.sigma_w;
        let dmu = flat.iter().zip(&mu).map(|(a, m)| weight * (a - m) / s2).collect();
        seed.d_mean.push((sample.language.meta, dmu));
        Ok((lp, fwd, seed))
    }

    pub fn logprob_parts(&self, obs: &ObservationFeatures, sample: &PolicySample, temperature: f64) -> Result<LogProb> {
        check_temperature(temperature)?;
        let fwd = self.forward(obs)?;
        Ok(self.logprob_with(&fwd, sample.language, &sample.action.flatten(), temperature))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("temperature must be positive, got {t}")))
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub x: [f64; FEATURE_DIM],
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub meta_logits: Vec<f64>,
    pub reason_logits: Vec<f64>,
}

impl Forward {
    pub fn meta_probs(&self, temperature: f64) -> Vec<f64> {
        softmax(&self.meta_logits, temperature)
    }

    pub fn reason_probs(&self, temperature: f64) -> Vec<f64> {
        softmax(&self.reason_logits, temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProb {
    pub meta: f64,
    pub reason: f64,
    pub waypoints: f64,
}

impl LogProb {
    pub fn total(&self) -> f64 {
        self.meta + self.reason + self.waypoints
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub language: LanguageAction,
    pub action: DrivingAction,
    pub logprob: f64,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let mut y = affine(w, b, x, rows);
    y.iter_mut().for_each(|v| *v = v.tanh());
    y
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
    let lse = m + logits.iter().map(|l| (l / temperature - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l / temperature - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature).into_iter().map(f64::exp).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn gaussian_logpdf(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
    x.iter()
        .zip(mu)
        .map(|(a, m)| {
            let z = (a - m) / sigma;
            -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
        })
        .sum()
}

/// Loss gradient with respect to one forward pass's outputs: raw meta and
/// reason logits, and waypoint means (meters) under the listed meta-actions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Seed {
    pub d_meta: Vec<f64>,
    pub d_reason: Vec<f64>,
    pub d_mean: Vec<(MetaAction, Vec<f64>)>,
}

impl Seed {
    pub fn new() -> Self {
        Seed {
            d_meta: vec![0.0; N_META],
            d_reason: vec![0.0; N_REASON],
            d_mean: Vec::new(),
        }
    }
}

/// A scalar loss together with everything [`backward`] needs to
/// differentiate it: per-forward output seeds and an optional direct
/// gradient on the parameter vector.
#[derive(Debug, Clone)]
pub struct LossGraph {
    version: u64,
    pub loss: f64,
    entries: Vec<(Forward, Seed)>,
    direct: Option<Vec<f64>>,
}

impl LossGraph {
    pub fn new(params: &PolicyParams) -> Self {
        LossGraph {
            version: params.version,
            loss: 0.0,
            entries: Vec::new(),
            direct: None,
        }
    }

    pub fn push(&mut self, fwd: Forward, seed: Seed) {
        self.entries.push((fwd, seed));
    }

    /// Adds a gradient taken directly with respect to the flat parameter vector.
    pub fn add_direct(&mut self, grad: &[f64]) {
        let d = self.direct.get_or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in d.iter_mut().zip(grad) {
            *a += g;
        }
    }

    /// Merges another graph built against the same parameter version.
    pub fn extend(&mut self, other: LossGraph) -> Result<()> {
        if other.version != self.version {
            return Err(Error::StaleGraph {
                graph: other.version,
                params: self.version,
            });
        }
        self.loss += other.loss;
        self.entries.extend(other.entries);
        if let Some(d) = other.direct {
            self.add_direct(&d);
        }
        Ok(())
    }
}

/// Accumulates d(graph.loss)/d(params) into the parameter gradient slots.
pub fn backward(params: &mut PolicyParams, graph: LossGraph) -> Result<()> {
    if graph.version != params.version {
        return Err(Error::StaleGraph {
            graph: graph.version,
            params: params.version,
        });
    }
    let l = params.layout.clone();
    let h = params.config.hidden;
    let e = params.config.embed;
    let zdim = h + e;
    let mut g = std::mem::take(&mut params.grads);
    if let Some(d) = &graph.direct {
        for (a, b) in g.iter_mut().zip(d) {
            *a += b;
        }
    }
    let v = &params.values;
    for (fwd, seed) in &graph.entries {
        let mut dh2 = vec![0.0; h];
        for (meta, dmu) in &seed.d_mean {
            let m = meta.index();
            let emb = &v[l.emb.start + m * e..l.emb.start + (m + 1) * e];
            for (i, d) in dmu.iter().enumerate() {
                let draw = OUTPUT_SCALE * d;
                if draw == 0.0 {
                    continue;
                }
                g[l.ba.start + i] += draw;
                let row = l.wa.start + i * zdim;
                for j in 0..h {
                    g[row + j] += draw * fwd.h2[j];
                    dh2[j] += draw * v[row + j];
                }
                for j in 0..e {
                    g[row + h + j] += draw * emb[j];
                    g[l.emb.start + m * e + j] += draw * v[row + h + j];
                }
            }
        }
        for (d_out, w_r, b_r) in [(&seed.d_meta, &l.wm, &l.bm), (&seed.d_reason, &l.wr, &l.br)] {
            for (i, d) in d_out.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g[b_r.start + i] += d;
                let row = w_r.start + i * h;
                for j in 0..h {
                    g[row + j] += d * fwd.h2[j];
                    dh2[j] += d * v[row + j];
                }
            }
        }
        let dpre2: Vec<f64> = dh2.iter().zip(&fwd.h2).map(|(d, y)| d * (1.0 - y * y)).collect();
        let mut dh1 = vec![0.0; h];
        for (i, d) in dpre2.iter().enumerate() {
            g[l.b2.start + i] += d;
            let row = l.w2.start + i * h;
            for j in 0..h {
                g[row + j] += d * fwd.h1[j];
                dh1[j] += d * v[row + j];
            }
        }
        for i in 0..h {
            let d = dh1[i] * (1.0 - fwd.h1[i] * fwd.h1[i]);
            g[l.b1.start + i] += d;
            let row = l.w1.start + i * FEATURE_DIM;
            for j in 0..FEATURE_DIM {
                g[row + j] += d * fwd.x[j];
            }
        }
    }
    params.grads = g;
    if params.grads.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("policy gradients"));
    }
    Ok(())
}

/// Greedy deployment of a policy: argmax language, mean waypoints.
#[derive(Debug, Clone)]
pub struct PolicyDriver {
    pub params: PolicyParams,
}

impl Driver for PolicyDriver {
    fn plan(&mut self, scene: &Scene) -> Result<DrivingAction> {
        let obs = featurize(scene)?;
        Ok(self.params.greedy(&obs)?.action)
    }
}

/// Range of the waypoint-head tensors (weights, bias and embedding) in the
/// flat parameter vector.
pub fn waypoint_head_ranges(params: &PolicyParams) -> [Range<usize>; 3] {
    let l = &params.layout;
    [l.emb.clone(), l.wa.clone(), l.ba.clone()]
}

/// Absolute gradient scale below which [`gradient_check`] stops dividing by
/// the gradient itself. Central differences at ε = 1e-5 carry about 1e-9 of
/// round-off on losses of order 10, so relative errors on gradients much
/// smaller than this would only measure that noise.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient of `loss` with central finite differences
/// at every parameter index in `indices` (all parameters when `None`).
///
/// The relative error is `|a − n| / max(|a|, |n|, floor)`; the absolute floor
/// keeps parameters with vanishing gradient from dividing by round-off.
pub fn gradient_check(
    params: &PolicyParams,
    loss: impl Fn(&PolicyParams) -> Result<LossGraph>,
    indices: Option<&[usize]>,
    eps: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut p = params.clone();
    p.zero_grad();
    let graph = loss(&p)?;
    backward(&mut p, graph)?;
    let analytic = p.grads.clone();
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..p.len()).collect();
            &all
        }
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for &i in idx {
        let orig = p.values[i];
        p.values_mut()[i] = orig + eps;
        let up = loss(&p)?.loss;
        p.values_mut()[i] = orig - eps;
        let down = loss(&p)?.loss;
        p.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
