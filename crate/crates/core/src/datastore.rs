//! Training records, their on-disk format, and the bucket sampler.
//!
//! # File format
//!
//! ```text
//! header:  magic "TKVLADS\0" | u32 format version
//! record:  u32 payload length | payload | u32 FNV-1a of payload
//! ```
//!
//! Payloads use the crate's little-endian [`Wire`] encoding, floats as raw
//! bits. Every dataset file `X` has a plain-text sidecar `X.manifest.toml`
//! with the round id and per-source and per-bucket counts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{fnv1a, Reader, Wire};
use crate::error::{Error, Result};
use crate::expert::{expert_rollout, ExpertConfig, Intent};
use crate::language::LanguageAction;
use crate::policy::ObservationFeatures;
use crate::takeover::TriggerKind;
use crate::world::{DrivingAction, Scene, WorldConfig};

pub const DATASET_MAGIC: &[u8; 8] = b"TKVLADS\0";
pub const DATASET_VERSION: u32 = 1;
/// Future samples per record (5 Hz over 2 s).
pub const FUTURE_STEPS: usize = 10;
/// World ticks between future samples.
pub const FUTURE_STRIDE: usize = 4;
/// World ticks between recorded training frames (4 Hz).
pub const RECORD_STRIDE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Pretrain,
    Takeover,
    PreTakeover,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Pretrain => "pretrain",
            Source::Takeover => "takeover",
            Source::PreTakeover => "pre_takeover",
        }
    }
}

impl Wire for Source {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match u8::decode(r)? {
            0 => Ok(Source::Pretrain),
            1 => Ok(Source::Takeover),
            2 => Ok(Source::PreTakeover),
            t => Err(r.error(format!("unknown record source {t}"))),
        }
    }
}

impl Wire for Intent {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.index() as u8).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let t = u8::decode(r)?;
        Intent::from_index(t as usize).ok_or_else(|| r.error(format!("unknown intent {t}")))
    }
}

/// Recorded future poses `(x, y, yaw)` of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFuture {
    pub id: u32,
    pub poses: Vec<[f64; 3]>,
}

impl Wire for AgentFuture {
    fn encode(&self, out: &mut Vec<u8>) {
        self.id.encode(out);
        self.poses.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(AgentFuture {
            id: u32::decode(r)?,
            poses: Vec::decode(r)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TakeoverRecord {
    pub record_id: u64,
    pub round: u32,
    pub source: Source,
    pub trigger: Option<TriggerKind>,
    /// The expert's intent on this tick (shadow or acting).
    pub intent: Intent,
    pub obs: ObservationFeatures,
    pub scene: Scene,
    pub language_label: LanguageAction,
    pub expert_action: Option<DrivingAction>,
    pub mask: u8,
    pub agent_futures: Vec<AgentFuture>,
    /// Expert counterfactual ego positions, 5 Hz over 2 s.
    pub reference_trajectory: Vec<[f64; 2]>,
}

impl TakeoverRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("record {}: {m}", self.record_id)));
        let pre = self.source == Source::PreTakeover;
        if (self.mask == 1) != pre || self.mask > 1 {
            return fail(format!("mask {} inconsistent with source {:?}", self.mask, self.source));
        }
        if self.expert_action.is_some() == pre {
            return fail("expert action must be present exactly when mask is 0".into());
        }
        if (self.source == Source::Pretrain) != self.trigger.is_none() {
            return fail("trigger must be set exactly for takeover-family records".into());
        }
        if self.reference_trajectory.len() != FUTURE_STEPS {
            return fail(format!("reference trajectory has {} points", self.reference_trajectory.len()));
        }
        if let Some(f) = self.agent_futures.iter().find(|f| f.poses.len() != FUTURE_STEPS) {
            return fail(format!("agent {} future has {} poses", f.id, f.poses.len()));
        }
        if self.expert_action.as_ref().is_some_and(|a| !a.is_finite()) {
            return fail("non-finite expert action".into());
        }
        Ok(())
    }
}

impl Wire for TakeoverRecord {
    fn encode(&self, out: &mut Vec<u8>) {
        self.record_id.encode(out);
        self.round.encode(out);
        self.source.encode(out);
        self.trigger.encode(out);
        self.intent.encode(out);
        self.obs.encode(out);
        self.scene.encode(out);
        self.language_label.encode(out);
        self.expert_action.encode(out);
        self.mask.encode(out);
        self.agent_futures.encode(out);
        self.reference_trajectory.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(TakeoverRecord {
            record_id: u64::decode(r)?,
            round: u32::decode(r)?,
            source: Source::decode(r)?,
            trigger: Option::decode(r)?,
            intent: Intent::decode(r)?,
            obs: ObservationFeatures::decode(r)?,
            scene: Scene::decode(r)?,
            language_label: LanguageAction::decode(r)?,
            expert_action: Option::decode(r)?,
            mask: u8::decode(r)?,
            agent_futures: Vec::decode(r)?,
            reference_trajectory: Vec::decode(r)?,
        })
    }
}

/// Future agent poses from a 20 Hz scene log (`log[i]` at tick `i`) and the
/// expert's counterfactual rollout from tick `t`. `None` when the log ends
/// less than two seconds after `t`.
pub fn record_futures<S: AsRef<Scene>>(
    log: &[S],
    t: usize,
    expert: &ExpertConfig,
    world: &WorldConfig,
) -> Result<Option<(Vec<AgentFuture>, Vec<[f64; 2]>)>> {
    let horizon = FUTURE_STEPS * FUTURE_STRIDE;
    if t + horizon >= log.len() {
        return Ok(None);
    }
    let scene = |i: usize| log[i].as_ref();
    let futures = scene(t)
        .agents
        .iter()
        .map(|a| AgentFuture {
            id: a.id,
            poses: (1..=FUTURE_STEPS)
                .map(|k| {
                    let s = scene(t + FUTURE_STRIDE * k)
                        .agent(a.id)
                        .map_or(a.state, |b| b.state);
                    [s.pose.x, s.pose.y, s.pose.yaw]
                })
                .collect(),
        })
        .collect();
    let roll = expert_rollout(scene(t), horizon, expert, world)?;
    let reference = (1..=FUTURE_STEPS)
        .map(|k| {
            let p = roll[FUTURE_STRIDE * k - 1];
            [p.x, p.y]
        })
        .collect();
    Ok(Some((futures, reference)))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

/// Sidecar summary of a dataset file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub round: u32,
    pub records: usize,
    pub sources: BTreeMap<String, usize>,
    pub buckets: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn for_records(records: &[TakeoverRecord], round: u32) -> Self {
        let mut m = Manifest {
            format_version: DATASET_VERSION,
            round,
            records: records.len(),
            ..Manifest::default()
        };
        for r in records {
            *m.sources.entry(r.source.name().to_string()).or_default() += 1;
            *m.buckets.entry(bucket_name(r)).or_default() += 1;
        }
        m
    }

    pub fn load(dataset: &Path) -> Result<Self> {
        let p = manifest_path(dataset);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    }
}

/// Streams records to a dataset file; [`DatasetWriter::finish`] writes the
/// manifest.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    round: u32,
    records: Vec<TakeoverRecord>,
}

impl DatasetWriter {
    pub fn create(path: &Path, round: u32) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = DATASET_MAGIC.to_vec();
        DATASET_VERSION.encode(&mut header);
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        Ok(DatasetWriter {
            path: path.to_path_buf(),
            out,
            round,
            records: Vec::new(),
        })
    }

    pub fn append(&mut self, record: &TakeoverRecord) -> Result<()> {
        record.validate()?;
        let payload = record.to_bytes();
        let mut frame = Vec::with_capacity(payload.len() + 8);
        (payload.len() as u32).encode(&mut frame);
        frame.extend_from_slice(&payload);
        fnv1a(&payload).encode(&mut frame);
        self.out.write_all(&frame).map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record.clone());
        Ok(())
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let manifest = Manifest::for_records(&self.records, self.round);
        let text = toml::to_string(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        let mp = manifest_path(&self.path);
        std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        Ok(manifest)
    }
}

pub fn write_dataset(path: &Path, records: &[TakeoverRecord], round: u32) -> Result<Manifest> {
    let mut w = DatasetWriter::create(path, round)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

/// Parses a dataset image. Errors carry the byte offset and name the last
/// record that decoded cleanly.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TakeoverRecord>> {
    let mut r = Reader::new(bytes);
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a dataset file (bad magic)".into(),
        });
    }
    r.take(8)?;
    let version = u32::decode(&mut r)?;
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let mut out: Vec<TakeoverRecord> = Vec::new();
    while !r.is_empty() {
        let start = r.offset();
        let context = |e: Error| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!(
                    "{message} (record #{} starting at byte {start}; last valid record: {})",
                    out.len(),
                    out.last()
                        .map_or("none".to_string(), |l| format!("#{} id {}", out.len() - 1, l.record_id))
                ),
            },
            other => other,
        };
        let len = u32::decode(&mut r).map_err(context)? as usize;
        let payload_at = r.offset();
        let payload = r.take(len).map_err(context)?;
        let sum = u32::decode(&mut r).map_err(context)?;
        if sum != fnv1a(payload) {
            return Err(context(Error::Parse {
                offset: payload_at,
                message: "record checksum mismatch".into(),
            }));
        }
        let mut pr = Reader::with_base(payload, payload_at);
        let rec = TakeoverRecord::decode(&mut pr).map_err(context)?;
        if !pr.is_empty() {
            return Err(context(pr.error("trailing bytes in record payload")));
        }
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TakeoverRecord>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "dataset not found; run the stage that produces it first".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode_dataset(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BucketFamily {
    Pretrain,
    Takeover,
}

/// Bucket key of a record: expert intent for pretraining data, trigger and
/// source for takeover-family data.
pub fn bucket_name(r: &TakeoverRecord) -> String {
    match (r.source, r.trigger) {
        (Source::Pretrain, _) | (_, None) => format!("pretrain/{:?}", r.intent),
        (s, Some(t)) => format!("{}/{}", s.name(), t.name()),
    }
}

pub fn bucket_family(r: &TakeoverRecord) -> BucketFamily {
    match r.source {
        Source::Pretrain => BucketFamily::Pretrain,
        _ => BucketFamily::Takeover,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub name: String,
    pub family: BucketFamily,
    pub weight: f64,
    /// Indices into the record slice the buckets were built from.
    pub members: Vec<usize>,
}

/// Non-empty buckets of both families, equal weights within a family.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketSet {
    pub pretrain: Vec<Bucket>,
    pub takeover: Vec<Bucket>,
}

impl BucketSet {
    pub fn build(records: &[TakeoverRecord]) -> Self {
        let mut groups: BTreeMap<(BucketFamily, String), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry((bucket_family(r), bucket_name(r))).or_default().push(i);
        }
        let mut pretrain = Vec::new();
        let mut takeover = Vec::new();
        for ((family, name), members) in groups {
            let b = Bucket {
                name,
                family,
                weight: 0.0,
                members,
            };
            match family {
                BucketFamily::Pretrain => pretrain.push(b),
                BucketFamily::Takeover => takeover.push(b),
            }
        }
        for fam in [&mut pretrain, &mut takeover] {
            let n = fam.len() as f64;
            fam.iter_mut().for_each(|b| b.weight = 1.0 / n);
        }
        BucketSet { pretrain, takeover }
    }

    pub fn family(&self, f: BucketFamily) -> &[Bucket] {
        match f {
            BucketFamily::Pretrain => &self.pretrain,
            BucketFamily::Takeover => &self.takeover,
        }
    }
}

/// A sampled batch: record indices plus the family each slot drew from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub families: Vec<BucketFamily>,
}

impl Batch {
    pub fn takeover_slots(&self) -> usize {
        self.families.iter().filter(|f| **f == BucketFamily::Takeover).count()
    }
}

fn pick_bucket<'a>(buckets: &'a [Bucket], rng: &mut impl Rng) -> &'a Bucket {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for b in buckets {
        acc += b.weight;
        if u < acc {
            return b;
        }
    }
    &buckets[buckets.len() - 1]
}

/// Each slot: family by Bernoulli(`p`) (takeover with probability `p`),
/// then a bucket by weight, then a uniform member.
pub fn sample_batch(buckets: &BucketSet, p: f64, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mixing probability {p} outside [0, 1]")));
    }
    if p > 0.0 && buckets.takeover.is_empty() {
        return Err(Error::Config("takeover family is empty but p > 0".into()));
    }
    if p < 1.0 && buckets.pretrain.is_empty() {
        return Err(Error::Config("pretrain family is empty but p < 1".into()));
    }
    let mut batch = Batch {
        indices: Vec::with_capacity(batch_size),
        families: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let family = if rng.random::<f64>() < p {
            BucketFamily::Takeover
        } else {
            BucketFamily::Pretrain
        };
        let b = pick_bucket(buckets.family(family), rng);
        batch.indices.push(b.members[rng.random_range(0..b.members.len())]);
        batch.families.push(family);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests;
