//! The post-training round loop as file-backed stages.
//!
//! Every stage reads its inputs from an output directory, writes new
//! artifacts next to them and never overwrites an existing one. Each stage
//! is a pure function of its input artifacts, the configuration and the
//! seed, so re-running a round into a fresh directory reproduces it
//! byte for byte.
//!
//! ```text
//! out/
//!   config.toml
//!   pretrain/  dataset.bin policy.ckpt sft.jsonl
//!   round-1/   dataset.bin collect.json sft.ckpt sft.jsonl rft.jsonl policy.ckpt eval.json eval.txt
//!   round-2/   ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collect::{collect, collect_pretrain, CollectConfig, CollectReport, DemoNoise};
use crate::datastore::{load_dataset, write_dataset, Source, TakeoverRecord};
use crate::dreaming::{train_rft, GrpoConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, SuiteReport};
use crate::expert::ExpertConfig;
use crate::policy::{load_checkpoint, save_checkpoint, PolicyConfig, PolicyDriver, PolicyParams};
use crate::sft::{train_sft, SftConfig};
use crate::world::scenario::{eval_suite, load_suite, training_scenarios, ScenarioConfig};
use crate::world::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Skip takeover collection; round SFT sees only expert demonstrations.
    pub no_takeover_data: bool,
    pub no_label_enhancement: bool,
    pub no_pretakeover: bool,
    pub no_dreaming: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainStage {
    /// Expert episodes, one per generated training scenario.
    pub episodes: usize,
    pub noise: DemoNoise,
    pub sft: SftConfig,
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            episodes: 100,
            noise: DemoNoise::default(),
            sft: SftConfig {
                epochs: 20,
                samples_per_epoch: 10_000,
                p: 0.0,
                ..SftConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectStage {
    pub episodes_per_round: usize,
    pub config: CollectConfig,
}

impl Default for CollectStage {
    fn default() -> Self {
        CollectStage {
            episodes_per_round: 200,
            config: CollectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    /// Directory of scenario files; the bundled suite when absent.
    pub suite: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            suite: None,
            seeds: vec![0, 1],
        }
    }
}

impl EvalStage {
    pub fn scenarios(&self) -> Result<Vec<ScenarioConfig>> {
        match &self.suite {
            Some(dir) => load_suite(dir),
            None => Ok(eval_suite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub seed: u64,
    pub rounds: u32,
    pub policy: PolicyConfig,
    pub pretrain: PretrainStage,
    pub collect: CollectStage,
    pub sft: SftConfig,
    pub rft: GrpoConfig,
    pub eval: EvalStage,
    pub ablation: Ablation,
    pub expert: ExpertConfig,
    pub world: WorldConfig,
    /// Read pretraining artifacts from here instead of `out/pretrain`,
    /// letting several ablation runs share one behavior-cloned baseline.
    pub pretrain_dir: Option<PathBuf>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            seed: 0,
            rounds: 3,
            policy: PolicyConfig::default(),
            pretrain: PretrainStage::default(),
            collect: CollectStage::default(),
            sft: SftConfig {
                lr: 5e-3,
                ..SftConfig::default()
            },
            rft: GrpoConfig {
                lr: 1e-4,
                kl_weight: 1.0,
                epochs: 4,
                max_steps: 100,
                ..GrpoConfig::default()
            },
            eval: EvalStage::default(),
            ablation: Ablation::default(),
            expert: ExpertConfig::default(),
            world: WorldConfig::default(),
            pretrain_dir: None,
        }
    }
}

impl RoundConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RoundConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("round config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one seed".into()));
        }
        self.sft.validate()?;
        self.pretrain.sft.validate()?;
        self.rft.validate()
    }

    /// Collection settings after the ablation flags.
    pub fn effective_collect(&self) -> CollectConfig {
        let mut c = self.collect.config;
        c.keep_pre_takeover &= !self.ablation.no_pretakeover;
        c.enhance_labels &= !self.ablation.no_label_enhancement;
        c
    }
}

/// Stage-specific seed: SplitMix64 over the run seed, a stage tag and the
/// round.
pub fn stage_seed(seed: u64, stage: &str, round: u32) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in stage.bytes().chain(round.to_le_bytes()) {
        z = z.wrapping_add(u64::from(b)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn rng_for(cfg: &RoundConfig, stage: &str, round: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage, round))
}

/// Artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    pub pretrain: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, cfg: &RoundConfig) -> Self {
        Layout {
            out: out.to_path_buf(),
            pretrain: cfg.pretrain_dir.clone().unwrap_or_else(|| out.join("pretrain")),
        }
    }

    pub fn round(&self, k: u32) -> PathBuf {
        self.out.join(format!("round-{k}"))
    }

    pub fn pretrain_dataset(&self) -> PathBuf {
        self.pretrain.join("dataset.bin")
    }

    pub fn pretrain_policy(&self) -> PathBuf {
        self.pretrain.join("policy.ckpt")
    }

    /// Policy that drives collection in round `k`.
    pub fn policy_before(&self, k: u32) -> PathBuf {
        if k <= 1 {
            self.pretrain_policy()
        } else {
            self.round(k - 1).join("policy.ckpt")
        }
    }
}

fn fresh(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Config(format!(
            "{} already exists; stages never overwrite artifacts, choose a fresh output directory",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fresh(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

fn load_policy(path: &Path, hint: &str) -> Result<PolicyParams> {
    require(path, hint)?;
    load_checkpoint(path)
}

/// Expert demonstrations and the behavior-cloned starting policy.
pub fn stage_pretrain(cfg: &RoundConfig, layout: &Layout) -> Result<Vec<TakeoverRecord>> {
    let policy_path = layout.pretrain_policy();
    let data_path = layout.pretrain_dataset();
    fresh(&policy_path)?;
    fresh(&data_path)?;
    let jobs: Vec<(ScenarioConfig, u64)> =
        training_scenarios(cfg.pretrain.episodes, stage_seed(cfg.seed, "pretrain-scenarios", 0))
            .into_iter()
            .map(|s| (s, 0))
            .collect();
    let (records, report) = collect_pretrain(&jobs, 0, &cfg.pretrain.noise, &cfg.expert, &cfg.world)?;
    write_dataset(&data_path, &records, 0)?;
    write_text(&layout.pretrain.join("collect.json"), &json(&report))?;

    let mut rng = rng_for(cfg, "pretrain", 0);
    let mut params = PolicyParams::init(cfg.policy, &mut rng)?;
    let log = train_sft(&mut params, &records, &[], &cfg.pretrain.sft, &mut rng)?;
    write_text(&layout.pretrain.join("sft.jsonl"), &jsonl(&log))?;
    save_checkpoint(&params, &policy_path)?;
    Ok(records)
}

/// Shadow-mode collection with the previous round's policy.
pub fn stage_collect(cfg: &RoundConfig, layout: &Layout, k: u32) -> Result<CollectReport> {
    let dir = layout.round(k);
    let data_path = dir.join("dataset.bin");
    fresh(&data_path)?;
    let params = load_policy(&layout.policy_before(k), "run the previous stage (pretrain or the previous round) first")?;
    let jobs: Vec<(ScenarioConfig, u64)> = if cfg.ablation.no_takeover_data {
        Vec::new()
    } else {
        training_scenarios(cfg.collect.episodes_per_round, stage_seed(cfg.seed, "collect-scenarios", k))
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i as u64))
            .collect()
    };
    let first_id = 1_000_000 * u64::from(k);
    let (records, report) = collect(
        || PolicyDriver { params: params.clone() },
        &jobs,
        false,
        k,
        first_id,
        &cfg.effective_collect(),
        &cfg.expert,
        &cfg.world,
    )?;
    write_dataset(&data_path, &records, k)?;
    write_text(&dir.join("collect.json"), &json(&report))?;
    Ok(report)
}

/// Expert demonstrations plus every takeover dataset up to round `k`.
pub fn aggregated_records(layout: &Layout, k: u32) -> Result<Vec<TakeoverRecord>> {
    require(&layout.pretrain_dataset(), "run the pretrain stage first")?;
    let mut records = load_dataset(&layout.pretrain_dataset())?;
    for j in 1..=k {
        let p = layout.round(j).join("dataset.bin");
        require(&p, "run the collect stage for this round first")?;
        records.extend(load_dataset(&p)?);
    }
    Ok(records)
}

/// Supervised fine-tuning of the previous policy on the aggregated data.
pub fn stage_sft(cfg: &RoundConfig, layout: &Layout, k: u32) -> Result<PolicyParams> {
    let dir = layout.round(k);
    let out = dir.join("sft.ckpt");
    fresh(&out)?;
    let mut params = load_policy(&layout.policy_before(k), "run the previous stage (pretrain or the previous round) first")?;
    let records = aggregated_records(layout, k)?;
    let mut rng = rng_for(cfg, "sft", k);
    let log = train_sft(&mut params, &records, &[], &cfg.sft, &mut rng)?;
    write_text(&dir.join("sft.jsonl"), &jsonl(&log))?;
    save_checkpoint(&params, &out)?;
    Ok(params)
}

/// Scenario dreaming on this round's takeover-family records, anchored to
/// the SFT checkpoint. With dreaming ablated the SFT policy passes through.
pub fn stage_dream(cfg: &RoundConfig, layout: &Layout, k: u32) -> Result<PolicyParams> {
    let dir = layout.round(k);
    let out = dir.join("policy.ckpt");
    fresh(&out)?;
    let reference = load_policy(&dir.join("sft.ckpt"), "run the sft stage for this round first")?;
    let data = dir.join("dataset.bin");
    require(&data, "run the collect stage for this round first")?;
    let records: Vec<TakeoverRecord> = load_dataset(&data)?
        .into_iter()
        .filter(|r| r.source != Source::Pretrain)
        .collect();
    let mut params = reference.clone();
    let log = if cfg.ablation.no_dreaming {
        Vec::new()
    } else {
        let mut rng = rng_for(cfg, "dream", k);
        train_rft(&mut params, &reference, &records, &cfg.rft, &cfg.world, &mut rng)?
    };
    write_text(&dir.join("rft.jsonl"), &jsonl(&log))?;
    save_checkpoint(&params, &out)?;
    Ok(params)
}

pub fn evaluate_policy(cfg: &RoundConfig, params: &PolicyParams) -> Result<SuiteReport> {
    let suite = cfg.eval.scenarios()?;
    evaluate_suite(|| PolicyDriver { params: params.clone() }, &suite, &cfg.eval.seeds, &cfg.world)
}

/// Evaluates a checkpoint and writes `eval.json` / `eval.txt` into `dir`.
pub fn stage_eval(cfg: &RoundConfig, checkpoint: &Path, dir: &Path) -> Result<SuiteReport> {
    let params = load_policy(checkpoint, "train or name an existing checkpoint")?;
    let json_path = dir.join("eval.json");
    fresh(&json_path)?;
    let report = evaluate_policy(cfg, &params)?;
    write_text(&json_path, &json(&report))?;
    write_text(&dir.join("eval.txt"), &report.render())?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<SuiteReport> {
    require(path, "run the eval stage first")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `out/config.toml`, or checks that an existing one matches, so
/// stages run one at a time share a single configuration.
pub fn pin_config(cfg: &RoundConfig, out: &Path) -> Result<()> {
    let path = out.join("config.toml");
    let text = cfg.to_toml();
    match fs::read_to_string(&path) {
        Ok(existing) if existing == text => Ok(()),
        Ok(_) => Err(Error::Config(format!(
            "{} was written with a different configuration; choose a fresh output directory",
            path.display()
        ))),
        Err(_) => write_text(&path, &text),
    }
}

/// Pretraining (unless already present) followed by `cfg.rounds` rounds of
/// collect → sft → dream → eval. Returns each round's report.
pub fn run_rounds(cfg: &RoundConfig, out: &Path) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    let layout = Layout::new(out, cfg);
    pin_config(cfg, out)?;
    if !layout.pretrain_policy().exists() {
        stage_pretrain(cfg, &layout)?;
    }
    let mut reports = Vec::new();
    for k in 1..=cfg.rounds {
        stage_collect(cfg, &layout, k)?;
        stage_sft(cfg, &layout, k)?;
        stage_dream(cfg, &layout, k)?;
        let dir = layout.round(k);
        reports.push(stage_eval(cfg, &dir.join("policy.ckpt"), &dir)?);
    }
    Ok(reports)
}

fn fmt_ttc(t: Option<f64>) -> String {
    t.map_or("n/a".into(), |t| format!("{t:.3}"))
}

/// Metric delta table between two suite reports, `b − a`.
pub fn compare(a: &SuiteReport, b: &SuiteReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "metric", "A", "B", "B - A");
    for (name, x, y) in [("DS", a.ds, b.ds), ("SR %", a.sr, b.sr), ("TR %", a.tr, b.tr)] {
        let _ = writeln!(s, "{name:<10} {x:>10.3} {y:>10.3} {:>+10.3}", y - x);
    }
    let delta = match (a.mean_ttc, b.mean_ttc) {
        (Some(x), Some(y)) => format!("{:+.3}", y - x),
        _ => "n/a".into(),
    };
    let _ = writeln!(
        s,
        "{:<10} {:>10} {:>10} {:>10}",
        "TTC s",
        fmt_ttc(a.mean_ttc),
        fmt_ttc(b.mean_ttc),
        delta
    );
    s
}

#[cfg(test)]
mod tests;
