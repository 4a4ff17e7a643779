//! `takevla` — runs the collect → sft → dream → eval loop from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use takevla::error::Error;
use takevla::pipeline::{self, Layout, RoundConfig};

#[derive(Parser, Debug)]
#[command(name = "takevla", version, about = "Takeover-driven post-training for a toy driving policy")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Precedence: config file <
/// environment variable < flag.
#[derive(Args, Debug)]
struct Common {
    /// TOML round configuration; defaults are used for missing keys.
    #[arg(long, global = true, env = "TAKEVLA_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "TAKEVLA_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "TAKEVLA_ROUNDS")]
    rounds: Option<u32>,
    /// Takeover-family sampling probability for round SFT.
    #[arg(long, global = true, env = "TAKEVLA_P")]
    p: Option<f64>,
    #[arg(long, global = true, env = "TAKEVLA_GROUP_SIZE")]
    group_size: Option<usize>,
    /// KL weight of the dreaming objective.
    #[arg(long, global = true, env = "TAKEVLA_KL")]
    kl: Option<f64>,
    #[arg(long, global = true)]
    no_takeover_data: bool,
    #[arg(long, global = true)]
    no_label_enhancement: bool,
    #[arg(long, global = true)]
    no_pretakeover: bool,
    #[arg(long, global = true)]
    no_dreaming: bool,
    /// Run directory.
    #[arg(long, global = true, env = "TAKEVLA_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for collection, dreaming and evaluation (0 = all cores).
    #[arg(long, global = true, env = "TAKEVLA_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect expert demonstrations and behavior-clone the starting policy.
    Pretrain,
    /// Shadow-mode collection with the previous round's policy.
    Collect {
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Supervised fine-tuning on the aggregated data.
    Sft {
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Scenario dreaming on the round's takeover records.
    Dream {
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Evaluate a round's policy, an explicit checkpoint, or compare two reports.
    Eval {
        #[arg(long, default_value_t = 1, conflicts_with_all = ["checkpoint", "compare"])]
        round: u32,
        /// Evaluate this checkpoint and write the report into --out.
        #[arg(long, conflicts_with = "compare")]
        checkpoint: Option<PathBuf>,
        /// Print the metric deltas between two eval reports (files or run dirs).
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
    /// Pretrain if needed, then run every round.
    Round,
    /// Print the metric deltas between two eval reports (files or run dirs).
    Compare { a: PathBuf, b: PathBuf },
    /// Print the effective configuration as TOML.
    Config,
}

enum Failure {
    Usage(String),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) => Failure::Usage(e.to_string()),
            e => Failure::Stage(e),
        }
    }
}

fn resolve(common: &Common) -> Result<RoundConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Usage(format!("config file {} does not exist", path.display())))
        }
        Some(path) => RoundConfig::load(path)?,
        None => RoundConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.rounds {
        cfg.rounds = r;
    }
    if let Some(p) = common.p {
        cfg.sft.p = p;
    }
    if let Some(g) = common.group_size {
        cfg.rft.group_size = g;
    }
    if let Some(kl) = common.kl {
        cfg.rft.kl_weight = kl;
    }
    cfg.ablation.no_takeover_data |= common.no_takeover_data;
    cfg.ablation.no_label_enhancement |= common.no_label_enhancement;
    cfg.ablation.no_pretakeover |= common.no_pretakeover;
    cfg.ablation.no_dreaming |= common.no_dreaming;
    cfg.validate()?;
    Ok(cfg)
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("eval.json")
    } else {
        p.to_path_buf()
    }
}

fn compare(a: &Path, b: &Path) -> Result<(), Failure> {
    let a = pipeline::load_report(&report_path(a))?;
    let b = pipeline::load_report(&report_path(b))?;
    print!("{}", pipeline::compare(&a, &b));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.common)?;
    if cli.common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let out = &cli.common.out;
    let layout = Layout::new(out, &cfg);
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Compare { a, b } => compare(&a, &b)?,
        Command::Eval {
            compare: Some(pair), ..
        } => compare(&pair[0], &pair[1])?,
        Command::Eval {
            checkpoint: Some(ckpt), ..
        } => {
            let r = pipeline::stage_eval(&cfg, &ckpt, out)?;
            print!("{}", r.render());
        }
        Command::Eval { round, .. } => {
            let dir = layout.round(round);
            let r = pipeline::stage_eval(&cfg, &dir.join("policy.ckpt"), &dir)?;
            print!("{}", r.render());
        }
        Command::Pretrain => {
            pipeline::pin_config(&cfg, out)?;
            let records = pipeline::stage_pretrain(&cfg, &layout)?;
            println!("pretrain: {} demonstration records", records.len());
        }
        Command::Collect { round } => {
            pipeline::pin_config(&cfg, out)?;
            let report = pipeline::stage_collect(&cfg, &layout, round)?;
            let total: usize = report.records.values().sum();
            if total == 0 {
                eprintln!("warning: round {round} collected no takeover records; the policy may already be competent");
            }
            println!("collect round {round}: triggers {:?} records {:?}", report.triggers, report.records);
        }
        Command::Sft { round } => {
            pipeline::pin_config(&cfg, out)?;
            pipeline::stage_sft(&cfg, &layout, round)?;
            println!("sft round {round}: wrote {}", layout.round(round).join("sft.ckpt").display());
        }
        Command::Dream { round } => {
            pipeline::pin_config(&cfg, out)?;
            pipeline::stage_dream(&cfg, &layout, round)?;
            println!("dream round {round}: wrote {}", layout.round(round).join("policy.ckpt").display());
        }
        Command::Round => {
            pipeline::pin_config(&cfg, out)?;
            let reports = pipeline::run_rounds(&cfg, out)?;
            for (k, r) in reports.iter().enumerate() {
                println!("round {}: DS {:.2} SR {:.1}% TR {:.1}%", k + 1, r.ds, r.sr, r.tr);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
