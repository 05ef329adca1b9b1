//! Command-line front end: `collect`, `discover`, `train` and `eval`.
//!
//! Every command accepts `--config FILE` holding flat `key = value` lines
//! whose keys are the long flag names (dashes or underscores). Flags given on
//! the command line override the file; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dataset::{collect, load_dataset, save_dataset, segment, CollectorPolicy, DEFAULT_HORIZON};
use crate::env::{task, TaskConfig, OBS_DIM};
use crate::error::Error;
use crate::grouper::GrouperInput;
use crate::nn::Checkpoint;
use crate::rng::stream;
use crate::runtime::{
    evaluate, evaluate_expert, train_downstream, train_flat, DownstreamConfig, EvalResult, FlatAgent, Manner, MetricsRow, PolicyAgent, RolloutMode,
    SkillAgent, DEFAULT_HIDDEN,
};
use crate::vq::{parse_sizes, Discovery, DiscoveryConfig, Method};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const LOSS_HEADER: &str = "epoch,loss,nll,vq,grouper_loss,reseeded";

#[derive(Debug, Parser)]
#[command(name = "masd", version, about = "Multi-agent skill discovery and hierarchical MAPPO")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted collector and write a dataset file.
    Collect(CollectArgs),
    /// Train skills on one or more datasets and write a skills checkpoint.
    Discover(DiscoverArgs),
    /// Train a downstream policy and write a policy checkpoint plus metrics.
    Train(TrainArgs),
    /// Evaluate a policy and print its win rate.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task id (g3, g5, g7).
    #[arg(long)]
    pub task: Option<String>,
    /// Episodes to collect [default: 100].
    #[arg(long)]
    pub episodes: Option<usize>,
    /// `expert` or `noisy:EPS` [default: expert].
    #[arg(long)]
    pub policy: Option<String>,
    /// Root seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `3d`, `hier` or `single` [default: 3d].
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset paths, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub data: Vec<PathBuf>,
    /// Skill horizon H [default: 5].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Embedding dimension d [default: 8].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Codes per codebook k [default: 8].
    #[arg(long)]
    pub codes: Option<usize>,
    /// Top-level embedding dimension [default: 8].
    #[arg(long)]
    pub top_dim: Option<usize>,
    /// Top-level codes [default: 8].
    #[arg(long)]
    pub top_codes: Option<usize>,
    /// Commitment weight [default: 0.25].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Enabled subgroup sizes [default: 1,2,3,4,5].
    #[arg(long)]
    pub sizes: Option<String>,
    /// `state` or `obs` [default: state].
    #[arg(long)]
    pub grouper_input: Option<String>,
    /// Training epochs [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden width of encoder and decoder [default: 64].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Autoencoder learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss CSV path [default: OUT.loss.csv].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task id to train on.
    #[arg(long)]
    pub env: Option<String>,
    /// Skills checkpoint (not needed with `--assign flat`).
    #[arg(long)]
    pub skills: Option<PathBuf>,
    /// `3d`, `hier`, `mixed`, `rule` or `flat` [default: rule].
    #[arg(long)]
    pub assign: Option<String>,
    /// Environment step budget [default: 300000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace dense shaping with the terminal win bonus only.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sparse: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Environment steps between evaluations [default: 10000].
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Episodes per evaluation [default: 32].
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Environment steps per PPO update [default: 2000].
    #[arg(long)]
    pub rollout_steps: Option<usize>,
    /// Actor and critic hidden width [default: 64].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Sample decoder actions instead of taking the argmax [default: true].
    #[arg(long)]
    pub decoder_sampling: Option<bool>,
    /// Output policy checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV path [default: OUT.metrics.csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// `expert`, `noisy:EPS` or a policy checkpoint path [default: expert].
    #[arg(long)]
    pub policy: Option<String>,
    /// Evaluation episodes [default: 100].
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sparse: Option<bool>,
    /// Sample decoder actions instead of taking the argmax [default: true].
    #[arg(long)]
    pub decoder_sampling: Option<bool>,
    /// Write one JSON line per environment step to this path.
    #[arg(long)]
    pub dump_traj: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Parses a flat `key = value` config file. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> crate::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(map)
}

/// Flag values layered over an optional config file.
struct Layered {
    file: BTreeMap<String, String>,
}

impl Layered {
    fn load(path: Option<&Path>, known: &[&str]) -> CliResult<Self> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
        };
        if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
            return usage(format!("unknown config key `{k}` (known: {})", known.join(", ")));
        }
        Ok(Self { file })
    }

    fn opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Failure::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| Failure::Usage(format!("missing required setting `--{}`", key.replace('_', "-"))))
    }
}

fn parse_with<T>(what: &str, s: &str, f: impl FnOnce(&str) -> crate::Result<T>) -> CliResult<T> {
    f(s).map_err(|e| Failure::Usage(format!("{what}: {e}")))
}

fn check_input(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        usage(format!("input file {} does not exist", p.display()))
    }
}

fn check_output(p: &Path) -> CliResult<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if p.is_dir() {
        return usage(format!("output path {} is a directory", p.display()));
    }
    if parent.is_dir() {
        Ok(())
    } else {
        usage(format!("output directory {} does not exist", parent.display()))
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn task_config(id: &str, sparse: bool) -> CliResult<TaskConfig> {
    let cfg = task(id).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(if sparse { cfg.sparse() } else { cfg })
}

/// Runs the CLI on `args` (including the program name), writing reports to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let res = match cli.command {
        Command::Collect(a) => cmd_collect(a, out),
        Command::Discover(a) => cmd_discover(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn io(e: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io(e))
}

fn cmd_collect(a: CollectArgs, out: &mut dyn Write) -> CliResult<()> {
    let l = Layered::load(a.config.as_deref(), &["task", "episodes", "policy", "seed", "out"])?;
    let task_id: String = l.required("task", a.task)?;
    let episodes = l.get("episodes", a.episodes, 100)?;
    let policy: String = l.get("policy", a.policy, "expert".into())?;
    let seed = l.get("seed", a.seed, 0)?;
    let path: PathBuf = l.required("out", a.out)?;

    let cfg = task_config(&task_id, false)?;
    let policy: CollectorPolicy = parse_with("--policy", &policy, str::parse)?;
    if episodes == 0 {
        return usage("--episodes must be positive");
    }
    check_output(&path)?;

    let (eps, summary) = collect(&cfg, episodes, policy, seed)?;
    save_dataset(&eps, &path)?;
    writeln!(
        out,
        "collected {} episodes on {task_id}: win_rate {:.4}, mean_length {:.2} -> {}",
        summary.episodes,
        summary.win_rate(),
        summary.mean_length,
        path.display()
    )
    .map_err(io)
}

fn cmd_discover(a: DiscoverArgs, out: &mut dyn Write) -> CliResult<()> {
    let known = [
        "method",
        "data",
        "horizon",
        "dim",
        "codes",
        "top_dim",
        "top_codes",
        "beta",
        "sizes",
        "grouper_input",
        "epochs",
        "hidden",
        "lr",
        "seed",
        "out",
        "loss_csv",
    ];
    let l = Layered::load(a.config.as_deref(), &known)?;
    let base = DiscoveryConfig::default();
    let method: String = l.get("method", a.method, "3d".into())?;
    let data: Vec<PathBuf> = if a.data.is_empty() {
        l.file
            .get("data")
            .map(|s| s.split(',').map(|p| PathBuf::from(p.trim())).collect())
            .unwrap_or_default()
    } else {
        a.data
    };
    let sizes: Option<String> = l.opt("sizes", a.sizes)?;
    let grouper_input: Option<String> = l.opt("grouper_input", a.grouper_input)?;
    let cfg = DiscoveryConfig {
        method: parse_with("--method", &method, Method::from_str)?,
        horizon: l.get("horizon", a.horizon, DEFAULT_HORIZON)?,
        d: l.get("dim", a.dim, base.d)?,
        k: l.get("codes", a.codes, base.k)?,
        d_top: l.get("top_dim", a.top_dim, base.d_top)?,
        k_top: l.get("top_codes", a.top_codes, base.k_top)?,
        beta: l.get("beta", a.beta, base.beta)?,
        sizes: match sizes {
            Some(s) => parse_with("--sizes", &s, parse_sizes)?,
            None => base.sizes.clone(),
        },
        grouper_input: match grouper_input {
            Some(s) => parse_with("--grouper-input", &s, GrouperInput::from_str)?,
            None => base.grouper_input,
        },
        epochs: l.get("epochs", a.epochs, base.epochs)?,
        hidden: l.get("hidden", a.hidden, base.hidden)?,
        lr: l.get("lr", a.lr, base.lr)?,
        seed: l.get("seed", a.seed, base.seed)?,
        ..base
    };
    cfg.validate()?;
    let path: PathBuf = l.required("out", a.out)?;
    let loss_path = l.get("loss_csv", a.loss_csv, with_suffix(&path, ".loss.csv"))?;
    if data.is_empty() {
        return usage("missing required setting `--data`");
    }
    for p in &data {
        check_input(p)?;
    }
    check_output(&path)?;
    check_output(&loss_path)?;

    let mut episodes = Vec::new();
    let mut obs_dim = None;
    for p in &data {
        let (header, eps) = load_dataset(p)?;
        if *obs_dim.get_or_insert(header.obs_dim) != header.obs_dim {
            return Err(Failure::Runtime(Error::Validation(format!(
                "dataset {} has observation dimension {} but earlier datasets have {}",
                p.display(),
                header.obs_dim,
                obs_dim.unwrap_or(0)
            ))));
        }
        episodes.extend(eps);
    }
    let obs_dim = obs_dim.unwrap_or(OBS_DIM);
    let batches = segment(&episodes, cfg.horizon, false)?;

    let mut csv = format!("{LOSS_HEADER}\n");
    let method = cfg.method;
    let mut model = Discovery::new(cfg, obs_dim)?;
    let report = model.train(&batches, |s| {
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.epoch, s.loss, s.nll, s.vq, s.grouper_loss, s.reseeded);
    })?;
    model.to_checkpoint().save(&path)?;
    std::fs::write(&loss_path, csv).map_err(io)?;
    writeln!(
        out,
        "trained {} skills on {} segment batches: loss {:.4} -> {:.4} ({:.1}% reduction), accuracy {:.4} -> {}",
        method,
        batches.len(),
        report.initial.loss,
        report.last.loss,
        100.0 * report.loss_reduction(),
        report.last.accuracy,
        path.display()
    )
    .map_err(io)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let known = [
        "env",
        "skills",
        "assign",
        "steps",
        "sparse",
        "seed",
        "eval_every",
        "eval_episodes",
        "rollout_steps",
        "hidden",
        "decoder_sampling",
        "out",
        "metrics",
    ];
    let l = Layered::load(a.config.as_deref(), &known)?;
    let base = DownstreamConfig::default();
    let env_id: String = l.required("env", a.env)?;
    let sparse = l.get("sparse", a.sparse, false)?;
    let assign: String = l.get("assign", a.assign, "rule".into())?;
    let cfg = DownstreamConfig {
        steps: l.get("steps", a.steps, base.steps)?,
        rollout_steps: l.get("rollout_steps", a.rollout_steps, base.rollout_steps)?,
        eval_every: l.get("eval_every", a.eval_every, base.eval_every)?,
        eval_episodes: l.get("eval_episodes", a.eval_episodes, base.eval_episodes)?,
        hidden: l.get("hidden", a.hidden, DEFAULT_HIDDEN)?,
        decoder_sampling: l.get("decoder_sampling", a.decoder_sampling, base.decoder_sampling)?,
        seed: l.get("seed", a.seed, base.seed)?,
        ..base
    };
    cfg.validate()?;
    let task_cfg = task_config(&env_id, sparse)?;
    let path: PathBuf = l.required("out", a.out)?;
    let metrics_path = l.get("metrics", a.metrics, with_suffix(&path, ".metrics.csv"))?;
    check_output(&path)?;
    check_output(&metrics_path)?;
    let mut init = stream(cfg.seed, "init");

    let (ckpt, outcome) = if assign == "flat" {
        let mut agent = FlatAgent::new(cfg.hidden, &cfg.ppo, &mut init);
        let outcome = train_flat(&task_cfg, &mut agent, &cfg, |_: &MetricsRow| {})?;
        (agent.to_checkpoint(), outcome)
    } else {
        let manner: Manner = parse_with("--assign", &assign, Manner::from_str)?;
        let skills_path: PathBuf = l.required("skills", a.skills)?;
        check_input(&skills_path)?;
        let skills = Discovery::from_checkpoint(&Checkpoint::load(&skills_path)?)?;
        manner
            .check(&skills)
            .map_err(|e| Failure::Usage(format!("`--assign {manner}` cannot use {}: {e}", skills_path.display())))?;
        let mut agent = SkillAgent::new(skills, manner, cfg.hidden, &cfg.ppo, &mut init)?;
        let outcome = train_downstream(&task_cfg, &mut agent, &cfg, |_: &MetricsRow| {})?;
        (agent.to_checkpoint(), outcome)
    };
    ckpt.save(&path)?;
    std::fs::write(&metrics_path, outcome.metrics_csv()).map_err(io)?;
    writeln!(
        out,
        "trained {assign} on {env_id}{} for {} steps ({} episodes): final win_rate {:.4}, best {:.4} -> {}",
        if sparse { " (sparse)" } else { "" },
        outcome.steps,
        outcome.episodes,
        outcome.final_win_rate,
        outcome.best_win_rate,
        path.display()
    )
    .map_err(io)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let l = Layered::load(
        a.config.as_deref(),
        &["env", "policy", "episodes", "seed", "sparse", "decoder_sampling", "dump_traj"],
    )?;
    let env_id: String = l.required("env", a.env)?;
    let policy: String = l.get("policy", a.policy, "expert".into())?;
    let episodes = l.get("episodes", a.episodes, 100)?;
    let seed = l.get("seed", a.seed, 0)?;
    let sparse = l.get("sparse", a.sparse, false)?;
    let decoder_sampling = l.get("decoder_sampling", a.decoder_sampling, true)?;
    let dump: Option<PathBuf> = l.opt("dump_traj", a.dump_traj)?;
    if episodes == 0 {
        return usage("--episodes must be positive");
    }
    let cfg = task_config(&env_id, sparse)?;
    if let Some(p) = &dump {
        check_output(p)?;
    }
    let trace = dump.is_some();

    let res: EvalResult = if policy == "expert" || policy.starts_with("noisy:") {
        let p: CollectorPolicy = parse_with("--policy", &policy, str::parse)?;
        evaluate_expert(&cfg, p.epsilon(), episodes, seed, trace)?
    } else {
        let p = PathBuf::from(&policy);
        check_input(&p)?;
        let agent = PolicyAgent::from_checkpoint(&Checkpoint::load(&p)?)?;
        let mode = RolloutMode {
            sample_decoder: decoder_sampling,
            trace,
            ..RolloutMode::EVAL
        };
        evaluate(&cfg, &agent, episodes, seed, mode)?
    };
    if let Some(p) = &dump {
        let mut text = String::new();
        for s in &res.trace {
            text.push_str(&s.to_line());
            text.push('\n');
        }
        std::fs::write(p, text).map_err(io)?;
    }
    let (lo, hi) = res.win_interval();
    writeln!(
        out,
        "episodes {} wins {} win_rate {:.4} ci95 [{:.4}, {:.4}] mean_return {:.4} mean_length {:.2}",
        res.episodes,
        res.wins,
        res.win_rate(),
        lo,
        hi,
        res.mean_return,
        res.mean_length
    )
    .map_err(io)
}
