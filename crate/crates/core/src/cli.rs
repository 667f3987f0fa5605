//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{
    position_bins_from_records, relay_inference, sample_correctness, select_relay_pair,
    truncation_token_histogram, CheckpointScore, EvalReport, PassEstimator, SamplingSettings,
};
use crate::gradcheck::grad_check_suite;
use crate::rng::StreamKey;
use crate::rollout::read_trajectory_records;
use crate::tasks::read_eval_set;
use crate::trainer::{run_training, CheckpointEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "soup", version, about = "Mix-policy RL on synthetic token tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes effective.cfg, metrics.log and checkpoints/.
    Train(TrainArgs),
    /// avg@k and pass@k of one checkpoint on an evaluation set.
    Eval(EvalArgs),
    /// Relay sampling (prefix from one checkpoint, suffix from another) vs single-model sampling.
    Relay(RelayArgs),
    /// Position-bin entropy/clip profile and truncation-token histogram of a trajectory dump.
    Diag(DiagArgs),
    /// Finite-difference check of the surrogate gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named starting configuration applied before the config file.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key=value`, applied after the config file; repeatable, last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Tab-separated evaluation set (as written by `train`).
    #[arg(long)]
    pub eval_set: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated k values for pass@k.
    #[arg(long, default_value = "1,2,4,8,16,32")]
    pub k_list: String,
    /// `unbiased` or `empirical`.
    #[arg(long, default_value = "unbiased")]
    pub estimator: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples per instance.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelayArgs {
    /// Prefix checkpoint; with --index, chosen automatically.
    #[arg(long)]
    pub behavior: Option<PathBuf>,
    /// Suffix checkpoint; with --index, chosen automatically.
    #[arg(long)]
    pub current: Option<PathBuf>,
    /// `checkpoints/index.jsonl` of a run: pairs the best checkpoint with the best earlier one.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    /// `trajectories.jsonl` written with `dump_trajectories=true`.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Only records from this step onward.
    #[arg(long, default_value_t = 0)]
    pub from_step: u64,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Failure categories, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) => format!("usage error: {m}"),
            Failure::Config(m) => format!("config error: {m}"),
            Failure::Runtime(m) => format!("runtime error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `argv` (including the program name), runs the verb and returns the exit status.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.message());
            f.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Relay(a) => relay(a),
        Command::Diag(a) => diag(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Preset, then config file, then overrides in order.
pub fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    overrides: &[String],
) -> std::result::Result<TrainConfig, Failure> {
    if config.is_none() && preset.is_none() {
        return Err(Failure::Usage("train needs --config or --preset".into()));
    }
    let mut cfg = match preset {
        Some(name) => TrainConfig::preset(name).map_err(|e| Failure::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override {o:?} is not key=value")))?;
        if !TrainConfig::keys().contains(&k.trim()) {
            return Err(Failure::Usage(format!("override names unknown key {:?}", k.trim())));
        }
        cfg.set(k, v).map_err(|e| Failure::Usage(format!("override {o:?}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(a.config.as_deref(), a.preset.as_deref(), &a.overrides)?;
    let run = run_training(&cfg, &a.output_dir)?;
    let last = run.metrics.last();
    println!(
        "trained {} steps; final mean reward {:.4}; held-out avg@{} {:.4}; checkpoint {}",
        cfg.total_steps,
        last.map_or(f64::NAN, |m| m.mean_reward),
        cfg.eval.k,
        run.final_heldout_avg(),
        run.final_checkpoint.display()
    );
    Ok(())
}

fn parse_k_list(text: &str) -> std::result::Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().ok().filter(|&k| k > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Failure::Usage(format!("bad --k-list {text:?}")))
}

fn parse_estimator(text: &str) -> std::result::Result<PassEstimator, Failure> {
    match text {
        "unbiased" => Ok(PassEstimator::Unbiased),
        "empirical" => Ok(PassEstimator::Empirical),
        other => Err(Failure::Usage(format!("unknown estimator {other:?}"))),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let k_list = parse_k_list(&a.sampling.k_list)?;
    let estimator = parse_estimator(&a.sampling.estimator)?;
    if k_list.iter().any(|&k| k > a.n) {
        return Err(Failure::Usage(format!("every k must be at most n = {}", a.n)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let eval_set = read_eval_set(&a.sampling.eval_set, &ckpt.vocab)?;
    let sampling = SamplingSettings {
        max_len: a.sampling.max_len,
        temperature: a.sampling.temperature,
    };
    let key = StreamKey::root(a.sampling.seed).child("eval");
    let rows = sample_correctness(&ckpt.params, &ckpt.arch, &ckpt.vocab, &eval_set, a.n, &sampling, &key)?;
    let report = EvalReport::from_correctness(&rows, &k_list, estimator, vec![a.sampling.seed])?;
    make_dir(&a.output_dir)?;
    let path = a.output_dir.join("eval_report.json");
    write_file(&path, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    println!("avg@{} {:.4}", a.n, report.avg_at_k);
    for (k, p) in &report.pass_at_k {
        println!("pass@{k} {p:.4}");
    }
    Ok(())
}

fn relay(a: RelayArgs) -> std::result::Result<(), Failure> {
    let k_list = parse_k_list(&a.sampling.k_list)?;
    let estimator = parse_estimator(&a.sampling.estimator)?;
    let (behavior_path, current_path) = match (&a.index, &a.behavior, &a.current) {
        (Some(index), None, None) => pick_pair(index)?,
        (None, Some(b), Some(c)) => (b.clone(), c.clone()),
        _ => {
            return Err(Failure::Usage(
                "relay needs either --index or both --behavior and --current".into(),
            ))
        }
    };
    let behavior = load_checkpoint(&behavior_path)?;
    let current = load_checkpoint(&current_path)?;
    if behavior.arch != current.arch || behavior.vocab != current.vocab {
        return Err(Failure::Runtime("checkpoints have different architectures".into()));
    }
    let eval_set = read_eval_set(&a.sampling.eval_set, &current.vocab)?;
    let sampling = SamplingSettings {
        max_len: a.sampling.max_len,
        temperature: a.sampling.temperature,
    };
    let report = relay_inference(
        &behavior.params,
        &current.params,
        &current.arch,
        &current.vocab,
        &eval_set,
        a.ratio,
        a.n,
        &k_list,
        &sampling,
        a.sampling.seed,
        estimator,
    )?;
    make_dir(&a.output_dir)?;
    write_file(&a.output_dir.join("relay.csv"), &report.to_csv())?;
    write_file(
        &a.output_dir.join("relay_report.json"),
        &serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    println!("behavior {} (step {})", behavior_path.display(), behavior.step);
    println!("current  {} (step {})", current_path.display(), current.step);
    print!("{}", report.to_csv());
    Ok(())
}

fn pick_pair(index: &Path) -> std::result::Result<(PathBuf, PathBuf), Failure> {
    let text = fs::read_to_string(index).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", index.display())))?;
    let mut scores = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let e: CheckpointEntry = serde_json::from_str(line).map_err(Error::from)?;
        scores.push(CheckpointScore {
            step: e.step,
            path: e.path,
            avg_at_k: e.heldout_avg,
        });
    }
    let (behavior, current) = select_relay_pair(&scores)
        .ok_or_else(|| Failure::Runtime("index needs a best checkpoint with an earlier one".into()))?;
    Ok((PathBuf::from(&behavior.path), PathBuf::from(&current.path)))
}

fn diag(a: DiagArgs) -> std::result::Result<(), Failure> {
    let records: Vec<_> = read_trajectory_records(&a.trajectories)?
        .into_iter()
        .filter(|r| r.step >= a.from_step)
        .collect();
    let bins = position_bins_from_records(&records)?;
    let hist = truncation_token_histogram(records.iter().map(|r| &r.trajectory));
    make_dir(&a.output_dir)?;
    write_file(
        &a.output_dir.join("position_bins.json"),
        &serde_json::to_string_pretty(&bins).map_err(Error::from)?,
    )?;
    let vocab = crate::policy::Vocabulary::digits();
    let mut csv = String::from("token,symbol,count\n");
    for (tok, count) in &hist {
        csv.push_str(&format!("{tok},{},{count}\n", vocab.symbol(*tok)));
    }
    write_file(&a.output_dir.join("truncation_tokens.csv"), &csv)?;
    println!("bin,tokens,mean_entropy,clip_fraction");
    for (i, b) in bins.bins.iter().enumerate() {
        let h = b.mean_entropy.map_or("".to_string(), |h| format!("{h:.6}"));
        println!("{i},{},{h},{:.6}", b.tokens, b.clip_fraction);
    }
    if let Some(s) = bins.entropy_slope() {
        println!("entropy slope {s:.6}");
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> std::result::Result<(), Failure> {
    if a.cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    let report = grad_check_suite(a.seed, a.cases)?;
    for (i, c) in report.cases.iter().enumerate() {
        println!(
            "case {i}: embed {} hidden {} params {} checked {} prefix/suffix tokens {}/{} max rel err {:.3e}",
            c.embed_dim, c.hidden_dim, c.params, c.coords_checked, c.prefix_tokens, c.suffix_tokens, c.max_rel_err
        );
    }
    let worst = report.max_rel_err();
    println!("max relative error {worst:.3e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("max relative error {worst:.3e} exceeds {:.1e}", a.tolerance)))
    }
}
