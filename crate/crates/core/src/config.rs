//! Run configuration as flat `key=value` text.
//!
//! Nested settings use dotted keys (`strategy.ratio`, `mini_batch.enabled`).
//! Unknown keys are rejected. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::OptimConfig;
use crate::objective::ClipConfig;
use crate::rollout::TruncationStrategy;
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Off-policy prefixes on batches 2..=T of every behavior cycle.
    Soup,
    /// Every batch sampled from the current policy.
    OnPolicy,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soup" => Ok(Algorithm::Soup),
            "on_policy" => Ok(Algorithm::OnPolicy),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl Algorithm {
    fn as_str(self) -> &'static str {
        match self {
            Algorithm::Soup => "soup",
            Algorithm::OnPolicy => "on_policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    LengthRatio,
    EntropyTopK,
    PrefixBudget,
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length_ratio" => Ok(StrategyKind::LengthRatio),
            "entropy_topk" => Ok(StrategyKind::EntropyTopK),
            "prefix_budget" => Ok(StrategyKind::PrefixBudget),
            other => Err(Error::Config(format!("unknown truncation strategy {other:?}"))),
        }
    }
}

impl StrategyKind {
    fn as_str(self) -> &'static str {
        match self {
            StrategyKind::LengthRatio => "length_ratio",
            StrategyKind::EntropyTopK => "entropy_topk",
            StrategyKind::PrefixBudget => "prefix_budget",
        }
    }
}

/// All truncation knobs; only the ones of `kind` take effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub ratio: f64,
    pub k: usize,
    pub budget: usize,
}

impl StrategyConfig {
    pub fn strategy(&self) -> TruncationStrategy {
        match self.kind {
            StrategyKind::LengthRatio => TruncationStrategy::LengthRatio { ratio: self.ratio },
            StrategyKind::EntropyTopK => TruncationStrategy::EntropyTopK { k: self.k },
            StrategyKind::PrefixBudget => TruncationStrategy::PrefixBudget { tokens: self.budget },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniBatchConfig {
    pub enabled: bool,
    pub minibatch_size: usize,
    pub gather_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub difficulty: usize,
    /// Size of the fixed training prompt pool; 0 draws fresh prompts every step.
    pub dataset_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub size: usize,
    pub k: usize,
    pub temperature: f64,
    pub split_seed: u64,
}

/// KL settings are accepted so configs mirror the reference hyperparameter
/// table, but any nonzero value is rejected at validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlConfig {
    pub loss: bool,
    pub loss_coef: f64,
    pub in_reward: bool,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub batch_size: usize,
    pub cycle_len: usize,
    pub strategy: StrategyConfig,
    pub clip: ClipConfig,
    pub epsilon_std: f64,
    pub optim: OptimConfig,
    pub mini_batch: MiniBatchConfig,
    pub max_resp_len: usize,
    pub temperature: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub filter_groups: bool,
    pub max_regen_batches: usize,
    pub checkpoint_every: u64,
    pub dump_trajectories: bool,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub kl: KlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Soup,
            group_size: 8,
            batch_size: 32,
            cycle_len: 8,
            strategy: StrategyConfig {
                kind: StrategyKind::LengthRatio,
                ratio: 0.5,
                k: 32,
                budget: 8,
            },
            clip: ClipConfig::default(),
            epsilon_std: 1e-6,
            optim: OptimConfig::default(),
            mini_batch: MiniBatchConfig {
                enabled: false,
                minibatch_size: 32,
                gather_size: 32,
            },
            max_resp_len: 64,
            temperature: 1.0,
            total_steps: 400,
            seed: 0,
            filter_groups: false,
            max_regen_batches: 10,
            checkpoint_every: 25,
            dump_trajectories: false,
            model: ModelConfig {
                context_window: 8,
                embed_dim: 16,
                hidden_dim: 64,
                init_scale: 0.08,
            },
            task: TaskConfig {
                kind: TaskKind::ModSum,
                difficulty: 4,
                dataset_size: 0,
            },
            eval: EvalConfig {
                size: 200,
                k: 32,
                temperature: 0.6,
                split_seed: 12345,
            },
            kl: KlConfig {
                loss: false,
                loss_coef: 0.0,
                in_reward: false,
                coef: 0.0,
            },
        }
    }
}

pub const PRESETS: &[&str] = &["default", "on_policy", "minibatch_desk", "minibatch_large"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Named starting points. `minibatch_large` is the 32-of-512 update
    /// schedule; `minibatch_desk` gathers 8 minibatches of 32.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        match name {
            "default" => {}
            "on_policy" => cfg.algorithm = Algorithm::OnPolicy,
            "minibatch_desk" | "minibatch_large" => {
                cfg.algorithm = Algorithm::OnPolicy;
                cfg.mini_batch = MiniBatchConfig {
                    enabled: true,
                    minibatch_size: 32,
                    gather_size: if name == "minibatch_desk" { 256 } else { 512 },
                };
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        Ok(cfg)
    }

    pub fn keys() -> Vec<&'static str> {
        TrainConfig::default().pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "algorithm" => self.algorithm = v.parse()?,
            "G" => self.group_size = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "T" => self.cycle_len = parse_value(key, v)?,
            "strategy.kind" => self.strategy.kind = v.parse()?,
            "strategy.ratio" => self.strategy.ratio = parse_value(key, v)?,
            "strategy.k" => self.strategy.k = parse_value(key, v)?,
            "strategy.budget" => self.strategy.budget = parse_value(key, v)?,
            "clip.eps_low" => self.clip.eps_low = parse_value(key, v)?,
            "clip.eps_high" => self.clip.eps_high = parse_value(key, v)?,
            "epsilon_std" => self.epsilon_std = parse_value(key, v)?,
            "optim.lr" => self.optim.base_lr = parse_value(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse_value(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_value(key, v)?,
            "optim.grad_clip" => self.optim.grad_clip_norm = parse_value(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_value(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_value(key, v)?,
            "optim.epsilon" => self.optim.epsilon = parse_value(key, v)?,
            "mini_batch.enabled" => self.mini_batch.enabled = parse_bool(key, v)?,
            "mini_batch.minibatch_size" => self.mini_batch.minibatch_size = parse_value(key, v)?,
            "mini_batch.gather_size" => self.mini_batch.gather_size = parse_value(key, v)?,
            "max_resp_len" => self.max_resp_len = parse_value(key, v)?,
            "temperature" => self.temperature = parse_value(key, v)?,
            "total_steps" => self.total_steps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "filter_groups" => self.filter_groups = parse_bool(key, v)?,
            "max_regen_batches" => self.max_regen_batches = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "dump_trajectories" => self.dump_trajectories = parse_bool(key, v)?,
            "model.context_window" => self.model.context_window = parse_value(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse_value(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse_value(key, v)?,
            "model.init_scale" => self.model.init_scale = parse_value(key, v)?,
            "task.kind" => self.task.kind = v.parse()?,
            "task.difficulty" => self.task.difficulty = parse_value(key, v)?,
            "task.dataset_size" => self.task.dataset_size = parse_value(key, v)?,
            "eval.size" => self.eval.size = parse_value(key, v)?,
            "eval.k" => self.eval.k = parse_value(key, v)?,
            "eval.temperature" => self.eval.temperature = parse_value(key, v)?,
            "eval.split_seed" => self.eval.split_seed = parse_value(key, v)?,
            "kl.loss" => self.kl.loss = parse_bool(key, v)?,
            "kl.loss_coef" => self.kl.loss_coef = parse_value(key, v)?,
            "kl.in_reward" => self.kl.in_reward = parse_bool(key, v)?,
            "kl.coef" => self.kl.coef = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("algorithm", self.algorithm.as_str().into()),
            ("G", self.group_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("T", self.cycle_len.to_string()),
            ("strategy.kind", self.strategy.kind.as_str().into()),
            ("strategy.ratio", self.strategy.ratio.to_string()),
            ("strategy.k", self.strategy.k.to_string()),
            ("strategy.budget", self.strategy.budget.to_string()),
            ("clip.eps_low", self.clip.eps_low.to_string()),
            ("clip.eps_high", self.clip.eps_high.to_string()),
            ("epsilon_std", self.epsilon_std.to_string()),
            ("optim.lr", self.optim.base_lr.to_string()),
            ("optim.warmup_steps", self.optim.warmup_steps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("optim.grad_clip", self.optim.grad_clip_norm.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.epsilon", self.optim.epsilon.to_string()),
            ("mini_batch.enabled", self.mini_batch.enabled.to_string()),
            ("mini_batch.minibatch_size", self.mini_batch.minibatch_size.to_string()),
            ("mini_batch.gather_size", self.mini_batch.gather_size.to_string()),
            ("max_resp_len", self.max_resp_len.to_string()),
            ("temperature", self.temperature.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("filter_groups", self.filter_groups.to_string()),
            ("max_regen_batches", self.max_regen_batches.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dump_trajectories", self.dump_trajectories.to_string()),
            ("model.context_window", self.model.context_window.to_string()),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.hidden_dim", self.model.hidden_dim.to_string()),
            ("model.init_scale", self.model.init_scale.to_string()),
            ("task.kind", self.task.kind.to_string()),
            ("task.difficulty", self.task.difficulty.to_string()),
            ("task.dataset_size", self.task.dataset_size.to_string()),
            ("eval.size", self.eval.size.to_string()),
            ("eval.k", self.eval.k.to_string()),
            ("eval.temperature", self.eval.temperature.to_string()),
            ("eval.split_seed", self.eval.split_seed.to_string()),
            ("kl.loss", self.kl.loss.to_string()),
            ("kl.loss_coef", self.kl.loss_coef.to_string()),
            ("kl.in_reward", self.kl.in_reward.to_string()),
            ("kl.coef", self.kl.coef.to_string()),
        ]
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_text(&text)
    }

    /// Every key written out, so the file alone reproduces the run.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.cycle_len == 0 {
            return fail("T must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.group_size < 2 {
            return fail("G must be at least 2".into());
        }
        if self.mini_batch.enabled {
            let mb = self.mini_batch;
            if mb.minibatch_size == 0 || mb.gather_size == 0 || mb.gather_size % mb.minibatch_size != 0 {
                return fail(format!(
                    "mini_batch.gather_size ({}) must be a positive multiple of mini_batch.minibatch_size ({})",
                    mb.gather_size, mb.minibatch_size
                ));
            }
        }
        if self.max_resp_len < 2 {
            return fail("max_resp_len must be at least 2".into());
        }
        if !(self.temperature > 0.0) || !(self.eval.temperature > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if !(self.epsilon_std > 0.0) {
            return fail("epsilon_std must be positive".into());
        }
        if self.max_regen_batches == 0 {
            return fail("max_regen_batches must be at least 1".into());
        }
        if self.eval.k == 0 {
            return fail("eval.k must be at least 1".into());
        }
        if self.model.context_window == 0 || self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return fail("model sizes must be at least 1".into());
        }
        if self.kl.loss || self.kl.in_reward || self.kl.loss_coef != 0.0 || self.kl.coef != 0.0 {
            return fail("KL penalties are not supported; keep kl.* disabled and zero".into());
        }
        let (lo, hi) = self.task.kind.difficulty_range();
        if !(lo..=hi).contains(&self.task.difficulty) {
            return fail(format!("task.difficulty for {} must be in {lo}..={hi}", self.task.kind));
        }
        self.clip.validate()?;
        self.optim.validate()?;
        self.strategy.strategy().validate()
    }

    /// Prompts sampled per training step.
    pub fn prompts_per_step(&self) -> usize {
        if self.mini_batch.enabled {
            self.mini_batch.gather_size
        } else {
            self.batch_size
        }
    }
}
