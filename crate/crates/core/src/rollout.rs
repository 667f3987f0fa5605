//! Trajectory generation and mixed-policy trajectory construction.
//!
//! A mixed trajectory is a prefix cut from a behavior-policy sample followed
//! by a continuation sampled from the current policy. Each token keeps the
//! log-probability it had under the policy that actually produced it; those
//! stored values are the importance-ratio denominators at training time.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::policy::{
    next_token_distribution, sample_token, token_entropy, PolicyArchitecture, TokenId, Vocabulary,
};
use crate::rng::{Rng, StreamKey};
use crate::tasks::{reward, Instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OffPolicyPrefix,
    OnPolicySuffix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub gen_logprob: Vec<f64>,
    pub gen_entropy: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub truncation_index: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn validate(&self, eos: TokenId) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if self.gen_logprob.len() != n || self.gen_entropy.len() != n || self.provenance.len() != n {
            return Err("per-token vectors differ in length".into());
        }
        if self.truncation_index > 0 && self.truncation_index >= n {
            return Err(format!("truncation index {} with {} tokens", self.truncation_index, n));
        }
        for (t, p) in self.provenance.iter().enumerate() {
            let prefix = t < self.truncation_index;
            if prefix != (*p == Provenance::OffPolicyPrefix) {
                return Err(format!("provenance flag at {t} disagrees with truncation index"));
            }
        }
        if self.gen_logprob.iter().any(|&l| !(l <= 0.0)) {
            return Err("generation log-prob above zero".into());
        }
        if let Some(i) = self.tokens.iter().position(|&t| t == eos) {
            if i + 1 != n {
                return Err(format!("EOS at {i} is not the final token"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub instance: Instance,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruncationStrategy {
    /// Keep `round_half_up(len * ratio)` behavior tokens.
    LengthRatio { ratio: f64 },
    /// Cut just before one of the `k` highest-entropy positions, chosen uniformly.
    EntropyTopK { k: usize },
    /// Decode at most `tokens` behavior tokens and keep all of them.
    PrefixBudget { tokens: usize },
}

impl TruncationStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationStrategy::LengthRatio { ratio } if !(0.0..=1.0).contains(&ratio) => Err(
                Error::Config(format!("truncation ratio must be in [0, 1], got {ratio}")),
            ),
            TruncationStrategy::EntropyTopK { k: 0 } => {
                Err(Error::Config("entropy top-k needs k >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    OnPolicy,
    Soup,
}

impl fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutMode::OnPolicy => "on_policy",
            RolloutMode::Soup => "soup",
        })
    }
}

impl FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_policy" => Ok(RolloutMode::OnPolicy),
            "soup" => Ok(RolloutMode::Soup),
            other => Err(Error::Parse(format!("unknown rollout mode {other:?}"))),
        }
    }
}

/// Newly generated tokens with their generation-time statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Extends `prompt ++ prefix` until EOS or until the response (prefix
/// included) reaches `max_len` tokens. Only the new tokens are returned.
#[allow(clippy::too_many_arguments)]
pub fn generate_sequence(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    prefix: &[TokenId],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Generated> {
    if prefix.len() >= max_len {
        return Err(Error::InvalidArgument(format!(
            "prefix of {} tokens leaves no room under max_len {max_len}",
            prefix.len()
        )));
    }
    let mut context: Vec<TokenId> = Vec::with_capacity(prompt.len() + max_len);
    context.extend_from_slice(prompt);
    context.extend_from_slice(prefix);
    let mut out = Generated::default();
    while prefix.len() + out.tokens.len() < max_len {
        let dist = next_token_distribution(params, arch, &context, temperature)?;
        let tok = sample_token(&dist, rng);
        out.tokens.push(tok);
        out.logprobs.push(dist.log_probs[tok]);
        out.entropies.push(token_entropy(&dist));
        context.push(tok);
        if tok == arch.eos {
            break;
        }
    }
    Ok(out)
}

fn drop_trailing_eos(tokens: &[TokenId], n: usize, eos: TokenId) -> usize {
    if n > 0 && tokens[n - 1] == eos {
        n - 1
    } else {
        n
    }
}

/// Prefix length `round_half_up(len * ratio)`, clamped so at least one token
/// is left for the continuation and never ending on EOS.
pub fn truncate_length_ratio(tokens: &[TokenId], ratio: f64, eos: TokenId) -> usize {
    if tokens.is_empty() {
        return 0;
    }
    // The small slack keeps products like 10 * 0.35 from rounding down.
    let raw = (tokens.len() as f64 * ratio + 0.5 + 1e-9).floor().max(0.0) as usize;
    let n = raw.min(tokens.len() - 1);
    drop_trailing_eos(tokens, n, eos)
}

/// Prefix length ending just before one of the `k` highest-entropy positions.
/// Ties in entropy go to the earlier position.
pub fn truncate_entropy_topk(
    tokens: &[TokenId],
    gen_entropy: &[f64],
    k: usize,
    eos: TokenId,
    rng: &mut Rng,
) -> usize {
    if tokens.is_empty() {
        return 0;
    }
    let k = k.max(1).min(tokens.len());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| gen_entropy[b].total_cmp(&gen_entropy[a]).then(a.cmp(&b)));
    let p = order[rng.gen_range(0..k)].min(tokens.len() - 1);
    drop_trailing_eos(tokens, p, eos)
}

/// Prefix length under any strategy; `rng` is only drawn from by `EntropyTopK`.
pub fn truncate(
    strategy: &TruncationStrategy,
    sample: &Generated,
    eos: TokenId,
    rng: &mut Rng,
) -> usize {
    match *strategy {
        TruncationStrategy::LengthRatio { ratio } => truncate_length_ratio(&sample.tokens, ratio, eos),
        TruncationStrategy::EntropyTopK { k } => {
            truncate_entropy_topk(&sample.tokens, &sample.entropies, k, eos, rng)
        }
        TruncationStrategy::PrefixBudget { .. } => {
            let n = sample.tokens.len();
            drop_trailing_eos(&sample.tokens, n, eos)
        }
    }
}

fn assemble(prompt: &[TokenId], prefix: Generated, suffix: Generated) -> Trajectory {
    let cut = prefix.tokens.len();
    let mut provenance = vec![Provenance::OffPolicyPrefix; cut];
    provenance.resize(cut + suffix.tokens.len(), Provenance::OnPolicySuffix);
    let mut t = Trajectory {
        prompt: prompt.to_vec(),
        tokens: prefix.tokens,
        gen_logprob: prefix.logprobs,
        gen_entropy: prefix.entropies,
        provenance,
        truncation_index: cut,
    };
    t.tokens.extend(suffix.tokens);
    t.gen_logprob.extend(suffix.logprobs);
    t.gen_entropy.extend(suffix.entropies);
    t
}

/// A pure current-policy sample.
pub fn on_policy_trajectory(
    current: &ParamVector,
    arch: &PolicyArchitecture,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let suffix = generate_sequence(current, arch, prompt, &[], max_len, temperature, rng)?;
    Ok(assemble(prompt, Generated::default(), suffix))
}

/// Behavior-policy sample, truncated, then continued by the current policy.
///
/// The behavior draw and the truncation point use `behavior_rng`; the
/// continuation uses `current_rng`, so an empty prefix consumes the current
/// stream exactly as [`on_policy_trajectory`] would.
#[allow(clippy::too_many_arguments)]
pub fn build_soup_trajectory(
    behavior: &ParamVector,
    current: &ParamVector,
    arch: &PolicyArchitecture,
    instance: &Instance,
    strategy: &TruncationStrategy,
    max_len: usize,
    temperature: f64,
    behavior_rng: &mut Rng,
    current_rng: &mut Rng,
) -> Result<Trajectory> {
    if !behavior.same_shape(current) {
        return Err(Error::Shape("behavior and current parameters differ in shape".into()));
    }
    let prompt = &instance.prompt;
    let behavior_len = match *strategy {
        TruncationStrategy::PrefixBudget { tokens } => tokens.min(max_len.saturating_sub(1)),
        _ => max_len,
    };
    let sample = if behavior_len == 0 {
        Generated::default()
    } else {
        generate_sequence(behavior, arch, prompt, &[], behavior_len, temperature, behavior_rng)?
    };
    let n = truncate(strategy, &sample, arch.eos, behavior_rng);
    let prefix = Generated {
        tokens: sample.tokens[..n].to_vec(),
        logprobs: sample.logprobs[..n].to_vec(),
        entropies: sample.entropies[..n].to_vec(),
    };
    let suffix = generate_sequence(current, arch, prompt, &prefix.tokens, max_len, temperature, current_rng)?;
    Ok(assemble(prompt, prefix, suffix))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub strategy: TruncationStrategy,
}

/// Random streams for trajectory `i` of a group.
pub fn trajectory_streams(key: &StreamKey, i: usize) -> (Rng, Rng) {
    let k = key.index(i as u64);
    (k.child("behavior").rng(), k.child("current").rng())
}

/// `G` independent trajectories for one instance, plus their rewards.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    instance: &Instance,
    mode: RolloutMode,
    behavior: &ParamVector,
    current: &ParamVector,
    arch: &PolicyArchitecture,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    key: &StreamKey,
) -> Result<GroupRollout> {
    if settings.group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size must be at least 2, got {}",
            settings.group_size
        )));
    }
    let mut trajectories = Vec::with_capacity(settings.group_size);
    for i in 0..settings.group_size {
        let (mut b_rng, mut c_rng) = trajectory_streams(key, i);
        let traj = match mode {
            RolloutMode::OnPolicy => on_policy_trajectory(
                current,
                arch,
                &instance.prompt,
                settings.max_len,
                settings.temperature,
                &mut c_rng,
            )?,
            RolloutMode::Soup => build_soup_trajectory(
                behavior,
                current,
                arch,
                instance,
                &settings.strategy,
                settings.max_len,
                settings.temperature,
                &mut b_rng,
                &mut c_rng,
            )?,
        };
        trajectories.push(traj);
    }
    let rewards = trajectories
        .iter()
        .map(|t| reward(vocab, &instance.answer, &t.tokens))
        .collect();
    Ok(GroupRollout {
        instance: instance.clone(),
        trajectories,
        rewards,
    })
}

/// One line of the trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub mode: RolloutMode,
    pub group: usize,
    pub index: usize,
    pub answer: Vec<TokenId>,
    pub reward: f64,
    #[serde(flatten)]
    pub trajectory: Trajectory,
    /// Per-token clip flags at gradient time, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped: Option<Vec<bool>>,
}

pub fn append_trajectory_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
