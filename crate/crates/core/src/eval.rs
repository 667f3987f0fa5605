//! Scoring and analysis: avg@k, pass@k, relay inference between two
//! checkpoints, positional entropy/clip diagnostics and the histogram of
//! tokens sitting at truncation points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::objective::{position_bin, POSITION_BINS};
use crate::policy::{PolicyArchitecture, TokenId, Vocabulary};
use crate::rng::StreamKey;
use crate::rollout::{
    build_soup_trajectory, on_policy_trajectory, Trajectory, TrajectoryRecord, TruncationStrategy,
};
use crate::tasks::{reward, Instance};

/// Unbiased pass@k: `1 - C(n - c, k) / C(n, k)`.
///
/// Exact integer binomials are used while they fit in 128 bits, so the
/// result is the correctly rounded value of the true ratio; beyond that a
/// telescoping product is used.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::InvalidArgument(format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(fail), Some(total)) = (binomial(n - c, k), binomial(n, k)) {
        return Ok((total - fail) as f64 / total as f64);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Fraction of the first `k` samples containing at least one success.
pub fn pass_at_k_empirical(correct: &[bool], k: usize) -> f64 {
    if correct.iter().take(k).any(|&c| c) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassEstimator {
    #[default]
    Unbiased,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub sample_count: usize,
    pub avg_at_k: f64,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub estimator: PassEstimator,
    pub seeds: Vec<u64>,
    /// Correct-sample count per instance, in eval-set order.
    pub correct_counts: Vec<usize>,
}

impl EvalReport {
    pub fn from_correctness(
        correctness: &[Vec<bool>],
        k_list: &[usize],
        estimator: PassEstimator,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let n = correctness.first().map_or(0, Vec::len);
        if correctness.iter().any(|c| c.len() != n) || n == 0 {
            return Err(Error::InvalidArgument("every instance needs the same nonzero sample count".into()));
        }
        let instances = correctness.len() as f64;
        let correct_counts: Vec<usize> =
            correctness.iter().map(|c| c.iter().filter(|&&x| x).count()).collect();
        let avg_at_k = correct_counts.iter().map(|&c| c as f64 / n as f64).sum::<f64>() / instances;
        let mut pass = BTreeMap::new();
        for &k in k_list {
            let mut total = 0.0;
            for (row, &c) in correctness.iter().zip(&correct_counts) {
                total += match estimator {
                    PassEstimator::Unbiased => pass_at_k(n, c, k)?,
                    PassEstimator::Empirical => {
                        if k > n {
                            return Err(Error::InvalidArgument(format!("k={k} exceeds n={n}")));
                        }
                        pass_at_k_empirical(row, k)
                    }
                };
            }
            pass.insert(k, total / instances);
        }
        Ok(EvalReport {
            instances: correctness.len(),
            sample_count: n,
            avg_at_k,
            pass_at_k: pass,
            estimator,
            seeds,
            correct_counts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSettings {
    pub max_len: usize,
    pub temperature: f64,
}

/// Correctness of `n` independent samples per instance.
pub fn sample_correctness(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    vocab: &Vocabulary,
    eval_set: &[Instance],
    n: usize,
    sampling: &SamplingSettings,
    key: &StreamKey,
) -> Result<Vec<Vec<bool>>> {
    eval_set
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            (0..n)
                .map(|j| {
                    let mut rng = key.index(i as u64).index(j as u64).rng();
                    let t = on_policy_trajectory(
                        params,
                        arch,
                        &inst.prompt,
                        sampling.max_len,
                        sampling.temperature,
                        &mut rng,
                    )?;
                    Ok(reward(vocab, &inst.answer, &t.tokens) == 1.0)
                })
                .collect()
        })
        .collect()
}

/// Mean over instances of the fraction of `k` samples that are correct.
pub fn avg_at_k(
    params: &ParamVector,
    arch: &PolicyArchitecture,
    vocab: &Vocabulary,
    eval_set: &[Instance],
    k: usize,
    sampling: &SamplingSettings,
    key: &StreamKey,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("avg@k needs k >= 1".into()));
    }
    if eval_set.is_empty() {
        return Ok(0.0);
    }
    let rows = sample_correctness(params, arch, vocab, eval_set, k, sampling, key)?;
    let per_instance = rows
        .iter()
        .map(|r| r.iter().filter(|&&c| c).count() as f64 / k as f64);
    Ok(per_instance.sum::<f64>() / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayReport {
    pub ratio: f64,
    pub relay: EvalReport,
    pub single: EvalReport,
}

impl RelayReport {
    /// `k, relay_pass, single_pass, diff` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,relay_pass,single_pass,diff\n");
        for (k, relay) in &self.relay.pass_at_k {
            let single = self.single.pass_at_k[k];
            out.push_str(&format!("{k},{relay},{single},{}\n", relay - single));
        }
        out
    }
}

/// Compares prefix-from-`behavior` / suffix-from-`current` relay sampling
/// against plain sampling from `current`, with `n` samples per instance
/// for each arm.
#[allow(clippy::too_many_arguments)]
pub fn relay_inference(
    behavior: &ParamVector,
    current: &ParamVector,
    arch: &PolicyArchitecture,
    vocab: &Vocabulary,
    eval_set: &[Instance],
    ratio: f64,
    n: usize,
    k_list: &[usize],
    sampling: &SamplingSettings,
    seed: u64,
    estimator: PassEstimator,
) -> Result<RelayReport> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("relay ratio must be in (0, 1), got {ratio}")));
    }
    let root = StreamKey::root(seed).child("relay");
    let strategy = TruncationStrategy::LengthRatio { ratio };
    let mut relay_rows = Vec::with_capacity(eval_set.len());
    for (i, inst) in eval_set.iter().enumerate() {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let key = root.child("relay_arm").index(i as u64).index(j as u64);
            let t = build_soup_trajectory(
                behavior,
                current,
                arch,
                inst,
                &strategy,
                sampling.max_len,
                sampling.temperature,
                &mut key.child("behavior").rng(),
                &mut key.child("current").rng(),
            )?;
            row.push(reward(vocab, &inst.answer, &t.tokens) == 1.0);
        }
        relay_rows.push(row);
    }
    let single_rows =
        sample_correctness(current, arch, vocab, eval_set, n, sampling, &root.child("single_arm"))?;
    Ok(RelayReport {
        ratio,
        relay: EvalReport::from_correctness(&relay_rows, k_list, estimator, vec![seed])?,
        single: EvalReport::from_correctness(&single_rows, k_list, estimator, vec![seed])?,
    })
}

/// One token's position and gradient-time statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenObservation {
    pub position: usize,
    pub length: usize,
    pub entropy: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinStat {
    pub tokens: usize,
    /// `None` when no token fell into the bin.
    pub mean_entropy: Option<f64>,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionBinStats {
    pub bins: [BinStat; POSITION_BINS],
}

impl PositionBinStats {
    /// Least-squares slope of mean entropy against bin index over non-empty bins.
    pub fn entropy_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.mean_entropy.map(|e| (i as f64, e)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Bins tokens by `floor(10 t / len)` and reports per-bin mean entropy and clip fraction.
pub fn position_bin_diagnostics(
    observations: impl IntoIterator<Item = TokenObservation>,
) -> Result<PositionBinStats> {
    let mut entropy_sum = [0.0; POSITION_BINS];
    let mut tokens = [0usize; POSITION_BINS];
    let mut clipped = [0usize; POSITION_BINS];
    for o in observations {
        let b = position_bin(o.position, o.length);
        entropy_sum[b] += o.entropy;
        tokens[b] += 1;
        clipped[b] += o.clipped as usize;
    }
    if tokens.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidArgument("no tokens to bin".into()));
    }
    let mut bins = [BinStat::default(); POSITION_BINS];
    for b in 0..POSITION_BINS {
        bins[b] = BinStat {
            tokens: tokens[b],
            mean_entropy: (tokens[b] > 0).then(|| entropy_sum[b] / tokens[b] as f64),
            clip_fraction: if tokens[b] > 0 { clipped[b] as f64 / tokens[b] as f64 } else { 0.0 },
        };
    }
    Ok(PositionBinStats { bins })
}

/// Observations from generation-time entropies and optional per-token clip flags.
pub fn trajectory_observations<'a>(
    trajectory: &'a Trajectory,
    clipped: Option<&'a [bool]>,
) -> impl Iterator<Item = TokenObservation> + 'a {
    let len = trajectory.len();
    trajectory
        .gen_entropy
        .iter()
        .enumerate()
        .map(move |(t, &entropy)| TokenObservation {
            position: t,
            length: len,
            entropy,
            clipped: clipped.and_then(|c| c.get(t).copied()).unwrap_or(false),
        })
}

pub fn position_bins_from_records(records: &[TrajectoryRecord]) -> Result<PositionBinStats> {
    position_bin_diagnostics(
        records
            .iter()
            .flat_map(|r| trajectory_observations(&r.trajectory, r.clipped.as_deref())),
    )
}

/// Count of the last off-policy token of every trajectory with a nonempty prefix.
pub fn truncation_token_histogram<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> BTreeMap<TokenId, usize> {
    let mut hist = BTreeMap::new();
    for t in trajectories {
        if t.truncation_index >= 1 {
            *hist.entry(t.tokens[t.truncation_index - 1]).or_insert(0) += 1;
        }
    }
    hist
}

/// Held-out score of one saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub step: u64,
    pub path: String,
    pub avg_at_k: f64,
}

/// `(earlier, best)`: the best checkpoint, and the best among those strictly
/// before it. Ties go to the earlier step.
pub fn select_relay_pair(scores: &[CheckpointScore]) -> Option<(&CheckpointScore, &CheckpointScore)> {
    let best = best_score(scores.iter())?;
    let earlier = best_score(scores.iter().filter(|s| s.step < best.step))?;
    Some((earlier, best))
}

fn best_score<'a>(scores: impl Iterator<Item = &'a CheckpointScore>) -> Option<&'a CheckpointScore> {
    scores.fold(None, |best: Option<&CheckpointScore>, s| match best {
        Some(b) if b.avg_at_k > s.avg_at_k || (b.avg_at_k == s.avg_at_k && b.step <= s.step) => Some(b),
        _ => Some(s),
    })
}
