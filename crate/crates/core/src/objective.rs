//! Group-relative advantages, per-token mixed importance ratios and the
//! clipped token-mean surrogate with its gradient.
//!
//! The ratio denominator of every token is the log-probability stored when
//! the token was generated. For prefix tokens that is the behavior policy,
//! for continuation tokens the old (rollout-time) policy, so one expression
//! covers both kinds of token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::policy::{accumulate_weighted_logprob_grad, teacher_forced, PolicyArchitecture};
use crate::rollout::{GroupRollout, Provenance};

pub const POSITION_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
    pub degenerate: bool,
}

/// `(R_i - mean) / std` with the population standard deviation. Groups whose
/// std falls below `epsilon_std` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], epsilon_std: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = std < epsilon_std;
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageSet {
        advantages,
        group_mean: mean,
        group_std: std,
        degenerate,
    })
}

/// Keep a group only if some but not all of its answers are correct.
pub fn group_filter(rewards: &[f64]) -> bool {
    let correct = rewards.iter().filter(|&&r| r > 0.5).count();
    correct > 0 && correct < rewards.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0 && self.eps_high.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "clip bounds need 0 < eps_low < 1 and finite eps_high > 0: {self:?}"
            )))
        }
    }
}

pub fn token_importance_ratio(current_logprob: f64, stored_gen_logprob: f64) -> f64 {
    (current_logprob - stored_gen_logprob).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenContribution {
    pub ratio: f64,
    pub advantage: f64,
    pub objective_value: f64,
    pub clipped_active: bool,
    /// `d objective_value / d log pi`: `ratio * advantage`, or 0 when clipped.
    pub grad_weight: f64,
}

/// `min(r A, clamp(r, 1 - eps_low, 1 + eps_high) A)`.
///
/// A token counts as clipped only when the clamped branch is strictly
/// smaller, so ratios sitting exactly on a bound are unclipped.
pub fn clipped_token_objective(ratio: f64, advantage: f64, clip: &ClipConfig) -> TokenContribution {
    let unclipped = ratio * advantage;
    let clamped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high) * advantage;
    let clipped_active = clamped < unclipped;
    TokenContribution {
        ratio,
        advantage,
        objective_value: if clipped_active { clamped } else { unclipped },
        clipped_active,
        grad_weight: if clipped_active { 0.0 } else { unclipped },
    }
}

/// Clip counts split by provenance and by relative position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub prefix_tokens: usize,
    pub prefix_clipped: usize,
    pub suffix_tokens: usize,
    pub suffix_clipped: usize,
    pub tokens_by_decile: [usize; POSITION_BINS],
    pub clipped_by_decile: [usize; POSITION_BINS],
}

/// Decile of position `t` in a trajectory of `len` tokens.
pub fn position_bin(t: usize, len: usize) -> usize {
    ((POSITION_BINS * t) / len.max(1)).min(POSITION_BINS - 1)
}

impl ClipStats {
    pub fn total_tokens(&self) -> usize {
        self.prefix_tokens + self.suffix_tokens
    }

    pub fn clipped(&self) -> usize {
        self.prefix_clipped + self.suffix_clipped
    }

    pub fn clip_fraction(&self) -> f64 {
        ratio_or_zero(self.clipped(), self.total_tokens())
    }

    pub fn prefix_clip_fraction(&self) -> f64 {
        ratio_or_zero(self.prefix_clipped, self.prefix_tokens)
    }

    pub fn suffix_clip_fraction(&self) -> f64 {
        ratio_or_zero(self.suffix_clipped, self.suffix_tokens)
    }

    fn record(&mut self, provenance: Provenance, t: usize, len: usize, clipped: bool) {
        let (tokens, hits) = match provenance {
            Provenance::OffPolicyPrefix => (&mut self.prefix_tokens, &mut self.prefix_clipped),
            Provenance::OnPolicySuffix => (&mut self.suffix_tokens, &mut self.suffix_clipped),
        };
        *tokens += 1;
        *hits += clipped as usize;
        let b = position_bin(t, len);
        self.tokens_by_decile[b] += 1;
        self.clipped_by_decile[b] += clipped as usize;
    }

    pub fn merge(&mut self, other: &ClipStats) {
        self.prefix_tokens += other.prefix_tokens;
        self.prefix_clipped += other.prefix_clipped;
        self.suffix_tokens += other.suffix_tokens;
        self.suffix_clipped += other.suffix_clipped;
        for b in 0..POSITION_BINS {
            self.tokens_by_decile[b] += other.tokens_by_decile[b];
            self.clipped_by_decile[b] += other.clipped_by_decile[b];
        }
    }
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-token detail for one trajectory at gradient time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTerms {
    pub group: usize,
    pub index: usize,
    pub kept: bool,
    pub contributions: Vec<TokenContribution>,
    /// Current-policy entropy at each position, evaluated at gradient time.
    pub current_entropy: Vec<f64>,
    /// Descent weights for `weighted_logprob_grad`: `-grad_weight / normalizer`.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub loss: f64,
    pub normalizer: usize,
    pub terms: Vec<TrajectoryTerms>,
    pub advantages: Vec<AdvantageSet>,
    pub stats: ClipStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub clip: ClipConfig,
    pub epsilon_std: f64,
    pub temperature: f64,
    pub filter_groups: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            clip: ClipConfig::default(),
            epsilon_std: 1e-6,
            temperature: 1.0,
            filter_groups: false,
        }
    }
}

/// Clipped surrogate over a batch with token-mean aggregation across every
/// kept trajectory. Returns `loss = -objective` and the descent weights.
pub fn batch_objective(
    groups: &[GroupRollout],
    params: &ParamVector,
    arch: &PolicyArchitecture,
    settings: &ObjectiveSettings,
) -> Result<BatchObjective> {
    let mut advantages = Vec::with_capacity(groups.len());
    let mut kept = Vec::with_capacity(groups.len());
    for g in groups {
        let adv = group_advantages(&g.rewards, settings.epsilon_std)?;
        kept.push(!settings.filter_groups || group_filter(&g.rewards));
        advantages.push(adv);
    }
    let normalizer: usize = groups
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .flat_map(|(g, _)| g.trajectories.iter().map(|t| t.len()))
        .sum();
    if normalizer == 0 {
        return Err(Error::EmptyBatch);
    }
    let norm = normalizer as f64;

    let mut total = 0.0;
    let mut stats = ClipStats::default();
    let mut terms = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (ti, traj) in g.trajectories.iter().enumerate() {
            if traj.is_empty() {
                continue;
            }
            let tf = teacher_forced(params, arch, &traj.prompt, &traj.tokens, settings.temperature)?;
            let adv = advantages[gi].advantages[ti];
            let contributions: Vec<TokenContribution> = tf
                .logprobs
                .iter()
                .zip(&traj.gen_logprob)
                .map(|(&cur, &stored)| {
                    clipped_token_objective(token_importance_ratio(cur, stored), adv, &settings.clip)
                })
                .collect();
            let weights = if kept[gi] {
                for (t, c) in contributions.iter().enumerate() {
                    total += c.objective_value;
                    stats.record(traj.provenance[t], t, traj.len(), c.clipped_active);
                }
                contributions.iter().map(|c| -c.grad_weight / norm).collect()
            } else {
                vec![0.0; traj.len()]
            };
            terms.push(TrajectoryTerms {
                group: gi,
                index: ti,
                kept: kept[gi],
                contributions,
                current_entropy: tf.entropies,
                weights,
            });
        }
    }
    Ok(BatchObjective {
        loss: -total / norm,
        normalizer,
        terms,
        advantages,
        stats,
    })
}

/// Assembles `sum_i weighted_logprob_grad(o_i, weights_i)` in batch order.
pub fn assemble_gradient(
    groups: &[GroupRollout],
    objective: &BatchObjective,
    params: &ParamVector,
    arch: &PolicyArchitecture,
    temperature: f64,
) -> Result<ParamVector> {
    let mut grad = params.zeros_like();
    for term in objective.terms.iter().filter(|t| t.kept) {
        let traj = &groups[term.group].trajectories[term.index];
        accumulate_weighted_logprob_grad(
            &mut grad,
            params,
            arch,
            &traj.prompt,
            &traj.tokens,
            &term.weights,
            temperature,
        )?;
    }
    Ok(grad)
}

/// Gradient of `batch_objective(...).loss` with respect to the current parameters.
pub fn surrogate_gradient(
    groups: &[GroupRollout],
    params: &ParamVector,
    arch: &PolicyArchitecture,
    settings: &ObjectiveSettings,
) -> Result<(BatchObjective, ParamVector)> {
    let objective = batch_objective(groups, params, arch, settings)?;
    let grad = assemble_gradient(groups, &objective, params, arch, settings.temperature)?;
    Ok((objective, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::policy::{sequence_logprobs, weighted_logprob_grad, Vocabulary};
    use crate::rng::StreamKey;
    use crate::rollout::{rollout_group, RolloutMode, RolloutSettings, Trajectory, TruncationStrategy};
    use crate::tasks::{generate_instance, Instance, TaskKind, TaskSpec};
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1., 0., 0., 0., 1., 1., 1., 0.], 1e-6).unwrap();
        assert_eq!((a.group_mean, a.group_std), (0.5, 0.5));
        assert_eq!(a.advantages, vec![1., -1., -1., -1., 1., 1., 1., -1.]);
        let d = group_advantages(&[1.0; 4], 1e-6).unwrap();
        assert!(d.degenerate && d.advantages.iter().all(|&x| x == 0.0));
        assert_eq!(group_advantages(&[1., 0.], 1e-6).unwrap().advantages, vec![1., -1.]);
        assert!(group_advantages(&[1.], 1e-6).is_err());
    }

    #[test]
    fn filter_examples() {
        assert!(group_filter(&[1., 0., 0., 0.]));
        assert!(!group_filter(&[0.; 4]));
        assert!(!group_filter(&[1.; 4]));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(token_importance_ratio(-0.3, -0.3), 1.0);
        assert!((token_importance_ratio(0.5f64.ln(), 0.25f64.ln()) - 2.0).abs() < 1e-15);
        assert!((token_importance_ratio(0.1f64.ln(), 0.4f64.ln()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let clip = ClipConfig::default();
        let c = clipped_token_objective(1.5, 1.0, &clip);
        assert!((c.objective_value - 1.28).abs() < 1e-15);
        assert!(c.clipped_active);
        assert_eq!(c.grad_weight, 0.0);
        let c = clipped_token_objective(0.5, -1.0, &clip);
        assert!((c.objective_value + 0.8).abs() < 1e-15);
        assert!(c.clipped_active);
        for a in [-2.0, -0.5, 0.0, 0.7, 3.0] {
            let c = clipped_token_objective(1.0, a, &clip);
            assert_eq!(c.objective_value, a);
            assert!(!c.clipped_active);
        }
        // Boundary ties stay unclipped; the unfavorable side is never clipped.
        assert!(!clipped_token_objective(1.28, 1.0, &clip).clipped_active);
        assert!(!clipped_token_objective(0.5, 1.0, &clip).clipped_active);
        assert!(!clipped_token_objective(2.0, -1.0, &clip).clipped_active);
    }

    #[test]
    fn clipped_token_gradient_identity() {
        // d value / d log pi = r A when unclipped, 0 when clipped.
        let clip = ClipConfig::default();
        let h = 1e-6;
        for &(lr, a) in &[(0.5, 1.0), (-0.5, 1.0), (0.05, 1.0), (-0.4, -1.0), (0.4, -2.0), (0.1, -0.3)] {
            let c = clipped_token_objective(f64::exp(lr), a, &clip);
            let up = clipped_token_objective(f64::exp(lr + h), a, &clip).objective_value;
            let down = clipped_token_objective(f64::exp(lr - h), a, &clip).objective_value;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - c.grad_weight).abs() < 1e-6, "lr {lr} a {a}: {numeric} vs {}", c.grad_weight);
        }
    }

    fn fixed_trajectory(prompt: Vec<usize>, tokens: Vec<usize>, gen_logprob: Vec<f64>) -> Trajectory {
        let n = tokens.len();
        Trajectory {
            prompt,
            tokens,
            gen_logprob,
            gen_entropy: vec![0.0; n],
            provenance: vec![Provenance::OnPolicySuffix; n],
            truncation_index: 0,
        }
    }

    #[test]
    fn two_trajectory_hand_check() {
        // Lengths 3 and 3, rewards {1, 0}, ratio 1: (3 * 1 + 3 * -1) / 6 = 0.
        let vocab = Vocabulary::digits();
        let arch = PolicyArchitecture::new(&vocab, 4, 3, 5).unwrap();
        let params = arch.init_params(0.3, &mut StreamKey::root(1).rng());
        let prompt = vec![vocab.bos, 1, 2, vocab.sep];
        let mk = |tokens: Vec<usize>| {
            let lp = sequence_logprobs(&params, &arch, &prompt, &tokens, 1.0).unwrap();
            fixed_trajectory(prompt.clone(), tokens, lp)
        };
        let group = GroupRollout {
            instance: Instance { prompt: prompt.clone(), answer: vec![3] },
            trajectories: vec![mk(vec![3, 4, vocab.eos]), mk(vec![5, 5, vocab.eos])],
            rewards: vec![1.0, 0.0],
        };
        let obj = batch_objective(&[group], &params, &arch, &ObjectiveSettings::default()).unwrap();
        assert_eq!(obj.loss, 0.0);
        assert_eq!(obj.normalizer, 6);
        assert_eq!(obj.stats.clipped(), 0);
        assert_eq!(obj.stats.total_tokens(), 6);
    }

    #[test]
    fn degenerate_batch_gives_zero_loss_and_gradient() {
        let vocab = Vocabulary::digits();
        let arch = PolicyArchitecture::new(&vocab, 4, 3, 5).unwrap();
        let params = arch.init_params(0.3, &mut StreamKey::root(2).rng());
        let prompt = vec![vocab.bos, vocab.sep];
        let t = fixed_trajectory(prompt.clone(), vec![1, vocab.eos], vec![-1.0, -2.0]);
        let group = GroupRollout {
            instance: Instance { prompt, answer: vec![1] },
            trajectories: vec![t.clone(), t],
            rewards: vec![1.0, 1.0],
        };
        let (obj, grad) = surrogate_gradient(&[group.clone()], &params, &arch, &ObjectiveSettings::default()).unwrap();
        assert_eq!(obj.loss, 0.0);
        assert!(obj.terms.iter().all(|t| t.weights.iter().all(|&w| w == 0.0)));
        assert!(grad.values().iter().all(|&g| g == 0.0));

        let filtered = ObjectiveSettings { filter_groups: true, ..Default::default() };
        assert!(matches!(
            batch_objective(&[group], &params, &arch, &filtered),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn single_token_gradient_is_one_term() {
        let vocab = Vocabulary::digits();
        let arch = PolicyArchitecture::new(&vocab, 4, 3, 5).unwrap();
        let params = arch.init_params(0.3, &mut StreamKey::root(3).rng());
        let prompt = vec![vocab.bos, 7, vocab.sep];
        let stored = -2.4;
        let good = fixed_trajectory(prompt.clone(), vec![7], vec![stored]);
        let bad = fixed_trajectory(prompt.clone(), vec![2, 2, 2], vec![-2.6; 3]);
        // Rewards {1, 0} put advantage +1 on the single-token trajectory.
        let group = GroupRollout {
            instance: Instance { prompt: prompt.clone(), answer: vec![7] },
            trajectories: vec![good, bad],
            rewards: vec![1.0, 0.0],
        };
        let settings = ObjectiveSettings {
            clip: ClipConfig { eps_low: 10.0, eps_high: 10.0 },
            ..Default::default()
        };
        let (obj, grad) = surrogate_gradient(&[group.clone()], &params, &arch, &settings).unwrap();
        let r = obj.terms[0].contributions[0].ratio;
        let w_good = -r / 4.0;
        let mut expected = weighted_logprob_grad(&params, &arch, &prompt, &[7], &[w_good], 1.0).unwrap();
        let w_bad: Vec<f64> = obj.terms[1].contributions.iter().map(|c| c.ratio / 4.0).collect();
        expected.add_assign(&weighted_logprob_grad(&params, &arch, &prompt, &[2, 2, 2], &w_bad, 1.0).unwrap()).unwrap();
        assert!(grad.max_abs_diff(&expected) < 1e-13);
    }

    fn mixed_batch(seed: u64, arch: &PolicyArchitecture, vocab: &Vocabulary) -> (Vec<GroupRollout>, ParamVector) {
        let key = StreamKey::root(seed);
        let behavior = arch.init_params(0.6, &mut key.child("b").rng());
        let old = arch.init_params(0.6, &mut key.child("o").rng());
        let mut current = old.clone();
        let noise = arch.init_params(0.15, &mut key.child("n").rng());
        current.add_assign(&noise).unwrap();
        let spec = TaskSpec::new(TaskKind::ModSum, 2, vocab.clone()).unwrap();
        let settings = RolloutSettings {
            group_size: 4,
            max_len: 6,
            temperature: 1.0,
            strategy: TruncationStrategy::LengthRatio { ratio: 0.5 },
        };
        let groups = (0..2)
            .map(|g| {
                let inst = generate_instance(&spec, &mut key.child("inst").index(g).rng());
                let mut gr = rollout_group(&inst, RolloutMode::Soup, &behavior, &old, arch, vocab, &settings, &key.index(g)).unwrap();
                // Mixed synthetic rewards so every group has signal.
                gr.rewards = vec![1.0, 0.0, (g % 2) as f64, 1.0];
                gr
            })
            .collect();
        (groups, current)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let vocab = Vocabulary::digits();
        let arch = PolicyArchitecture::new(&vocab, 8, 3, 6).unwrap();
        let settings = ObjectiveSettings::default();
        for seed in 0..3 {
            let (groups, current) = mixed_batch(seed, &arch, &vocab);
            let (_, analytic) = surrogate_gradient(&groups, &current, &arch, &settings).unwrap();
            let numeric = finite_diff_grad(
                |p| batch_objective(&groups, p, &arch, &settings).unwrap().loss,
                &current,
                1e-6,
            );
            for (a, n) in analytic.values().iter().zip(numeric.values()) {
                let scale = a.abs().max(n.abs());
                if scale > 1e-7 {
                    assert!((a - n).abs() / scale < 1e-4, "analytic {a} numeric {n}");
                }
            }
        }
    }

    #[test]
    fn clip_stats_partition_tokens() {
        let vocab = Vocabulary::digits();
        let arch = PolicyArchitecture::new(&vocab, 8, 3, 6).unwrap();
        let (groups, current) = mixed_batch(9, &arch, &vocab);
        let obj = batch_objective(&groups, &current, &arch, &ObjectiveSettings::default()).unwrap();
        let total: usize = groups.iter().flat_map(|g| &g.trajectories).map(|t| t.len()).sum();
        assert_eq!(obj.stats.total_tokens(), total);
        assert_eq!(obj.stats.tokens_by_decile.iter().sum::<usize>(), total);
        assert_eq!(obj.stats.clipped_by_decile.iter().sum::<usize>(), obj.stats.clipped());
        let flagged = obj.terms.iter().flat_map(|t| &t.contributions).filter(|c| c.clipped_active).count();
        assert_eq!(flagged, obj.stats.clipped());
    }

    proptest! {
        #[test]
        fn advantages_standardized(rewards in proptest::collection::vec(0.0f64..1.0, 2..16)) {
            let a = group_advantages(&rewards, 1e-6).unwrap();
            if !a.degenerate {
                let n = rewards.len() as f64;
                let mean = a.advantages.iter().sum::<f64>() / n;
                let std = (a.advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(a.advantages.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn advantages_affine_invariant(rewards in proptest::collection::vec(0.0f64..1.0, 2..16), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let a = group_advantages(&rewards, 1e-6).unwrap();
            let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
            let b = group_advantages(&moved, 1e-6).unwrap();
            if !a.degenerate && !b.degenerate {
                for (x, y) in a.advantages.iter().zip(&b.advantages) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn clipped_weight_invariant(lr in -2.0f64..2.0, adv in -3.0f64..3.0) {
            let c = clipped_token_objective(lr.exp(), adv, &ClipConfig::default());
            if c.clipped_active {
                prop_assert_eq!(c.grad_weight, 0.0);
            } else {
                prop_assert_eq!(c.grad_weight, c.ratio * c.advantage);
            }
            prop_assert!(c.objective_value <= c.ratio * c.advantage + 1e-15);
        }
    }
}
