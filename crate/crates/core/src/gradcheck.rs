//! Finite-difference self-check of the surrogate gradient.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::finite_diff_grad_5pt;
use crate::objective::{batch_objective, surrogate_gradient, ObjectiveSettings};
use crate::policy::{PolicyArchitecture, Vocabulary};
use crate::rng::StreamKey;
use crate::rollout::{rollout_group, GroupRollout, Provenance, RolloutMode, RolloutSettings, TruncationStrategy};
use crate::tasks::{generate_instance, TaskKind, TaskSpec};

use rand::Rng as _;

/// Coordinates whose gradient is at most this large in magnitude on both
/// sides are skipped when computing relative error.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub params: usize,
    pub coords_checked: usize,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Two groups of four SOUP trajectories built from three unrelated
/// parameter sets (behavior, rollout-time and current), with hand-set mixed
/// rewards so both groups carry signal.
pub fn random_case(key: &StreamKey, arch: &PolicyArchitecture, vocab: &Vocabulary) -> Result<(Vec<GroupRollout>, crate::numerics::ParamVector)> {
    let behavior = arch.init_params(0.6, &mut key.child("behavior").rng());
    let old = arch.init_params(0.6, &mut key.child("old").rng());
    let mut current = old.clone();
    current.add_assign(&arch.init_params(0.1, &mut key.child("drift").rng()))?;
    let spec = TaskSpec::new(TaskKind::ModSum, 2, vocab.clone())?;
    let settings = RolloutSettings {
        group_size: 4,
        max_len: 6,
        temperature: 1.0,
        strategy: TruncationStrategy::LengthRatio { ratio: 0.5 },
    };
    let mut groups = Vec::with_capacity(2);
    for g in 0..2u64 {
        let inst = generate_instance(&spec, &mut key.child("instance").index(g).rng());
        let mut group = rollout_group(
            &inst,
            RolloutMode::Soup,
            &behavior,
            &old,
            arch,
            vocab,
            &settings,
            &key.child("rollout").index(g),
        )?;
        group.rewards = if g == 0 { vec![1.0, 0.0, 0.0, 1.0] } else { vec![0.0, 1.0, 0.0, 0.0] };
        groups.push(group);
    }
    Ok((groups, current))
}

/// Compares the hand-derived surrogate gradient with a five-point finite
/// difference on `cases` random tiny configurations (vocabulary 14, window 8,
/// hidden width at most 32).
pub fn grad_check_suite(seed: u64, cases: usize) -> Result<GradCheckReport> {
    let vocab = Vocabulary::digits();
    let settings = ObjectiveSettings::default();
    let root = StreamKey::root(seed).child("grad_check");
    let mut reports = Vec::with_capacity(cases);
    for c in 0..cases {
        let key = root.index(c as u64);
        let mut dims = key.child("dims").rng();
        let embed_dim = dims.gen_range(2..=6);
        let hidden_dim = dims.gen_range(4..=32);
        let arch = PolicyArchitecture::new(&vocab, 8, embed_dim, hidden_dim)?;
        let (groups, current) = random_case(&key, &arch, &vocab)?;
        let (_, analytic) = surrogate_gradient(&groups, &current, &arch, &settings)?;
        let numeric = finite_diff_grad_5pt(
            |p| batch_objective(&groups, p, &arch, &settings).map_or(f64::NAN, |o| o.loss),
            &current,
            1e-4,
        );
        let mut max_rel_err: f64 = 0.0;
        let mut coords_checked = 0;
        for (a, n) in analytic.values().iter().zip(numeric.values()) {
            let scale = a.abs().max(n.abs());
            if scale > GRAD_FLOOR {
                coords_checked += 1;
                max_rel_err = max_rel_err.max((a - n).abs() / scale);
            }
        }
        let count = |p: Provenance| {
            groups
                .iter()
                .flat_map(|g| &g.trajectories)
                .flat_map(|t| &t.provenance)
                .filter(|&&q| q == p)
                .count()
        };
        reports.push(CaseReport {
            embed_dim,
            hidden_dim,
            params: current.len(),
            coords_checked,
            prefix_tokens: count(Provenance::OffPolicyPrefix),
            suffix_tokens: count(Provenance::OnPolicySuffix),
            max_rel_err,
        });
    }
    Ok(GradCheckReport { seed, cases: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_cases() {
        let report = grad_check_suite(11, 2).unwrap();
        assert_eq!(report.cases.len(), 2);
        for c in &report.cases {
            assert!(c.coords_checked > 0);
            assert!(c.hidden_dim <= 32);
        }
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }
}
