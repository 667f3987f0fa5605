//! Acceptance suite. Prints one PASS/FAIL line per criterion. Exact
//! correctness criteria set the exit status; the empirical training
//! comparisons (8 and 9) are reported only, unless `SOUP_ACCEPTANCE_STRICT`
//! is set.

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use soup::config::TrainConfig;
use soup::eval::pass_at_k;
use soup::gradcheck::{grad_check_suite, random_case};
use soup::metrics::{mean_entropy_profile, profile_slope, MetricsRecord};
use soup::numerics::ParamVector;
use soup::objective::{assemble_gradient, batch_objective, group_advantages, surrogate_gradient, ObjectiveSettings};
use soup::policy::{sequence_logprobs, PolicyArchitecture, Vocabulary};
use soup::rng::StreamKey;
use soup::rollout::{truncate_entropy_topk, truncate_length_ratio, GroupRollout, Provenance, Trajectory};
use soup::tasks::Instance;
use soup::trainer::{config_split, train_in_memory};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_TIME_LIMIT_S: f64 = 60.0;
const REDUCTION_TOL: f64 = 1e-12;
const REDUCTION_STEPS: u64 = 200;
const RATIO_ONE_TOL: f64 = 1e-9;
const ADVANTAGE_TOL: f64 = 1e-9;
const CLIP_MASK_BATCHES: u64 = 100;
const BASELINE_REWARD_MIN: f64 = 0.9;
const HELDOUT_MARGIN: f64 = 0.02;
const DIRECTIONAL_SEEDS: [u64; 3] = [0, 1, 2];
const DIRECTIONAL_TIME_LIMIT_S: f64 = 15.0 * 60.0;
const LAST_WINDOW: usize = 50;
const UNIFORMITY_DRAWS: usize = 10_000;
const UNIFORMITY_SIGMAS: f64 = 4.0;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

const REPORT_ONLY: [&str; 2] = ["8 desk-scale directional result", "9 entropy-profile analogue"];

fn report(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report_ = grad_check_suite(2024, 5).expect("grad check runs");
    let secs = start.elapsed().as_secs_f64();
    let mixed = report_.cases.iter().all(|c| c.prefix_tokens > 0 && c.suffix_tokens > 0);
    let small = report_.cases.iter().all(|c| c.hidden_dim <= 32);
    let worst = report_.max_rel_err();
    report(
        "1 gradient oracle",
        worst < GRAD_REL_TOL && mixed && small && secs < GRAD_TIME_LIMIT_S,
        format!(
            "{} configs, max rel err {worst:.3e} (< {GRAD_REL_TOL:.0e}), mixed provenance {mixed}, {secs:.1}s (< {GRAD_TIME_LIMIT_S}s)",
            report_.cases.len()
        ),
    )
}

fn base_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg
}

fn max_param_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.max_abs_diff(b)
}

fn metrics_equal_except_mode(a: &[MetricsRecord], b: &[MetricsRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let mut y = y.clone();
            y.mode = x.mode;
            *x == y
        })
}

fn criterion_2() -> Outcome {
    let split = config_split(&base_config(7)).unwrap();
    let mut on = base_config(7);
    on.total_steps = REDUCTION_STEPS;
    on.set("algorithm", "on_policy").unwrap();
    let mut soup_t1 = on.clone();
    soup_t1.set("algorithm", "soup").unwrap();
    soup_t1.set("T", "1").unwrap();
    let mut soup_r0 = on.clone();
    soup_r0.set("algorithm", "soup").unwrap();
    soup_r0.set("T", "4").unwrap();
    soup_r0.set("strategy.ratio", "0").unwrap();

    let (t_on, m_on) = train_in_memory(&on, &split).expect("on-policy run");
    let (t_t1, m_t1) = train_in_memory(&soup_t1, &split).expect("T=1 run");
    let (t_r0, m_r0) = train_in_memory(&soup_r0, &split).expect("ratio=0 run");
    let d_t1 = max_param_diff(&t_on.params, &t_t1.params);
    let d_r0 = max_param_diff(&t_on.params, &t_r0.params);
    let logs_t1 = m_on == m_t1;
    let logs_r0 = metrics_equal_except_mode(&m_on, &m_r0);
    let soup_steps = m_r0.iter().filter(|m| m.mode == soup::rollout::RolloutMode::Soup).count();
    report(
        "2 reduction equivalence",
        logs_t1 && logs_r0 && d_t1 <= REDUCTION_TOL && d_r0 <= REDUCTION_TOL && soup_steps > 0,
        format!(
            "{REDUCTION_STEPS} steps; T=1: identical logs {logs_t1}, max param diff {d_t1:.1e}; ratio=0 ({soup_steps} soup steps): identical logs apart from mode {logs_r0}, max param diff {d_r0:.1e} (<= {REDUCTION_TOL:.0e})"
        ),
    )
}

fn criterion_3(runs: &[Vec<MetricsRecord>]) -> Outcome {
    let steps: usize = runs.iter().map(Vec::len).sum();
    let worst = runs
        .iter()
        .flatten()
        .map(|m| m.max_suffix_ratio_dev)
        .fold(0.0, f64::max);
    let suffix_tokens: usize = runs.iter().flatten().map(|m| m.suffix_tokens).sum();
    report(
        "3 ratio-1 property",
        worst <= RATIO_ONE_TOL && suffix_tokens > 0,
        format!("{steps} steps without mini-batching, {suffix_tokens} current-policy tokens, max |ratio - 1| {worst:.1e} (<= {RATIO_ONE_TOL:.0e})"),
    )
}

fn tiny_arch(key: &StreamKey, vocab: &Vocabulary) -> PolicyArchitecture {
    use rand::Rng as _;
    let mut rng = key.child("dims").rng();
    PolicyArchitecture::new(vocab, 8, rng.gen_range(2..=5), rng.gen_range(4..=16)).unwrap()
}

fn criterion_4() -> Outcome {
    use rand::Rng as _;
    let vocab = Vocabulary::digits();
    let settings = ObjectiveSettings::default();
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    let mut nondegenerate = 0;
    let mut rng = StreamKey::root(4).child("rewards").rng();
    for _ in 0..2000 {
        let g = rng.gen_range(2..=16);
        let binary = rng.gen_bool(0.5);
        let rewards: Vec<f64> = (0..g)
            .map(|_| if binary { rng.gen_range(0..2) as f64 } else { rng.gen_range(-3.0..3.0) })
            .collect();
        let a = group_advantages(&rewards, settings.epsilon_std).unwrap();
        if a.degenerate {
            continue;
        }
        nondegenerate += 1;
        let n = a.advantages.len() as f64;
        let mean = a.advantages.iter().sum::<f64>() / n;
        let std = (a.advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }

    // Perturbing everything about a degenerate group except its token count
    // must leave the gradient bit-for-bit unchanged; a batch of only
    // degenerate groups must give exactly zero.
    let mut perturbation_ok = true;
    let mut zero_ok = true;
    for case in 0..20u64 {
        let key = StreamKey::root(44).index(case);
        let arch = tiny_arch(&key, &vocab);
        let (mut groups, current) = random_case(&key, &arch, &vocab).unwrap();
        groups[1].rewards = vec![0.0; groups[1].rewards.len()];
        let (_, g1) = surrogate_gradient(&groups, &current, &arch, &settings).unwrap();
        groups[1].rewards = vec![1.0; groups[1].rewards.len()];
        let mut noise = key.child("noise").rng();
        for t in &mut groups[1].trajectories {
            for lp in &mut t.gen_logprob {
                *lp -= noise.gen_range(0.0..2.0);
            }
        }
        let (_, g2) = surrogate_gradient(&groups, &current, &arch, &settings).unwrap();
        perturbation_ok &= g1.values() == g2.values();
        let (obj, g3) = surrogate_gradient(&groups[1..], &current, &arch, &settings).unwrap();
        zero_ok &= obj.loss == 0.0 && g3.values().iter().all(|&x| x == 0.0);
    }
    report(
        "4 advantage contract",
        nondegenerate > 0 && worst_mean <= ADVANTAGE_TOL && worst_std <= ADVANTAGE_TOL && perturbation_ok && zero_ok,
        format!(
            "{nondegenerate} non-degenerate groups: max |mean| {worst_mean:.1e}, max |std - 1| {worst_std:.1e} (<= {ADVANTAGE_TOL:.0e}); degenerate-group perturbation bitwise-equal {perturbation_ok}; all-degenerate gradient exactly zero {zero_ok}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let vocab = Vocabulary::digits();
    let mut settings = ObjectiveSettings::default();
    // Tighter clip range so most batches contain clipped tokens.
    settings.clip.eps_low = 0.05;
    settings.clip.eps_high = 0.07;
    let mut clipped_tokens = 0usize;
    let mut batches_with_clipping = 0;
    let mut all_equal = true;
    for b in 0..CLIP_MASK_BATCHES {
        let key = StreamKey::root(5).index(b);
        let arch = tiny_arch(&key, &vocab);
        let (groups, current) = random_case(&key, &arch, &vocab).unwrap();
        let obj = batch_objective(&groups, &current, &arch, &settings).unwrap();
        let kept = assemble_gradient(&groups, &obj, &current, &arch, settings.temperature).unwrap();
        let mut zeroed = obj.clone();
        let mut n = 0;
        for term in &mut zeroed.terms {
            for (w, c) in term.weights.iter_mut().zip(&term.contributions) {
                if c.clipped_active {
                    *w = 0.0;
                    n += 1;
                }
            }
        }
        // Same batch with every clipped token's unclipped weight restored,
        // to confirm the mask is doing work.
        let mut restored = obj.clone();
        let norm = obj.normalizer as f64;
        for term in &mut restored.terms {
            for (w, c) in term.weights.iter_mut().zip(&term.contributions) {
                if c.clipped_active {
                    *w = -(c.ratio * c.advantage) / norm;
                }
            }
        }
        let masked = assemble_gradient(&groups, &zeroed, &current, &arch, settings.temperature).unwrap();
        all_equal &= kept.values() == masked.values();
        if n > 0 {
            batches_with_clipping += 1;
            let unmasked = assemble_gradient(&groups, &restored, &current, &arch, settings.temperature).unwrap();
            all_equal &= unmasked.values() != kept.values();
        }
        clipped_tokens += n;
    }
    report(
        "5 clip masking",
        all_equal && batches_with_clipping > CLIP_MASK_BATCHES / 2,
        format!(
            "{CLIP_MASK_BATCHES} batches ({batches_with_clipping} with clipping, {clipped_tokens} clipped tokens): zeroed vs kept gradients bitwise-equal {all_equal}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let vocab = Vocabulary::digits();
    let arch = PolicyArchitecture::new(&vocab, 8, 4, 8).unwrap();
    let params = arch.init_params(0.3, &mut StreamKey::root(6).rng());
    let prompt = vec![vocab.bos, 2, 9, vocab.sep];
    let mk = |tokens: Vec<usize>| {
        let lp = sequence_logprobs(&params, &arch, &prompt, &tokens, 1.0).unwrap();
        let n = tokens.len();
        Trajectory {
            prompt: prompt.clone(),
            tokens,
            gen_logprob: lp,
            gen_entropy: vec![0.0; n],
            provenance: vec![Provenance::OnPolicySuffix; n],
            truncation_index: 0,
        }
    };
    let group = GroupRollout {
        instance: Instance { prompt: prompt.clone(), answer: vec![1] },
        trajectories: vec![mk(vec![1, 7, vocab.eos]), mk(vec![4, 4, vocab.eos])],
        rewards: vec![1.0, 0.0],
    };
    let obj = batch_objective(&[group], &params, &arch, &ObjectiveSettings::default()).unwrap();
    let ratios_one = obj.terms.iter().flat_map(|t| &t.contributions).all(|c| c.ratio == 1.0);
    report(
        "6 objective hand-check",
        obj.loss == 0.0 && ratios_one,
        format!("lengths 3/3, rewards {{1, 0}}, all ratios exactly 1 {ratios_one}: loss {:?} (expected exactly 0)", obj.loss),
    )
}

fn enumerate_pass(n: usize, c: usize, k: usize) -> f64 {
    // Samples 0..c are the correct ones.
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            total += 1;
            if (0..c).any(|i| mask & (1 << i) != 0) {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

fn criterion_7() -> Outcome {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for n in 1..=8 {
        for c in 0..=n {
            for k in 1..=n {
                cases += 1;
                let got = pass_at_k(n, c, k).unwrap();
                let want = enumerate_pass(n, c, k);
                if got != want {
                    mismatches.push((n, c, k, got, want));
                }
            }
        }
    }
    report(
        "7 pass@k correctness",
        mismatches.is_empty(),
        format!("{cases} (n, c, k) cases with n <= 8 compared for exact equality; mismatches {mismatches:?}"),
    )
}

struct SeedRuns {
    seed: u64,
    baseline: Vec<MetricsRecord>,
    baseline_heldout: f64,
    soup: Vec<MetricsRecord>,
    soup_heldout: f64,
    minibatch: Vec<MetricsRecord>,
}

fn last_window(m: &[MetricsRecord]) -> &[MetricsRecord] {
    &m[m.len().saturating_sub(LAST_WINDOW)..]
}

fn mean_reward(m: &[MetricsRecord]) -> f64 {
    m.iter().map(|r| r.mean_reward).sum::<f64>() / m.len() as f64
}

fn directional_runs() -> (Vec<SeedRuns>, f64) {
    let start = Instant::now();
    let mut out = Vec::new();
    for &seed in &DIRECTIONAL_SEEDS {
        let mut baseline = base_config(seed);
        baseline.set("algorithm", "on_policy").unwrap();
        let mut soup_cfg = base_config(seed);
        soup_cfg.set("T", "4").unwrap();
        soup_cfg.set("strategy.kind", "length_ratio").unwrap();
        soup_cfg.set("strategy.ratio", "0.5").unwrap();
        let mut minibatch = TrainConfig::preset("minibatch_desk").unwrap();
        minibatch.seed = seed;
        // Same number of samples and optimizer updates as the baseline.
        minibatch.total_steps = baseline.total_steps * baseline.batch_size as u64 / minibatch.mini_batch.gather_size as u64;

        let split = config_split(&baseline).unwrap();
        let (tb, mb) = train_in_memory(&baseline, &split).expect("baseline run");
        let (ts, ms) = train_in_memory(&soup_cfg, &split).expect("soup run");
        let (_, mm) = train_in_memory(&minibatch, &split).expect("mini-batch run");
        out.push(SeedRuns {
            seed,
            baseline_heldout: tb.heldout_avg(&split.heldout).unwrap(),
            baseline: mb,
            soup_heldout: ts.heldout_avg(&split.heldout).unwrap(),
            soup: ms,
            minibatch: mm,
        });
    }
    (out, start.elapsed().as_secs_f64())
}

fn criterion_8(runs: &[SeedRuns], secs: f64) -> Outcome {
    let rewards: Vec<f64> = runs.iter().map(|r| mean_reward(last_window(&r.baseline))).collect();
    let reward_ok = rewards.iter().all(|&r| r >= BASELINE_REWARD_MIN);
    let within = runs.iter().all(|r| r.soup_heldout >= r.baseline_heldout - HELDOUT_MARGIN);
    let at_least = runs.iter().filter(|r| r.soup_heldout >= r.baseline_heldout).count();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(&rewards)
        .map(|(r, w)| format!("seed {}: train reward {w:.3}, avg@32 soup {:.4} vs on-policy {:.4}", r.seed, r.soup_heldout, r.baseline_heldout))
        .collect();
    report(
        "8 desk-scale directional result",
        reward_ok && within && at_least >= 2 && secs < DIRECTIONAL_TIME_LIMIT_S,
        format!(
            "baseline last-{LAST_WINDOW}-step reward >= {BASELINE_REWARD_MIN}: {reward_ok}; soup >= baseline - {HELDOUT_MARGIN} on all seeds: {within}; seeds with soup >= baseline: {at_least}/3; {secs:.0}s; [{}]",
            per_seed.join("; ")
        ),
    )
}

fn criterion_9(runs: &[SeedRuns]) -> Outcome {
    let mut diffs = Vec::new();
    let mut detail = Vec::new();
    let mut clip_ok = true;
    for r in runs {
        let sb = profile_slope(&mean_entropy_profile(last_window(&r.baseline)));
        let ss = profile_slope(&mean_entropy_profile(last_window(&r.soup)));
        let cb = r.baseline.iter().map(|m| m.clip_frac).sum::<f64>() / r.baseline.len() as f64;
        let cm = r.minibatch.iter().map(|m| m.clip_frac).sum::<f64>() / r.minibatch.len() as f64;
        clip_ok &= cm > cb;
        if let (Some(b), Some(s)) = (sb, ss) {
            diffs.push(s - b);
        }
        detail.push(format!(
            "seed {}: slope soup {} vs on-policy {}, clip frac mini-batch {cm:.4} vs on-policy {cb:.4}",
            r.seed,
            ss.map_or("n/a".into(), |v| format!("{v:.4}")),
            sb.map_or("n/a".into(), |v| format!("{v:.4}"))
        ));
    }
    let mean_diff = if diffs.len() == runs.len() {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    } else {
        f64::NAN
    };
    report(
        "9 entropy-profile analogue",
        mean_diff > 0.0 && clip_ok,
        format!(
            "mean paired slope difference (soup - on-policy) {mean_diff:.4} (> 0); mini-batch clip fraction higher on every seed {clip_ok}; [{}]",
            detail.join("; ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let eos = 12usize;
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    let tokens = proptest::collection::vec(0usize..12, 1..40);
    let props = runner.run(&(tokens, 0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), |(mut toks, a, b, eos_end)| {
        if eos_end {
            toks.push(eos);
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n_lo = truncate_length_ratio(&toks, lo, eos);
        let n_hi = truncate_length_ratio(&toks, hi, eos);
        prop_assert!(n_lo <= n_hi, "monotone in ratio");
        prop_assert!(n_hi < toks.len(), "leaves at least one token");
        prop_assert_eq!(truncate_length_ratio(&toks, 0.0, eos), 0);
        prop_assert!(n_hi == 0 || toks[n_hi - 1] != eos, "prefix never ends with EOS");
        let want = ((toks.len() as f64 * hi + 0.5 + 1e-9).floor() as usize).min(toks.len() - 1);
        prop_assert!(n_hi == want || (n_hi + 1 == want && toks[want - 1] == eos));
        Ok(())
    });

    // Five tied maximum-entropy positions, k = 5: each must be the cut
    // point with probability 1/5.
    let toks: Vec<usize> = (0..10).map(|i| i % 10).collect();
    let ent = [0.1, 2.0, 0.3, 2.0, 2.0, 0.2, 2.0, 0.4, 2.0, 0.0];
    let tied = [1usize, 3, 4, 6, 8];
    let mut counts = [0usize; 10];
    let mut rng = StreamKey::root(10).child("topk").rng();
    for _ in 0..UNIFORMITY_DRAWS {
        counts[truncate_entropy_topk(&toks, &ent, tied.len(), eos, &mut rng)] += 1;
    }
    let p = 1.0 / tied.len() as f64;
    let sigma = (UNIFORMITY_DRAWS as f64 * p * (1.0 - p)).sqrt();
    let expected = UNIFORMITY_DRAWS as f64 * p;
    let worst_z = tied
        .iter()
        .map(|&i| (counts[i] as f64 - expected).abs() / sigma)
        .fold(0.0, f64::max);
    let only_tied = counts.iter().enumerate().all(|(i, &c)| c == 0 || tied.contains(&i));
    let uniform = worst_z <= UNIFORMITY_SIGMAS && only_tied;
    report(
        "10 truncation properties",
        props.is_ok() && uniform,
        format!(
            "length-ratio monotonicity/clamp properties over 512 cases: {}; entropy top-k over {} tied positions, {UNIFORMITY_DRAWS} draws: max deviation {worst_z:.2} sigma (<= {UNIFORMITY_SIGMAS}), cuts only at tied positions {only_tied}",
            props.map_or_else(|e| format!("failed ({e})"), |_| "ok".into()),
            tied.len()
        ),
    )
}

fn main() {
    let mut outcomes = vec![criterion_1(), criterion_2()];
    let (runs, secs) = directional_runs();
    let no_minibatch: Vec<Vec<MetricsRecord>> = runs
        .iter()
        .flat_map(|r| [r.baseline.clone(), r.soup.clone()])
        .collect();
    outcomes.push(criterion_3(&no_minibatch));
    outcomes.push(criterion_4());
    outcomes.push(criterion_5());
    outcomes.push(criterion_6());
    outcomes.push(criterion_7());
    outcomes.push(criterion_8(&runs, secs));
    outcomes.push(criterion_9(&runs));
    outcomes.push(criterion_10());

    let strict = std::env::var_os("SOUP_ACCEPTANCE_STRICT").is_some();
    let mut failed = 0;
    let mut gating = 0;
    for o in &outcomes {
        println!("[{}] criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
        if !o.pass {
            failed += 1;
            gating += (strict || !REPORT_ONLY.contains(&o.id)) as usize;
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed ({} report-only)",
        outcomes.len() - failed,
        failed - gating
    );
    if gating > 0 {
        std::process::exit(1);
    }
}
