use soup::checkpoint::load_checkpoint;
use soup::config::TrainConfig;
use soup::rollout::RolloutMode;
use soup::trainer::{config_split, run_training, train_in_memory};

fn small(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("total_steps", "12"),
        ("batch_size", "4"),
        ("G", "4"),
        ("eval.size", "16"),
        ("eval.k", "4"),
        ("max_resp_len", "8"),
        ("checkpoint_every", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

#[test]
fn soup_schedule_follows_cycle_length() {
    let mut cfg = small(1);
    cfg.set("T", "3").unwrap();
    let (_, metrics) = train_in_memory(&cfg, &config_split(&cfg).unwrap()).unwrap();
    let modes: Vec<RolloutMode> = metrics.iter().map(|m| m.mode).collect();
    for (i, m) in modes.iter().enumerate() {
        let want = if i % 3 == 0 { RolloutMode::OnPolicy } else { RolloutMode::Soup };
        assert_eq!(*m, want, "step {}", i + 1);
    }
    for m in &metrics {
        if m.mode == RolloutMode::OnPolicy {
            assert_eq!(m.prefix_tokens, 0);
        }
        assert!(m.max_suffix_ratio_dev <= 1e-9);
        assert!(m.loss.is_finite() && m.grad_norm.is_finite());
    }
    assert!(metrics.iter().any(|m| m.prefix_tokens > 0));
}

#[test]
fn runs_are_seed_deterministic() {
    let cfg = small(5);
    let split = config_split(&cfg).unwrap();
    let (a, ma) = train_in_memory(&cfg, &split).unwrap();
    let (b, mb) = train_in_memory(&cfg, &split).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(a.params.values(), b.params.values());
    let (c, _) = train_in_memory(&small(6), &split).unwrap();
    assert_ne!(a.params.values(), c.params.values());
}

#[test]
fn artifacts_match_in_memory_run() {
    let cfg = small(2);
    let dir = tempfile::tempdir().unwrap();
    let run = run_training(&cfg, dir.path()).unwrap();
    let (trainer, metrics) = train_in_memory(&cfg, &config_split(&cfg).unwrap()).unwrap();
    assert_eq!(run.metrics, metrics);
    assert_eq!(run.checkpoints.len(), 3);
    let last = load_checkpoint(&run.final_checkpoint).unwrap();
    assert_eq!(last.step, 12);
    assert_eq!(last.params.values(), trainer.params.values());
    let again = TrainConfig::from_file(&dir.path().join("effective.cfg")).unwrap();
    assert_eq!(again, cfg);
    assert!((0.0..=1.0).contains(&run.final_heldout_avg()));
}

#[test]
fn minibatch_preset_takes_several_updates_per_gather() {
    let mut cfg = TrainConfig::preset("minibatch_desk").unwrap();
    for (k, v) in [
        ("total_steps", "2"),
        ("G", "4"),
        ("mini_batch.minibatch_size", "2"),
        ("mini_batch.gather_size", "8"),
        ("eval.size", "16"),
        ("max_resp_len", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let (_, metrics) = train_in_memory(&cfg, &config_split(&cfg).unwrap()).unwrap();
    assert!(metrics.iter().all(|m| m.updates == 4));
}
