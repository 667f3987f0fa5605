//! Training loop: behavior-policy cycles, rollouts, surrogate updates,
//! checkpoints and metrics.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{Algorithm, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{avg_at_k, SamplingSettings};
use crate::metrics::{append_metrics, MetricsRecord};
use crate::numerics::{adamw_step, clip_global_norm, snapshot, OptimizerState, ParamVector};
use crate::objective::{
    group_filter, position_bin, surrogate_gradient, BatchObjective, ClipStats, ObjectiveSettings,
    POSITION_BINS,
};
use crate::policy::{PolicyArchitecture, TokenId, Vocabulary};
use crate::rng::StreamKey;
use crate::rollout::{
    append_trajectory_records, rollout_group, GroupRollout, Provenance, RolloutMode, RolloutSettings,
    TrajectoryRecord,
};
use crate::tasks::{generate_instance, write_eval_set, Instance, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CycleState {
    pub behavior_params: ParamVector,
    /// Position of the next batch in the current cycle, `1..=T`.
    pub batch_in_cycle: usize,
    pub global_step: u64,
}

impl CycleState {
    pub fn new(current: &ParamVector) -> Self {
        CycleState {
            behavior_params: snapshot(current),
            batch_in_cycle: 1,
            global_step: 0,
        }
    }

    pub fn mode(&self, algorithm: Algorithm) -> RolloutMode {
        match algorithm {
            Algorithm::Soup if self.batch_in_cycle > 1 => RolloutMode::Soup,
            _ => RolloutMode::OnPolicy,
        }
    }
}

/// Marks one batch as consumed; when the `T`-th batch of the cycle is done,
/// the behavior policy is re-snapshotted from `current` and a new cycle starts.
pub fn refresh_behavior(state: &mut CycleState, current: &ParamVector, cycle_len: usize) {
    state.global_step += 1;
    if state.batch_in_cycle >= cycle_len {
        state.behavior_params = snapshot(current);
        state.batch_in_cycle = 1;
    } else {
        state.batch_in_cycle += 1;
    }
}

/// Held-out evaluation prompts and, optionally, a fixed training pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSplit {
    pub heldout: Vec<Instance>,
    /// Empty means training prompts are drawn fresh from the task distribution.
    pub train: Vec<Instance>,
}

/// Distinct prompts drawn from the split seed: the first `heldout` go to
/// evaluation, the next `train` to the training pool.
pub fn data_split(spec: &TaskSpec, heldout: usize, train: usize, split_seed: u64) -> Result<DataSplit> {
    let space = 10f64.powi(spec.difficulty as i32);
    let total = heldout + train;
    if total as f64 > space / 2.0 {
        return Err(Error::Config(format!(
            "eval.size + task.dataset_size = {total} exceeds half of the {space} distinct prompts"
        )));
    }
    let mut rng = StreamKey::root(split_seed).child("eval_set").rng();
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    while all.len() < total {
        let inst = generate_instance(spec, &mut rng);
        if seen.insert(inst.prompt.clone()) {
            all.push(inst);
        }
    }
    let train = all.split_off(heldout);
    Ok(DataSplit { heldout: all, train })
}

/// The split a config describes.
pub fn config_split(cfg: &TrainConfig) -> Result<DataSplit> {
    let spec = TaskSpec::new(cfg.task.kind, cfg.task.difficulty, Vocabulary::digits())?;
    data_split(&spec, cfg.eval.size, cfg.task.dataset_size, cfg.eval.split_seed)
}

/// Outcome of one or more sequential surrogate updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateSummary {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub lr: f64,
    pub stats: ClipStats,
    pub entropy_sum: [f64; POSITION_BINS],
    pub entropy_count: [usize; POSITION_BINS],
    /// Largest `|ratio - 1|` on current-policy tokens in the first update.
    pub first_update_suffix_dev: f64,
    /// Per-token clip flags keyed by (group, index) within the gathered batch.
    pub clipped: Vec<((usize, usize), Vec<bool>)>,
}

pub struct StepOutput {
    pub metrics: MetricsRecord,
    pub groups: Vec<GroupRollout>,
    pub clipped: Vec<((usize, usize), Vec<bool>)>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub arch: PolicyArchitecture,
    pub spec: TaskSpec,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    pub cycle: CycleState,
    root: StreamKey,
    excluded: HashSet<Vec<TokenId>>,
    pool: Vec<Instance>,
}

impl Trainer {
    /// Fresh parameters from the run seed; held-out prompts are never trained on.
    pub fn new(cfg: TrainConfig, split: &DataSplit) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::digits();
        let m = cfg.model;
        let arch = PolicyArchitecture::new(&vocab, m.context_window, m.embed_dim, m.hidden_dim)?;
        let spec = TaskSpec::new(cfg.task.kind, cfg.task.difficulty, vocab.clone())?;
        let root = StreamKey::root(cfg.seed);
        let params = arch.init_params(m.init_scale, &mut root.child("init").rng());
        let optimizer = OptimizerState::new(params.len());
        let cycle = CycleState::new(&params);
        Ok(Trainer {
            cfg,
            vocab,
            arch,
            spec,
            params,
            optimizer,
            cycle,
            root,
            excluded: split.heldout.iter().map(|i| i.prompt.clone()).collect(),
            pool: split.train.clone(),
        })
    }

    pub fn mode(&self) -> RolloutMode {
        self.cycle.mode(self.cfg.algorithm)
    }

    fn objective_settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            clip: self.cfg.clip,
            epsilon_std: self.cfg.epsilon_std,
            temperature: self.cfg.temperature,
            filter_groups: false,
        }
    }

    fn sample_prompts(&self, step: u64, attempt: usize, count: usize) -> Result<Vec<Instance>> {
        let mut rng = self.root.child("prompts").index(step).index(attempt as u64).rng();
        if !self.pool.is_empty() {
            return Ok((0..count)
                .map(|_| self.pool[rng.gen_range(0..self.pool.len())].clone())
                .collect());
        }
        let mut out = Vec::with_capacity(count);
        let mut rejected = 0usize;
        while out.len() < count {
            let inst = generate_instance(&self.spec, &mut rng);
            if self.excluded.contains(&inst.prompt) {
                rejected += 1;
                if rejected > 10_000 {
                    return Err(Error::Config("held-out set leaves no training prompts".into()));
                }
                continue;
            }
            out.push(inst);
        }
        Ok(out)
    }

    /// Samples and rolls out one step's prompts with `θ_old = self.params`.
    /// With group filtering, degenerate groups are dropped and whole prompt
    /// batches regenerated until enough groups survive or the cap is hit.
    pub fn gather(&self, mode: RolloutMode) -> Result<(Vec<GroupRollout>, usize)> {
        let step = self.cycle.global_step;
        let want = self.cfg.prompts_per_step();
        let settings = RolloutSettings {
            group_size: self.cfg.group_size,
            max_len: self.cfg.max_resp_len,
            temperature: self.cfg.temperature,
            strategy: self.cfg.strategy.strategy(),
        };
        let attempts = if self.cfg.filter_groups { self.cfg.max_regen_batches } else { 1 };
        let mut kept = Vec::with_capacity(want);
        for attempt in 0..attempts {
            let key = self.root.child("rollout").index(step).index(attempt as u64);
            for (g, inst) in self.sample_prompts(step, attempt, want)?.iter().enumerate() {
                let group = rollout_group(
                    inst,
                    mode,
                    &self.cycle.behavior_params,
                    &self.params,
                    &self.arch,
                    &self.vocab,
                    &settings,
                    &key.index(g as u64),
                )?;
                if !self.cfg.filter_groups || group_filter(&group.rewards) {
                    kept.push(group);
                }
                if kept.len() == want {
                    return Ok((kept, attempt + 1));
                }
            }
        }
        if kept.is_empty() {
            return Err(Error::AllGroupsFiltered { step, attempts });
        }
        Ok((kept, attempts))
    }

    /// One clipped-surrogate step per consecutive chunk of `minibatch_size`
    /// groups. The stored generation log-probs stay the ratio denominators,
    /// so later chunks see ratios drift away from 1.
    pub fn mini_batch_update(&mut self, groups: &[GroupRollout], minibatch_size: usize) -> Result<UpdateSummary> {
        if minibatch_size == 0 {
            return Err(Error::InvalidArgument("minibatch size must be at least 1".into()));
        }
        let settings = self.objective_settings();
        let mut summary = UpdateSummary::default();
        for (chunk_idx, chunk) in groups.chunks(minibatch_size).enumerate() {
            let (objective, mut grad) = surrogate_gradient(chunk, &self.params, &self.arch, &settings)?;
            if !objective.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.cycle.global_step)));
            }
            let norm = clip_global_norm(&mut grad, self.cfg.optim.grad_clip_norm)?;
            summary.lr = adamw_step(&mut self.params, &grad, &mut self.optimizer, &self.cfg.optim)?;
            summary.losses.push(objective.loss);
            summary.grad_norms.push(norm);
            summary.stats.merge(&objective.stats);
            accumulate_entropy(&objective, &mut summary);
            let offset = chunk_idx * minibatch_size;
            for term in objective.terms.iter().filter(|t| t.kept) {
                let traj = &chunk[term.group].trajectories[term.index];
                if chunk_idx == 0 {
                    for (c, p) in term.contributions.iter().zip(&traj.provenance) {
                        if *p == Provenance::OnPolicySuffix {
                            summary.first_update_suffix_dev =
                                summary.first_update_suffix_dev.max((c.ratio - 1.0).abs());
                        }
                    }
                }
                summary.clipped.push((
                    (offset + term.group, term.index),
                    term.contributions.iter().map(|c| c.clipped_active).collect(),
                ));
            }
        }
        Ok(summary)
    }

    /// Gather, update, emit metrics, advance the behavior cycle.
    pub fn train_step(&mut self) -> Result<StepOutput> {
        let mode = self.mode();
        let (groups, gen_batches) = self.gather(mode)?;
        let minibatch = if self.cfg.mini_batch.enabled {
            self.cfg.mini_batch.minibatch_size
        } else {
            groups.len()
        };
        let summary = self.mini_batch_update(&groups, minibatch)?;
        let metrics = step_metrics(self.cycle.global_step, mode, &groups, &summary, gen_batches);
        refresh_behavior(&mut self.cycle, &self.params, self.cfg.cycle_len);
        Ok(StepOutput {
            metrics,
            groups,
            clipped: summary.clipped,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.cycle.global_step,
            vocab: self.vocab.clone(),
            arch: self.arch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Held-out avg@k of the current parameters.
    pub fn heldout_avg(&self, eval_set: &[Instance]) -> Result<f64> {
        let sampling = SamplingSettings {
            max_len: self.cfg.max_resp_len,
            temperature: self.cfg.eval.temperature,
        };
        let key = self.root.child("heldout").index(self.cycle.global_step);
        avg_at_k(&self.params, &self.arch, &self.vocab, eval_set, self.cfg.eval.k, &sampling, &key)
    }
}

fn accumulate_entropy(objective: &BatchObjective, summary: &mut UpdateSummary) {
    for term in &objective.terms {
        let len = term.current_entropy.len();
        for (t, &h) in term.current_entropy.iter().enumerate() {
            let b = position_bin(t, len);
            summary.entropy_sum[b] += h;
            summary.entropy_count[b] += 1;
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn step_metrics(
    step: u64,
    mode: RolloutMode,
    groups: &[GroupRollout],
    summary: &UpdateSummary,
    gen_batches: usize,
) -> MetricsRecord {
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let lens: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().map(|t| t.len() as f64))
        .collect();
    let s = &summary.stats;
    let mut entropy_decile = [None; POSITION_BINS];
    let mut clip_decile = [0.0; POSITION_BINS];
    for b in 0..POSITION_BINS {
        if summary.entropy_count[b] > 0 {
            entropy_decile[b] = Some(summary.entropy_sum[b] / summary.entropy_count[b] as f64);
        }
        if s.tokens_by_decile[b] > 0 {
            clip_decile[b] = s.clipped_by_decile[b] as f64 / s.tokens_by_decile[b] as f64;
        }
    }
    MetricsRecord {
        step,
        mode,
        mean_reward: mean(&rewards),
        loss: mean(&summary.losses),
        clip_frac: s.clip_fraction(),
        clip_frac_prefix: s.prefix_clip_fraction(),
        clip_frac_suffix: s.suffix_clip_fraction(),
        entropy_decile,
        clip_decile,
        lr: summary.lr,
        grad_norm: mean(&summary.grad_norms),
        mean_resp_len: mean(&lens),
        prefix_tokens: s.prefix_tokens,
        suffix_tokens: s.suffix_tokens,
        max_suffix_ratio_dev: summary.first_update_suffix_dev,
        updates: summary.losses.len(),
        gen_batches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub path: String,
    pub heldout_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub effective_config: PathBuf,
    pub metrics_log: PathBuf,
    pub eval_set: PathBuf,
    pub checkpoints: Vec<CheckpointEntry>,
    pub final_checkpoint: PathBuf,
    pub final_params: ParamVector,
    pub metrics: Vec<MetricsRecord>,
}

impl RunArtifacts {
    pub fn final_heldout_avg(&self) -> f64 {
        self.checkpoints.last().map_or(f64::NAN, |c| c.heldout_avg)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn with_step(step: u64, e: Error) -> Error {
    match e {
        Error::Io { context, source } => Error::Io {
            context: format!("step {step}: {context}"),
            source,
        },
        other => other,
    }
}

/// Runs `total_steps` steps, writing everything under `output_dir`:
/// `effective.cfg`, `eval_set.tsv`, `metrics.log`, `checkpoints/` with an
/// `index.jsonl` of held-out scores, and `trajectories.jsonl` when dumping.
pub fn run_training(cfg: &TrainConfig, output_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    ensure_dir(output_dir)?;
    let effective_config = output_dir.join("effective.cfg");
    fs::write(&effective_config, cfg.to_text()).map_err(|e| Error::io(&effective_config, e))?;

    let split = config_split(cfg)?;
    let eval_instances = &split.heldout;
    let eval_set = output_dir.join("eval_set.tsv");
    write_eval_set(&eval_set, &Vocabulary::digits(), eval_instances)?;

    let metrics_log = output_dir.join("metrics.log");
    let trajectories = output_dir.join("trajectories.jsonl");
    for stale in [&metrics_log, &trajectories] {
        if stale.exists() {
            fs::remove_file(stale).map_err(|e| Error::io(stale, e))?;
        }
    }
    let ckpt_dir = output_dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let index_path = ckpt_dir.join("index.jsonl");

    let mut trainer = Trainer::new(cfg.clone(), &split)?;
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    let mut checkpoints = Vec::new();
    let mut index_lines = String::new();

    let mut save = |trainer: &Trainer, checkpoints: &mut Vec<CheckpointEntry>| -> Result<PathBuf> {
        let step = trainer.cycle.global_step;
        let path = ckpt_dir.join(format!("step_{step:06}.ckpt"));
        save_checkpoint(&trainer.checkpoint(), &path).map_err(|e| with_step(step, e))?;
        let entry = CheckpointEntry {
            step,
            path: path.display().to_string(),
            heldout_avg: trainer.heldout_avg(eval_instances)?,
        };
        index_lines.push_str(&serde_json::to_string(&entry)?);
        index_lines.push('\n');
        fs::write(&index_path, &index_lines).map_err(|e| with_step(step, Error::io(&index_path, e)))?;
        checkpoints.push(entry);
        Ok(path)
    };

    for _ in 0..cfg.total_steps {
        let out = trainer.train_step()?;
        let step = out.metrics.step;
        append_metrics(&metrics_log, std::slice::from_ref(&out.metrics)).map_err(|e| with_step(step, e))?;
        if cfg.dump_trajectories {
            let records = dump_records(step, out.metrics.mode, &out);
            append_trajectory_records(&trajectories, &records).map_err(|e| with_step(step, e))?;
        }
        metrics.push(out.metrics);
        let done = trainer.cycle.global_step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            save(&trainer, &mut checkpoints)?;
        }
    }
    let final_checkpoint = save(&trainer, &mut checkpoints)?;

    Ok(RunArtifacts {
        output_dir: output_dir.to_path_buf(),
        effective_config,
        metrics_log,
        eval_set,
        checkpoints,
        final_checkpoint,
        final_params: trainer.params,
        metrics,
    })
}

fn dump_records(step: u64, mode: RolloutMode, out: &StepOutput) -> Vec<TrajectoryRecord> {
    let mut records = Vec::new();
    for (gi, g) in out.groups.iter().enumerate() {
        for (ti, t) in g.trajectories.iter().enumerate() {
            let clipped = out
                .clipped
                .iter()
                .find(|(key, _)| *key == (gi, ti))
                .map(|(_, c)| c.clone());
            records.push(TrajectoryRecord {
                step,
                mode,
                group: gi,
                index: ti,
                answer: g.instance.answer.clone(),
                reward: g.rewards[ti],
                trajectory: t.clone(),
                clipped,
            });
        }
    }
    records
}

/// Runs training in memory only; used by tests and experiments that do not
/// need artifacts.
pub fn train_in_memory(cfg: &TrainConfig, split: &DataSplit) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(cfg.clone(), split)?;
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    for _ in 0..cfg.total_steps {
        metrics.push(trainer.train_step()?.metrics);
    }
    Ok((trainer, metrics))
}
