//! Run configuration, the co-training loop and the ablation runner.
//!
//! One training step:
//! 1. sample tasks from the active set;
//! 2. roll out each sampled task plus every variant proposed in the previous
//!    step (and its original), and label every step with the reward model;
//! 3. gate the pending variants against the originals' fresh accuracy and
//!    swap accepted ones into the active set;
//! 4. propose variants for sampled tasks whose accuracy left the band;
//! 5. update the policy on sampled plus newly accepted tasks, then the reward
//!    model on the subset whose accuracy lies inside the band.
//!
//! Rollouts run in parallel against frozen parameters; every random draw is
//! keyed by `(seed, step, task, trajectory, step index)`, so results do not
//! depend on the worker count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{decide_direction, summarize_errors, write_accepted_log, TaskPool};
use crate::coding::{coding_step, CodingStepConfig, CodingStepStats, CodingTaskState};
use crate::error::{Error, Result};
use crate::feedback::{build_advantages_with, RewardMode, RewardWeights};
use crate::policy::{policy_update, sample_group, PolicyParams, PolicySample, PolicyWeights, TrajectoryGroup};
use crate::reward_model::{
    evaluate_trajectory, measure_accuracy, rm_update_masked, AccuracyReport, RMParams, RmSample, StepEvaluation,
};
use crate::rng::{tag, StreamKey};
use crate::surrogate::UpdateConfig;
use crate::task_env::{load_tasks, save_tasks, Direction, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PolicyOnly,
    PolicyReward,
    PolicyRewardEnv,
    OutcomeOnly,
    StepOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::PolicyOnly,
        Mode::PolicyReward,
        Mode::PolicyRewardEnv,
        Mode::OutcomeOnly,
        Mode::StepOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PolicyOnly => "policy_only",
            Mode::PolicyReward => "policy_reward",
            Mode::PolicyRewardEnv => "policy_reward_env",
            Mode::OutcomeOnly => "outcome_only",
            Mode::StepOnly => "step_only",
        }
    }

    pub fn trains_rm(self) -> bool {
        matches!(self, Mode::PolicyReward | Mode::PolicyRewardEnv)
    }

    pub fn adapts_env(self) -> bool {
        self == Mode::PolicyRewardEnv
    }

    pub fn default_reward_mode(self) -> RewardMode {
        match self {
            Mode::OutcomeOnly => RewardMode::OutcomeOnly,
            Mode::StepOnly => RewardMode::StepOnly,
            _ => RewardMode::Integrated,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown mode `{s}`")))
    }
}

/// The in-repo reference task set.
pub const REFERENCE_TASKS_JSON: &str = include_str!("../data/reference_tasks.json");

pub fn reference_tasks() -> Result<Vec<TaskSpec>> {
    let tasks: Vec<TaskSpec> = serde_json::from_str(REFERENCE_TASKS_JSON)?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodingConfig {
    pub tasks: usize,
    pub n_codes: usize,
    pub n_uts: usize,
    pub n_gt_uts: usize,
    pub bug_dims: usize,
    pub init_bug_logit: f64,
    pub init_probe_logit: f64,
}

impl Default for CodingConfig {
    fn default() -> Self {
        CodingConfig {
            tasks: 4,
            n_codes: 32,
            n_uts: 32,
            n_gt_uts: 4,
            bug_dims: 8,
            init_bug_logit: -1.0,
            init_probe_logit: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub lambda_policy: f64,
    pub lambda_rm: f64,
    pub m: usize,
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub lr_policy: f64,
    pub lr_rm: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub evidence_noise: f64,
    /// Overrides the reward form implied by `mode`.
    pub reward_mode: Option<RewardMode>,
    pub coding: bool,
    pub hint_gain_init: f64,
    pub rm_channel_init: f64,
    /// Steps between held-out evaluations outside the final window.
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub probe_rollouts: usize,
    pub probe_seed: u64,
    /// Probe the RM with the current policy instead of the initial one.
    pub probe_current_policy: bool,
    /// Rollout threads; 0 uses the global pool.
    pub workers: usize,
    pub tasks_path: Option<PathBuf>,
    pub rm_checkpoint: Option<PathBuf>,
    pub policy_init: Option<PathBuf>,
    pub coding_params: CodingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::PolicyRewardEnv,
            lambda_policy: 1.0,
            lambda_rm: 1.0,
            m: 3,
            group_size: 8,
            tasks_per_step: 16,
            alpha_low: 0.2,
            alpha_high: 0.8,
            steps: 300,
            seeds: (0..20).collect(),
            lr_policy: 0.5,
            lr_rm: 1.5,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            temperature: 1.0,
            evidence_noise: 0.15,
            reward_mode: None,
            coding: false,
            hint_gain_init: 2.0,
            rm_channel_init: 0.55,
            eval_every: 10,
            eval_rollouts: 16,
            probe_rollouts: 32,
            probe_seed: 7,
            probe_current_policy: true,
            workers: 0,
            tasks_path: None,
            rm_checkpoint: None,
            policy_init: None,
            coding_params: CodingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.m == 0 || self.tasks_per_step == 0 || self.steps == 0 {
            return bad("m, tasks_per_step and steps must be positive".into());
        }
        if !(0.0 <= self.alpha_low && self.alpha_low < self.alpha_high && self.alpha_high <= 1.0) {
            return bad(format!(
                "thresholds ({}, {}) out of order",
                self.alpha_low, self.alpha_high
            ));
        }
        for (name, v) in [
            ("lambda_policy", self.lambda_policy),
            ("lambda_rm", self.lambda_rm),
            ("lr_policy", self.lr_policy),
            ("lr_rm", self.lr_rm),
            ("temperature", self.temperature),
            ("clip_epsilon", self.clip_epsilon),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta must be non-negative, got {}", self.kl_beta));
        }
        if !(0.0..0.5).contains(&self.evidence_noise) {
            return bad(format!("evidence_noise {} outside [0, 0.5)", self.evidence_noise));
        }
        if self.eval_every == 0 || self.eval_rollouts == 0 || self.probe_rollouts == 0 {
            return bad("eval_every, eval_rollouts and probe_rollouts must be positive".into());
        }
        Ok(())
    }

    pub fn effective_reward_mode(&self) -> RewardMode {
        self.reward_mode.unwrap_or_else(|| self.mode.default_reward_mode())
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            mode: self.effective_reward_mode(),
            lambda_policy: self.lambda_policy,
            lambda_rm: self.lambda_rm,
        }
    }

    /// First step of the final 10 % window.
    pub fn final_window_start(&self) -> usize {
        self.steps - (self.steps / 10).max(1)
    }

    /// Tasks from `tasks_path`, or the reference set.
    pub fn load_task_set(&self) -> Result<Vec<TaskSpec>> {
        match &self.tasks_path {
            Some(p) => load_tasks(p),
            None => reference_tasks(),
        }
    }

    fn policy_cfg(&self) -> UpdateConfig {
        UpdateConfig {
            learning_rate: self.lr_policy,
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
        }
    }

    /// The reward model trains without clipping or KL.
    fn rm_cfg(&self) -> UpdateConfig {
        UpdateConfig::vanilla(self.lr_rm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub per_task_accuracy: BTreeMap<String, f64>,
    pub mean_outcome: f64,
    /// Mean success over the original task set, on evaluation steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_success: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rm_accuracy: Option<AccuracyReport>,
    pub accepted_count: usize,
    pub pending_count: usize,
    pub mean_abs_advantage: f64,
    /// Tasks whose rollouts entered the reward-model batch.
    pub rm_batch_tasks: Vec<String>,
    pub hint_gain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coding: Option<CodingStepStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub lambda_policy: f64,
    pub lambda_rm: f64,
    pub final_success: f64,
    pub initial_rm: Option<AccuracyReport>,
    pub final_rm: Option<AccuracyReport>,
    pub accepted_count: usize,
}

impl RunSummary {
    pub fn mu_gain(&self) -> Option<f64> {
        Some(self.final_rm?.mu() - self.initial_rm?.mu())
    }
}

type Rollout = (TrajectoryGroup, Vec<StepEvaluation>);

pub struct Trainer {
    config: RunConfig,
    seed: u64,
    reference: Vec<TaskSpec>,
    policy: PolicyParams,
    rm: RMParams,
    pool: TaskPool,
    probe_policy: PolicyWeights,
    initial_rm: Option<AccuracyReport>,
    last_rm: Option<AccuracyReport>,
    coding_states: Vec<CodingTaskState>,
    step: usize,
    threads: Option<rayon::ThreadPool>,
    window: Vec<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rm = match (config.mode, &config.rm_checkpoint) {
            (Mode::StepOnly, None) => {
                return Err(Error::Config("step_only needs an rm_checkpoint".into()));
            }
            (_, Some(path)) if config.mode == Mode::StepOnly => load_rm(path)?,
            _ => RMParams::initial(config.rm_channel_init, config.evidence_noise, config.m)?,
        };
        Self::with_rm(config, tasks, seed, rm)
    }

    /// Starts from explicit reward-model parameters.
    pub fn with_rm(config: RunConfig, tasks: Vec<TaskSpec>, seed: u64, rm: RMParams) -> Result<Self> {
        config.validate()?;
        let mut rm = rm;
        rm.m = config.m;
        rm.evidence_noise = config.evidence_noise;
        rm.snapshot = None;
        rm.validate()?;
        let policy = match &config.policy_init {
            Some(p) => PolicyParams::from_json(&std::fs::read_to_string(p)?)?,
            None => PolicyParams::initial(config.hint_gain_init),
        };
        let threads = if config.workers > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let coding_states = if config.coding {
            let c = &config.coding_params;
            (0..c.tasks)
                .map(|i| CodingTaskState {
                    task_id: format!("code{i:02}"),
                    bug_logits: vec![c.init_bug_logit; c.bug_dims],
                    probe_logits: vec![c.init_probe_logit; c.bug_dims],
                })
                .collect()
        } else {
            Vec::new()
        };
        let probe_policy = policy.current.clone();
        let mut trainer = Trainer {
            pool: TaskPool::new(tasks.clone())?,
            reference: tasks,
            config,
            seed,
            policy,
            rm,
            probe_policy,
            initial_rm: None,
            last_rm: None,
            coding_states,
            step: 0,
            threads,
            window: Vec::new(),
        };
        if !trainer.config.coding {
            trainer.initial_rm = Some(trainer.probe_rm()?);
            trainer.last_rm = trainer.initial_rm;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn rm(&self) -> &RMParams {
        &self.rm
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.threads {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    /// Reward-model accuracy on rollouts of the probe policy over the
    /// original tasks.
    pub fn probe_rm(&self) -> Result<AccuracyReport> {
        measure_accuracy(
            &self.rm,
            &self.reference,
            if self.config.probe_current_policy {
                &self.policy.current
            } else {
                &self.probe_policy
            },
            self.config.probe_rollouts,
            self.config.probe_seed,
        )
    }

    /// Success of the current policy on each original task.
    pub fn evaluate_per_task(&self, key: u64, rollouts: usize) -> Result<Vec<f64>> {
        let seed = StreamKey::new(self.seed).with(tag::EVAL).with(key).value();
        self.install(|| {
            self.reference
                .par_iter()
                .map(|t| {
                    sample_group(&self.policy.current, t, rollouts, self.config.temperature, seed).map(|g| g.accuracy())
                })
                .collect()
        })
    }

    /// Mean success of the current policy over the original tasks.
    pub fn evaluate(&self, key: u64) -> Result<f64> {
        let accs = self.evaluate_per_task(key, self.config.eval_rollouts)?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    fn choose_tasks(&self, k: usize) -> Vec<TaskSpec> {
        let eligible: Vec<&TaskSpec> = self.pool.active.iter().collect();
        if eligible.len() <= self.config.tasks_per_step {
            return eligible.into_iter().cloned().collect();
        }
        let mut rng = StreamKey::new(self.seed).with(tag::TASKS).with(k as u64).rng();
        let mut idx = sample_indices(&mut rng, eligible.len(), self.config.tasks_per_step).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| eligible[i].clone()).collect()
    }

    fn rollout(&self, tasks: &[TaskSpec], step_seed: u64) -> Result<Vec<Rollout>> {
        let n = self.config.group_size;
        let temp = self.config.temperature;
        self.install(|| {
            tasks
                .par_iter()
                .map(|task| {
                    let group = sample_group(&self.policy.current, task, n, temp, step_seed)?;
                    let mut evals = Vec::new();
                    for (j, traj) in group.trajectories.iter().enumerate() {
                        evals.extend(evaluate_trajectory(&self.rm, task, traj, j, step_seed)?);
                    }
                    Ok((group, evals))
                })
                .collect()
        })
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        if self.is_done() {
            return Err(Error::State(format!(
                "run already finished {} steps",
                self.config.steps
            )));
        }
        if self.config.coding {
            return self.coding_step();
        }
        let k = self.step;
        let cfg = self.config.clone();
        let step_seed = StreamKey::new(self.seed).with(tag::ROLLOUT).with(k as u64).value();

        let sampled = self.choose_tasks(k);
        let mut rollout_tasks = sampled.clone();
        for p in self.pool.pending.iter().filter(|p| p.created_step < k) {
            rollout_tasks.push(p.proposed.clone());
            // The gate compares against the original's current accuracy.
            if !sampled.iter().any(|t| t.task_id == p.original.task_id) {
                rollout_tasks.push(p.original.clone());
            }
        }
        let results = self.rollout(&rollout_tasks, step_seed)?;
        let by_id: HashMap<&str, (&TaskSpec, &Rollout)> = rollout_tasks
            .iter()
            .zip(&results)
            .map(|(t, r)| (t.task_id.as_str(), (t, r)))
            .collect();
        let acc_by_task: HashMap<String, f64> =
            results.iter().map(|(g, _)| (g.task_id.clone(), g.accuracy())).collect();

        let accepted = self
            .pool
            .resolve_pending(k, &acc_by_task, cfg.alpha_low, cfg.alpha_high)?;

        if cfg.mode.adapts_env() {
            let perturb_seed = StreamKey::new(self.seed).with(tag::PERTURB).with(k as u64).value();
            for task in &sampled {
                if !self.pool.is_active(&task.task_id) || self.pool.has_pending(&task.task_id) {
                    continue;
                }
                let (_, (group, evals)) = by_id[task.task_id.as_str()];
                let acc = acc_by_task[&task.task_id];
                let direction = decide_direction(acc, cfg.alpha_low, cfg.alpha_high)?;
                if direction == Direction::None {
                    continue;
                }
                let summary = summarize_errors(group, evals);
                self.pool.propose(task, direction, acc, &summary, k, perturb_seed)?;
            }
        }

        let weights = cfg.reward_weights();
        let train_ids: Vec<&str> = sampled
            .iter()
            .map(|t| t.task_id.as_str())
            .chain(accepted.iter().map(|t| t.task_id.as_str()))
            .collect();
        let mut policy_batch = Vec::new();
        let mut rm_batch = Vec::new();
        let mut rm_batch_tasks = Vec::new();
        // Tasks outside the accuracy band are masked out of the RM objective.
        let mut rm_total = 0usize;
        let mut abs_adv = (0.0, 0usize);
        for id in &train_ids {
            let (task, (group, evals)) = by_id[id];
            let adv = build_advantages_with(group, evals, &weights)?;
            for (t, traj) in group.trajectories.iter().enumerate() {
                for (i, step) in traj.steps.iter().enumerate() {
                    let a = adv.policy_advantages[&(t, i)];
                    abs_adv.0 += a.abs();
                    abs_adv.1 += 1;
                    policy_batch.push(PolicySample {
                        feature: step.observation.task_feature.clone(),
                        arity: task.action_arity,
                        hint: step.observation.hint_value,
                        action: step.action,
                        advantage: a,
                    });
                }
            }
            let acc = acc_by_task[*id];
            rm_total += evals.len() * cfg.m;
            if cfg.mode.trains_rm() && cfg.alpha_low <= acc && acc <= cfg.alpha_high {
                rm_batch_tasks.push(id.to_string());
                for ev in evals {
                    for (j, &label) in ev.labels.iter().enumerate() {
                        rm_batch.push(RmSample {
                            evidence: ev.evidence.clone(),
                            label,
                            advantage: adv.rm_advantages[&(ev.trajectory_index, ev.step_index, j)],
                        });
                    }
                }
            }
        }

        if !policy_batch.is_empty() {
            self.policy = policy_update(&self.policy, &policy_batch, &cfg.policy_cfg())?;
        }
        if !rm_batch.is_empty() {
            self.rm = rm_update_masked(&self.rm, &rm_batch, rm_total, &cfg.rm_cfg())?;
        }

        let last = k + 1 == cfg.steps;
        let in_window = k >= cfg.final_window_start();
        let eval_success = if in_window || k.is_multiple_of(cfg.eval_every) {
            Some(self.evaluate(k as u64)?)
        } else {
            None
        };
        if in_window {
            self.window.extend(eval_success);
        }
        let rm_accuracy = if last || k.is_multiple_of(cfg.eval_every) {
            let r = self.probe_rm()?;
            self.last_rm = Some(r);
            Some(r)
        } else {
            None
        };

        let sampled_results: Vec<&Rollout> = sampled.iter().map(|t| by_id[t.task_id.as_str()].1).collect();
        let outcomes: Vec<f64> = sampled_results
            .iter()
            .flat_map(|(g, _)| g.trajectories.iter().map(|t| f64::from(t.outcome)))
            .collect();
        self.step += 1;
        Ok(MetricsRecord {
            step: k,
            per_task_accuracy: acc_by_task.into_iter().collect(),
            mean_outcome: outcomes.iter().sum::<f64>() / outcomes.len().max(1) as f64,
            eval_success,
            rm_accuracy,
            accepted_count: self.pool.accepted_log.len(),
            pending_count: self.pool.pending.len(),
            mean_abs_advantage: if abs_adv.1 == 0 {
                0.0
            } else {
                abs_adv.0 / abs_adv.1 as f64
            },
            rm_batch_tasks,
            hint_gain: self.policy.current.hint_gain,
            coding: None,
        })
    }

    fn coding_step(&mut self) -> Result<MetricsRecord> {
        let k = self.step;
        let c = &self.config.coding_params;
        let step_cfg = CodingStepConfig {
            n_codes: c.n_codes,
            n_uts: c.n_uts,
            n_gt_uts: c.n_gt_uts,
            lr_policy: self.config.lr_policy,
            lr_tests: self.config.lr_rm,
        };
        let seed = self.seed;
        let mut states = std::mem::take(&mut self.coding_states);
        let stats = self.install(|| {
            states
                .par_iter_mut()
                .map(|s| coding_step(s, &step_cfg, seed, k))
                .collect::<Result<Vec<_>>>()
        });
        self.coding_states = states;
        let stats = stats?;
        let n = stats.len().max(1) as f64;
        let mean = |f: fn(&CodingStepStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
        let per_task_accuracy = self
            .coding_states
            .iter()
            .zip(&stats)
            .map(|(s, st)| (s.task_id.clone(), st.gt_code_rate))
            .collect();
        let summary = CodingStepStats {
            mean_code_reward: mean(|s| s.mean_code_reward),
            gt_code_rate: mean(|s| s.gt_code_rate),
            gt_ut_rate: mean(|s| s.gt_ut_rate),
            mean_detect_rate: mean(|s| s.mean_detect_rate),
            degenerate: stats.iter().any(|s| s.degenerate),
        };
        if k >= self.config.final_window_start() {
            self.window.push(summary.gt_code_rate);
        }
        self.step += 1;
        Ok(MetricsRecord {
            step: k,
            per_task_accuracy,
            mean_outcome: summary.mean_code_reward,
            eval_success: Some(summary.gt_code_rate),
            rm_accuracy: None,
            accepted_count: 0,
            pending_count: 0,
            mean_abs_advantage: 0.0,
            rm_batch_tasks: Vec::new(),
            hint_gain: self.policy.current.hint_gain,
            coding: Some(summary),
        })
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            mode: self.config.mode,
            seed: self.seed,
            lambda_policy: self.config.lambda_policy,
            lambda_rm: self.config.lambda_rm,
            final_success: if self.window.is_empty() {
                f64::NAN
            } else {
                self.window.iter().sum::<f64>() / self.window.len() as f64
            },
            initial_rm: self.initial_rm,
            final_rm: self.last_rm,
            accepted_count: self.pool.accepted_log.len(),
        }
    }

    /// Runs the remaining steps, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<RunSummary> {
        while !self.is_done() {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(self.summary())
    }
}

pub fn load_rm(path: &Path) -> Result<RMParams> {
    let rm: RMParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    rm.validate()?;
    Ok(rm)
}

/// Runs one training job and writes `metrics.jsonl`, `timing.jsonl`,
/// `accepted_tasks.jsonl`, `policy.json`, `rm.json`, `tasks_final.json` and
/// `summary.json` into `out`.
pub fn train_to_dir(trainer: &mut Trainer, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let mut timing = std::io::BufWriter::new(std::fs::File::create(out.join("timing.jsonl"))?);
    let start = Instant::now();
    let summary = trainer.run(|rec| {
        writeln!(metrics, "{}", serde_json::to_string(rec)?)?;
        writeln!(
            timing,
            "{{\"step\":{},\"wall_seconds\":{:.6}}}",
            rec.step,
            start.elapsed().as_secs_f64()
        )?;
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;
    write_accepted_log(&out.join("accepted_tasks.jsonl"), &trainer.pool.accepted_log)?;
    std::fs::write(out.join("policy.json"), trainer.policy.to_json()?)?;
    std::fs::write(out.join("rm.json"), serde_json::to_string(&trainer.rm)?)?;
    save_tasks(&out.join("tasks_final.json"), &trainer.pool.active)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Trains every `(mode, seed)` pair and returns summaries in input order.
///
/// A `step_only` run without a configured checkpoint takes the final reward
/// model of the `policy_reward` run with the same seed, training one first
/// when needed.
pub fn run_grid(
    template: &RunConfig,
    tasks: &[TaskSpec],
    modes: &[Mode],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    let needs_rm = modes.contains(&Mode::StepOnly) && template.rm_checkpoint.is_none();
    let first_modes: Vec<Mode> = {
        let mut v: Vec<Mode> = modes.iter().copied().filter(|&m| m != Mode::StepOnly).collect();
        if needs_rm && !v.contains(&Mode::PolicyReward) {
            v.push(Mode::PolicyReward);
        }
        v
    };
    let jobs: Vec<(Mode, u64)> = first_modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run_job = |mode: Mode, seed: u64, rm: Option<RMParams>| -> Result<(RunSummary, RMParams)> {
        let cfg = RunConfig {
            mode,
            workers: 0,
            ..template.clone()
        };
        let mut trainer = match rm {
            Some(rm) => Trainer::with_rm(cfg, tasks.to_vec(), seed, rm),
            None => Trainer::new(cfg, tasks.to_vec(), seed),
        }
        .map_err(|e| Error::State(format!("run ({mode}, {seed}) failed: {e}")))?;
        let summary = match out {
            Some(dir) => train_to_dir(&mut trainer, &dir.join(mode.name()).join(seed.to_string())),
            None => trainer.run(|_| Ok(())),
        }
        .map_err(|e| Error::State(format!("run ({mode}, {seed}) failed: {e}")))?;
        Ok((summary, trainer.rm.clone()))
    };
    let first: Vec<(RunSummary, RMParams)> = jobs
        .par_iter()
        .map(|&(m, s)| run_job(m, s, None))
        .collect::<Result<Vec<_>>>()?;
    let mut done: HashMap<(Mode, u64), (RunSummary, RMParams)> = jobs.iter().copied().zip(first).collect();
    if modes.contains(&Mode::StepOnly) {
        let step_runs: Vec<(RunSummary, RMParams)> = seeds
            .par_iter()
            .map(|&s| {
                let rm = if needs_rm {
                    Some(done[&(Mode::PolicyReward, s)].1.clone())
                } else {
                    None
                };
                run_job(Mode::StepOnly, s, rm)
            })
            .collect::<Result<Vec<_>>>()?;
        for (&s, r) in seeds.iter().zip(step_runs) {
            done.insert((Mode::StepOnly, s), r);
        }
    }
    Ok(modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .map(|key| done[&key].0.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMean {
    pub mode: Mode,
    pub runs: usize,
    pub final_success: f64,
    pub mu_initial: f64,
    pub mu_final: f64,
    pub mu_gain: f64,
    pub process_acc: f64,
    pub outcome_acc: f64,
}

pub fn mode_means(rows: &[RunSummary]) -> Vec<ModeMean> {
    let mut order: Vec<Mode> = Vec::new();
    for r in rows {
        if !order.contains(&r.mode) {
            order.push(r.mode);
        }
    }
    order
        .into_iter()
        .map(|mode| {
            let rs: Vec<&RunSummary> = rows.iter().filter(|r| r.mode == mode).collect();
            let n = rs.len() as f64;
            let avg = |f: &dyn Fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let rm = |r: &RunSummary, f: fn(&AccuracyReport) -> f64, fin: bool| {
                (if fin { r.final_rm } else { r.initial_rm }).map_or(f64::NAN, |a| f(&a))
            };
            ModeMean {
                mode,
                runs: rs.len(),
                final_success: avg(&|r| r.final_success),
                mu_initial: avg(&|r| rm(r, AccuracyReport::mu, false)),
                mu_final: avg(&|r| rm(r, AccuracyReport::mu, true)),
                mu_gain: avg(&|r| r.mu_gain().unwrap_or(f64::NAN)),
                process_acc: avg(&|r| rm(r, |a| a.process_acc, true)),
                outcome_acc: avg(&|r| rm(r, |a| a.outcome_acc, true)),
            }
        })
        .collect()
}

const CSV_HEADER: &str =
    "mode,seed,lambda_policy,lambda_rm,final_success,mu_initial,mu_final,process_acc,outcome_acc,accepted";

fn csv_row(r: &RunSummary) -> String {
    let f = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6}"));
    format!(
        "{},{},{},{},{:.6},{},{},{},{},{}",
        r.mode,
        r.seed,
        r.lambda_policy,
        r.lambda_rm,
        r.final_success,
        f(r.initial_rm.map(|a| a.mu())),
        f(r.final_rm.map(|a| a.mu())),
        f(r.final_rm.map(|a| a.process_acc)),
        f(r.final_rm.map(|a| a.outcome_acc)),
        r.accepted_count
    )
}

/// Per-run rows in input order, then one `mean` row per mode.
pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    for m in mode_means(rows) {
        let lam = rows
            .iter()
            .find(|r| r.mode == m.mode)
            .map_or((1.0, 1.0), |r| (r.lambda_policy, r.lambda_rm));
        out.push_str(&format!(
            "{},mean,{},{},{:.6},{:.6},{:.6},{:.6},{:.6},\n",
            m.mode, lam.0, lam.1, m.final_success, m.mu_initial, m.mu_final, m.process_acc, m.outcome_acc
        ));
    }
    out
}

/// Cross product of modes and seeds with a CSV summary.
pub fn ablate(
    template: &RunConfig,
    tasks: &[TaskSpec],
    modes: &[Mode],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    let distinct: HashSet<Mode> = modes.iter().copied().collect();
    if distinct.len() < 2 || distinct.len() != modes.len() {
        return Err(Error::Argument("ablate needs at least two distinct modes".into()));
    }
    if seeds.len() < 5 {
        return Err(Error::Argument(format!(
            "ablate needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    let rows = run_grid(template, tasks, modes, seeds, out)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), summary_csv(&rows))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Vary `lambda_policy` with `lambda_rm = 1`.
    Policy,
    /// Vary `lambda_rm` with `lambda_policy = 1`.
    RewardModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub lambda: f64,
    pub summary: RunSummary,
}

/// Two sub-sweeps over λ in the template's mode.
pub fn lambda_sweep(
    template: &RunConfig,
    tasks: &[TaskSpec],
    lambdas: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("lambda sweep needs lambdas and seeds".into()));
    }
    let mut rows = Vec::new();
    for axis in [SweepAxis::Policy, SweepAxis::RewardModel] {
        for &lambda in lambdas {
            let cfg = match axis {
                SweepAxis::Policy => RunConfig {
                    lambda_policy: lambda,
                    lambda_rm: 1.0,
                    ..template.clone()
                },
                SweepAxis::RewardModel => RunConfig {
                    lambda_policy: 1.0,
                    lambda_rm: lambda,
                    ..template.clone()
                },
            };
            for s in run_grid(&cfg, tasks, &[cfg.mode], seeds, None)? {
                rows.push(SweepRow {
                    axis,
                    lambda,
                    summary: s,
                });
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("lambda_sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("axis,{CSV_HEADER}\n");
    for r in rows {
        let axis = match r.axis {
            SweepAxis::Policy => "lambda_policy",
            SweepAxis::RewardModel => "lambda_rm",
        };
        out.push_str(&format!("{axis},{}\n", csv_row(&r.summary)));
    }
    out
}

/// Parses an inclusive range `a..b` (also `a..=b`) or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let num = |x: &str| {
        x.trim()
            .parse::<u64>()
            .map_err(|_| Error::Argument(format!("bad seed `{x}`")))
    };
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        return Ok((num(a)?..=num(b)?).collect());
    }
    s.split(',').map(num).collect()
}

pub fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    s.split(',').map(|m| m.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            steps: 12,
            eval_every: 4,
            eval_rollouts: 4,
            probe_rollouts: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn reference_set_loads() {
        let t = reference_tasks().unwrap();
        assert_eq!(t.len(), 16);
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.lambda_policy, c.lambda_rm, c.m, c.group_size), (1.0, 1.0, 3, 8));
        assert_eq!(
            (c.alpha_low, c.alpha_high, c.steps, c.tasks_per_step),
            (0.2, 0.8, 300, 16)
        );
        assert_eq!(c.clip_epsilon, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn config_json_partial_and_unknown_keys() {
        let c = RunConfig::from_json(r#"{"mode":"policy_only","steps":5}"#).unwrap();
        assert_eq!((c.mode, c.steps, c.m), (Mode::PolicyOnly, 5, 3));
        assert!(matches!(RunConfig::from_json(r#"{"stepz":5}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"alpha_low":0.9}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn policy_only_freezes_rm() {
        let mut t = Trainer::new(quick(Mode::PolicyOnly), reference_tasks().unwrap(), 1).unwrap();
        let before = t.rm().weights.clone();
        t.run(|_| Ok(())).unwrap();
        assert_eq!(t.rm().weights, before);
        assert_eq!(t.pool().accepted_log.len(), 0);
        assert_ne!(t.policy().current, PolicyParams::initial(2.0).current);
    }

    #[test]
    fn policy_reward_never_adapts() {
        let mut t = Trainer::new(quick(Mode::PolicyReward), reference_tasks().unwrap(), 2).unwrap();
        let s = t
            .run(|r| {
                assert_eq!(r.accepted_count, 0);
                assert_eq!(r.pending_count, 0);
                Ok(())
            })
            .unwrap();
        assert_eq!(s.accepted_count, 0);
        assert!(s.final_success.is_finite());
    }

    #[test]
    fn rm_batch_respects_band() {
        let cfg = quick(Mode::PolicyRewardEnv);
        let mut t = Trainer::new(cfg.clone(), reference_tasks().unwrap(), 3).unwrap();
        t.run(|r| {
            for id in &r.rm_batch_tasks {
                let a = r.per_task_accuracy[id];
                assert!(cfg.alpha_low <= a && a <= cfg.alpha_high, "{id} at {a}");
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn step_only_requires_checkpoint() {
        let r = Trainer::new(quick(Mode::StepOnly), reference_tasks().unwrap(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn seeds_and_modes_parse() {
        assert_eq!(parse_seeds("0..19").unwrap().len(), 20);
        assert_eq!(parse_seeds("0..2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("x").is_err());
        assert_eq!(
            parse_modes("policy_only,step_only").unwrap(),
            vec![Mode::PolicyOnly, Mode::StepOnly]
        );
        assert!(parse_modes("nope").is_err());
    }

    #[test]
    fn ablate_preconditions() {
        let t = reference_tasks().unwrap();
        let c = quick(Mode::PolicyOnly);
        assert!(ablate(&c, &t, &[Mode::PolicyOnly], &[0, 1, 2, 3, 4], None).is_err());
        assert!(ablate(&c, &t, &[Mode::PolicyOnly, Mode::PolicyReward], &[0, 1], None).is_err());
    }

    #[test]
    fn coding_branch_runs() {
        let cfg = RunConfig {
            coding: true,
            ..quick(Mode::PolicyReward)
        };
        let mut t = Trainer::new(cfg, reference_tasks().unwrap(), 0).unwrap();
        let s = t
            .run(|r| {
                assert!(r.coding.is_some());
                Ok(())
            })
            .unwrap();
        assert!(s.final_success.is_finite());
    }
}
