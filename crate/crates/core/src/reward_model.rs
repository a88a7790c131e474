//! Generative process reward model.
//!
//! The model sees a step's task features plus a noisy two-way channel that
//! reports whether the step was correct, and emits `m` independent ±1 labels
//! from `sigmoid(w · evidence)`. The channel flip rate caps how accurate the
//! model can ever become.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_trajectory, PolicyWeights};
use crate::rng::{tag, StreamKey};
use crate::surrogate::{clipped_slope, clipped_term, UpdateConfig};
use crate::task_env::{feature_encode, TaskSpec, Trajectory, FEATURE_DIM};

pub const EVIDENCE_DIM: usize = FEATURE_DIM + 2;
/// Channel slot lit when the (possibly flipped) step reads as wrong.
pub const CHANNEL_WRONG: usize = FEATURE_DIM;
/// Channel slot lit when the step reads as correct.
pub const CHANNEL_RIGHT: usize = FEATURE_DIM + 1;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMParams {
    pub weights: Vec<f64>,
    pub evidence_noise: f64,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Vec<f64>>,
}

impl RMParams {
    pub fn new(weights: Vec<f64>, evidence_noise: f64, m: usize) -> Result<Self> {
        let rm = RMParams {
            weights,
            evidence_noise,
            m,
            snapshot: None,
        };
        rm.validate()?;
        Ok(rm)
    }

    /// Zero weights except `±channel_weight` on the correctness channel.
    pub fn initial(channel_weight: f64, evidence_noise: f64, m: usize) -> Result<Self> {
        let mut w = vec![0.0; EVIDENCE_DIM];
        w[CHANNEL_WRONG] = -channel_weight;
        w[CHANNEL_RIGHT] = channel_weight;
        Self::new(w, evidence_noise, m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != EVIDENCE_DIM {
            return Err(Error::Argument(format!(
                "RM needs {EVIDENCE_DIM} weights, got {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("RM weights must be finite".into()));
        }
        if !(0.0..0.5).contains(&self.evidence_noise) {
            return Err(Error::Argument(format!(
                "evidence_noise {} outside [0, 0.5)",
                self.evidence_noise
            )));
        }
        if self.m == 0 {
            return Err(Error::Argument("m must be at least 1".into()));
        }
        Ok(())
    }

    pub fn reference(&self) -> &[f64] {
        self.snapshot.as_deref().unwrap_or(&self.weights)
    }

    pub fn logit(&self, evidence: &[f64]) -> f64 {
        dot(&self.weights, evidence)
    }

    /// Probability of label +1 at this evidence.
    pub fn p_positive(&self, evidence: &[f64]) -> f64 {
        sigmoid(self.logit(evidence))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvaluation {
    pub task_id: String,
    pub trajectory_index: usize,
    pub step_index: usize,
    pub labels: Vec<i8>,
    pub label_probs: Vec<f64>,
    pub evidence: Vec<f64>,
}

impl StepEvaluation {
    pub fn mean_label(&self) -> f64 {
        self.labels.iter().map(|&l| f64::from(l)).sum::<f64>() / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub p_plus: f64,
    pub p_minus: f64,
    pub process_acc: f64,
    pub outcome_acc: f64,
}

impl AccuracyReport {
    pub fn mu(&self) -> f64 {
        self.p_plus + self.p_minus
    }
}

pub fn build_evidence(
    task: &TaskSpec,
    trajectory: &Trajectory,
    trajectory_index: usize,
    step_index: usize,
    evidence_noise: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let step = trajectory.steps.get(step_index).ok_or_else(|| {
        Error::Range(format!(
            "step {step_index} outside trajectory of {} steps",
            trajectory.steps.len()
        ))
    })?;
    let mut e = feature_encode(task, step_index)?;
    let flip = StreamKey::new(seed)
        .with(tag::EVIDENCE)
        .with_str(&task.task_id)
        .with(trajectory_index as u64)
        .with(step_index as u64)
        .rng()
        .gen::<f64>()
        < evidence_noise;
    let reads_correct = step.correct != flip;
    e.push(if reads_correct { 0.0 } else { 1.0 });
    e.push(if reads_correct { 1.0 } else { 0.0 });
    Ok(e)
}

pub fn evaluate_step(
    rm: &RMParams,
    task_id: &str,
    trajectory_index: usize,
    step_index: usize,
    evidence: Vec<f64>,
    seed: u64,
) -> Result<StepEvaluation> {
    let p = rm.p_positive(&evidence);
    if !p.is_finite() {
        return Err(Error::Numeric(format!(
            "RM probability not finite on {task_id} step {step_index}"
        )));
    }
    let key = StreamKey::new(seed)
        .with(tag::LABEL)
        .with_str(task_id)
        .with(trajectory_index as u64)
        .with(step_index as u64);
    let mut labels = Vec::with_capacity(rm.m);
    let mut label_probs = Vec::with_capacity(rm.m);
    for j in 0..rm.m {
        let u: f64 = key.with(j as u64).rng().gen();
        if u < p {
            labels.push(1);
            label_probs.push(p);
        } else {
            labels.push(-1);
            label_probs.push(1.0 - p);
        }
    }
    Ok(StepEvaluation {
        task_id: task_id.to_string(),
        trajectory_index,
        step_index,
        labels,
        label_probs,
        evidence,
    })
}

/// Evidence plus labels for every step of a trajectory.
pub fn evaluate_trajectory(
    rm: &RMParams,
    task: &TaskSpec,
    trajectory: &Trajectory,
    trajectory_index: usize,
    seed: u64,
) -> Result<Vec<StepEvaluation>> {
    (0..trajectory.steps.len())
        .map(|i| {
            let e = build_evidence(task, trajectory, trajectory_index, i, rm.evidence_noise, seed)?;
            evaluate_step(rm, &task.task_id, trajectory_index, i, e, seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmSample {
    pub evidence: Vec<f64>,
    pub label: i8,
    pub advantage: f64,
}

fn label_prob(weights: &[f64], s: &RmSample) -> f64 {
    let p = sigmoid(dot(weights, &s.evidence));
    if s.label > 0 {
        p
    } else {
        1.0 - p
    }
}

pub fn rm_log_prob(weights: &[f64], s: &RmSample) -> f64 {
    let z = dot(weights, &s.evidence);
    // log σ(±z) computed stably.
    let signed = if s.label > 0 { z } else { -z };
    -(1.0 + (-signed).exp()).ln()
}

pub fn rm_objective(weights: &[f64], reference: &[f64], batch: &[RmSample], clip_epsilon: f64, kl_beta: f64) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let ratio = label_prob(weights, s) / label_prob(reference, s);
        total += clipped_term(ratio, s.advantage, clip_epsilon);
        if kl_beta != 0.0 {
            let p = sigmoid(dot(weights, &s.evidence));
            let q = sigmoid(dot(reference, &s.evidence));
            let kl: f64 = [(q, p), (1.0 - q, 1.0 - p)]
                .iter()
                .filter(|(a, _)| *a > 0.0)
                .map(|(a, b)| a * (a / b).ln())
                .sum();
            total -= kl_beta * kl;
        }
    }
    total / batch.len() as f64
}

pub fn rm_gradient(
    weights: &[f64],
    reference: &[f64],
    batch: &[RmSample],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<Vec<f64>> {
    masked_gradient(weights, reference, batch, batch.len(), clip_epsilon, kl_beta)
}

/// Gradient of the batch objective when `batch` holds the unmasked part of
/// `total` samples; masked samples count in the mean but contribute zero.
fn masked_gradient(
    weights: &[f64],
    reference: &[f64],
    batch: &[RmSample],
    total: usize,
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty RM batch".into()));
    }
    if total < batch.len() {
        return Err(Error::Argument(format!(
            "mask total {total} below batch size {}",
            batch.len()
        )));
    }
    let mut g = vec![0.0; weights.len()];
    let scale = 1.0 / total as f64;
    for s in batch {
        let p = sigmoid(dot(weights, &s.evidence));
        let q = sigmoid(dot(reference, &s.evidence));
        let (pn, pr) = if s.label > 0 { (p, q) } else { (1.0 - p, 1.0 - q) };
        let ratio = pn / pr;
        let score = if s.label > 0 { 1.0 - p } else { -p };
        let dz = clipped_slope(ratio, s.advantage, clip_epsilon) * ratio * score + kl_beta * (q - p);
        for (gi, xi) in g.iter_mut().zip(&s.evidence) {
            *gi += scale * dz * xi;
        }
    }
    if g.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in RM gradient".into()));
    }
    Ok(g)
}

/// One ascent step on `mean(A · log P(label | evidence))` (clipped / KL
/// penalised when configured), then refresh the snapshot.
pub fn rm_update(rm: &RMParams, batch: &[RmSample], cfg: &UpdateConfig) -> Result<RMParams> {
    rm_update_masked(rm, batch, batch.len(), cfg)
}

/// [`rm_update`] where `batch` is what survives a mask over `total` samples,
/// so the step shrinks as more samples are filtered out.
pub fn rm_update_masked(rm: &RMParams, batch: &[RmSample], total: usize, cfg: &UpdateConfig) -> Result<RMParams> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    let g = masked_gradient(&rm.weights, rm.reference(), batch, total, cfg.clip_epsilon, cfg.kl_beta)?;
    let weights: Vec<f64> = rm
        .weights
        .iter()
        .zip(&g)
        .map(|(w, gi)| w + cfg.learning_rate * gi)
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("RM weights became non-finite".into()));
    }
    Ok(RMParams {
        snapshot: Some(weights.clone()),
        weights,
        evidence_noise: rm.evidence_noise,
        m: rm.m,
    })
}

/// Scores the RM on rollouts of `probe_policy` over `probe_tasks`.
///
/// `p_plus`/`p_minus` condition on the trajectory outcome; `process_acc`
/// compares the sign of each step's mean label with its correct bit, and
/// `outcome_acc` the sign of the summed mean labels with the outcome. A zero
/// mean counts as wrong.
pub fn measure_accuracy(
    rm: &RMParams,
    probe_tasks: &[TaskSpec],
    probe_policy: &PolicyWeights,
    n_rollouts: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if probe_tasks.is_empty() || n_rollouts == 0 {
        return Err(Error::Argument("probe set is empty".into()));
    }
    let (mut plus_n, mut plus_hit, mut minus_n, mut minus_hit) = (0usize, 0usize, 0usize, 0usize);
    let (mut steps, mut step_hit, mut trajs, mut traj_hit) = (0usize, 0usize, 0usize, 0usize);
    for task in probe_tasks {
        for j in 0..n_rollouts {
            let traj = sample_trajectory(probe_policy, task, 1.0, seed, j)?;
            let evals = evaluate_trajectory(rm, task, &traj, j, seed)?;
            let mut summed = 0.0;
            for (ev, step) in evals.iter().zip(&traj.steps) {
                let ones = ev.labels.iter().filter(|&&l| l == 1).count();
                if traj.succeeded() {
                    plus_n += ev.labels.len();
                    plus_hit += ones;
                } else {
                    minus_n += ev.labels.len();
                    minus_hit += ev.labels.len() - ones;
                }
                let mean = ev.mean_label();
                steps += 1;
                if (mean > 0.0 && step.correct) || (mean < 0.0 && !step.correct) {
                    step_hit += 1;
                }
                summed += mean;
            }
            trajs += 1;
            if (summed > 0.0 && traj.outcome == 1) || (summed < 0.0 && traj.outcome == -1) {
                traj_hit += 1;
            }
        }
    }
    if plus_n == 0 {
        return Err(Error::DegenerateProbe(
            "no successful (O = 1) trajectories in probe".into(),
        ));
    }
    if minus_n == 0 {
        return Err(Error::DegenerateProbe(
            "no failed (O = -1) trajectories in probe".into(),
        ));
    }
    Ok(AccuracyReport {
        p_plus: plus_hit as f64 / plus_n as f64,
        p_minus: minus_hit as f64 / minus_n as f64,
        process_acc: step_hit as f64 / steps as f64,
        outcome_acc: traj_hit as f64 / trajs as f64,
    })
}
