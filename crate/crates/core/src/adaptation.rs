//! Critic-driven task adaptation.
//!
//! Tasks whose rollout accuracy leaves `[alpha_low, alpha_high]` get a
//! harder or easier variant built from the reward model's flagged steps. A
//! proposal is rolled out on the following step and replaces its parent only
//! when it lands strictly inside the acceptance window.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TrajectoryGroup;
use crate::reward_model::StepEvaluation;
use crate::task_env::{perturb_task, Direction, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticSummary {
    pub task_id: String,
    /// step index → number of -1 labels seen there.
    pub flagged_steps: BTreeMap<usize, usize>,
    pub total_rollouts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationProposal {
    pub original: TaskSpec,
    pub proposed: TaskSpec,
    pub direction: Direction,
    pub acc_original: f64,
    pub acc_proposed: Option<f64>,
    pub verdict: Verdict,
    /// Training step at which the proposal was made.
    pub created_step: usize,
}

/// One line of `accepted_tasks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedRecord {
    pub step: usize,
    pub direction: Direction,
    pub acc_original: f64,
    pub acc_proposed: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub original: TaskSpec,
    pub proposed: TaskSpec,
}

pub fn estimate_accuracy(group: &TrajectoryGroup) -> f64 {
    group.accuracy()
}

pub fn check_thresholds(alpha_low: f64, alpha_high: f64) -> Result<()> {
    if !(0.0 <= alpha_low && alpha_low < alpha_high && alpha_high <= 1.0) {
        return Err(Error::Argument(format!(
            "thresholds must satisfy 0 <= low < high <= 1, got ({alpha_low}, {alpha_high})"
        )));
    }
    Ok(())
}

pub fn decide_direction(acc: f64, alpha_low: f64, alpha_high: f64) -> Result<Direction> {
    check_thresholds(alpha_low, alpha_high)?;
    Ok(if acc > alpha_high {
        Direction::Harder
    } else if acc < alpha_low {
        Direction::Easier
    } else {
        Direction::None
    })
}

pub fn summarize_errors(group: &TrajectoryGroup, evals: &[StepEvaluation]) -> CriticSummary {
    let mut flagged_steps = BTreeMap::new();
    for ev in evals {
        let negatives = ev.labels.iter().filter(|&&l| l == -1).count();
        if negatives > 0 {
            *flagged_steps.entry(ev.step_index).or_insert(0) += negatives;
        }
    }
    CriticSummary {
        task_id: group.task_id.clone(),
        flagged_steps,
        total_rollouts: group.trajectories.len(),
    }
}

/// Strict acceptance window for a proposal.
pub fn gate_predicate(
    direction: Direction,
    acc_original: f64,
    acc_proposed: f64,
    alpha_low: f64,
    alpha_high: f64,
) -> bool {
    match direction {
        Direction::Harder => alpha_low < acc_proposed && acc_proposed < acc_original,
        Direction::Easier => acc_original < acc_proposed && acc_proposed < alpha_high,
        Direction::None => false,
    }
}

pub fn gate(proposal: &mut AdaptationProposal, acc_proposed: f64, alpha_low: f64, alpha_high: f64) -> Verdict {
    let ok = gate_predicate(
        proposal.direction,
        proposal.acc_original,
        acc_proposed,
        alpha_low,
        alpha_high,
    );
    proposal.acc_proposed = Some(acc_proposed);
    proposal.verdict = if ok { Verdict::Accepted } else { Verdict::Rejected };
    proposal.verdict
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPool {
    pub active: Vec<TaskSpec>,
    pub pending: Vec<AdaptationProposal>,
    pub accepted_log: Vec<AcceptedRecord>,
}

impl TaskPool {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            t.validate()?;
            if !seen.insert(t.task_id.clone()) {
                return Err(Error::Argument(format!("duplicate task id {}", t.task_id)));
            }
        }
        Ok(TaskPool {
            active: tasks,
            ..Default::default()
        })
    }

    pub fn has_pending(&self, task_id: &str) -> bool {
        self.pending.iter().any(|p| p.original.task_id == task_id)
    }

    pub fn is_active(&self, task_id: &str) -> bool {
        self.active.iter().any(|t| t.task_id == task_id)
    }

    /// Builds a variant of `task` and queues it. Returns `None` when the task
    /// is saturated in that direction.
    pub fn propose(
        &mut self,
        task: &TaskSpec,
        direction: Direction,
        acc_original: f64,
        summary: &CriticSummary,
        step: usize,
        seed: u64,
    ) -> Result<Option<&AdaptationProposal>> {
        if self.has_pending(&task.task_id) {
            return Err(Error::State(format!(
                "task {} already has a pending proposal",
                task.task_id
            )));
        }
        let proposed = match perturb_task(task, direction, summary, seed) {
            Ok(t) => t,
            Err(Error::Saturation(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        self.pending.push(AdaptationProposal {
            original: task.clone(),
            proposed,
            direction,
            acc_original,
            acc_proposed: None,
            verdict: Verdict::Pending,
            created_step: step,
        });
        Ok(self.pending.last())
    }

    /// Applies a resolved proposal; returns the newly accepted task, if any.
    pub fn commit(
        &mut self,
        step: usize,
        proposal: &AdaptationProposal,
        alpha_low: f64,
        alpha_high: f64,
    ) -> Result<Option<TaskSpec>> {
        if proposal.verdict == Verdict::Pending {
            return Err(Error::State(format!(
                "proposal for {} not gated yet",
                proposal.original.task_id
            )));
        }
        self.pending.retain(|p| p.original.task_id != proposal.original.task_id);
        if proposal.verdict == Verdict::Rejected {
            return Ok(None);
        }
        let slot = self
            .active
            .iter()
            .position(|t| t.task_id == proposal.original.task_id)
            .ok_or_else(|| Error::State(format!("task {} not in the active set", proposal.original.task_id)))?;
        self.active[slot] = proposal.proposed.clone();
        self.accepted_log.push(AcceptedRecord {
            step,
            direction: proposal.direction,
            acc_original: proposal.acc_original,
            acc_proposed: proposal.acc_proposed.unwrap_or(f64::NAN),
            alpha_low,
            alpha_high,
            original: proposal.original.clone(),
            proposed: proposal.proposed.clone(),
        });
        Ok(Some(proposal.proposed.clone()))
    }

    /// Gates and commits every pending proposal made before `step`.
    ///
    /// `acc_by_task` holds this step's accuracies keyed by task id. The
    /// proposal's `acc_original` is refreshed from it when the original was
    /// rolled out again, and a proposal whose original has moved back inside
    /// the band (or across it) is rejected. Returns the accepted tasks.
    pub fn resolve_pending(
        &mut self,
        step: usize,
        acc_by_task: &HashMap<String, f64>,
        alpha_low: f64,
        alpha_high: f64,
    ) -> Result<Vec<TaskSpec>> {
        let due: Vec<AdaptationProposal> = self.pending.iter().filter(|p| p.created_step < step).cloned().collect();
        let mut accepted = Vec::new();
        for mut p in due {
            let acc = *acc_by_task
                .get(&p.proposed.task_id)
                .ok_or_else(|| Error::State(format!("no rollouts for proposed task {}", p.proposed.task_id)))?;
            if let Some(&fresh) = acc_by_task.get(&p.original.task_id) {
                p.acc_original = fresh;
            }
            if decide_direction(p.acc_original, alpha_low, alpha_high)? == p.direction {
                gate(&mut p, acc, alpha_low, alpha_high);
            } else {
                p.acc_proposed = Some(acc);
                p.verdict = Verdict::Rejected;
            }
            if let Some(t) = self.commit(step, &p, alpha_low, alpha_high)? {
                accepted.push(t);
            }
        }
        Ok(accepted)
    }
}

pub fn write_accepted_log(path: &std::path::Path, records: &[AcceptedRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_accepted_log(path: &std::path::Path) -> Result<Vec<AcceptedRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Re-checks every logged acceptance; returns one message per violation.
pub fn replay_violations(records: &[AcceptedRecord]) -> Vec<String> {
    let mut out = Vec::new();
    let mut last_step = 0;
    for (k, r) in records.iter().enumerate() {
        if !gate_predicate(r.direction, r.acc_original, r.acc_proposed, r.alpha_low, r.alpha_high) {
            out.push(format!(
                "record {k}: {} {} -> {} fails the {} gate",
                r.original.task_id, r.acc_original, r.acc_proposed, r.direction
            ));
        }
        if r.proposed.parent_id.as_deref() != Some(r.original.task_id.as_str()) {
            out.push(format!(
                "record {k}: proposed task is not a child of {}",
                r.original.task_id
            ));
        }
        if r.step < last_step {
            out.push(format!("record {k}: step {} precedes {}", r.step, last_step));
        }
        last_step = r.step;
    }
    out
}
