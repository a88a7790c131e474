//! Synthetic multi-step chain tasks.
//!
//! A task asks the policy to reproduce a hidden target sequence of `length`
//! actions, each drawn from `action_arity` choices. A trajectory succeeds when
//! at least `required_correct` steps match. Hinted steps reveal their target
//! to the policy. Difficulty is tuned by arity, length, the success threshold
//! and the hint mask, and `perturb_task` moves a task along those axes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptation::CriticSummary;
use crate::error::{Error, Result};
use crate::rng::{tag, StreamKey};

/// Largest action arity a task may reach.
pub const K_MAX: usize = 16;
/// Largest task length.
pub const L_MAX: usize = 24;
/// One-hot slots for the step index.
pub const STEP_SLOTS: usize = 24;
/// length / L_MAX, arity / K_MAX, hint bit, bias.
pub const N_SCALARS: usize = 4;
pub const CONTEXT_DIM: usize = 20;
pub const FEATURE_DIM: usize = STEP_SLOTS + N_SCALARS + CONTEXT_DIM;

pub const SCALAR_OFFSET: usize = STEP_SLOTS;
pub const HINT_SLOT: usize = STEP_SLOTS + 2;
pub const BIAS_SLOT: usize = STEP_SLOTS + 3;
pub const CONTEXT_OFFSET: usize = STEP_SLOTS + N_SCALARS;
/// Standard deviation of each context component.
pub const CONTEXT_SCALE: f64 = 0.5;

/// Separator between a lineage root and the mutation suffix in task ids.
pub const LINEAGE_SEP: char = '~';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    None,
    Harder,
    Easier,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::None => "none",
            Direction::Harder => "harder",
            Direction::Easier => "easier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub parent_id: Option<String>,
    pub length: usize,
    pub action_arity: usize,
    pub target_sequence: Vec<usize>,
    pub hint_mask: Vec<bool>,
    pub required_correct: usize,
    pub generation: u32,
    pub direction_of_last_mutation: Direction,
}

impl TaskSpec {
    /// Root task with no hints and `required_correct = length`.
    pub fn new(task_id: impl Into<String>, action_arity: usize, target_sequence: Vec<usize>) -> Result<Self> {
        let length = target_sequence.len();
        let task = TaskSpec {
            task_id: task_id.into(),
            parent_id: None,
            length,
            action_arity,
            target_sequence,
            hint_mask: vec![false; length],
            required_correct: length,
            generation: 0,
            direction_of_last_mutation: Direction::None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_hints(mut self, hinted: &[usize]) -> Result<Self> {
        for &i in hinted {
            if i >= self.length {
                return Err(Error::Range(format!(
                    "hint index {i} outside task of length {}",
                    self.length
                )));
            }
            self.hint_mask[i] = true;
        }
        Ok(self)
    }

    pub fn with_required(mut self, required_correct: usize) -> Result<Self> {
        self.required_correct = required_correct;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(format!("task {}: {msg}", self.task_id)));
        if self.length == 0 || self.length > L_MAX {
            return bad(format!("length {} outside [1, {L_MAX}]", self.length));
        }
        if self.action_arity < 2 || self.action_arity > K_MAX {
            return bad(format!("action_arity {} outside [2, {K_MAX}]", self.action_arity));
        }
        if self.target_sequence.len() != self.length || self.hint_mask.len() != self.length {
            return bad("target_sequence and hint_mask must have `length` entries".into());
        }
        if let Some(t) = self.target_sequence.iter().find(|&&t| t >= self.action_arity) {
            return bad(format!("target {t} not below arity {}", self.action_arity));
        }
        if self.required_correct == 0 || self.required_correct > self.length {
            return bad(format!(
                "required_correct {} outside [1, {}]",
                self.required_correct, self.length
            ));
        }
        if self.parent_id.is_none() && self.generation != 0 {
            return bad("root task must have generation 0".into());
        }
        if self.parent_id.is_some() && self.generation == 0 {
            return bad("derived task must have generation >= 1".into());
        }
        Ok(())
    }

    pub fn hint_count(&self) -> usize {
        self.hint_mask.iter().filter(|&&h| h).count()
    }

    /// The root segment of the task id. Mutated descendants share it, and
    /// with it their per-step context vectors.
    pub fn lineage_root(&self) -> &str {
        lineage_root(&self.task_id)
    }

    fn check_step(&self, step_index: usize) -> Result<()> {
        if step_index >= self.length {
            return Err(Error::Range(format!(
                "step {step_index} outside task {} of length {}",
                self.task_id, self.length
            )));
        }
        Ok(())
    }
}

pub fn lineage_root(task_id: &str) -> &str {
    task_id.split(LINEAGE_SEP).next().unwrap_or(task_id)
}

pub fn load_tasks(path: &std::path::Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path)?;
    let tasks: Vec<TaskSpec> = serde_json::from_str(&text)?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

pub fn save_tasks(path: &std::path::Path, tasks: &[TaskSpec]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(tasks)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: usize,
    pub task_feature: Vec<f64>,
    pub hint_value: Option<usize>,
}

pub fn observe(task: &TaskSpec, step_index: usize) -> Result<Observation> {
    let task_feature = feature_encode(task, step_index)?;
    Ok(Observation {
        step_index,
        task_feature,
        hint_value: task.hint_mask[step_index].then(|| task.target_sequence[step_index]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub outcome: i8,
}

impl Trajectory {
    pub fn correct_bits(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.correct).collect()
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == 1
    }
}

/// Per-step context vector; a pure function of (lineage root, step index).
pub fn context_vector(task_id: &str, step_index: usize) -> Vec<f64> {
    let mut rng = StreamKey::new(tag::CONTEXT)
        .with_str(lineage_root(task_id))
        .with(step_index as u64)
        .rng();
    (0..CONTEXT_DIM)
        .map(|_| CONTEXT_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn feature_encode(task: &TaskSpec, step_index: usize) -> Result<Vec<f64>> {
    task.check_step(step_index)?;
    let mut x = vec![0.0; FEATURE_DIM];
    x[step_index.min(STEP_SLOTS - 1)] = 1.0;
    x[SCALAR_OFFSET] = task.length as f64 / L_MAX as f64;
    x[SCALAR_OFFSET + 1] = task.action_arity as f64 / K_MAX as f64;
    x[HINT_SLOT] = if task.hint_mask[step_index] { 1.0 } else { 0.0 };
    x[BIAS_SLOT] = 1.0;
    x[CONTEXT_OFFSET..].copy_from_slice(&context_vector(&task.task_id, step_index));
    Ok(x)
}

/// Returns `(correct, done)`.
pub fn run_step(task: &TaskSpec, step_index: usize, action: usize) -> Result<(bool, bool)> {
    task.check_step(step_index)?;
    if action >= task.action_arity {
        return Err(Error::Range(format!(
            "action {action} outside arity {} of task {}",
            task.action_arity, task.task_id
        )));
    }
    Ok((
        action == task.target_sequence[step_index],
        step_index + 1 == task.length,
    ))
}

pub fn compute_outcome(task: &TaskSpec, correct: &[bool]) -> Result<i8> {
    if correct.len() != task.length {
        return Err(Error::State(format!(
            "trajectory on {} has {} of {} steps",
            task.task_id,
            correct.len(),
            task.length
        )));
    }
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(if hits >= task.required_correct { 1 } else { -1 })
}

/// Exact success probability when hinted steps are solved independently with
/// probability `p_hinted` and the rest with `p_free`.
pub fn success_probability(task: &TaskSpec, p_hinted: f64, p_free: f64) -> f64 {
    let mut dist = vec![1.0];
    for &h in &task.hint_mask {
        let p = if h { p_hinted } else { p_free };
        let mut next = vec![0.0; dist.len() + 1];
        for (k, &w) in dist.iter().enumerate() {
            next[k] += w * (1.0 - p);
            next[k + 1] += w * p;
        }
        dist = next;
    }
    dist[task.required_correct..].iter().sum()
}

fn ceil_third(n: usize) -> usize {
    n.div_ceil(3)
}

/// Child task one notch harder or easier, guided by where the critic saw
/// failures.
///
/// Easier: hint the most-flagged unhinted steps (at most ⌈T/3⌉), falling back
/// to the lowest unhinted index when no flagged step is available; once every
/// step is hinted, lower `required_correct`. Harder: clear the least-flagged
/// hint, else raise the arity, else append a step (raising `required_correct`
/// with it so the slack is unchanged).
pub fn perturb_task(task: &TaskSpec, direction: Direction, summary: &CriticSummary, seed: u64) -> Result<TaskSpec> {
    let mut child = task.clone();
    let flags = |i: usize| summary.flagged_steps.get(&i).copied().unwrap_or(0);
    match direction {
        Direction::None => return Err(Error::Argument("perturb_task needs a direction".into())),
        Direction::Easier => {
            let unhinted: Vec<usize> = (0..task.length).filter(|&i| !task.hint_mask[i]).collect();
            if unhinted.is_empty() {
                if task.required_correct <= 1 {
                    return Err(Error::Saturation(format!("task {} cannot get easier", task.task_id)));
                }
                child.required_correct -= 1;
            } else {
                let mut flagged: Vec<usize> = unhinted.iter().copied().filter(|&i| flags(i) > 0).collect();
                flagged.sort_by_key(|&i| (std::cmp::Reverse(flags(i)), i));
                flagged.truncate(ceil_third(task.length));
                if flagged.is_empty() {
                    flagged.push(unhinted[0]);
                }
                for i in flagged {
                    child.hint_mask[i] = true;
                }
            }
        }
        Direction::Harder => {
            let hinted = (0..task.length)
                .filter(|&i| task.hint_mask[i])
                .min_by_key(|&i| (flags(i), i));
            if let Some(i) = hinted {
                child.hint_mask[i] = false;
            } else if task.action_arity < K_MAX {
                child.action_arity += 1;
            } else if task.length < L_MAX {
                let mut rng = StreamKey::new(seed).with(tag::PERTURB).with_str(&task.task_id).rng();
                child.target_sequence.push(rng.gen_range(0..task.action_arity));
                child.hint_mask.push(false);
                child.length += 1;
                child.required_correct += 1;
            } else {
                return Err(Error::Saturation(format!("task {} cannot get harder", task.task_id)));
            }
        }
    }
    child.generation = task.generation + 1;
    child.parent_id = Some(task.task_id.clone());
    child.direction_of_last_mutation = direction;
    let code = if direction == Direction::Harder { 'h' } else { 'e' };
    child.task_id = format!("{}{LINEAGE_SEP}{}{code}", task.lineage_root(), child.generation);
    child.validate()?;
    Ok(child)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn flag_map(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    fn task6() -> TaskSpec {
        TaskSpec::new("t0", 4, vec![3, 1, 0, 2, 3, 1]).unwrap()
    }

    fn summary(pairs: &[(usize, usize)]) -> CriticSummary {
        CriticSummary {
            task_id: "t0".into(),
            flagged_steps: flag_map(pairs),
            total_rollouts: 8,
        }
    }

    #[test]
    fn hint_component_is_set() {
        let t = task6().with_hints(&[2]).unwrap();
        assert_eq!(feature_encode(&t, 2).unwrap()[HINT_SLOT], 1.0);
        assert_eq!(feature_encode(&t, 1).unwrap()[HINT_SLOT], 0.0);
        assert_eq!(observe(&t, 2).unwrap().hint_value, Some(0));
        assert_eq!(observe(&t, 1).unwrap().hint_value, None);
    }

    #[test]
    fn features_are_deterministic() {
        let t = task6();
        assert_eq!(feature_encode(&t, 3).unwrap(), feature_encode(&t, 3).unwrap());
        assert_eq!(feature_encode(&t, 3).unwrap().len(), FEATURE_DIM);
    }

    #[test]
    fn context_differs_by_task_id() {
        let a = task6();
        let mut b = task6();
        b.task_id = "t1".into();
        let fa = feature_encode(&a, 0).unwrap();
        let fb = feature_encode(&b, 0).unwrap();
        // Recompute both streams directly.
        let oracle = |id: &str| {
            let mut rng = StreamKey::new(tag::CONTEXT).with_str(id).with(0).rng();
            (0..CONTEXT_DIM)
                .map(|_| CONTEXT_SCALE * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        };
        assert_eq!(&fa[CONTEXT_OFFSET..], oracle("t0").as_slice());
        assert_eq!(&fb[CONTEXT_OFFSET..], oracle("t1").as_slice());
        assert_ne!(&fa[CONTEXT_OFFSET..], &fb[CONTEXT_OFFSET..]);
        assert_eq!(&fa[..CONTEXT_OFFSET], &fb[..CONTEXT_OFFSET]);
    }

    #[test]
    fn descendants_share_context() {
        let t = task6();
        let child = perturb_task(&t, Direction::Easier, &summary(&[(1, 2)]), 0).unwrap();
        assert_eq!(child.lineage_root(), "t0");
        assert_eq!(context_vector(&t.task_id, 1), context_vector(&child.task_id, 1));
    }

    #[test]
    fn step_range_errors() {
        let t = task6();
        assert!(matches!(feature_encode(&t, 6), Err(Error::Range(_))));
        assert!(matches!(run_step(&t, 0, 4), Err(Error::Range(_))));
        assert!(matches!(run_step(&t, 6, 0), Err(Error::Range(_))));
    }

    #[test]
    fn run_step_semantics() {
        let t = task6();
        assert_eq!(run_step(&t, 0, 3).unwrap(), (true, false));
        assert_eq!(run_step(&t, 0, 0).unwrap(), (false, false));
        assert!(run_step(&t, 5, 0).unwrap().1);
    }

    #[test]
    fn outcome_threshold() {
        let t4 = TaskSpec::new("a", 4, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(compute_outcome(&t4, &[true; 4]).unwrap(), 1);
        assert_eq!(compute_outcome(&t4, &[true, true, false, true]).unwrap(), -1);
        let t6 = task6().with_required(4).unwrap();
        assert_eq!(
            compute_outcome(&t6, &[true, false, true, true, false, true]).unwrap(),
            1
        );
        assert!(matches!(compute_outcome(&t6, &[true; 3]), Err(Error::State(_))));
    }

    #[test]
    fn easier_hints_flagged_steps() {
        let child = perturb_task(&task6(), Direction::Easier, &summary(&[(1, 2), (3, 5)]), 0).unwrap();
        let hinted: Vec<usize> = (0..6).filter(|&i| child.hint_mask[i]).collect();
        assert_eq!(hinted, vec![1, 3]);
        assert_eq!(child.generation, 1);
        assert_eq!(child.parent_id.as_deref(), Some("t0"));
        assert_eq!(child.direction_of_last_mutation, Direction::Easier);
    }

    #[test]
    fn easier_caps_new_hints_at_third() {
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, 1 + i % 3)).collect();
        let child = perturb_task(&task6(), Direction::Easier, &summary(&pairs), 0).unwrap();
        // counts: 0->1 1->2 2->3 3->1 4->2 5->3; top two: 2, 5.
        let hinted: Vec<usize> = (0..6).filter(|&i| child.hint_mask[i]).collect();
        assert_eq!(hinted, vec![2, 5]);
    }

    #[test]
    fn easier_when_fully_hinted_lowers_threshold() {
        let t = task6().with_hints(&[0, 1, 2, 3, 4, 5]).unwrap();
        let child = perturb_task(&t, Direction::Easier, &summary(&[]), 0).unwrap();
        assert_eq!(child.required_correct, 5);
        let mut floor = t.with_required(1).unwrap();
        floor.task_id = "f".into();
        assert!(matches!(
            perturb_task(&floor, Direction::Easier, &summary(&[]), 0),
            Err(Error::Saturation(_))
        ));
    }

    #[test]
    fn harder_clears_least_flagged_hint() {
        let t = task6().with_hints(&[0]).unwrap();
        let child = perturb_task(&t, Direction::Harder, &summary(&[]), 0).unwrap();
        assert_eq!(child.hint_count(), 0);
        let t2 = task6().with_hints(&[1, 4]).unwrap();
        let child2 = perturb_task(&t2, Direction::Harder, &summary(&[(1, 3)]), 0).unwrap();
        assert!(child2.hint_mask[1] && !child2.hint_mask[4]);
    }

    #[test]
    fn harder_raises_arity_then_length() {
        let child = perturb_task(&task6(), Direction::Harder, &summary(&[]), 0).unwrap();
        assert_eq!(child.action_arity, 5);
        let mut t = TaskSpec::new("w", K_MAX, vec![0; 3]).unwrap();
        t.required_correct = 2;
        let grown = perturb_task(&t, Direction::Harder, &summary(&[]), 9).unwrap();
        assert_eq!((grown.length, grown.required_correct), (4, 3));
        assert_eq!(grown.hint_mask, vec![false; 4]);
        let sat = TaskSpec::new("s", K_MAX, vec![0; L_MAX]).unwrap();
        assert!(matches!(
            perturb_task(&sat, Direction::Harder, &summary(&[]), 0),
            Err(Error::Saturation(_))
        ));
    }

    #[test]
    fn closed_form_success_matches_enumeration() {
        let t = TaskSpec::new("e", 3, vec![0, 1, 2, 0])
            .unwrap()
            .with_hints(&[1])
            .unwrap()
            .with_required(3)
            .unwrap();
        let (ph, pf) = (0.9, 1.0 / 3.0);
        let mut total = 0.0;
        for mask in 0..16u32 {
            let mut p = 1.0;
            for i in 0..4 {
                let q = if t.hint_mask[i] { ph } else { pf };
                p *= if mask >> i & 1 == 1 { q } else { 1.0 - q };
            }
            if mask.count_ones() >= 3 {
                total += p;
            }
        }
        assert!((success_probability(&t, ph, pf) - total).abs() < 1e-15);
    }

    #[test]
    fn task_json_field_names() {
        let v = serde_json::to_value(task6()).unwrap();
        for key in [
            "task_id",
            "parent_id",
            "length",
            "action_arity",
            "target_sequence",
            "hint_mask",
            "required_correct",
            "generation",
            "direction_of_last_mutation",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["direction_of_last_mutation"], "none");
    }
}
