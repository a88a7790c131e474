//! Reward arithmetic: the integrated step reward, the consistency reward that
//! supervises the reward model, and the two group standardizations.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TrajectoryGroup;
use crate::reward_model::StepEvaluation;

/// Groups with a population standard deviation below this are zeroed.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub r_value: f64,
    pub outcome_part: f64,
    pub step_part: f64,
    pub lambda: f64,
}

fn label_sum(labels: &[i8]) -> f64 {
    labels.iter().map(|&l| f64::from(l)).sum()
}

/// `R = O + (λ/m) Σ_j S_j`.
pub fn integrated_step_reward(outcome: i8, labels: &[i8], lambda: f64) -> Result<StepReward> {
    if labels.is_empty() {
        return Err(Error::Argument("integrated reward needs at least one label".into()));
    }
    let outcome_part = f64::from(outcome);
    let step_part = lambda * label_sum(labels) / labels.len() as f64;
    Ok(StepReward {
        r_value: outcome_part + step_part,
        outcome_part,
        step_part,
        lambda,
    })
}

/// Reward for one evaluation: agreement between the step reward and the label.
pub fn consistency_reward(step_reward: f64, label: i8) -> f64 {
    step_reward * f64::from(label)
}

/// `(v - mean) / σ` with the population σ; all zeros when σ < [`MIN_STD`].
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd >= MIN_STD) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Integrated,
    OutcomeOnly,
    StepOnly,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integrated" => Ok(RewardMode::Integrated),
            "outcome_only" => Ok(RewardMode::OutcomeOnly),
            "step_only" => Ok(RewardMode::StepOnly),
            other => Err(Error::Argument(format!("unknown reward mode `{other}`"))),
        }
    }
}

pub fn reward_mode_select(mode: RewardMode, outcome: i8, labels: &[i8], lambda: f64) -> Result<f64> {
    let r = integrated_step_reward(outcome, labels, lambda)?;
    Ok(match mode {
        RewardMode::Integrated => r.r_value,
        RewardMode::OutcomeOnly => r.outcome_part,
        RewardMode::StepOnly => r.step_part,
    })
}

/// How the policy reward and the reward-model target are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub mode: RewardMode,
    pub lambda_policy: f64,
    pub lambda_rm: f64,
}

impl RewardWeights {
    pub fn integrated(lambda: f64) -> Self {
        RewardWeights {
            mode: RewardMode::Integrated,
            lambda_policy: lambda,
            lambda_rm: lambda,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    /// (trajectory, step) → A^π
    pub policy_advantages: BTreeMap<(usize, usize), f64>,
    /// (trajectory, step, j) → A^r
    pub rm_advantages: BTreeMap<(usize, usize, usize), f64>,
}

impl AdvantageSet {
    pub fn mean_abs_policy(&self) -> f64 {
        if self.policy_advantages.is_empty() {
            return 0.0;
        }
        self.policy_advantages.values().map(|a| a.abs()).sum::<f64>() / self.policy_advantages.len() as f64
    }
}

pub fn build_advantages(group: &TrajectoryGroup, evals: &[StepEvaluation], lambda: f64) -> Result<AdvantageSet> {
    build_advantages_with(group, evals, &RewardWeights::integrated(lambda))
}

/// Policy advantages standardize the step reward across trajectories at the
/// same step index; reward-model advantages standardize `R · S_j` across the
/// `m` labels of each step.
pub fn build_advantages_with(
    group: &TrajectoryGroup,
    evals: &[StepEvaluation],
    weights: &RewardWeights,
) -> Result<AdvantageSet> {
    let index: HashMap<(usize, usize), &StepEvaluation> =
        evals.iter().map(|e| ((e.trajectory_index, e.step_index), e)).collect();
    let m = evals.first().map(|e| e.labels.len());
    let lookup = |t: usize, i: usize| -> Result<&StepEvaluation> {
        let ev = index.get(&(t, i)).copied().ok_or_else(|| {
            Error::Consistency(format!("no evaluation for {} trajectory {t} step {i}", group.task_id))
        })?;
        if Some(ev.labels.len()) != m {
            return Err(Error::Consistency(format!(
                "evaluation for {} trajectory {t} step {i} has {} labels, expected {}",
                group.task_id,
                ev.labels.len(),
                m.unwrap_or(0)
            )));
        }
        Ok(ev)
    };

    let mut out = AdvantageSet::default();
    let max_len = group.trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    for i in 0..max_len {
        let mut members = Vec::new();
        let mut rewards = Vec::new();
        for (t, traj) in group.trajectories.iter().enumerate() {
            if i < traj.steps.len() {
                let ev = lookup(t, i)?;
                members.push(t);
                rewards.push(reward_mode_select(
                    weights.mode,
                    traj.outcome,
                    &ev.labels,
                    weights.lambda_policy,
                )?);
            }
        }
        let adv = if members.len() < 2 {
            vec![0.0; members.len()]
        } else {
            standardize(&rewards)
        };
        for (t, a) in members.into_iter().zip(adv) {
            out.policy_advantages.insert((t, i), a);
        }
    }

    for (t, traj) in group.trajectories.iter().enumerate() {
        for i in 0..traj.steps.len() {
            let ev = lookup(t, i)?;
            let r = integrated_step_reward(traj.outcome, &ev.labels, weights.lambda_rm)?.r_value;
            let consistency: Vec<f64> = ev.labels.iter().map(|&s| consistency_reward(r, s)).collect();
            for (j, a) in standardize(&consistency).into_iter().enumerate() {
                out.rm_advantages.insert((t, i, j), a);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_env::{observe, StepRecord, TaskSpec, Trajectory};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn integrated_reward_examples() {
        assert!(close(
            integrated_step_reward(1, &[1, 1, -1], 1.0).unwrap().r_value,
            4.0 / 3.0
        ));
        assert!(close(
            integrated_step_reward(-1, &[-1, -1, -1], 1.0).unwrap().r_value,
            -2.0
        ));
        assert!(close(
            integrated_step_reward(1, &[1, 1, -1], 4.0).unwrap().r_value,
            7.0 / 3.0
        ));
        assert!(matches!(integrated_step_reward(1, &[], 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn consistency_examples() {
        assert!(close(consistency_reward(4.0 / 3.0, -1), -4.0 / 3.0));
        assert_eq!(consistency_reward(0.0, 1), 0.0);
        assert_eq!(consistency_reward(0.0, -1), 0.0);
        assert_eq!(consistency_reward(-2.0, -1), 2.0);
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[2.0, -2.0]), vec![1.0, -1.0]);
        assert_eq!(standardize(&[1.0, 1.0, 1.0]), vec![0.0; 3]);
        // mean 2, population σ = √(2/3).
        let sd = (2.0f64 / 3.0).sqrt();
        let got = standardize(&[1.0, 2.0, 3.0]);
        for (g, e) in got.iter().zip([-1.0 / sd, 0.0, 1.0 / sd]) {
            assert!(close(*g, e));
        }
        assert!((got[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn reward_modes() {
        assert_eq!(
            reward_mode_select(RewardMode::OutcomeOnly, 1, &[-1, -1, 1], 1.0).unwrap(),
            1.0
        );
        assert!(close(
            reward_mode_select(RewardMode::StepOnly, 1, &[1, -1, -1], 1.0).unwrap(),
            -1.0 / 3.0
        ));
        assert!(close(
            reward_mode_select(RewardMode::Integrated, 1, &[1, 1, -1], 1.0).unwrap(),
            4.0 / 3.0
        ));
        assert!("bogus".parse::<RewardMode>().is_err());
    }

    fn traj(task: &TaskSpec, outcome: i8) -> Trajectory {
        Trajectory {
            task_id: task.task_id.clone(),
            steps: (0..task.length)
                .map(|i| StepRecord {
                    observation: observe(task, i).unwrap(),
                    action: 0,
                    correct: outcome == 1,
                })
                .collect(),
            outcome,
        }
    }

    fn eval(t: usize, i: usize, labels: &[i8]) -> StepEvaluation {
        StepEvaluation {
            task_id: "g".into(),
            trajectory_index: t,
            step_index: i,
            labels: labels.to_vec(),
            label_probs: vec![0.5; labels.len()],
            evidence: vec![],
        }
    }

    #[test]
    fn policy_advantages_standardize_per_step() {
        let task = TaskSpec::new("g", 2, vec![0]).unwrap();
        let group = TrajectoryGroup {
            task_id: "g".into(),
            trajectories: vec![traj(&task, 1), traj(&task, -1)],
        };
        // R = 1 + 1 = 2 and -1 - 1 = -2.
        let evals = vec![eval(0, 0, &[1, 1, 1]), eval(1, 0, &[-1, -1, -1])];
        let adv = build_advantages(&group, &evals, 1.0).unwrap();
        assert_eq!(adv.policy_advantages[&(0, 0)], 1.0);
        assert_eq!(adv.policy_advantages[&(1, 0)], -1.0);
        for j in 0..3 {
            assert_eq!(adv.rm_advantages[&(0, 0, j)], 0.0);
        }
    }

    #[test]
    fn rm_advantages_for_split_labels() {
        let task = TaskSpec::new("g", 2, vec![0]).unwrap();
        let group = TrajectoryGroup {
            task_id: "g".into(),
            trajectories: vec![traj(&task, 1), traj(&task, 1)],
        };
        let evals = vec![eval(0, 0, &[1, 1, -1]), eval(1, 0, &[1, 1, 1])];
        let adv = build_advantages(&group, &evals, 1.0).unwrap();
        // consistency (4/3, 4/3, -4/3): mean 4/9, σ = (4/3)·(2√2/3).
        let c = [4.0 / 3.0, 4.0 / 3.0, -4.0 / 3.0];
        let mean = c.iter().sum::<f64>() / 3.0;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        for (j, v) in c.iter().enumerate() {
            assert!(close(adv.rm_advantages[&(0, 0, j)], (v - mean) / sd));
        }
        assert!(close(adv.rm_advantages[&(0, 0, 0)], std::f64::consts::FRAC_1_SQRT_2));
        assert!(close(adv.rm_advantages[&(0, 0, 2)], -std::f64::consts::SQRT_2));
    }

    #[test]
    fn short_trajectories_leave_singleton_groups_at_zero() {
        let long = TaskSpec::new("g", 2, vec![0, 0]).unwrap();
        let short = TaskSpec::new("g", 2, vec![0]).unwrap();
        let group = TrajectoryGroup {
            task_id: "g".into(),
            trajectories: vec![traj(&long, 1), traj(&short, -1)],
        };
        let evals = vec![eval(0, 0, &[1]), eval(0, 1, &[1]), eval(1, 0, &[-1])];
        let adv = build_advantages(&group, &evals, 1.0).unwrap();
        assert_eq!(adv.policy_advantages[&(0, 1)], 0.0);
        assert_eq!(adv.policy_advantages[&(0, 0)], 1.0);
    }

    #[test]
    fn missing_evaluation_named() {
        let task = TaskSpec::new("g", 2, vec![0, 1]).unwrap();
        let group = TrajectoryGroup {
            task_id: "g".into(),
            trajectories: vec![traj(&task, 1), traj(&task, 1)],
        };
        let evals = vec![eval(0, 0, &[1]), eval(0, 1, &[1]), eval(1, 0, &[1])];
        match build_advantages(&group, &evals, 1.0) {
            Err(Error::Consistency(msg)) => assert!(msg.contains("trajectory 1 step 1")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn standardize_is_affine_invariant(
            v in prop::collection::vec(-100.0f64..100.0, 2..20),
            a in 0.01f64..50.0,
            b in -50.0f64..50.0,
        ) {
            let base = standardize(&v);
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let got = standardize(&moved);
            let all_zero = base.iter().all(|x| *x == 0.0);
            if !all_zero {
                for (x, y) in base.iter().zip(&got) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn standardize_moments(v in prop::collection::vec(-100.0f64..100.0, 1..20)) {
            let s = standardize(&v);
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(s.iter().all(|x| *x == 0.0) || (var - 1.0).abs() < 1e-9);
        }

        #[test]
        fn integrated_reward_monotone(
            o in prop::sample::select(vec![-1i8, 1]),
            labels in prop::collection::vec(prop::sample::select(vec![-1i8, 1]), 1..8),
            lambda in 0.01f64..10.0,
            flip in 0usize..8,
        ) {
            let base = integrated_step_reward(o, &labels, lambda).unwrap();
            prop_assert!((base.r_value - base.outcome_part - base.step_part).abs() < 1e-12);
            prop_assert!(base.step_part.abs() <= lambda + 1e-12);
            let k = flip % labels.len();
            if labels[k] == -1 {
                let mut up = labels.clone();
                up[k] = 1;
                prop_assert!(integrated_step_reward(o, &up, lambda).unwrap().r_value > base.r_value);
            }
            if o == -1 {
                prop_assert!(integrated_step_reward(1, &labels, lambda).unwrap().r_value > base.r_value);
            }
        }

        #[test]
        fn unanimous_labels_give_zero_rm_advantage(
            o in prop::sample::select(vec![-1i8, 1]),
            s in prop::sample::select(vec![-1i8, 1]),
            m in 1usize..6,
            lambda in 0.1f64..5.0,
        ) {
            let r = integrated_step_reward(o, &vec![s; m], lambda).unwrap().r_value;
            let c: Vec<f64> = (0..m).map(|_| consistency_reward(r, s)).collect();
            prop_assert!(standardize(&c).iter().all(|x| *x == 0.0));
        }
    }
}
