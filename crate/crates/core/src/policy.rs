//! Linear-softmax policy over step actions.
//!
//! Logits for action `a < arity` are `x · W[:, a]`, plus a learned gain on the
//! hinted action when the step carries a hint. Rollouts draw from per-step
//! counter streams so a trajectory depends only on its key, never on the
//! order in which trajectories are produced.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, StreamKey};
use crate::surrogate::{clipped_slope, clipped_term, UpdateConfig};
use crate::task_env::{compute_outcome, observe, run_step, StepRecord, TaskSpec, Trajectory, FEATURE_DIM, K_MAX};

/// Below this temperature sampling is replaced by argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    /// Row-major `FEATURE_DIM × K_MAX`.
    pub weights: Vec<f64>,
    pub hint_gain: f64,
}

impl PolicyWeights {
    pub fn zeros() -> Self {
        PolicyWeights {
            weights: vec![0.0; FEATURE_DIM * K_MAX],
            hint_gain: 0.0,
        }
    }

    #[inline]
    pub fn at(&self, feature: usize, action: usize) -> f64 {
        self.weights[feature * K_MAX + action]
    }

    pub fn logits(&self, feature: &[f64], arity: usize, hint: Option<usize>) -> Vec<f64> {
        let mut z = vec![0.0; arity];
        for (f, &xf) in feature.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &self.weights[f * K_MAX..f * K_MAX + arity];
            for (zb, &w) in z.iter_mut().zip(row) {
                *zb += xf * w;
            }
        }
        if let Some(h) = hint {
            if h < arity {
                z[h] += self.hint_gain;
            }
        }
        z
    }

    pub fn probs(&self, feature: &[f64], arity: usize, hint: Option<usize>) -> Result<Vec<f64>> {
        softmax(&self.logits(feature, arity, hint), 1.0)
    }

    fn all_finite(&self) -> bool {
        self.hint_gain.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub current: PolicyWeights,
    pub step_count: u64,
    /// Reference weights for the ratio and KL terms; refreshed after each update.
    pub snapshot: Option<PolicyWeights>,
}

impl PolicyParams {
    /// Uniform over unhinted steps; hinted actions get `exp(hint_gain)` odds.
    pub fn initial(hint_gain: f64) -> Self {
        let mut current = PolicyWeights::zeros();
        current.hint_gain = hint_gain;
        PolicyParams {
            current,
            step_count: 0,
            snapshot: None,
        }
    }

    pub fn reference(&self) -> &PolicyWeights {
        self.snapshot.as_ref().unwrap_or(&self.current)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PolicyFile {
            feature_dim: FEATURE_DIM,
            action_arity_max: K_MAX,
            weights: self.current.weights.clone(),
            hint_gain: self.current.hint_gain,
            step_count: self.step_count,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        if file.feature_dim != FEATURE_DIM || file.action_arity_max != K_MAX {
            return Err(Error::Config(format!(
                "policy shape {}x{} does not match {FEATURE_DIM}x{K_MAX}",
                file.feature_dim, file.action_arity_max
            )));
        }
        if file.weights.len() != FEATURE_DIM * K_MAX {
            return Err(Error::Config(format!("policy has {} weights", file.weights.len())));
        }
        let current = PolicyWeights {
            weights: file.weights,
            hint_gain: file.hint_gain,
        };
        if !current.all_finite() {
            return Err(Error::Numeric("policy file holds non-finite weights".into()));
        }
        Ok(PolicyParams {
            current,
            step_count: file.step_count,
            snapshot: None,
        })
    }
}

/// On-disk layout: flat weights behind a shape header.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    feature_dim: usize,
    action_arity_max: usize,
    weights: Vec<f64>,
    hint_gain: f64,
    step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryGroup {
    pub fn accuracy(&self) -> f64 {
        let wins = self.trajectories.iter().filter(|t| t.succeeded()).count();
        wins as f64 / self.trajectories.len() as f64
    }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = a;
        }
    }
    best
}

pub fn sample_trajectory(
    params: &PolicyWeights,
    task: &TaskSpec,
    temperature: f64,
    seed: u64,
    trajectory_index: usize,
) -> Result<Trajectory> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let key = StreamKey::new(seed)
        .with(tag::ROLLOUT)
        .with_str(&task.task_id)
        .with(trajectory_index as u64);
    let mut steps = Vec::with_capacity(task.length);
    for i in 0..task.length {
        let observation = observe(task, i)?;
        let z = params.logits(&observation.task_feature, task.action_arity, observation.hint_value);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite logits on {} step {i}",
                task.task_id
            )));
        }
        let action = if temperature < ARGMAX_TEMPERATURE {
            argmax(&z)
        } else {
            let u: f64 = key.with(i as u64).rng().gen();
            draw(&softmax(&z, temperature)?, u)
        };
        let (correct, _) = run_step(task, i, action)?;
        steps.push(StepRecord {
            observation,
            action,
            correct,
        });
    }
    let correct: Vec<bool> = steps.iter().map(|s| s.correct).collect();
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        outcome: compute_outcome(task, &correct)?,
        steps,
    })
}

pub fn sample_group(
    params: &PolicyWeights,
    task: &TaskSpec,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<TrajectoryGroup> {
    if n < 2 {
        return Err(Error::Argument(format!("group size must be at least 2, got {n}")));
    }
    let trajectories = (0..n)
        .map(|j| sample_trajectory(params, task, temperature, seed, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryGroup {
        task_id: task.task_id.clone(),
        trajectories,
    })
}

/// One (state, action, advantage) triple for the policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub feature: Vec<f64>,
    pub arity: usize,
    pub hint: Option<usize>,
    pub action: usize,
    pub advantage: f64,
}

/// Gradient of `log π(a|s)` as `(dW, d hint_gain)`.
pub fn grad_log_prob(params: &PolicyWeights, sample: &PolicySample) -> Result<(Vec<f64>, f64)> {
    let p = params.probs(&sample.feature, sample.arity, sample.hint)?;
    let dz: Vec<f64> = (0..sample.arity)
        .map(|b| if b == sample.action { 1.0 } else { 0.0 } - p[b])
        .collect();
    let mut gw = vec![0.0; FEATURE_DIM * K_MAX];
    scatter(&mut gw, &sample.feature, &dz, 1.0);
    let gh = sample.hint.filter(|&h| h < sample.arity).map_or(0.0, |h| dz[h]);
    Ok((gw, gh))
}

pub fn log_prob(params: &PolicyWeights, sample: &PolicySample) -> Result<f64> {
    Ok(params.probs(&sample.feature, sample.arity, sample.hint)?[sample.action].ln())
}

fn scatter(grad: &mut [f64], feature: &[f64], dz: &[f64], scale: f64) {
    for (f, &xf) in feature.iter().enumerate() {
        if xf == 0.0 {
            continue;
        }
        let row = &mut grad[f * K_MAX..f * K_MAX + dz.len()];
        for (g, &d) in row.iter_mut().zip(dz) {
            *g += scale * xf * d;
        }
    }
}

fn kl(reference: &[f64], current: &[f64]) -> f64 {
    reference
        .iter()
        .zip(current)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

/// Batch-mean clipped surrogate minus `β · KL(π_ref ‖ π)`.
pub fn surrogate_objective(
    params: &PolicyWeights,
    reference: &PolicyWeights,
    batch: &[PolicySample],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let p = params.probs(&s.feature, s.arity, s.hint)?;
        let q = reference.probs(&s.feature, s.arity, s.hint)?;
        total += clipped_term(p[s.action] / q[s.action], s.advantage, clip_epsilon);
        if kl_beta != 0.0 {
            total -= kl_beta * kl(&q, &p);
        }
    }
    Ok(total / batch.len() as f64)
}

pub fn surrogate_gradient(
    params: &PolicyWeights,
    reference: &PolicyWeights,
    batch: &[PolicySample],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty policy batch".into()));
    }
    let mut gw = vec![0.0; FEATURE_DIM * K_MAX];
    let mut gh = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let p = params.probs(&s.feature, s.arity, s.hint)?;
        let q = if std::ptr::eq(params, reference) {
            p.clone()
        } else {
            reference.probs(&s.feature, s.arity, s.hint)?
        };
        let ratio = p[s.action] / q[s.action];
        let coef = clipped_slope(ratio, s.advantage, clip_epsilon) * ratio;
        let dz: Vec<f64> = (0..s.arity)
            .map(|b| {
                let onehot = if b == s.action { 1.0 } else { 0.0 };
                coef * (onehot - p[b]) + kl_beta * (q[b] - p[b])
            })
            .collect();
        scatter(&mut gw, &s.feature, &dz, scale);
        if let Some(h) = s.hint.filter(|&h| h < s.arity) {
            gh += scale * dz[h];
        }
    }
    if gh.is_nan() || gw.iter().any(|g| g.is_nan()) {
        return Err(Error::Numeric("NaN in policy gradient".into()));
    }
    Ok((gw, gh))
}

/// One ascent step on the surrogate, then refresh the snapshot.
pub fn policy_update(params: &PolicyParams, batch: &[PolicySample], cfg: &UpdateConfig) -> Result<PolicyParams> {
    if batch.is_empty() {
        return Err(Error::Argument("empty policy batch".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    let (gw, gh) = surrogate_gradient(
        &params.current,
        params.reference(),
        batch,
        cfg.clip_epsilon,
        cfg.kl_beta,
    )?;
    let mut next = params.current.clone();
    for (w, g) in next.weights.iter_mut().zip(&gw) {
        *w += cfg.learning_rate * g;
    }
    next.hint_gain += cfg.learning_rate * gh;
    if !next.all_finite() {
        return Err(Error::Numeric("policy weights became non-finite".into()));
    }
    Ok(PolicyParams {
        snapshot: Some(next.clone()),
        current: next,
        step_count: params.step_count + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_env::TaskSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(rng: &mut ChaCha8Rng, scale: f64) -> PolicyWeights {
        PolicyWeights {
            weights: (0..FEATURE_DIM * K_MAX).map(|_| rng.gen_range(-scale..scale)).collect(),
            hint_gain: rng.gen_range(-1.0..2.0),
        }
    }

    fn random_sample(rng: &mut ChaCha8Rng) -> PolicySample {
        let arity = rng.gen_range(2..=K_MAX);
        PolicySample {
            feature: (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            arity,
            hint: if rng.gen_bool(0.5) {
                Some(rng.gen_range(0..arity))
            } else {
                None
            },
            action: rng.gen_range(0..arity),
            advantage: rng.gen_range(-2.0..2.0),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_weights_sample_uniformly() {
        let task = TaskSpec::new("u", 4, vec![0]).unwrap();
        let w = PolicyWeights::zeros();
        let mut counts = [0usize; 4];
        for j in 0..10_000 {
            counts[sample_trajectory(&w, &task, 1.0, 11, j).unwrap().steps[0].action] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        // 3 dof, p = 0.01 critical value.
        assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let task = TaskSpec::new("g", 4, vec![2, 1]).unwrap();
        let mut w = PolicyWeights::zeros();
        // Bias row drives action 2 at every step.
        w.weights[crate::task_env::BIAS_SLOT * K_MAX + 2] = 0.3;
        for j in 0..50 {
            let t = sample_trajectory(&w, &task, 1e-9, 3, j).unwrap();
            assert!(t.steps.iter().all(|s| s.action == 2));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let task = TaskSpec::new("d", 5, vec![0, 1, 2, 3, 4]).unwrap();
        let w = PolicyWeights::zeros();
        let a = sample_group(&w, &task, 8, 1.0, 42).unwrap();
        let b = sample_group(&w, &task, 8, 1.0, 42).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.trajectories.len(), 8);
        assert!(matches!(sample_group(&w, &task, 1, 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(
            sample_trajectory(&w, &task, 0.0, 0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_advantage_leaves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PolicyParams {
            current: random_weights(&mut rng, 0.3),
            step_count: 0,
            snapshot: None,
        };
        let batch: Vec<_> = (0..10)
            .map(|_| PolicySample {
                advantage: 0.0,
                ..random_sample(&mut rng)
            })
            .collect();
        let next = policy_update(&params, &batch, &UpdateConfig::vanilla(0.1)).unwrap();
        assert_eq!(next.current, params.current);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn single_sample_step_is_lr_times_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&mut rng, 0.3);
        let mut s = random_sample(&mut rng);
        s.advantage = 1.0;
        s.hint = Some(0);
        let params = PolicyParams {
            current: w.clone(),
            step_count: 0,
            snapshot: None,
        };
        let lr = 0.05;
        let next = policy_update(&params, std::slice::from_ref(&s), &UpdateConfig::vanilla(lr)).unwrap();
        let h = 1e-5;
        for idx in [0, 17, 5 * K_MAX + 1, 40 * K_MAX + s.action] {
            let mut plus = w.clone();
            plus.weights[idx] += h;
            let mut minus = w.clone();
            minus.weights[idx] -= h;
            let fd = (log_prob(&plus, &s).unwrap() - log_prob(&minus, &s).unwrap()) / (2.0 * h);
            let delta = (next.current.weights[idx] - w.weights[idx]) / lr;
            if fd.abs() > 1e-9 {
                assert!(rel_err(delta, fd) < 1e-4, "idx {idx}: {delta} vs {fd}");
            }
        }
    }

    #[test]
    fn clipped_kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random_weights(&mut rng, 0.3);
        let mut current = reference.clone();
        for w in current.weights.iter_mut() {
            *w += rng.gen_range(-0.05..0.05);
        }
        let batch: Vec<_> = (0..6).map(|_| random_sample(&mut rng)).collect();
        let (gw, gh) = surrogate_gradient(&current, &reference, &batch, 0.2, 0.01).unwrap();
        let h = 1e-5;
        for idx in (0..FEATURE_DIM * K_MAX).step_by(37) {
            let mut plus = current.clone();
            plus.weights[idx] += h;
            let mut minus = current.clone();
            minus.weights[idx] -= h;
            let fd = (surrogate_objective(&plus, &reference, &batch, 0.2, 0.01).unwrap()
                - surrogate_objective(&minus, &reference, &batch, 0.2, 0.01).unwrap())
                / (2.0 * h);
            assert!(
                (fd - gw[idx]).abs() < 1e-6 + 1e-4 * fd.abs(),
                "idx {idx}: {} vs {fd}",
                gw[idx]
            );
        }
        let mut plus = current.clone();
        plus.hint_gain += h;
        let mut minus = current.clone();
        minus.hint_gain -= h;
        let fd = (surrogate_objective(&plus, &reference, &batch, 0.2, 0.01).unwrap()
            - surrogate_objective(&minus, &reference, &batch, 0.2, 0.01).unwrap())
            / (2.0 * h);
        assert!((fd - gh).abs() < 1e-6 + 1e-4 * fd.abs());
    }

    #[test]
    fn probabilities_sum_to_one_under_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&mut rng, 1.0);
        for _ in 0..100 {
            let s = random_sample(&mut rng);
            let p = w.probs(&s.feature, s.arity, s.hint).unwrap();
            assert_eq!(p.len(), s.arity);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let task = TaskSpec::new("n", 3, vec![0]).unwrap();
        let mut w = PolicyWeights::zeros();
        w.weights[crate::task_env::BIAS_SLOT * K_MAX] = f64::NAN;
        assert!(matches!(
            sample_trajectory(&w, &task, 1.0, 0, 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn params_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams {
            current: random_weights(&mut rng, 1.0),
            step_count: 7,
            snapshot: None,
        };
        let back = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let bad = p.to_json().unwrap().replace("\"feature_dim\":48", "\"feature_dim\":47");
        assert!(matches!(PolicyParams::from_json(&bad), Err(Error::Config(_))));
    }
}
