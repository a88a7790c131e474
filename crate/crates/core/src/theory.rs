//! Numerical checks of the reward-precision and objective-decomposition
//! results.
//!
//! * [`exact_precision`] convolves the per-label difference distribution to
//!   get `P(mean S⁺ > mean S⁻)` exactly, which [`verify_theorem1`] compares
//!   with the Hoeffding lower bound over a grid.
//! * [`mc_objective_identity`] estimates the reward model's expected
//!   consistency reward twice from shared rollouts: once by sampling labels
//!   as training does, once through the closed-form importance-weight
//!   decomposition.
//! * [`weight_ratio_curve`] tracks `‖f₊‖ / ‖f₋‖` as task difficulty moves.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_trajectory, PolicyWeights};
use crate::reward_model::{build_evidence, sigmoid, RMParams};
use crate::rng::{tag, StreamKey};
use crate::task_env::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionQuery {
    pub p_plus: f64,
    pub p_minus: f64,
    pub m: usize,
}

impl PrecisionQuery {
    pub fn new(p_plus: f64, p_minus: f64, m: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_plus) || !(0.0..=1.0).contains(&p_minus) || m == 0 {
            return Err(Error::Argument(format!(
                "invalid precision query ({p_plus}, {p_minus}, {m})"
            )));
        }
        Ok(PrecisionQuery { p_plus, p_minus, m })
    }

    pub fn mu(&self) -> f64 {
        self.p_plus + self.p_minus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    /// `P(Σ X_j > 0)`
    pub a_strict: f64,
    /// `P(Σ X_j = 0)`
    pub p_tie: f64,
    /// `P(Σ X_j < 0)`
    pub p_below: f64,
}

/// Distribution of `K = #{X_j = +2} − #{X_j = −2}` over `[-m, m]`, index `K + m`.
pub fn difference_distribution(q: &PrecisionQuery) -> Vec<f64> {
    let up = q.p_plus * q.p_minus;
    let down = (1.0 - q.p_plus) * (1.0 - q.p_minus);
    let stay = q.p_plus * (1.0 - q.p_minus) + q.p_minus * (1.0 - q.p_plus);
    let m = q.m;
    let mut dist = vec![0.0; 2 * m + 1];
    dist[m] = 1.0;
    for step in 0..m {
        let mut next = vec![0.0; 2 * m + 1];
        // Support after `step` draws is [m - step, m + step].
        for k in (m - step)..=(m + step) {
            let w = dist[k];
            if w == 0.0 {
                continue;
            }
            next[k + 1] += w * up;
            next[k] += w * stay;
            next[k - 1] += w * down;
        }
        dist = next;
    }
    dist
}

pub fn exact_precision(q: &PrecisionQuery) -> Precision {
    let dist = difference_distribution(q);
    let m = q.m;
    Precision {
        a_strict: dist[m + 1..].iter().sum(),
        p_tie: dist[m],
        p_below: dist[..m].iter().sum(),
    }
}

/// `1 − exp(−m (μ − 1)² / 4)`, defined for `μ > 1`.
pub fn hoeffding_bound(mu: f64, m: usize) -> Result<f64> {
    if !(mu > 1.0) {
        return Err(Error::Domain(format!("Hoeffding bound needs mu > 1, got {mu}")));
    }
    Ok(1.0 - (-(m as f64) * (mu - 1.0).powi(2) / 4.0).exp())
}

pub const DEFAULT_M_GRID: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub p_plus: f64,
    pub p_minus: f64,
    pub m: usize,
    pub mu: f64,
    pub a_strict: f64,
    pub p_tie: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    pub violations: Vec<String>,
    pub max_symmetry_error: f64,
}

impl Theorem1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `p₊, p₋ ∈ {0.1, …, 0.9}`.
pub fn default_probability_grid() -> Vec<(f64, f64)> {
    let ps: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    ps.iter().flat_map(|&a| ps.iter().map(move |&b| (a, b))).collect()
}

const MU_EPS: f64 = 1e-12;

/// Checks, for each `(p₊, p₋)` pair along `m_grid` (sorted ascending):
/// the Hoeffding bound whenever μ > 1; monotone growth toward 1 with
/// `𝒜(m_max) > 0.999` once μ ≥ 1.2; `𝒜(m_max) < 0.001` once μ ≤ 0.8; and the
/// exact symmetry `𝒜 = (1 − P_tie)/2` at μ = 1.
pub fn verify_theorem1(pairs: &[(f64, f64)], m_grid: &[usize]) -> Result<Theorem1Report> {
    if pairs.is_empty() || m_grid.is_empty() {
        return Err(Error::Argument("empty theorem-1 grid".into()));
    }
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let mut max_symmetry_error: f64 = 0.0;
    let m_max = *m_grid.iter().max().unwrap_or(&1);
    for &(pp, pm) in pairs {
        let mu = pp + pm;
        let mut prev: Option<f64> = None;
        for &m in m_grid {
            let q = PrecisionQuery::new(pp, pm, m)?;
            let prec = exact_precision(&q);
            let bound = if mu > 1.0 + MU_EPS {
                Some(hoeffding_bound(mu, m)?)
            } else {
                None
            };
            if let Some(b) = bound {
                if prec.a_strict < b {
                    violations.push(format!("({pp}, {pm}, m={m}): A = {} below bound {b}", prec.a_strict));
                }
                if let Some(p) = prev {
                    if prec.a_strict < p - 1e-12 {
                        violations.push(format!("({pp}, {pm}): A fell from {p} to {} at m={m}", prec.a_strict));
                    }
                }
            }
            if (mu - 1.0).abs() <= MU_EPS {
                let err = (prec.a_strict - (1.0 - prec.p_tie) / 2.0).abs();
                max_symmetry_error = max_symmetry_error.max(err);
                if err > 1e-12 {
                    violations.push(format!("({pp}, {pm}, m={m}): symmetry error {err}"));
                }
            }
            if m == m_max {
                if mu >= 1.2 - MU_EPS && prec.a_strict <= 0.999 {
                    violations.push(format!("({pp}, {pm}): A({m}) = {} not above 0.999", prec.a_strict));
                }
                if mu <= 0.8 + MU_EPS && prec.a_strict >= 0.001 {
                    violations.push(format!("({pp}, {pm}): A({m}) = {} not below 0.001", prec.a_strict));
                }
            }
            prev = Some(prec.a_strict);
            rows.push(Theorem1Row {
                p_plus: pp,
                p_minus: pm,
                m,
                mu,
                a_strict: prec.a_strict,
                p_tie: prec.p_tie,
                bound,
            });
        }
    }
    Ok(Theorem1Report {
        rows,
        violations,
        max_symmetry_error,
    })
}

/// Outcome-conditioned weights `1 + 2λ·p_old − λ` and whether both are ≥ 0.
pub fn lambda_conditions(lambda: f64, p_old_plus: f64, p_old_minus: f64) -> (f64, f64, bool) {
    let fp = 1.0 + 2.0 * lambda * p_old_plus - lambda;
    let fm = 1.0 + 2.0 * lambda * p_old_minus - lambda;
    (fp, fm, fp >= 0.0 && fm >= 0.0)
}

/// Checks the weight formulas on a λ × p grid against the closed threshold
/// `p ≥ (λ − 1) / 2λ`. Returns violations.
pub fn verify_remark1(lambdas: &[f64], steps: usize) -> Vec<String> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        let threshold = (lambda - 1.0) / (2.0 * lambda);
        for k in 0..=steps {
            let p = k as f64 / steps as f64;
            let (fp, fm, valid) = lambda_conditions(lambda, p, p);
            let expect = p >= threshold - 1e-12;
            if valid != expect && (p - threshold).abs() > 1e-9 {
                out.push(format!("λ={lambda}, p={p}: valid={valid}, expected {expect}"));
            }
            if (fp - fm).abs() > 0.0 {
                out.push(format!("λ={lambda}, p={p}: weights differ for equal inputs"));
            }
            if p >= 0.5 && !valid {
                out.push(format!("λ={lambda}, p={p}: better-than-chance labeler invalid"));
            }
            if (lambda - 1.0).abs() < 1e-15 && (fp - 2.0 * p).abs() > 1e-12 {
                out.push(format!("λ=1, p={p}: weight {fp} is not 2p"));
            }
        }
    }
    out
}

/// Sampling set-up shared by the Monte-Carlo estimators.
#[derive(Debug, Clone)]
pub struct MonteCarloSetup {
    pub tasks: Vec<TaskSpec>,
    pub policy: PolicyWeights,
    pub rm: RMParams,
    pub lambda: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs_estimate: f64,
    pub rhs_estimate: f64,
    pub c_constant: f64,
    pub n_samples: usize,
    pub rel_error: f64,
    /// Standard error of the paired per-trajectory difference.
    pub std_error: f64,
    pub low_sample_warning: bool,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    lhs: f64,
    rhs: f64,
    c: f64,
    diff_sq: f64,
    steps: usize,
    wins: usize,
    f_plus_sq: f64,
    f_minus_sq: f64,
}

impl Sums {
    fn add(mut self, o: Sums) -> Sums {
        self.lhs += o.lhs;
        self.rhs += o.rhs;
        self.c += o.c;
        self.diff_sq += o.diff_sq;
        self.steps += o.steps;
        self.wins += o.wins;
        self.f_plus_sq += o.f_plus_sq;
        self.f_minus_sq += o.f_minus_sq;
        self
    }
}

const CHUNK: usize = 4096;

fn accumulate(setup: &MonteCarloSetup, task: &TaskSpec, t: usize) -> Result<Sums> {
    let rm = &setup.rm;
    let old = rm.reference();
    let traj = sample_trajectory(&setup.policy, task, 1.0, setup.seed, t)?;
    let labels = StreamKey::new(setup.seed)
        .with(tag::MC)
        .with_str(&task.task_id)
        .with(t as u64);
    let mut s = Sums {
        wins: usize::from(traj.succeeded()),
        ..Sums::default()
    };
    let (mut lhs_t, mut rhs_t) = (0.0, 0.0);
    for i in 0..traj.steps.len() {
        let e = build_evidence(task, &traj, t, i, rm.evidence_noise, setup.seed)?;
        let p = rm.p_positive(&e);
        let p_old = sigmoid(old.iter().zip(&e).map(|(w, x)| w * x).sum());
        let mut rng = labels.with(i as u64).rng();
        let sign = |u: f64, prob: f64| if u < prob { 1.0 } else { -1.0 };
        let s_j = sign(rng.gen(), p);
        let old_mean = (0..rm.m).map(|_| sign(rng.gen(), p_old)).sum::<f64>() / rm.m as f64;
        let outcome = f64::from(traj.outcome);
        let lhs = s_j * (outcome + setup.lambda * old_mean);
        // E[S_j (O + λ E_old S)] = 2 p_c F − F with p_c the probability of
        // the outcome-consistent label and F the matching weight.
        let (f_plus, f_minus, _) = lambda_conditions(setup.lambda, p_old, 1.0 - p_old);
        let (p_c, weight) = if traj.outcome == 1 {
            (p, f_plus)
        } else {
            (1.0 - p, f_minus)
        };
        let rhs = 2.0 * p_c * weight - weight;
        s.lhs += lhs;
        s.rhs += rhs;
        s.c -= weight;
        s.steps += 1;
        if traj.outcome == 1 {
            s.f_plus_sq += p_old * p_old;
        } else {
            s.f_minus_sq += (1.0 - p_old) * (1.0 - p_old);
        }
        lhs_t += lhs;
        rhs_t += rhs;
    }
    s.diff_sq = (lhs_t - rhs_t).powi(2);
    Ok(s)
}

fn run_mc(setup: &MonteCarloSetup, tasks: &[TaskSpec], n: usize) -> Result<Sums> {
    if tasks.is_empty() {
        return Err(Error::Argument("no tasks to sample".into()));
    }
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Result<Sums>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Sums::default();
            for t in c * CHUNK..((c + 1) * CHUNK).min(n) {
                acc = acc.add(accumulate(setup, &tasks[t % tasks.len()], t / tasks.len())?);
            }
            Ok(acc)
        })
        .collect();
    partial.into_iter().try_fold(Sums::default(), |a, b| Ok(a.add(b?)))
}

/// Paired Monte-Carlo check of the consistency-objective decomposition.
///
/// The left side samples one label from the current model and `m` labels
/// from the snapshot to form the step reward, matching the objective the
/// decomposition is derived from. The right side plugs the closed-form label
/// probabilities at each sampled evidence point into `2⟨p, f⟩ + C`, which
/// is `4⟨p, f⟩ + C` with `f = p_old · 𝟙(O)` at λ = 1. `n_samples` counts
/// trajectories, spread round-robin over the tasks.
pub fn mc_objective_identity(setup: &MonteCarloSetup) -> Result<IdentityReport> {
    if setup.n_samples == 0 {
        return Err(Error::Argument("n_samples must be positive".into()));
    }
    let s = run_mc(setup, &setup.tasks, setup.n_samples)?;
    let steps = s.steps as f64;
    let lhs = s.lhs / steps;
    let rhs = s.rhs / steps;
    let n = setup.n_samples as f64;
    // Per-trajectory paired differences, normalised to a per-step mean.
    let mean_diff_t = (s.lhs - s.rhs) / n;
    let var_t = (s.diff_sq / n - mean_diff_t * mean_diff_t).max(0.0);
    let std_error = (var_t / n).sqrt() * n / steps;
    Ok(IdentityReport {
        lhs_estimate: lhs,
        rhs_estimate: rhs,
        c_constant: s.c / steps,
        n_samples: setup.n_samples,
        rel_error: (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-9),
        std_error,
        low_sample_warning: setup.n_samples < 10_000,
        success_rate: s.wins as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub task_id: String,
    pub success_rate: f64,
    pub n_success: usize,
    pub n_fail: usize,
    pub norm_plus: f64,
    pub norm_minus: f64,
    /// `+inf` when no failing trajectory was sampled.
    pub ratio: f64,
}

/// `‖f₊‖ / ‖f₋‖` per task, with `f₊ = p_old(+1) 𝟙(O = 1)` and
/// `f₋ = p_old(−1) 𝟙(O = −1)` over sampled steps.
pub fn weight_ratio_curve(setup: &MonteCarloSetup) -> Result<Vec<RatioRow>> {
    setup
        .tasks
        .iter()
        .map(|task| {
            let s = run_mc(setup, std::slice::from_ref(task), setup.n_samples)?;
            let steps = s.steps as f64;
            let norm_plus = (s.f_plus_sq / steps).sqrt();
            let norm_minus = (s.f_minus_sq / steps).sqrt();
            let ratio = if norm_minus == 0.0 {
                f64::INFINITY
            } else {
                norm_plus / norm_minus
            };
            Ok(RatioRow {
                task_id: task.task_id.clone(),
                success_rate: s.wins as f64 / setup.n_samples as f64,
                n_success: s.wins,
                n_fail: setup.n_samples - s.wins,
                norm_plus,
                norm_minus,
                ratio,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyParams;
    use crate::reward_model::EVIDENCE_DIM;
    use proptest::prelude::*;

    /// Direct sum over (a, b, c) compositions of m: a twos, b zeros, c minus-twos.
    fn enumerate(pp: f64, pm: f64, m: usize) -> (f64, f64) {
        let up = pp * pm;
        let down = (1.0 - pp) * (1.0 - pm);
        let stay = 1.0 - up - down;
        let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
        let (mut above, mut tie) = (0.0, 0.0);
        for a in 0..=m {
            for c in 0..=(m - a) {
                let b = m - a - c;
                let w = fact(m) / (fact(a) * fact(b) * fact(c))
                    * up.powi(a as i32)
                    * stay.powi(b as i32)
                    * down.powi(c as i32);
                if a > c {
                    above += w;
                } else if a == c {
                    tie += w;
                }
            }
        }
        (above, tie)
    }

    #[test]
    fn spot_value_matches_enumeration() {
        let q = PrecisionQuery::new(0.8, 0.7, 3).unwrap();
        let p = exact_precision(&q);
        let (above, tie) = enumerate(0.8, 0.7, 3);
        assert!((p.a_strict - above).abs() < 1e-12);
        assert!((p.p_tie - tie).abs() < 1e-12);
        let terms = 0.242592 + 0.357504 + 0.175616 + 0.056448;
        assert!((p.a_strict - terms).abs() < 1e-12);
        assert!((p.a_strict - 0.83216).abs() < 1e-12);
    }

    #[test]
    fn perfect_labeler() {
        for m in [1, 7, 64] {
            let p = exact_precision(&PrecisionQuery::new(1.0, 1.0, m).unwrap());
            assert_eq!((p.a_strict, p.p_tie), (1.0, 0.0));
        }
    }

    #[test]
    fn fair_labeler_symmetry() {
        for m in 1..40 {
            let p = exact_precision(&PrecisionQuery::new(0.5, 0.5, m).unwrap());
            assert!((p.a_strict - (1.0 - p.p_tie) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hoeffding_values() {
        assert!((hoeffding_bound(1.5, 16).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((hoeffding_bound(2.0, 1).unwrap() - 0.221199).abs() < 1e-6);
        assert!((hoeffding_bound(1.01, 1).unwrap() - 2.5e-5).abs() < 1e-8);
        assert!(matches!(hoeffding_bound(1.0, 3), Err(Error::Domain(_))));
        assert!(matches!(hoeffding_bound(0.6, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn spot_row_bound_and_low_mu() {
        let p = exact_precision(&PrecisionQuery::new(0.8, 0.7, 3).unwrap());
        let b = hoeffding_bound(1.5, 3).unwrap();
        assert!((b - (1.0 - (-0.1875f64).exp())).abs() < 1e-15);
        assert!((b - 0.17097).abs() < 1e-5);
        assert!(p.a_strict >= b);
        let low = exact_precision(&PrecisionQuery::new(0.3, 0.3, 256).unwrap());
        assert!(low.a_strict < 0.001);
    }

    #[test]
    fn default_grid_passes() {
        let rep = verify_theorem1(&default_probability_grid(), &DEFAULT_M_GRID).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        assert_eq!(rep.rows.len(), 81 * 9);
    }

    #[test]
    fn weight_threshold_examples() {
        let (f, _, ok) = lambda_conditions(1.0, 0.3, 0.9);
        assert!((f - 0.6).abs() < 1e-15 && ok);
        let (f, _, ok) = lambda_conditions(4.0, 0.5, 0.5);
        assert!((f - 1.0).abs() < 1e-15 && ok);
        let (f, _, ok) = lambda_conditions(4.0, 0.3, 0.9);
        assert!((f + 0.6).abs() < 1e-12 && !ok);
        assert!(verify_remark1(&[0.25, 0.5, 1.0, 2.0, 4.0, 10.0], 200).is_empty());
    }

    proptest! {
        #[test]
        fn distribution_is_normalised_and_symmetric(pp in 0.0f64..=1.0, pm in 0.0f64..=1.0, m in 1usize..=256) {
            let a = exact_precision(&PrecisionQuery::new(pp, pm, m).unwrap());
            let b = exact_precision(&PrecisionQuery::new(pm, pp, m).unwrap());
            prop_assert!((a.a_strict + a.p_tie + a.p_below - 1.0).abs() < 1e-12);
            prop_assert!((a.a_strict - b.a_strict).abs() < 1e-12);
            prop_assert!((a.p_tie - b.p_tie).abs() < 1e-12);
        }

        #[test]
        fn hoeffding_monotone(mu in 1.001f64..2.0, dmu in 0.0f64..0.5, m in 1usize..200, dm in 0usize..50) {
            let base = hoeffding_bound(mu, m).unwrap();
            prop_assert!(hoeffding_bound(mu, m + dm).unwrap() >= base);
            prop_assert!(hoeffding_bound((mu + dmu).min(2.0), m).unwrap() >= base);
        }
    }

    fn fair_rm() -> RMParams {
        RMParams::new(vec![0.0; EVIDENCE_DIM], 0.15, 3).unwrap()
    }

    #[test]
    fn fair_rm_identity_is_exact_in_expectation() {
        // p = 1/2 everywhere: LHS mean is 0 for any outcome; RHS is
        // 4·(1/4) − 2·(1/2) = 0 identically.
        let task = TaskSpec::new("b", 2, vec![0, 1, 0]).unwrap().with_required(2).unwrap();
        let setup = MonteCarloSetup {
            tasks: vec![task],
            policy: PolicyWeights::zeros(),
            rm: fair_rm(),
            lambda: 1.0,
            n_samples: 20_000,
            seed: 3,
        };
        let rep = mc_objective_identity(&setup).unwrap();
        assert_eq!(rep.rhs_estimate, 0.0);
        assert!((rep.c_constant + 1.0).abs() < 1e-12);
        // LHS has per-step sd ≤ 2 over 60 000 steps.
        assert!(rep.lhs_estimate.abs() < 4.0 * rep.std_error.max(2.0 / 60_000f64.sqrt()));
        assert!(!rep.low_sample_warning);
    }

    #[test]
    fn always_failing_policy_has_no_plus_weight() {
        let task = TaskSpec::new("h", 16, vec![3, 5, 7, 9, 11, 13]).unwrap();
        let setup = MonteCarloSetup {
            tasks: vec![task],
            policy: PolicyParams::initial(0.0).current,
            rm: RMParams::initial(1.5, 0.15, 3).unwrap(),
            lambda: 1.0,
            n_samples: 2_000,
            seed: 1,
        };
        let rows = weight_ratio_curve(&setup).unwrap();
        assert_eq!(rows[0].n_success, 0);
        assert_eq!(rows[0].norm_plus, 0.0);
        assert_eq!(rows[0].ratio, 0.0);
        assert!(mc_objective_identity(&setup).unwrap().low_sample_warning);
    }

    #[test]
    fn always_succeeding_policy_gives_infinite_ratio() {
        let task = TaskSpec::new("e", 4, vec![1, 2, 3])
            .unwrap()
            .with_hints(&[0, 1, 2])
            .unwrap();
        let setup = MonteCarloSetup {
            tasks: vec![task],
            policy: PolicyParams::initial(60.0).current,
            rm: RMParams::initial(1.5, 0.15, 3).unwrap(),
            lambda: 1.0,
            n_samples: 500,
            seed: 1,
        };
        let rows = weight_ratio_curve(&setup).unwrap();
        assert_eq!(rows[0].n_fail, 0);
        assert!(rows[0].ratio.is_infinite());
    }
}
