//! Report-producing checks behind the `verify` subcommands.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::coding::{remark2_equivalence, synth_coding_instance, CodingParams};
use crate::error::Result;
use crate::policy::PolicyParams;
use crate::reward_model::{RMParams, CHANNEL_RIGHT, CHANNEL_WRONG, EVIDENCE_DIM};
use crate::rng::{tag, StreamKey};
use crate::task_env::{TaskSpec, FEATURE_DIM};
use crate::theory::{
    default_probability_grid, exact_precision, hoeffding_bound, mc_objective_identity, verify_remark1, verify_theorem1,
    weight_ratio_curve, IdentityReport, MonteCarloSetup, PrecisionQuery, RatioRow, DEFAULT_M_GRID,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check: String,
    pub passed: bool,
    pub failures: Vec<String>,
    pub details: serde_json::Value,
}

impl VerifyReport {
    fn new(check: &str, failures: Vec<String>, details: serde_json::Value) -> Self {
        VerifyReport {
            check: check.to_string(),
            passed: failures.is_empty(),
            failures,
            details,
        }
    }

    pub fn text(&self) -> String {
        let mut out = format!("{}: {}\n", self.check, if self.passed { "PASS" } else { "FAIL" });
        for f in &self.failures {
            out.push_str(&format!("  violation: {f}\n"));
        }
        out
    }
}

/// Full probability grid × `m ∈ {1, 2, 4, …, 256}` plus the spot values.
pub fn thm1() -> Result<VerifyReport> {
    let rep = verify_theorem1(&default_probability_grid(), &DEFAULT_M_GRID)?;
    let mut failures = rep.violations.clone();
    let spot = exact_precision(&PrecisionQuery::new(0.8, 0.7, 3)?);
    if (spot.a_strict - 0.83216).abs() > 1e-12 {
        failures.push(format!("A(0.8, 0.7, 3) = {}", spot.a_strict));
    }
    let h = hoeffding_bound(1.5, 16)?;
    if (h - (1.0 - (-1.0f64).exp())).abs() > 1e-12 {
        failures.push(format!("bound(1.5, 16) = {h}"));
    }
    let mid = exact_precision(&PrecisionQuery::new(0.8, 0.7, 256)?).a_strict;
    let low = exact_precision(&PrecisionQuery::new(0.3, 0.3, 256)?).a_strict;
    Ok(VerifyReport::new(
        "thm1",
        failures,
        json!({
            "rows": rep.rows.len(),
            "max_symmetry_error": rep.max_symmetry_error,
            "spot_a_strict": spot.a_strict,
            "a_strict_mu_1_5_m256": mid,
            "a_strict_mu_0_6_m256": low,
            "table": rep.rows,
        }),
    ))
}

/// Fixed reward model used by the identity checks: small random feature
/// weights plus a clear correctness channel.
pub fn reference_rm() -> Result<RMParams> {
    let mut rng = StreamKey::new(0x5eed).with(tag::MC).rng();
    let mut w: Vec<f64> = (0..EVIDENCE_DIM)
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    w[CHANNEL_WRONG] = -1.5;
    w[CHANNEL_RIGHT] = 1.5;
    debug_assert_eq!(w.len(), FEATURE_DIM + 2);
    RMParams::new(w, 0.15, 3)
}

fn family(prefix: &str, arity: usize, length: usize, required: usize, count: usize) -> Result<Vec<TaskSpec>> {
    (0..count)
        .map(|c| {
            let targets = (0..length).map(|i| (i * 7 + c * 3 + 1) % arity).collect();
            TaskSpec::new(format!("{prefix}{c}"), arity, targets)?.with_required(required)
        })
        .collect()
}

/// Balanced (success ≈ 1/2), hard (≈ 0.05) and easy (≈ 0.94) task families
/// under the initial policy.
pub fn identity_families() -> Result<Vec<(&'static str, Vec<TaskSpec>)>> {
    Ok(vec![
        ("balanced", family("bal", 2, 3, 2, 4)?),
        ("hard", family("hard", 4, 4, 3, 4)?),
        ("easy", family("easy", 2, 4, 1, 4)?),
    ])
}

/// Tasks for the weight-ratio sweep, from near-certain failure to
/// near-certain success.
pub fn ratio_sweep() -> Result<Vec<TaskSpec>> {
    Ok(vec![
        family("r-hard", 8, 6, 4, 1)?.remove(0),
        family("r-bal", 2, 3, 2, 1)?.remove(0),
        family("r-easy", 2, 10, 1, 1)?.remove(0),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Outcome {
    pub identities: Vec<(String, IdentityReport)>,
    pub ratios: Vec<RatioRow>,
}

/// Identity at λ = 1 on the three families, then the ratio sweep.
pub fn thm2_outcome(n_samples: usize, seed: u64) -> Result<Thm2Outcome> {
    let policy = PolicyParams::initial(2.0).current;
    let rm = reference_rm()?;
    let mut identities = Vec::new();
    for (name, tasks) in identity_families()? {
        let setup = MonteCarloSetup {
            tasks,
            policy: policy.clone(),
            rm: rm.clone(),
            lambda: 1.0,
            n_samples,
            seed,
        };
        identities.push((name.to_string(), mc_objective_identity(&setup)?));
    }
    let setup = MonteCarloSetup {
        tasks: ratio_sweep()?,
        policy,
        rm,
        lambda: 1.0,
        n_samples: (n_samples / 10).max(1000),
        seed,
    };
    Ok(Thm2Outcome {
        identities,
        ratios: weight_ratio_curve(&setup)?,
    })
}

pub fn thm2_failures(out: &Thm2Outcome) -> Vec<String> {
    let mut failures = Vec::new();
    for (name, rep) in &out.identities {
        if !(rep.rel_error < 0.03) {
            failures.push(format!(
                "{name}: rel_error {} (lhs {}, rhs {})",
                rep.rel_error, rep.lhs_estimate, rep.rhs_estimate
            ));
        }
    }
    if let [hard, bal, easy] = out.ratios.as_slice() {
        if !(hard.ratio < 0.1 * bal.ratio) {
            failures.push(format!(
                "hard ratio {} not below 0.1 x balanced {}",
                hard.ratio, bal.ratio
            ));
        }
        if !(easy.ratio > 10.0 * bal.ratio) {
            failures.push(format!(
                "easy ratio {} not above 10 x balanced {}",
                easy.ratio, bal.ratio
            ));
        }
    } else {
        failures.push("ratio sweep must have three rows".into());
    }
    failures
}

pub fn thm2(n_samples: usize, seed: u64) -> Result<VerifyReport> {
    let out = thm2_outcome(n_samples, seed)?;
    let failures = thm2_failures(&out);
    Ok(VerifyReport::new("thm2", failures, serde_json::to_value(&out)?))
}

pub fn remark1() -> Result<VerifyReport> {
    let lambdas = [0.25, 0.5, 1.0, 2.0, 4.0, 10.0];
    let failures = verify_remark1(&lambdas, 1000);
    let thresholds: Vec<(f64, f64)> = lambdas.iter().map(|&l| (l, (l - 1.0) / (2.0 * l))).collect();
    Ok(VerifyReport::new(
        "remark1",
        failures,
        json!({ "thresholds": thresholds }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingEquivSummary {
    pub instances: usize,
    pub degenerate: usize,
    pub max_deviation: f64,
    pub all_counts_exact: bool,
}

pub fn coding_equiv_summary(instances: usize, seed: u64) -> Result<CodingEquivSummary> {
    let params = CodingParams::default();
    let mut s = CodingEquivSummary {
        instances,
        degenerate: 0,
        max_deviation: 0.0,
        all_counts_exact: true,
    };
    for i in 0..instances {
        let inst = synth_coding_instance(&params, StreamKey::new(seed).with(i as u64).value())?;
        if inst.degenerate {
            s.degenerate += 1;
            continue;
        }
        let rep = remark2_equivalence(&inst)?;
        s.max_deviation = s.max_deviation.max(rep.max_deviation);
        s.all_counts_exact &= rep.counts_scale_exact;
    }
    Ok(s)
}

pub fn coding_equiv(instances: usize, seed: u64) -> Result<VerifyReport> {
    let s = coding_equiv_summary(instances, seed)?;
    let mut failures = Vec::new();
    if !(s.max_deviation < 1e-12) {
        failures.push(format!("max deviation {}", s.max_deviation));
    }
    if !s.all_counts_exact {
        failures.push("counts differ from N_ng x rates".into());
    }
    if s.degenerate as f64 >= 0.05 * instances as f64 {
        failures.push(format!("{} of {instances} instances degenerate", s.degenerate));
    }
    Ok(VerifyReport::new("coding_equiv", failures, serde_json::to_value(s)?))
}
