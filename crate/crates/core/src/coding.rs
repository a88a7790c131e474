//! Single-turn coding analogue: generated code solutions and generated unit
//! tests scored against a small set of ground-truth tests.
//!
//! Codes carry latent bug vectors; a unit test probes a subset of bug
//! dimensions and passes a code iff none of them is buggy. A code is gt when
//! it passes every ground-truth test; a generated test is gt when every gt
//! code passes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::standardize;
use crate::reward_model::sigmoid;
use crate::rng::{tag, StreamKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub code_id: String,
    #[serde(with = "bitstring")]
    pub verdicts_on_gt_uts: Vec<bool>,
    pub is_gt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTestSample {
    pub ut_id: String,
    /// Indexed like the code population; `true` means the code passes.
    #[serde(with = "bitstring")]
    pub verdicts_on_codes: Vec<bool>,
    pub is_gt: bool,
    pub detect_rate: f64,
    pub correctness: bool,
}

mod bitstring {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&bits.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("bad bit `{other}`"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingInstance {
    pub codes: Vec<CodeSample>,
    pub uts: Vec<UnitTestSample>,
    pub gt_ut_ids: Vec<String>,
    #[serde(default)]
    pub degenerate: bool,
}

impl CodingInstance {
    pub fn non_gt_count(&self) -> usize {
        self.codes.iter().filter(|c| !c.is_gt).count()
    }
}

/// Labels codes first (against the gt tests), then unit tests (against the
/// gt codes). Instances with no gt code or no non-gt code are flagged.
pub fn label_populations(
    codes: Vec<CodeSample>,
    uts: Vec<UnitTestSample>,
    gt_ut_ids: Vec<String>,
) -> Result<CodingInstance> {
    if gt_ut_ids.is_empty() {
        return Err(Error::Argument(
            "at least one ground-truth unit test is required".into(),
        ));
    }
    let mut codes = codes;
    for c in &mut codes {
        if c.verdicts_on_gt_uts.len() != gt_ut_ids.len() {
            return Err(Error::Argument(format!(
                "code {} has {} gt verdicts, expected {}",
                c.code_id,
                c.verdicts_on_gt_uts.len(),
                gt_ut_ids.len()
            )));
        }
        c.is_gt = c.verdicts_on_gt_uts.iter().all(|&v| v);
    }
    let n_gt = codes.iter().filter(|c| c.is_gt).count();
    let n_ng = codes.len() - n_gt;
    let mut uts = uts;
    for u in &mut uts {
        if u.verdicts_on_codes.len() != codes.len() {
            return Err(Error::Argument(format!(
                "unit test {} has {} verdicts for {} codes",
                u.ut_id,
                u.verdicts_on_codes.len(),
                codes.len()
            )));
        }
        u.is_gt = codes
            .iter()
            .zip(&u.verdicts_on_codes)
            .all(|(c, &pass)| !c.is_gt || pass);
        u.correctness = u.is_gt;
        let failed_ng = codes
            .iter()
            .zip(&u.verdicts_on_codes)
            .filter(|(c, &pass)| !c.is_gt && !pass)
            .count();
        u.detect_rate = if n_ng == 0 { 0.0 } else { failed_ng as f64 / n_ng as f64 };
    }
    Ok(CodingInstance {
        codes,
        uts,
        gt_ut_ids,
        degenerate: n_gt == 0 || n_ng == 0,
    })
}

fn non_gt_split(ut: &UnitTestSample, codes: &[CodeSample]) -> (i64, i64) {
    let (mut pass, mut fail) = (0, 0);
    for (c, &v) in codes.iter().zip(&ut.verdicts_on_codes) {
        if !c.is_gt {
            if v {
                pass += 1;
            } else {
                fail += 1;
            }
        }
    }
    (pass, fail)
}

/// gt test: `+#(non-gt codes it fails)`; otherwise `−#(non-gt codes it passes)`.
pub fn ut_reward_counts(ut: &UnitTestSample, codes: &[CodeSample]) -> i64 {
    let (pass, fail) = non_gt_split(ut, codes);
    if ut.is_gt {
        fail
    } else {
        -pass
    }
}

/// gt test: `1 − p`; otherwise `−p`, with `p` the pass rate on non-gt codes.
/// Returns 0 when there are no non-gt codes.
pub fn ut_reward_rates(ut: &UnitTestSample, codes: &[CodeSample]) -> f64 {
    let (pass, fail) = non_gt_split(ut, codes);
    let n = pass + fail;
    if n == 0 {
        return 0.0;
    }
    let p = pass as f64 / n as f64;
    if ut.is_gt {
        1.0 - p
    } else {
        -p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub counts: Vec<i64>,
    pub rates: Vec<f64>,
    pub detect_form: Vec<f64>,
    pub non_gt_count: usize,
    /// Largest element-wise gap among the three standardized vectors.
    pub max_deviation: f64,
    /// Whether `counts = N_ng · rates` holds exactly in integers.
    pub counts_scale_exact: bool,
}

/// Compares the three standardized UT reward vectors of one labeled instance.
pub fn remark2_equivalence(inst: &CodingInstance) -> Result<EquivalenceReport> {
    if inst.uts.len() < 2 {
        return Err(Error::Argument("need at least two unit tests to standardize".into()));
    }
    let n_ng = inst.non_gt_count();
    let counts: Vec<i64> = inst.uts.iter().map(|u| ut_reward_counts(u, &inst.codes)).collect();
    let rates: Vec<f64> = inst.uts.iter().map(|u| ut_reward_rates(u, &inst.codes)).collect();
    let detect_form: Vec<f64> = inst
        .uts
        .iter()
        .map(|u| f64::from(u8::from(u.correctness)) + u.detect_rate - 1.0)
        .collect();
    let counts_scale_exact = inst.uts.iter().zip(&counts).all(|(u, &c)| {
        let (pass, fail) = non_gt_split(u, &inst.codes);
        let numer = if u.is_gt { fail } else { -pass };
        c == numer && pass + fail == n_ng as i64
    });
    let sc = standardize(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let sr = standardize(&rates);
    let sd = standardize(&detect_form);
    let max_deviation = sc
        .iter()
        .zip(&sr)
        .zip(&sd)
        .map(|((a, b), c)| (a - b).abs().max((a - c).abs()).max((b - c).abs()))
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        counts,
        rates,
        detect_form,
        non_gt_count: n_ng,
        max_deviation,
        counts_scale_exact,
    })
}

/// Fraction of ground-truth tests the code passes.
pub fn code_reward(code: &CodeSample) -> Result<f64> {
    if code.verdicts_on_gt_uts.is_empty() {
        return Err(Error::Argument("no ground-truth tests".into()));
    }
    Ok(code.verdicts_on_gt_uts.iter().filter(|&&v| v).count() as f64 / code.verdicts_on_gt_uts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingParams {
    pub n_codes: usize,
    pub n_uts: usize,
    pub n_gt_uts: usize,
    pub bug_dims: usize,
    /// Per-dimension bug probability.
    pub bug_rate: f64,
    /// Per-dimension inclusion probability for generated tests.
    pub probe_rate: f64,
}

impl Default for CodingParams {
    fn default() -> Self {
        CodingParams {
            n_codes: 32,
            n_uts: 32,
            n_gt_uts: 4,
            bug_dims: 8,
            bug_rate: 0.12,
            probe_rate: 0.25,
        }
    }
}

/// Latent populations behind an instance: bug vectors and probe sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPopulation {
    pub bugs: Vec<Vec<bool>>,
    pub probes: Vec<Vec<bool>>,
}

/// Ground-truth test `g` probes dimensions `g, g + G, g + 2G, …` among the
/// first `bug_dims`, so the gt tests cover disjoint fixed sets.
pub fn gt_probe(g: usize, n_gt: usize, dims: usize) -> Vec<bool> {
    (0..dims).map(|d| d % n_gt == g).collect()
}

fn passes(bugs: &[bool], probe: &[bool]) -> bool {
    !bugs.iter().zip(probe).any(|(&b, &p)| b && p)
}

/// Builds and labels an instance from explicit bug and probe vectors.
pub fn instance_from_latent(latent: &LatentPopulation, n_gt_uts: usize) -> Result<CodingInstance> {
    let dims = latent.bugs.first().map_or(0, Vec::len);
    if n_gt_uts == 0 || n_gt_uts > dims.max(1) {
        return Err(Error::Argument(format!(
            "{n_gt_uts} gt tests for {dims} bug dimensions"
        )));
    }
    let gt_probes: Vec<Vec<bool>> = (0..n_gt_uts).map(|g| gt_probe(g, n_gt_uts, dims)).collect();
    let codes = latent
        .bugs
        .iter()
        .enumerate()
        .map(|(i, b)| CodeSample {
            code_id: format!("c{i:03}"),
            verdicts_on_gt_uts: gt_probes.iter().map(|p| passes(b, p)).collect(),
            is_gt: false,
        })
        .collect();
    let uts = latent
        .probes
        .iter()
        .enumerate()
        .map(|(j, p)| UnitTestSample {
            ut_id: format!("u{j:03}"),
            verdicts_on_codes: latent.bugs.iter().map(|b| passes(b, p)).collect(),
            is_gt: false,
            detect_rate: 0.0,
            correctness: false,
        })
        .collect();
    label_populations(codes, uts, (0..n_gt_uts).map(|g| format!("g{g:03}")).collect())
}

/// Draws bug vectors with per-dimension rates `bug_probs` and probe vectors
/// with per-dimension rates `probe_probs`. Each test probes at least one
/// dimension.
pub fn sample_latent(
    n_codes: usize,
    n_uts: usize,
    bug_probs: &[f64],
    probe_probs: &[f64],
    key: StreamKey,
) -> LatentPopulation {
    let mut rng = key.rng();
    let bugs = (0..n_codes)
        .map(|_| bug_probs.iter().map(|&p| rng.gen::<f64>() < p).collect())
        .collect();
    let probes = (0..n_uts)
        .map(|_| {
            let mut v: Vec<bool> = probe_probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
            if !v.iter().any(|&b| b) && !v.is_empty() {
                let d = rng.gen_range(0..v.len());
                v[d] = true;
            }
            v
        })
        .collect();
    LatentPopulation { bugs, probes }
}

pub fn synth_coding_instance(params: &CodingParams, seed: u64) -> Result<CodingInstance> {
    let bug = vec![params.bug_rate; params.bug_dims];
    let probe = vec![params.probe_rate; params.bug_dims];
    let key = StreamKey::new(seed).with(tag::CODING);
    let latent = sample_latent(params.n_codes, params.n_uts, &bug, &probe, key);
    instance_from_latent(&latent, params.n_gt_uts)
}

/// Per-task generator state for the coding branch: Bernoulli logits for the
/// code generator's bugs and the test generator's probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingTaskState {
    pub task_id: String,
    pub bug_logits: Vec<f64>,
    pub probe_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingStepStats {
    pub mean_code_reward: f64,
    pub gt_code_rate: f64,
    pub gt_ut_rate: f64,
    pub mean_detect_rate: f64,
    pub degenerate: bool,
}

/// Population sizes and learning rates of one coding step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingStepConfig {
    pub n_codes: usize,
    pub n_uts: usize,
    pub n_gt_uts: usize,
    pub lr_policy: f64,
    pub lr_tests: f64,
}

/// One co-training step on a coding task: sample codes and tests, reward
/// codes by gt pass rate and tests by the rates form, then take one
/// standardized-advantage score-function step on each generator.
pub fn coding_step(
    state: &mut CodingTaskState,
    cfg: &CodingStepConfig,
    seed: u64,
    step: usize,
) -> Result<CodingStepStats> {
    let CodingStepConfig {
        n_codes,
        n_uts,
        n_gt_uts,
        lr_policy,
        lr_tests,
    } = *cfg;
    let bug_p: Vec<f64> = state.bug_logits.iter().map(|&z| sigmoid(z)).collect();
    let probe_p: Vec<f64> = state.probe_logits.iter().map(|&z| sigmoid(z)).collect();
    let key = StreamKey::new(seed)
        .with(tag::CODING)
        .with_str(&state.task_id)
        .with(step as u64);
    let latent = sample_latent(n_codes, n_uts, &bug_p, &probe_p, key);
    let inst = instance_from_latent(&latent, n_gt_uts)?;

    let code_rewards: Vec<f64> = inst.codes.iter().map(code_reward).collect::<Result<_>>()?;
    let adv = standardize(&code_rewards);
    let mut grad = vec![0.0; bug_p.len()];
    for (a, bugs) in adv.iter().zip(&latent.bugs) {
        for (d, &b) in bugs.iter().enumerate() {
            grad[d] += a * (f64::from(u8::from(b)) - bug_p[d]);
        }
    }
    for (z, g) in state.bug_logits.iter_mut().zip(&grad) {
        *z += lr_policy * g / n_codes as f64;
    }

    // Degenerate groups carry no test-generator signal.
    if !inst.degenerate {
        let rates: Vec<f64> = inst.uts.iter().map(|u| ut_reward_rates(u, &inst.codes)).collect();
        let adv = standardize(&rates);
        let mut grad = vec![0.0; probe_p.len()];
        for (a, probe) in adv.iter().zip(&latent.probes) {
            for (d, &p) in probe.iter().enumerate() {
                grad[d] += a * (f64::from(u8::from(p)) - probe_p[d]);
            }
        }
        for (z, g) in state.probe_logits.iter_mut().zip(&grad) {
            *z += lr_tests * g / n_uts as f64;
        }
    }

    let n_ut = inst.uts.len().max(1) as f64;
    Ok(CodingStepStats {
        mean_code_reward: code_rewards.iter().sum::<f64>() / code_rewards.len().max(1) as f64,
        gt_code_rate: inst.codes.iter().filter(|c| c.is_gt).count() as f64 / inst.codes.len().max(1) as f64,
        gt_ut_rate: inst.uts.iter().filter(|u| u.is_gt).count() as f64 / n_ut,
        mean_detect_rate: inst.uts.iter().map(|u| u.detect_rate).sum::<f64>() / n_ut,
        degenerate: inst.degenerate,
    })
}
