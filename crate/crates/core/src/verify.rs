//! Self-check battery: finite-difference gradient checks for every loss and
//! the network, the label-smoothing/distillation identity, brute-force
//! retrieval equivalence, aggregation convexity and loss bounds.
//!
//! Primitives the checks build on are reached through [`Hooks`], so a test
//! can swap in a broken kernel and confirm the battery catches it.

use crate::bank::{
    aggregate_from, retrieve_negative, retrieve_positive, FeatureBank, NegativeStrategy, Polarity, PositiveCount,
    RetrievalConfig, RetrievalResult,
};
use crate::error::Result;
use crate::losses::{
    ce_loss, effective_target, kd_loss, lsr_loss, nicd_loss, picd_loss, total_loss, LossConfig, LossValue,
    NegativeContext, SampleContext,
};
use crate::net::{backward, forward, init_model, MlpArchitecture, MlpModel};
use crate::numerics::{
    cosine_similarity, cross_entropy, entropy, grad_check, kl_divergence, softmax, softmax_with_temperature,
    ProbVector, DEFAULT_GRAD_EPS,
};
use crate::rng::SeededRng;

pub const GRAD_TOL: f64 = 1e-5;
pub const IDENTITY_TOL: f64 = 1e-9;

/// Replaceable kernels used by the checks.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub kl_divergence: fn(&[f64], &[f64]) -> Result<f64>,
}

impl Default for Hooks {
    fn default() -> Self {
        Self { kl_divergence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryConfig {
    pub seed: u64,
    pub grad_cases: usize,
    pub lsr_cases: usize,
    pub retrieval_banks: usize,
    pub aggregation_cases: usize,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grad_cases: 50,
            lsr_cases: 100,
            retrieval_banks: 200,
            aggregation_cases: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckOutcome>,
    /// `CE(effective target) - kd` averaged over the probes of the first case.
    pub lsr_kd_constant: f64,
    /// Largest spread of `kd - CE(effective target)` across any case.
    pub lsr_kd_spread: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_battery(cfg: &BatteryConfig, hooks: &Hooks) -> Report {
    let mut rng = SeededRng::with_stream_id(cfg.seed, 0xbea7);
    let mut checks = Vec::new();
    let mut record = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        checks.push(CheckOutcome { name, passed, detail });
    };

    for (name, case) in GRAD_CASES {
        record(name, grad_battery(&mut rng, cfg.grad_cases, case));
    }
    record("grad_mlp", grad_mlp(&mut rng, cfg.grad_cases));
    let lsr = lsr_kd(&mut rng, cfg.lsr_cases, hooks);
    let (constant, spread) = lsr.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.constant, r.spread));
    record("lsr_kd_equivalence", lsr.map(|r| (r.passed, r.detail)));
    record("retrieval_oracle", retrieval_oracle(&mut rng, cfg.retrieval_banks));
    record("aggregation_convexity", aggregation(&mut rng, cfg.aggregation_cases));
    record("kl_divergence_bounds", kl_bounds(&mut rng, cfg.grad_cases, hooks));
    record("loss_bounds", loss_bounds(&mut rng, cfg.grad_cases));

    Report {
        checks,
        lsr_kd_constant: constant,
        lsr_kd_spread: spread,
    }
}

/// Logits plus the loss evaluated at them.
type Case = Result<(Vec<f64>, Box<dyn Fn(&[f64]) -> Result<LossValue>>)>;

type GradCase = fn(&mut SeededRng) -> Case;

const GRAD_CASES: [(&str, GradCase); 6] = [
    ("grad_ce", ce_case),
    ("grad_lsr", lsr_case),
    ("grad_kd", kd_case),
    ("grad_picd", picd_case),
    ("grad_nicd", nicd_case),
    ("grad_total", total_case),
];

fn normals(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn range(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn random_prob(rng: &mut SeededRng, k: usize) -> Result<ProbVector> {
    let z = normals(rng, k, 2.0);
    softmax(&z)
}

fn random_loss_config(rng: &mut SeededRng) -> LossConfig {
    LossConfig {
        alpha: rng.uniform(),
        tau_kd: range(rng, 0.5, 6.0),
        tau1: range(rng, 0.5, 6.0),
        tau_nicd: range(rng, 0.5, 3.0),
        gamma_picd: range(rng, 0.0, 4.0),
        gamma_nicd: range(rng, 0.0, 10.0),
        temperature_scaling: rng.uniform() < 0.5,
        ..LossConfig::default()
    }
}

fn weights(rng: &mut SeededRng, n: usize) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![1.0]);
    }
    Ok(softmax(&normals(rng, n, 1.0))?.into_inner())
}

fn ce_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let y = rng.below(k);
    Ok((normals(rng, k, 2.0), Box::new(move |z| ce_loss(y, z))))
}

fn lsr_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let y = rng.below(k);
    let alpha = rng.uniform();
    Ok((
        normals(rng, k, 2.0),
        Box::new(move |z| lsr_loss(y, &softmax(z)?, alpha)),
    ))
}

fn kd_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let y = rng.below(k);
    let cfg = random_loss_config(rng);
    let zt = normals(rng, k, 2.0);
    Ok((normals(rng, k, 2.0), Box::new(move |z| kd_loss(y, z, &zt, &cfg))))
}

fn picd_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let cfg = random_loss_config(rng);
    let agg = random_prob(rng, k)?;
    Ok((
        normals(rng, k, 2.0),
        Box::new(move |z| picd_loss(&agg, z, cfg.tau1, cfg.temperature_scaling)),
    ))
}

fn nicd_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let n = 1 + rng.below(8);
    let tau = range(rng, 0.5, 3.0);
    let pt = random_prob(rng, k)?;
    let negs = (0..n).map(|_| random_prob(rng, k)).collect::<Result<Vec<_>>>()?;
    let b = weights(rng, n)?;
    Ok((
        normals(rng, k, 2.0),
        Box::new(move |z| nicd_loss(&softmax_with_temperature(z, tau)?, &pt, &negs, &b, tau)),
    ))
}

fn total_case(rng: &mut SeededRng) -> Case {
    let k = 2 + rng.below(9);
    let n = 1 + rng.below(8);
    let y = rng.below(k);
    let cfg = random_loss_config(rng);
    let zt = normals(rng, k, 2.0);
    let agg = random_prob(rng, k)?;
    let pt = softmax_with_temperature(&zt, cfg.tau_nicd)?;
    let negs = (0..n).map(|_| random_prob(rng, k)).collect::<Result<Vec<_>>>()?;
    let b = weights(rng, n)?;
    Ok((
        normals(rng, k, 2.0),
        Box::new(move |z| {
            let ctx = SampleContext {
                label: y,
                student_logits: z,
                teacher_logits: Some(&zt),
                aggregated: Some(&agg),
                nicd: Some((
                    &pt,
                    NegativeContext {
                        probs: &negs,
                        weights: &b,
                    },
                )),
            };
            total_loss(&ctx, &cfg).map(|t| t.loss)
        }),
    ))
}

fn grad_battery(rng: &mut SeededRng, cases: usize, case: GradCase) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (z, f) = case(rng)?;
        let report = grad_check(|x| f(x).map(|l| (l.value, l.logit_gradient)), &z, DEFAULT_GRAD_EPS)?;
        worst = worst.max(report.max_relative_error);
    }
    Ok((
        worst < GRAD_TOL,
        format!("max relative error {worst:.3e} over {cases} cases"),
    ))
}

fn grad_mlp(rng: &mut SeededRng, cases: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..cases.min(20) {
        let input = 1 + rng.below(5);
        let hidden = 1 + rng.below(6);
        let k = 2 + rng.below(4);
        let arch = MlpArchitecture::new(vec![input, hidden, hidden + 1, k])?;
        let base = init_model(&arch, rng.next_u64());
        // Nonzero biases keep pre-activations away from the ReLU kink.
        let params: Vec<f64> = base.parameters().iter().map(|p| p + 0.3 * rng.normal()).collect();
        let x = normals(rng, input, 1.0);
        let y = rng.below(k);
        let fi = base.feature_layer_index();
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let m = MlpModel::new(arch.clone(), p.to_vec(), fi)?;
            let rec = forward(&m, &x)?;
            let l = ce_loss(y, &rec.logits)?;
            Ok((l.value, backward(&m, &rec, &l.logit_gradient)?))
        };
        worst = worst.max(grad_check(f, &params, DEFAULT_GRAD_EPS)?.max_relative_error);
    }
    Ok((worst < GRAD_TOL, format!("max relative error {worst:.3e}")))
}

struct LsrKd {
    passed: bool,
    detail: String,
    constant: f64,
    spread: f64,
}

/// At tau = 1, `kd - CE(effective target)` must not depend on the student.
fn lsr_kd(rng: &mut SeededRng, cases: usize, hooks: &Hooks) -> Result<LsrKd> {
    let mut spread = 0.0f64;
    let mut const_err = 0.0f64;
    let mut kernel_err = 0.0f64;
    let mut first_constant = f64::NAN;
    for case in 0..5 {
        let k = 2 + rng.below(9);
        let y = rng.below(k);
        let cfg = LossConfig {
            alpha: range(rng, 0.05, 0.95),
            tau_kd: 1.0,
            ..LossConfig::default()
        };
        let zt = normals(rng, k, 2.0);
        let pt = softmax(&zt)?;
        let target = effective_target(y, &pt, cfg.alpha, 0.0)?;
        let expected = cfg.alpha * entropy(&pt);
        let mut diffs = Vec::with_capacity(cases);
        for _ in 0..cases {
            let zs = normals(rng, k, 3.0);
            let ps = softmax(&zs)?;
            let onehot = ProbVector::one_hot(k, y)?;
            let kd = (1.0 - cfg.alpha) * cross_entropy(&onehot, &ps)? + cfg.alpha * (hooks.kl_divergence)(&pt, &ps)?;
            kernel_err = kernel_err.max((kd - kd_loss(y, &zs, &zt, &cfg)?.value).abs());
            diffs.push(cross_entropy(&target, &ps)? - kd);
        }
        let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        spread = spread.max(hi - lo);
        const_err = const_err.max((mean - expected).abs());
        if case == 0 {
            first_constant = mean;
        }
    }
    let passed = spread < IDENTITY_TOL && const_err < IDENTITY_TOL && kernel_err < IDENTITY_TOL;
    Ok(LsrKd {
        passed,
        detail: format!(
            "constant {first_constant:.12} (alpha*H(p_t)), spread {spread:.3e}, constant error {const_err:.3e}, kd kernel mismatch {kernel_err:.3e}"
        ),
        constant: first_constant,
        spread,
    })
}

/// Random bank with at least two rows per class; some banks are quantized so
/// that exact ties occur.
pub fn random_bank(rng: &mut SeededRng, n: usize, dim: usize, classes: usize, quantized: bool) -> Result<FeatureBank> {
    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            if i < 2 * classes {
                i % classes
            } else {
                rng.below(classes)
            }
        })
        .collect();
    rng.shuffle(&mut labels);
    let mut feats = Vec::with_capacity(n * dim);
    for _ in 0..n {
        loop {
            let row: Vec<f64> = (0..dim)
                .map(|_| {
                    if quantized {
                        rng.below(3) as f64 - 1.0
                    } else {
                        rng.normal()
                    }
                })
                .collect();
            if row.iter().any(|&v| v != 0.0) {
                feats.extend(row);
                break;
            }
        }
    }
    FeatureBank::new(feats, dim, labels, 0)
}

/// Full-sort reference retrieval: every eligible row ranked by
/// `(score desc, index asc)`, then the head softmaxed.
pub fn brute_force_retrieval(
    bank: &FeatureBank,
    query: usize,
    beta: f64,
    count: Option<usize>,
    polarity: Polarity,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut scored = Vec::new();
    for j in 0..bank.len() {
        let same = bank.label(j) == bank.label(query);
        let eligible = match polarity {
            Polarity::Positive => same && j != query,
            Polarity::Negative => !same,
        };
        if eligible {
            scored.push((j, cosine_similarity(bank.row(query), bank.row(j))? / beta));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(count.unwrap_or(usize::MAX));
    let m = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scored.iter().map(|s| (s.1 - m).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok((
        scored.iter().map(|s| s.0).collect(),
        e.iter().map(|x| x / total).collect(),
    ))
}

fn matches(r: &RetrievalResult, idx: &[usize], w: &[f64]) -> bool {
    r.indices == idx && r.weights.len() == w.len() && r.weights.iter().zip(w).all(|(a, b)| (a - b).abs() < IDENTITY_TOL)
}

fn retrieval_oracle(rng: &mut SeededRng, banks: usize) -> Result<(bool, String)> {
    let mut mismatches = 0usize;
    let mut violations = 0usize;
    let mut queries = 0usize;
    for b in 0..banks {
        let classes = 2 + rng.below(9);
        let n = 2 * classes + rng.below(512 - 2 * classes + 1);
        let dim = 1 + rng.below(64);
        let bank = random_bank(rng, n, dim, classes, b % 4 == 3)?;
        let cfg = RetrievalConfig {
            beta1: range(rng, 0.25, 4.0),
            beta2: range(rng, 0.25, 8.0),
            k_positive: if rng.uniform() < 0.1 {
                PositiveCount::All
            } else {
                PositiveCount::Top(1 + rng.below(32))
            },
            n_negative: 1 + rng.below(32),
            negative_strategy: NegativeStrategy::Hardest,
        };
        let k = match cfg.k_positive {
            PositiveCount::Top(k) => Some(k),
            PositiveCount::All => None,
        };
        for _ in 0..8 {
            let i = rng.below(n);
            queries += 1;
            let pos = retrieve_positive(&bank, i, &cfg)?;
            let (idx, w) = brute_force_retrieval(&bank, i, cfg.beta1, k, Polarity::Positive)?;
            mismatches += usize::from(!matches(&pos, &idx, &w));
            violations += pos
                .indices
                .iter()
                .filter(|&&j| j == i || bank.label(j) != bank.label(i))
                .count();

            let neg = retrieve_negative(&bank, i, &cfg, b as u64)?;
            let (idx, w) = brute_force_retrieval(&bank, i, cfg.beta2, Some(cfg.n_negative), Polarity::Negative)?;
            mismatches += usize::from(!matches(&neg, &idx, &w));
            violations += neg.indices.iter().filter(|&&j| bank.label(j) == bank.label(i)).count();

            let random = RetrievalConfig {
                negative_strategy: NegativeStrategy::Random,
                ..cfg
            };
            let r = retrieve_negative(&bank, i, &random, b as u64)?;
            let mut seen = r.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            let eligible = (0..n).filter(|&j| bank.label(j) != bank.label(i)).count();
            violations += r.indices.iter().filter(|&&j| bank.label(j) == bank.label(i)).count();
            violations += usize::from(seen.len() != r.indices.len() || r.indices.len() != cfg.n_negative.min(eligible));
        }
    }
    Ok((
        mismatches == 0 && violations == 0,
        format!("{queries} queries on {banks} banks: {mismatches} oracle mismatches, {violations} mask violations"),
    ))
}

fn aggregation(rng: &mut SeededRng, cases: usize) -> Result<(bool, String)> {
    let mut worst_sum = 0.0f64;
    let mut envelope = 0usize;
    for _ in 0..cases {
        let k = 2 + rng.below(9);
        let n = 2 + rng.below(30);
        let preds = (0..n).map(|_| random_prob(rng, k)).collect::<Result<Vec<_>>>()?;
        let m = 1 + rng.below(n);
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        indices.truncate(m);
        let scores = normals(rng, m, 3.0);
        let w = if m == 1 {
            vec![1.0]
        } else {
            softmax(&scores)?.into_inner()
        };
        let r = RetrievalResult {
            indices: indices.clone(),
            weights: w,
            scores,
            polarity: Polarity::Positive,
        };
        let p = aggregate_from(&preds, &r)?;
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        for c in 0..k {
            let lo = indices.iter().map(|&j| preds[j][c]).fold(f64::INFINITY, f64::min);
            let hi = indices.iter().map(|&j| preds[j][c]).fold(f64::NEG_INFINITY, f64::max);
            envelope += usize::from(p[c] < lo - 1e-12 || p[c] > hi + 1e-12);
        }
    }
    Ok((
        worst_sum < IDENTITY_TOL && envelope == 0,
        format!("{cases} cases: max |sum - 1| {worst_sum:.3e}, {envelope} envelope violations"),
    ))
}

fn kl_bounds(rng: &mut SeededRng, cases: usize, hooks: &Hooks) -> Result<(bool, String)> {
    let mut min_kl = f64::INFINITY;
    let mut worst_self = 0.0f64;
    let mut worst_identity = 0.0f64;
    for _ in 0..cases {
        let k = 2 + rng.below(9);
        let p = random_prob(rng, k)?;
        let q = random_prob(rng, k)?;
        let kl = (hooks.kl_divergence)(&p, &q)?;
        min_kl = min_kl.min(kl);
        worst_self = worst_self.max((hooks.kl_divergence)(&p, &p)?.abs());
        let reference = cross_entropy(&p, &q)? - entropy(&p);
        worst_identity = worst_identity.max((kl - reference).abs());
    }
    Ok((
        min_kl >= -1e-12 && worst_self <= 1e-12 && worst_identity < IDENTITY_TOL,
        format!("min KL {min_kl:.3e}, max |KL(p,p)| {worst_self:.3e}, max |KL - (H(p,q) - H(p))| {worst_identity:.3e}"),
    ))
}

fn loss_bounds(rng: &mut SeededRng, cases: usize) -> Result<(bool, String)> {
    let mut bad = Vec::new();
    for _ in 0..cases {
        let k = 2 + rng.below(9);
        let y = rng.below(k);
        let cfg = random_loss_config(rng);
        let zs = normals(rng, k, 2.0);
        let zt = normals(rng, k, 2.0);
        let agg = random_prob(rng, k)?;
        let n = 1 + rng.below(8);
        let negs = (0..n).map(|_| random_prob(rng, k)).collect::<Result<Vec<_>>>()?;
        let b = weights(rng, n)?;
        let ps = softmax_with_temperature(&zs, cfg.tau_nicd)?;
        let pt = softmax_with_temperature(&zt, cfg.tau_nicd)?;
        let values = [
            ("ce", ce_loss(y, &zs)?.value, 0.0, f64::INFINITY),
            ("lsr", lsr_loss(y, &softmax(&zs)?, cfg.alpha)?.value, 0.0, f64::INFINITY),
            ("kd", kd_loss(y, &zs, &zt, &cfg)?.value, 0.0, f64::INFINITY),
            (
                "picd",
                picd_loss(&agg, &zs, cfg.tau1, cfg.temperature_scaling)?.value,
                0.0,
                f64::INFINITY,
            ),
            ("nicd", nicd_loss(&ps, &pt, &negs, &b, cfg.tau_nicd)?.value, 0.0, 2.0),
        ];
        for (name, v, lo, hi) in values {
            if v < lo - 1e-10 || v > hi + 1e-10 {
                bad.push(format!("{name}={v:e}"));
            }
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("{cases} cases within bounds")
        } else {
            format!("out of bounds: {}", bad.join(", "))
        },
    ))
}
