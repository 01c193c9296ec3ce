//! Distillation objectives with exact gradients with respect to student logits.
//!
//! | loss    | value                                                        |
//! |---------|--------------------------------------------------------------|
//! | CE      | `H(y, p)`                                                    |
//! | LSR     | `(1 - a) H(y, p) + a H(u, p)`                                |
//! | KD      | `(1 - a) H(y, p) + a t^2 KL(p_t(t), p_s(t))`                 |
//! | PICD    | `t1^2 KL(p_hat, p_s(t1))`                                    |
//! | NICD    | `1 - cos(p_s, p_t) + sum_j b_j cos(p_s, p_j)`                |
//! | total   | `CE + KD + g_picd PICD + g_nicd NICD`                        |
//!
//! The `t^2` factors on the softened KL terms are switchable through
//! [`LossConfig::temperature_scaling`].

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_gradient, cosine_similarity, cross_entropy, kl_divergence, ordered_sum, softmax, softmax_backward,
    softmax_with_temperature, ProbVector,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Soft/hard mix inside the KD term.
    pub alpha: f64,
    pub tau_kd: f64,
    pub tau1: f64,
    /// Temperature of the probabilities compared by NICD.
    pub tau_nicd: f64,
    pub gamma_picd: f64,
    pub gamma_nicd: f64,
    pub use_a_weights: bool,
    pub use_b_weights: bool,
    /// Multiply temperature-softened KL terms by `t^2`.
    pub temperature_scaling: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau_kd: 4.0,
            tau1: 4.0,
            tau_nicd: 1.0,
            gamma_picd: 2.0,
            gamma_nicd: 10.0,
            use_a_weights: true,
            use_b_weights: true,
            temperature_scaling: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        for (name, t) in [
            ("tau_kd", self.tau_kd),
            ("tau1", self.tau1),
            ("tau_nicd", self.tau_nicd),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, g) in [("gamma_picd", self.gamma_picd), ("gamma_nicd", self.gamma_nicd)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {g}")));
            }
        }
        Ok(())
    }

    fn kl_scale(&self, tau: f64) -> f64 {
        if self.temperature_scaling {
            tau * tau
        } else {
            1.0
        }
    }
}

/// A scalar loss and its gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub logit_gradient: Vec<f64>,
}

impl LossValue {
    fn checked(value: f64, logit_gradient: Vec<f64>, what: &str) -> Result<Self> {
        if !value.is_finite() || logit_gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericInstability(format!("{what} produced a non-finite value")));
        }
        Ok(Self { value, logit_gradient })
    }
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::invalid(format!("class {y} out of range for K = {k}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Label-smoothed target `(1 - a) onehot(y) + a / K`.
pub fn smoothed_label(y: usize, k: usize, alpha: f64) -> Result<ProbVector> {
    check_class(y, k)?;
    check_alpha(alpha)?;
    let base = alpha / k as f64;
    ProbVector::new(
        (0..k)
            .map(|c| if c == y { (1.0 - alpha) + base } else { base })
            .collect(),
    )
}

/// Cross-entropy of `softmax(logits)` against a one-hot label.
pub fn ce_loss(y: usize, student_logits: &[f64]) -> Result<LossValue> {
    check_class(y, student_logits.len())?;
    let p = softmax(student_logits)?;
    let value = -p[y].max(crate::numerics::LOG_CLAMP).ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| if c == y { pc - 1.0 } else { pc })
        .collect();
    LossValue::checked(value, grad, "cross-entropy")
}

/// Label-smoothing loss for the prediction `p = softmax(z)`; the gradient is
/// with respect to `z`.
pub fn lsr_loss(y: usize, p: &ProbVector, alpha: f64) -> Result<LossValue> {
    let q = smoothed_label(y, p.len(), alpha)?;
    let one_hot = ProbVector::one_hot(p.len(), y)?;
    let uniform = ProbVector::uniform(p.len())?;
    let value = (1.0 - alpha) * cross_entropy(&one_hot, p)? + alpha * cross_entropy(&uniform, p)?;
    let grad = p.iter().zip(q.iter()).map(|(a, b)| a - b).collect();
    LossValue::checked(value, grad, "label smoothing")
}

/// Classic distillation: hard cross-entropy mixed with the softened KL
/// to the teacher.
pub fn kd_loss(y: usize, student_logits: &[f64], teacher_logits: &[f64], cfg: &LossConfig) -> Result<LossValue> {
    let k = student_logits.len();
    if teacher_logits.len() != k {
        return Err(Error::invalid(format!(
            "student has {k} logits, teacher has {}",
            teacher_logits.len()
        )));
    }
    check_class(y, k)?;
    check_alpha(cfg.alpha)?;
    let alpha = cfg.alpha;
    let tau = cfg.tau_kd;
    let scale = cfg.kl_scale(tau);

    let p = softmax(student_logits)?;
    let hard = -p[y].max(crate::numerics::LOG_CLAMP).ln();
    let ps = softmax_with_temperature(student_logits, tau)?;
    let pt = softmax_with_temperature(teacher_logits, tau)?;
    let soft = kl_divergence(&pt, &ps)?;

    let value = (1.0 - alpha) * hard + alpha * scale * soft;
    let grad = (0..k)
        .map(|c| {
            let onehot = if c == y { 1.0 } else { 0.0 };
            (1.0 - alpha) * (p[c] - onehot) + alpha * scale * ((ps[c] - pt[c]) / tau)
        })
        .collect();
    LossValue::checked(value, grad, "kd")
}

/// `(1 - alpha) q + alpha p_t`, where `q` is the label smoothed with `lsr_alpha`.
pub fn effective_target(y: usize, teacher_prob: &ProbVector, alpha: f64, lsr_alpha: f64) -> Result<ProbVector> {
    check_alpha(alpha)?;
    let q = smoothed_label(y, teacher_prob.len(), lsr_alpha)?;
    ProbVector::new(
        q.iter()
            .zip(teacher_prob.iter())
            .map(|(qk, pk)| ((1.0 - alpha) * qk + alpha * pk).clamp(0.0, 1.0))
            .collect(),
    )
}

/// KL from the aggregated in-context prediction to the softened student.
pub fn picd_loss(
    aggregated: &ProbVector,
    student_logits: &[f64],
    tau1: f64,
    temperature_scaling: bool,
) -> Result<LossValue> {
    if aggregated.len() != student_logits.len() {
        return Err(Error::invalid(format!(
            "aggregated target has {} classes, student has {}",
            aggregated.len(),
            student_logits.len()
        )));
    }
    let scale = if temperature_scaling { tau1 * tau1 } else { 1.0 };
    let ps = softmax_with_temperature(student_logits, tau1)?;
    let value = scale * kl_divergence(aggregated, &ps)?;
    let grad = ps
        .iter()
        .zip(aggregated.iter())
        .map(|(s, a)| scale * ((s - a) / tau1))
        .collect();
    LossValue::checked(value, grad, "picd")
}

/// `1 - cos(p_s, p_t) + sum_j b_j cos(p_s, n_j)`.
///
/// `student_prob` must be `softmax(z / tau)`; the gradient is with respect to `z`.
pub fn nicd_loss(
    student_prob: &ProbVector,
    teacher_prob: &ProbVector,
    negative_probs: &[ProbVector],
    b_weights: &[f64],
    tau: f64,
) -> Result<LossValue> {
    if negative_probs.len() != b_weights.len() {
        return Err(Error::invalid(format!(
            "{} negatives but {} weights",
            negative_probs.len(),
            b_weights.len()
        )));
    }
    if negative_probs.is_empty() {
        return Err(Error::invalid("nicd needs at least one negative"));
    }
    let wsum = ordered_sum(b_weights.iter().copied());
    if (wsum - 1.0).abs() > 1e-9 || b_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(format!(
            "negative weights must be a distribution, sum {wsum}"
        )));
    }
    let k = student_prob.len();
    if teacher_prob.len() != k || negative_probs.iter().any(|n| n.len() != k) {
        return Err(Error::invalid("nicd: class count mismatch"));
    }
    let mut value = 1.0 - cosine_similarity(student_prob, teacher_prob)?;
    let mut upstream: Vec<f64> = cosine_gradient(student_prob, teacher_prob)?
        .into_iter()
        .map(|g| -g)
        .collect();
    for (neg, &b) in negative_probs.iter().zip(b_weights) {
        value += b * cosine_similarity(student_prob, neg)?;
        for (u, g) in upstream.iter_mut().zip(cosine_gradient(student_prob, neg)?) {
            *u += b * g;
        }
    }
    let grad = softmax_backward(student_prob, tau, &upstream);
    LossValue::checked(value, grad, "nicd")
}

/// Negatives for one sample: teacher predictions and their weights.
#[derive(Debug, Clone, Copy)]
pub struct NegativeContext<'a> {
    pub probs: &'a [ProbVector],
    pub weights: &'a [f64],
}

/// Everything the total objective needs for one sample. Optional parts
/// switch their term off entirely.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    pub label: usize,
    pub student_logits: &'a [f64],
    /// Teacher logits for the KD term.
    pub teacher_logits: Option<&'a [f64]>,
    /// Aggregated in-context target for PICD.
    pub aggregated: Option<&'a ProbVector>,
    /// Teacher prediction at `tau_nicd` plus negatives, for NICD.
    pub nicd: Option<(&'a ProbVector, NegativeContext<'a>)>,
}

/// Total objective and its raw components. `None` means not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub loss: LossValue,
    pub ce: f64,
    pub kd: f64,
    pub picd: Option<f64>,
    pub nicd: Option<f64>,
}

pub fn total_loss(ctx: &SampleContext<'_>, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let ce = ce_loss(ctx.label, ctx.student_logits)?;
    let mut value = ce.value;
    let mut grad = ce.logit_gradient;

    let mut kd_value = 0.0;
    if let Some(teacher) = ctx.teacher_logits {
        let kd = kd_loss(ctx.label, ctx.student_logits, teacher, cfg)?;
        kd_value = kd.value;
        value += kd.value;
        for (g, d) in grad.iter_mut().zip(&kd.logit_gradient) {
            *g += d;
        }
    }

    let mut picd_value = None;
    if let Some(aggregated) = ctx.aggregated {
        let picd = picd_loss(aggregated, ctx.student_logits, cfg.tau1, cfg.temperature_scaling)?;
        value += cfg.gamma_picd * picd.value;
        for (g, d) in grad.iter_mut().zip(&picd.logit_gradient) {
            *g += cfg.gamma_picd * d;
        }
        picd_value = Some(picd.value);
    }

    let mut nicd_value = None;
    if let Some((teacher_prob, negatives)) = ctx.nicd {
        let student_prob = softmax_with_temperature(ctx.student_logits, cfg.tau_nicd)?;
        let nicd = nicd_loss(
            &student_prob,
            teacher_prob,
            negatives.probs,
            negatives.weights,
            cfg.tau_nicd,
        )?;
        value += cfg.gamma_nicd * nicd.value;
        for (g, d) in grad.iter_mut().zip(&nicd.logit_gradient) {
            *g += cfg.gamma_nicd * d;
        }
        nicd_value = Some(nicd.value);
    }

    Ok(TotalLoss {
        loss: LossValue::checked(value, grad, "total loss")?,
        ce: ce.value,
        kd: kd_value,
        picd: picd_value,
        nicd: nicd_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy, grad_check, DEFAULT_GRAD_EPS};
    use crate::rng::{SeededRng, Stream};

    fn rand_logits(rng: &mut SeededRng, k: usize, scale: f64) -> Vec<f64> {
        (0..k).map(|_| scale * rng.normal()).collect()
    }

    fn rand_prob(rng: &mut SeededRng, k: usize) -> ProbVector {
        let z = rand_logits(rng, k, 1.5);
        softmax(&z).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lsr_examples() {
        let mut rng = SeededRng::new(1, Stream::Data);
        let p = rand_prob(&mut rng, 3);
        let plain = cross_entropy(&ProbVector::one_hot(3, 2).unwrap(), &p).unwrap();
        assert!(close(lsr_loss(2, &p, 0.0).unwrap().value, plain, 1e-15));
        let hu = cross_entropy(&ProbVector::uniform(3).unwrap(), &p).unwrap();
        assert!(close(lsr_loss(0, &p, 1.0).unwrap().value, hu, 1e-15));
        assert!(close(lsr_loss(1, &p, 1.0).unwrap().value, hu, 1e-15));

        let alpha = 0.1;
        let mut hy = 0.0;
        let mut hu = 0.0;
        for k in 0..3 {
            if k == 1 {
                hy -= p[k].ln();
            }
            hu -= p[k].ln() / 3.0;
        }
        let want = (1.0 - alpha) * hy + alpha * hu;
        assert!(close(lsr_loss(1, &p, alpha).unwrap().value, want, 1e-13));
        assert!(matches!(lsr_loss(3, &p, 0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kd_examples() {
        let mut rng = SeededRng::new(2, Stream::Data);
        let zs = rand_logits(&mut rng, 5, 2.0);
        let cfg = LossConfig {
            alpha: 0.3,
            tau_kd: 1.0,
            ..Default::default()
        };
        let v = kd_loss(1, &zs, &zs, &cfg).unwrap();
        let ce = ce_loss(1, &zs).unwrap().value;
        assert!(close(v.value, 0.7 * ce, 1e-12));

        let zt = rand_logits(&mut rng, 5, 2.0);
        let cfg0 = LossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(close(
            kd_loss(4, &zs, &zt, &cfg0).unwrap().value,
            ce_loss(4, &zs).unwrap().value,
            1e-15
        ));

        // hand composition at alpha = 0.5, tau = 4
        let tau = 4.0;
        let ps: Vec<f64> = {
            let e: Vec<f64> = zs.iter().map(|z| (z / tau).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let pt: Vec<f64> = {
            let e: Vec<f64> = zt.iter().map(|z| (z / tau).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let kl: f64 = pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum();
        let p1: Vec<f64> = {
            let e: Vec<f64> = zs.iter().map(|z| z.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        let want = 0.5 * -p1[2].ln() + 0.5 * tau * tau * kl;
        let cfg = LossConfig {
            alpha: 0.5,
            tau_kd: tau,
            ..Default::default()
        };
        assert!(close(kd_loss(2, &zs, &zt, &cfg).unwrap().value, want, 1e-12));
        assert!(kd_loss(2, &zs, &zt[..4], &cfg).is_err());
    }

    #[test]
    fn effective_target_examples() {
        let mut rng = SeededRng::new(3, Stream::Data);
        let pt = rand_prob(&mut rng, 4);
        assert_eq!(
            effective_target(2, &pt, 0.0, 0.0).unwrap(),
            ProbVector::one_hot(4, 2).unwrap()
        );
        let q = smoothed_label(2, 4, 0.2).unwrap();
        assert_eq!(effective_target(2, &pt, 0.0, 0.2).unwrap(), q);
        assert_eq!(effective_target(2, &pt, 1.0, 0.2).unwrap(), pt);
        let e = effective_target(1, &pt, 0.3, 0.1).unwrap();
        for k in 0..4 {
            let qk = if k == 1 { 0.9 + 0.025 } else { 0.025 };
            assert!(close(e[k], 0.7 * qk + 0.3 * pt[k], 1e-15));
        }
    }

    #[test]
    fn picd_examples() {
        let mut rng = SeededRng::new(4, Stream::Data);
        let z = rand_logits(&mut rng, 6, 1.0);
        let soft = softmax_with_temperature(&z, 4.0).unwrap();
        assert!(picd_loss(&soft, &z, 4.0, true).unwrap().value.abs() < 1e-10);
        let one_hot = ProbVector::one_hot(6, 3).unwrap();
        assert!(close(
            picd_loss(&one_hot, &[0.0; 6], 1.0, true).unwrap().value,
            6f64.ln(),
            1e-12
        ));
        let agg = rand_prob(&mut rng, 6);
        let want = 16.0 * kl_divergence(&agg, &soft).unwrap();
        assert!(close(picd_loss(&agg, &z, 4.0, true).unwrap().value, want, 1e-12));
        let want = kl_divergence(&agg, &soft).unwrap();
        assert!(close(picd_loss(&agg, &z, 4.0, false).unwrap().value, want, 1e-12));
        assert!(picd_loss(&agg, &z[..5], 4.0, true).is_err());
    }

    #[test]
    fn nicd_examples() {
        let a = ProbVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let n = ProbVector::new(vec![0.0, 0.0, 0.3, 0.7]).unwrap();
        assert!(nicd_loss(&a, &a, &[n], &[1.0], 1.0).unwrap().value.abs() < 1e-15);
        assert!(close(
            nicd_loss(&a, &a, &[a.clone()], &[1.0], 1.0).unwrap().value,
            1.0,
            1e-15
        ));

        let mut rng = SeededRng::new(5, Stream::Data);
        let s = rand_prob(&mut rng, 5);
        let t = rand_prob(&mut rng, 5);
        let negs: Vec<ProbVector> = (0..3).map(|_| rand_prob(&mut rng, 5)).collect();
        let b = [0.2, 0.5, 0.3];
        let cos = |u: &[f64], v: &[f64]| {
            let d: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            d / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let want = 1.0 - cos(&s, &t) + (0..3).map(|j| b[j] * cos(&s, &negs[j])).sum::<f64>();
        assert!(close(nicd_loss(&s, &t, &negs, &b, 1.0).unwrap().value, want, 1e-14));
        assert!(nicd_loss(&s, &t, &negs, &b[..2], 1.0).is_err());
        assert!(nicd_loss(&s, &t, &negs, &[0.5, 0.5, 0.5], 1.0).is_err());
    }

    fn full_context_parts(
        rng: &mut SeededRng,
        k: usize,
    ) -> (Vec<f64>, ProbVector, ProbVector, Vec<ProbVector>, Vec<f64>) {
        let zt = rand_logits(rng, k, 2.0);
        let agg = rand_prob(rng, k);
        let tp = rand_prob(rng, k);
        let negs: Vec<ProbVector> = (0..4).map(|_| rand_prob(rng, k)).collect();
        let b = softmax(&rand_logits(rng, 4, 1.0)).unwrap().into_inner();
        (zt, agg, tp, negs, b)
    }

    #[test]
    fn total_loss_reductions_and_component_sum() {
        let mut rng = SeededRng::new(6, Stream::Data);
        let k = 5;
        let zs = rand_logits(&mut rng, k, 2.0);
        let (zt, agg, tp, negs, b) = full_context_parts(&mut rng, k);
        let ctx = SampleContext {
            label: 3,
            student_logits: &zs,
            teacher_logits: Some(&zt),
            aggregated: Some(&agg),
            nicd: Some((
                &tp,
                NegativeContext {
                    probs: &negs,
                    weights: &b,
                },
            )),
        };
        let cfg = LossConfig::default();
        let t = total_loss(&ctx, &cfg).unwrap();

        let ce = ce_loss(3, &zs).unwrap().value;
        let kd = kd_loss(3, &zs, &zt, &cfg).unwrap().value;
        let picd = picd_loss(&agg, &zs, cfg.tau1, true).unwrap().value;
        let sp = softmax_with_temperature(&zs, cfg.tau_nicd).unwrap();
        let nicd = nicd_loss(&sp, &tp, &negs, &b, cfg.tau_nicd).unwrap().value;
        assert!(close(t.loss.value, ce + kd + 2.0 * picd + 10.0 * nicd, 1e-12));
        assert_eq!((t.ce, t.kd, t.picd, t.nicd), (ce, kd, Some(picd), Some(nicd)));

        let zero = LossConfig {
            gamma_picd: 0.0,
            gamma_nicd: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(&ctx, &zero).unwrap().loss.value, ce + kd);

        let plain = LossConfig {
            alpha: 0.0,
            gamma_picd: 0.0,
            gamma_nicd: 0.0,
            ..cfg
        };
        let ce_only = SampleContext {
            teacher_logits: None,
            aggregated: None,
            nicd: None,
            ..ctx
        };
        let t = total_loss(&ce_only, &plain).unwrap();
        assert_eq!(t.loss.value, ce);
        assert_eq!((t.picd, t.nicd), (None, None));
    }

    #[test]
    fn lsr_kd_equivalence_constant() {
        let mut rng = SeededRng::new(7, Stream::Data);
        let k = 6;
        let zt = rand_logits(&mut rng, k, 2.0);
        let pt = softmax(&zt).unwrap();
        let alpha = 0.4;
        let cfg = LossConfig {
            alpha,
            tau_kd: 1.0,
            ..Default::default()
        };
        let target = effective_target(2, &pt, alpha, 0.0).unwrap();
        let diffs: Vec<f64> = (0..100)
            .map(|_| {
                let zs = rand_logits(&mut rng, k, 3.0);
                let ps = softmax(&zs).unwrap();
                cross_entropy(&target, &ps).unwrap() - kd_loss(2, &zs, &zt, &cfg).unwrap().value
            })
            .collect();
        let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-9);
        assert!(close(diffs[0], alpha * entropy(&pt), 1e-9));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(8, Stream::Data);
        let k = 5;
        for _ in 0..10 {
            let z0 = rand_logits(&mut rng, k, 2.0);
            let (zt, agg, tp, negs, b) = full_context_parts(&mut rng, k);
            let cfg = LossConfig::default();
            let checks: Vec<(&str, Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>>)> = vec![
                (
                    "ce",
                    Box::new(|z: &[f64]| ce_loss(1, z).map(|l| (l.value, l.logit_gradient))),
                ),
                (
                    "lsr",
                    Box::new(|z: &[f64]| lsr_loss(1, &softmax(z)?, 0.2).map(|l| (l.value, l.logit_gradient))),
                ),
                (
                    "kd",
                    Box::new(|z: &[f64]| kd_loss(1, z, &zt, &cfg).map(|l| (l.value, l.logit_gradient))),
                ),
                (
                    "picd",
                    Box::new(|z: &[f64]| picd_loss(&agg, z, 4.0, true).map(|l| (l.value, l.logit_gradient))),
                ),
                (
                    "nicd",
                    Box::new(|z: &[f64]| {
                        let p = softmax_with_temperature(z, 2.0)?;
                        nicd_loss(&p, &tp, &negs, &b, 2.0).map(|l| (l.value, l.logit_gradient))
                    }),
                ),
            ];
            for (name, f) in checks {
                let r = grad_check(f, &z0, DEFAULT_GRAD_EPS).unwrap();
                assert!(r.max_relative_error < 1e-5, "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn loss_bounds_hold() {
        let mut rng = SeededRng::new(9, Stream::Data);
        for _ in 0..200 {
            let z = rand_logits(&mut rng, 4, 3.0);
            let (_, agg, tp, negs, b) = full_context_parts(&mut rng, 4);
            assert!(picd_loss(&agg, &z, 4.0, true).unwrap().value >= -1e-10);
            let p = softmax(&z).unwrap();
            let v = nicd_loss(&p, &tp, &negs, &b, 1.0).unwrap().value;
            assert!((0.0..=2.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            tau1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            gamma_nicd: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
