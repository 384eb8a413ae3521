//! Objectives over an expanded output head.
//!
//! A head of width `D = C + Q` is split into a class slice (the first `C`
//! logits) and an aspect slice (the remaining `Q`). The class slice is scored
//! by softmax cross-entropy, the aspect slice by a per-aspect binary
//! cross-entropy against soft yes-probabilities, and the two are combined as
//! `total = ce + alpha * makd`.
//!
//! The scalar functions here work on a single example and are written
//! directly in closed form. [`objective`] emits the batched version of the
//! same objective onto a [`Record`] for training; the two are kept as
//! separate code paths so each can check the other.
//!
//! Class labels are zero-based throughout (`0..C`).

use thiserror::Error;

use crate::numerics::{self, log_softmax, sigmoid, softmax, softplus, NodeId, Record, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite logit ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected {expected} aspect targets, got {got}")]
    TargetLength { expected: usize, got: usize },
    #[error("aspect target {0} outside [0, 1]")]
    TargetRange(f64),
    #[error("logit length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("alpha must be non-negative, got {0}")]
    Alpha(f64),
    #[error("head of width {width} cannot hold {classes} classes")]
    HeadWidth { width: usize, classes: usize },
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One example's logits from a head of width `C + Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedOutput {
    logits: Vec<f64>,
    num_classes: usize,
}

impl ExpandedOutput {
    pub fn new(logits: Vec<f64>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > logits.len() {
            return Err(LossError::HeadWidth {
                width: logits.len(),
                classes: num_classes,
            });
        }
        Ok(Self { logits, num_classes })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_aspects(&self) -> usize {
        self.logits.len() - self.num_classes
    }

    pub fn class_logits(&self) -> &[f64] {
        &self.logits[..self.num_classes]
    }

    pub fn aspect_logits(&self) -> &[f64] {
        &self.logits[self.num_classes..]
    }

    pub fn aspect_logits_mut(&mut self) -> &mut [f64] {
        let c = self.num_classes;
        &mut self.logits[c..]
    }

    /// Argmax over the class slice; the first maximum wins ties.
    pub fn predicted_class(&self) -> usize {
        argmax(self.class_logits())
    }

    /// Sigmoid of each aspect logit.
    pub fn aspect_probabilities(&self) -> Vec<f64> {
        self.aspect_logits().iter().map(|&z| sigmoid(z)).collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Soft yes-probabilities, one per aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectTargets(Vec<f64>);

impl AspectTargets {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::TargetRange(bad));
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub makd: f64,
    pub kd: Option<f64>,
    pub total: f64,
    pub alpha: f64,
}

/// Two-way softmax of a yes logit against a no logit, i.e.
/// `sigmoid(z_yes - z_no)`.
pub fn yes_no_probability(z_yes: f64, z_no: f64) -> Result<f64> {
    if !z_yes.is_finite() || !z_no.is_finite() {
        return Err(LossError::NonFinite(z_yes, z_no));
    }
    Ok(sigmoid(z_yes - z_no))
}

pub fn class_cross_entropy(output: &ExpandedOutput, label: usize) -> Result<f64> {
    let classes = output.class_logits();
    if label >= classes.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: classes.len(),
        });
    }
    Ok(numerics::log_sum_exp(classes) - classes[label])
}

fn check_targets(output: &ExpandedOutput, targets: &AspectTargets) -> Result<()> {
    if targets.len() != output.num_aspects() {
        return Err(LossError::TargetLength {
            expected: output.num_aspects(),
            got: targets.len(),
        });
    }
    Ok(())
}

/// Binary cross-entropy summed over aspects, computed from logits as
/// `max(z, 0) - q z + ln(1 + e^-|z|)`.
pub fn makd_bce(output: &ExpandedOutput, targets: &AspectTargets) -> Result<f64> {
    check_targets(output, targets)?;
    Ok(output
        .aspect_logits()
        .iter()
        .zip(targets.as_slice())
        .map(|(&z, &q)| z.max(0.0) - q * z + (-z.abs()).exp().ln_1p())
        .sum())
}

pub fn total_loss(output: &ExpandedOutput, label: usize, targets: &AspectTargets, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(LossError::Alpha(alpha));
    }
    let ce = class_cross_entropy(output, label)?;
    let makd = makd_bce(output, targets)?;
    Ok(LossBreakdown {
        ce,
        makd,
        kd: None,
        total: ce + alpha * makd,
        alpha,
    })
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Entropy of a Bernoulli(q) variable in nats.
pub fn bernoulli_entropy(q: f64) -> f64 {
    -(xlogx(q) + xlogx(1.0 - q))
}

/// Temperature-scaled distillation loss
/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kd_kl(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(LossError::LengthMismatch(student.len(), teacher.len()));
    }
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let s: Vec<f64> = student.iter().map(|x| x / temperature).collect();
    let t: Vec<f64> = teacher.iter().map(|x| x / temperature).collect();
    let log_ps = log_softmax(&s);
    let log_pt = log_softmax(&t);
    let kl: f64 = log_pt.iter().zip(&log_ps).map(|(&lt, &ls)| lt.exp() * (lt - ls)).sum();
    Ok(temperature * temperature * kl.max(0.0))
}

/// Σ KL(Bernoulli(q_i) || Bernoulli(sigmoid(z_i))) over the aspect slice.
pub fn kl_aspect_loss(output: &ExpandedOutput, targets: &AspectTargets) -> Result<f64> {
    check_targets(output, targets)?;
    Ok(output
        .aspect_logits()
        .iter()
        .zip(targets.as_slice())
        .map(|(&z, &q)| {
            // ln p = -softplus(-z), ln(1 - p) = -softplus(z)
            let log_p = -softplus(-z);
            let log_not_p = -softplus(z);
            xlogx(q) - q * log_p + xlogx(1.0 - q) - (1.0 - q) * log_not_p
        })
        .sum())
}

/// Closed-form gradient of [`total_loss`] with respect to every logit.
pub fn total_loss_grad(output: &ExpandedOutput, label: usize, targets: &AspectTargets, alpha: f64) -> Result<Vec<f64>> {
    class_cross_entropy(output, label)?;
    check_targets(output, targets)?;
    let mut grad = softmax(output.class_logits());
    grad[label] -= 1.0;
    grad.extend(
        output
            .aspect_logits()
            .iter()
            .zip(targets.as_slice())
            .map(|(&z, &q)| alpha * (sigmoid(z) - q)),
    );
    Ok(grad)
}

/// Closed-form gradient of [`kd_kl`] with respect to the student logits.
pub fn kd_kl_grad(student: &[f64], teacher: &[f64], temperature: f64) -> Result<Vec<f64>> {
    kd_kl(student, teacher, temperature)?;
    let ps = softmax(&student.iter().map(|x| x / temperature).collect::<Vec<_>>());
    let pt = softmax(&teacher.iter().map(|x| x / temperature).collect::<Vec<_>>());
    Ok(ps.iter().zip(&pt).map(|(s, t)| temperature * (s - t)).collect())
}

/// Which divergence scores the aspect slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AspectLoss {
    #[default]
    Bce,
    Kl,
}

impl std::fmt::Display for AspectLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AspectLoss::Bce => "bce",
            AspectLoss::Kl => "kl",
        })
    }
}

impl std::str::FromStr for AspectLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bce" => Ok(AspectLoss::Bce),
            "kl" => Ok(AspectLoss::Kl),
            other => Err(format!("unknown aspect loss '{other}' (expected bce or kl)")),
        }
    }
}

/// Batched targets handed to [`objective`].
#[derive(Debug, Clone, Copy)]
pub struct BatchTargets<'a> {
    /// One zero-based label per row.
    pub labels: &'a [usize],
    /// Row-major `B x Q` aspect targets; required when `alpha > 0`.
    pub aspects: Option<&'a [f64]>,
    /// Row-major `B x C` teacher logits for the distillation term.
    pub teacher: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub variant: AspectLoss,
    /// `(temperature, weight)` of the distillation term.
    pub kd: Option<(f64, f64)>,
}

/// Node handles of the batched objective. Each term is the mean over rows.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub ce: NodeId,
    pub makd: Option<NodeId>,
    pub kd: Option<NodeId>,
    pub total: NodeId,
}

/// Emits `ce + alpha * makd (+ w * kd)` over a `B x (C + Q)` logits node.
///
/// Terms whose weight is exactly zero are left out of `total`, so they
/// contribute nothing to any gradient. The makd node is still emitted when
/// targets are present, for reporting.
pub fn objective(
    rec: &mut Record,
    logits: NodeId,
    num_classes: usize,
    targets: BatchTargets<'_>,
    weights: ObjectiveWeights,
) -> Result<ObjectiveNodes> {
    let shape = rec.shape(logits).to_vec();
    let (batch, width) = (shape[0], shape[1]);
    if num_classes == 0 || num_classes > width {
        return Err(LossError::HeadWidth {
            width,
            classes: num_classes,
        });
    }
    if targets.labels.len() != batch {
        return Err(LossError::LengthMismatch(targets.labels.len(), batch));
    }
    if !(weights.alpha >= 0.0) {
        return Err(LossError::Alpha(weights.alpha));
    }
    let num_aspects = width - num_classes;
    let inv_b = 1.0 / batch as f64;

    let class_slice = if num_aspects == 0 {
        logits
    } else {
        rec.slice_cols(logits, 0, num_classes)?
    };
    let mut onehot = vec![0.0; batch * num_classes];
    for (r, &label) in targets.labels.iter().enumerate() {
        if label >= num_classes {
            return Err(LossError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        onehot[r * num_classes + label] = 1.0;
    }
    let onehot = rec.constant(Tensor::matrix(batch, num_classes, onehot)?);
    let log_p = rec.log_softmax(class_slice, 1)?;
    let picked = rec.mul(log_p, onehot)?;
    let picked_sum = rec.sum(picked);
    let ce = rec.scale(picked_sum, -inv_b);

    let makd = match (targets.aspects, num_aspects) {
        (Some(q), n) if n > 0 => {
            if q.len() != batch * n {
                return Err(LossError::TargetLength {
                    expected: batch * n,
                    got: q.len(),
                });
            }
            if let Some(&bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(LossError::TargetRange(bad));
            }
            let z = rec.slice_cols(logits, num_classes, width)?;
            let sp = rec.softplus(z);
            let qt = rec.constant(Tensor::matrix(batch, n, q.to_vec())?);
            let qz = rec.mul(qt, z)?;
            let per = rec.sub(sp, qz)?;
            let s = rec.sum(per);
            let bce = rec.scale(s, inv_b);
            Some(match weights.variant {
                AspectLoss::Bce => bce,
                AspectLoss::Kl => {
                    let entropy: f64 = q.iter().map(|&v| bernoulli_entropy(v)).sum();
                    let h = rec.constant(Tensor::scalar(entropy * inv_b));
                    rec.sub(bce, h)?
                }
            })
        }
        (None, n) if n > 0 && weights.alpha > 0.0 => {
            return Err(LossError::TargetLength {
                expected: batch * n,
                got: 0,
            })
        }
        _ => None,
    };

    let kd = match (weights.kd, targets.teacher) {
        (Some((temperature, weight)), Some(teacher)) if weight != 0.0 => {
            if !(temperature > 0.0) {
                return Err(LossError::Temperature(temperature));
            }
            if teacher.len() != batch * num_classes {
                return Err(LossError::LengthMismatch(teacher.len(), batch * num_classes));
            }
            let mut pt = Vec::with_capacity(teacher.len());
            let mut neg_entropy = 0.0;
            for row in teacher.chunks(num_classes) {
                let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
                for l in log_softmax(&scaled) {
                    let p = l.exp();
                    neg_entropy += p * l;
                    pt.push(p);
                }
            }
            let t2 = temperature * temperature;
            let scaled = rec.scale(class_slice, 1.0 / temperature);
            let log_ps = rec.log_softmax(scaled, 1)?;
            let pt = rec.constant(Tensor::matrix(batch, num_classes, pt)?);
            let cross = rec.mul(pt, log_ps)?;
            let cross = rec.sum(cross);
            let c = rec.constant(Tensor::scalar(neg_entropy));
            let kl = rec.sub(c, cross)?;
            Some(rec.scale(kl, t2 * inv_b))
        }
        (Some((_, weight)), None) if weight != 0.0 => return Err(LossError::LengthMismatch(0, batch * num_classes)),
        _ => None,
    };

    let mut total = ce;
    if let Some(m) = makd {
        if weights.alpha != 0.0 {
            let weighted = rec.scale(m, weights.alpha);
            total = rec.add(total, weighted)?;
        }
    }
    if let (Some(k), Some((_, weight))) = (kd, weights.kd) {
        let weighted = rec.scale(k, weight);
        total = rec.add(total, weighted)?;
    }
    Ok(ObjectiveNodes { ce, makd, kd, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn out(logits: &[f64], c: usize) -> ExpandedOutput {
        ExpandedOutput::new(logits.to_vec(), c).unwrap()
    }

    fn q(v: &[f64]) -> AspectTargets {
        AspectTargets::new(v.to_vec()).unwrap()
    }

    #[test]
    fn yes_no_examples() {
        assert_eq!(yes_no_probability(0.0, 0.0).unwrap(), 0.5);
        // 1 / (1 + e^-2) to 16 digits
        assert_abs_diff_eq!(
            yes_no_probability(2.0, 0.0).unwrap(),
            0.8807970779778823,
            epsilon = 1e-15
        );
        let hi = yes_no_probability(1000.0, 0.0).unwrap();
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);
        assert!(yes_no_probability(f64::NAN, 0.0).is_err());
        assert!(yes_no_probability(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(
            class_cross_entropy(&out(&[0.0, 0.0], 2), 0).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // -ln(e^10 / (e^10 + 2)) = ln(1 + 2e^-10)
        let expect = (2.0 * (-10.0f64).exp()).ln_1p();
        let got = class_cross_entropy(&out(&[10.0, 0.0, 0.0], 3), 0).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 9.08e-5, epsilon = 1e-7);
        let with_aspects = class_cross_entropy(&out(&[10.0, 0.0, 0.0, 7.0, -3.0], 3), 0).unwrap();
        assert_eq!(got, with_aspects);
        assert!(matches!(
            class_cross_entropy(&out(&[0.0, 0.0], 2), 2),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(
            makd_bce(&out(&[1.0, 0.0], 1), &q(&[0.5])).unwrap(),
            ln2,
            epsilon = 1e-15
        );
        // softplus(20) - 20 = ln(1 + e^-20)
        let expect = (-20.0f64).exp().ln_1p();
        let got = makd_bce(&out(&[1.0, 20.0], 1), &q(&[1.0])).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-20);
        assert_abs_diff_eq!(got, 2.06e-9, epsilon = 1e-11);
        assert_abs_diff_eq!(
            makd_bce(&out(&[1.0, 0.0, 0.0], 1), &q(&[0.0, 1.0])).unwrap(),
            2.0 * ln2,
            epsilon = 1e-15
        );
        assert!(matches!(
            makd_bce(&out(&[1.0, 0.0], 1), &q(&[0.5, 0.5])),
            Err(LossError::TargetLength { .. })
        ));
    }

    #[test]
    fn total_examples() {
        let o = out(&[0.3, -1.0, 2.0, 0.4], 2);
        let t = q(&[0.2, 0.9]);
        let zero = total_loss(&o, 1, &t, 0.0).unwrap();
        assert_eq!(zero.total, zero.ce);
        // ln 2 class CE plus ln 2 aspect BCE with alpha = 1
        let b = total_loss(&out(&[0.0, 0.0, 0.0], 2), 0, &q(&[0.5]), 1.0).unwrap();
        assert_abs_diff_eq!(b.total, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(total_loss(&o, 0, &t, -1.0).is_err());
    }

    #[test]
    fn kd_examples() {
        let s = [0.3, -0.2, 1.5];
        assert_abs_diff_eq!(kd_kl(&s, &s, 4.0).unwrap(), 0.0, epsilon = 1e-12);
        let shifted: Vec<f64> = s.iter().map(|x| x + 3.7).collect();
        assert_abs_diff_eq!(kd_kl(&s, &shifted, 2.0).unwrap(), 0.0, epsilon = 1e-12);
        // direct KL of [σ(1), 1-σ(1)] against uniform
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let direct = p * (p / 0.5).ln() + (1.0 - p) * ((1.0 - p) / 0.5).ln();
        let got = kd_kl(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(got, direct, epsilon = 1e-14);
        assert_abs_diff_eq!(got, 0.110944, epsilon = 1e-6);
        assert!(kd_kl(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(kd_kl(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn kl_aspect_examples() {
        let z = [0.7, -2.0];
        let matched = q(&[sigmoid(0.7), sigmoid(-2.0)]);
        let mut logits = vec![0.0];
        logits.extend(z);
        assert_abs_diff_eq!(
            kl_aspect_loss(&out(&logits, 1), &matched).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            kl_aspect_loss(&out(&[0.0, 0.0], 1), &q(&[1.0])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn targets_validated() {
        assert!(AspectTargets::new(vec![0.0, 1.0]).is_ok());
        assert!(AspectTargets::new(vec![1.01]).is_err());
        assert!(AspectTargets::new(vec![f64::NAN]).is_err());
    }
}
