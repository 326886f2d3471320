//! Metric-learning and distillation objectives with analytic gradients.
//!
//! All computations are in `f64`. Softmax and log-sum-exp subtract the row
//! max. These are desk-scale reference implementations: they take embeddings,
//! similarities or logits from the caller and return a scalar plus gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Allowed deviation of an input row's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Additive angular margin softmax parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcFaceParams {
    /// Angular margin added to the target angle, in radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for ArcFaceParams {
    fn default() -> Self {
        Self { margin: 0.2, scale: 32.0 }
    }
}

impl ArcFaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Param(format!("arcface margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Param(format!("arcface scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Circle loss parameters: relaxation margin `m` and scale `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleParams {
    pub relaxation_m: f64,
    pub gamma: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self { relaxation_m: 0.25, gamma: 32.0 }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation_m > 0.0 && self.relaxation_m < 1.0) {
            return Err(Error::Param(format!("circle m {} outside (0, 1)", self.relaxation_m)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Param(format!("circle gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }
}

/// Weights of the ArcFace + Circle sum: `delta0 * arcface + delta1 * circle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedLossWeights {
    pub delta0: f64,
    pub delta1: f64,
    /// Training batch size the circle weight was derived from, if any.
    pub batch_size_beta: Option<usize>,
}

impl CombinedLossWeights {
    /// `delta0 = 1`, `delta1 = 1 / beta`.
    pub fn from_batch_size(beta: usize) -> Result<Self> {
        if beta == 0 {
            return Err(Error::Param("batch size must be positive".into()));
        }
        Ok(Self { delta0: 1.0, delta1: 1.0 / beta as f64, batch_size_beta: Some(beta) })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 >= 0.0 && self.delta1 >= 0.0) {
            return Err(Error::Param("loss weights must be non-negative".into()));
        }
        if let Some(beta) = self.batch_size_beta {
            if beta == 0 || self.delta1 != 1.0 / beta as f64 {
                return Err(Error::Param(format!("delta1 {} does not equal 1/{beta}", self.delta1)));
            }
        }
        Ok(())
    }
}

/// Temperature-scaled distillation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdParams {
    pub temperature: f64,
    pub kd_weight: f64,
    pub ce_weight: f64,
}

impl Default for KdParams {
    fn default() -> Self {
        Self { temperature: 3.0, kd_weight: 1.0, ce_weight: 1.0 }
    }
}

impl KdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Param(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceOutput {
    pub loss: f64,
    /// `n x d`, row-major.
    pub grad_embeddings: Vec<f64>,
    /// `C x d`, row-major.
    pub grad_class_weights: Vec<f64>,
}

impl From<ArcFaceOutput> for LossGrad {
    fn from(o: ArcFaceOutput) -> Self {
        let mut grad = o.grad_embeddings;
        grad.extend(o.grad_class_weights);
        LossGrad { value: o.loss, grad }
    }
}

fn check_unit_rows(m: &[f64], dim: usize, what: &str) -> Result<()> {
    for (i, row) in m.chunks(dim).enumerate() {
        let norm = math::sqrt(math::dot_f64(row, row));
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

fn check_arcface_shapes(embeddings: &[f64], class_weights: &[f64], dim: usize, labels: &[usize]) -> Result<usize> {
    if dim == 0 || embeddings.len() != labels.len() * dim || !class_weights.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "embeddings {} / class weights {} values incompatible with dim {dim} and {} labels",
            embeddings.len(),
            class_weights.len(),
            labels.len()
        )));
    }
    let classes = class_weights.len() / dim;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(classes)
}

/// ArcFace loss averaged over the batch.
///
/// Embeddings (`n x dim`) and class weights (`C x dim`) must be unit rows.
/// The target logit is `scale * cos(theta_y + margin)`, the others
/// `scale * cos(theta_j)`; gradients flow through the raw inner products.
pub fn arcface_loss(
    embeddings: &[f64],
    class_weights: &[f64],
    dim: usize,
    labels: &[usize],
    p: &ArcFaceParams,
) -> Result<ArcFaceOutput> {
    p.validate()?;
    check_arcface_shapes(embeddings, class_weights, dim, labels)?;
    check_unit_rows(embeddings, dim, "embedding")?;
    check_unit_rows(class_weights, dim, "class weight")?;
    arcface_loss_unchecked(embeddings, class_weights, dim, labels, p)
}

/// Cross-entropy of `logits` against class `y`; leaves `softmax - onehot(y)`
/// in `logits`. When the target dominates, the loss and the target-class
/// gradient are formed from the off-target terms alone so that tiny values
/// keep full relative precision.
fn cross_entropy_in_place(logits: &mut [f64], y: usize) -> f64 {
    let zy = logits[y];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if zy >= max {
        let rest: f64 = logits.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, z)| math::exp(z - zy)).sum();
        math::ln_1p(rest)
    } else {
        math::log_sum_exp(logits) - zy
    };
    math::softmax_in_place(logits);
    logits[y] = -logits.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, p)| p).sum::<f64>();
    loss
}

/// [`arcface_loss`] without the unit-norm check, for perturbation-based
/// gradient checking.
pub fn arcface_loss_unchecked(
    embeddings: &[f64],
    class_weights: &[f64],
    dim: usize,
    labels: &[usize],
    p: &ArcFaceParams,
) -> Result<ArcFaceOutput> {
    let classes = check_arcface_shapes(embeddings, class_weights, dim, labels)?;
    let n = labels.len();
    let (cos_m, sin_m) = (math::cos(p.margin), math::sin(p.margin));
    let mut grad_e = vec![0.0; embeddings.len()];
    let mut grad_w = vec![0.0; class_weights.len()];
    let mut total = 0.0;
    let mut logits = vec![0.0; classes];
    let mut dlogit_dcos = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        let x = &embeddings[i * dim..(i + 1) * dim];
        for j in 0..classes {
            let c = math::dot_f64(x, &class_weights[j * dim..(j + 1) * dim]);
            if j == y {
                let cc = c.clamp(-1.0, 1.0);
                let sin_t = math::sqrt((1.0 - cc * cc).max(0.0));
                logits[j] = p.scale * (cc * cos_m - sin_t * sin_m);
                // d/dc cos(acos(c) + m) = cos m + sin m * c / sin(theta)
                dlogit_dcos[j] = p.scale * (cos_m + sin_m * cc / sin_t.max(1e-12));
            } else {
                logits[j] = p.scale * c;
                dlogit_dcos[j] = p.scale;
            }
        }
        total += cross_entropy_in_place(&mut logits, y);
        for j in 0..classes {
            let dc = logits[j] * dlogit_dcos[j] / n as f64;
            if dc == 0.0 {
                continue;
            }
            let w = &class_weights[j * dim..(j + 1) * dim];
            for k in 0..dim {
                grad_e[i * dim + k] += dc * w[k];
                grad_w[j * dim + k] += dc * x[k];
            }
        }
    }
    let loss = if n == 0 { 0.0 } else { total / n as f64 };
    Ok(ArcFaceOutput { loss, grad_embeddings: grad_e, grad_class_weights: grad_w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleOutput {
    pub loss: f64,
    pub grad_sp: Vec<f64>,
    pub grad_sn: Vec<f64>,
}

/// Self-paced weights `alpha_p = max(0, 1 + m - s_p)`, `alpha_n = max(0, s_n + m)`.
pub fn circle_weights(sp: &[f64], sn: &[f64], p: &CircleParams) -> (Vec<f64>, Vec<f64>) {
    let m = p.relaxation_m;
    (
        sp.iter().map(|s| (1.0 + m - s).max(0.0)).collect(),
        sn.iter().map(|s| (s + m).max(0.0)).collect(),
    )
}

/// Pair-wise Circle loss over positive and negative similarities.
///
/// `L = log(1 + sum_n exp(gamma a_n (s_n - m)) * sum_p exp(-gamma a_p (s_p - 1 + m)))`.
/// The `a` weights are treated as constants when differentiating.
pub fn circle_loss(sp: &[f64], sn: &[f64], p: &CircleParams) -> Result<CircleOutput> {
    p.validate()?;
    for s in sp.iter().chain(sn) {
        if !(s.abs() <= 1.0 + 1e-6) {
            return Err(Error::Data(format!("similarity {s} outside [-1, 1]")));
        }
    }
    let (ap, an) = circle_weights(sp, sn, p);
    Ok(circle_loss_with_weights(sp, sn, &ap, &an, p))
}

/// Circle loss with caller-fixed weighting factors.
pub fn circle_loss_with_weights(sp: &[f64], sn: &[f64], alpha_p: &[f64], alpha_n: &[f64], p: &CircleParams) -> CircleOutput {
    let m = p.relaxation_m;
    let (delta_p, delta_n) = (1.0 - m, m);
    let mut grad_sp = vec![0.0; sp.len()];
    let mut grad_sn = vec![0.0; sn.len()];
    if sp.is_empty() || sn.is_empty() {
        return CircleOutput { loss: 0.0, grad_sp, grad_sn };
    }
    let mut lp: Vec<f64> = sp.iter().zip(alpha_p).map(|(s, a)| -p.gamma * a * (s - delta_p)).collect();
    let mut ln: Vec<f64> = sn.iter().zip(alpha_n).map(|(s, a)| p.gamma * a * (s - delta_n)).collect();
    let z = math::log_sum_exp(&lp) + math::log_sum_exp(&ln);
    let loss = math::softplus(z);
    let outer = math::sigmoid(z);
    math::softmax_in_place(&mut lp);
    math::softmax_in_place(&mut ln);
    for i in 0..sp.len() {
        grad_sp[i] = -outer * lp[i] * p.gamma * alpha_p[i];
    }
    for j in 0..sn.len() {
        grad_sn[j] = outer * ln[j] * p.gamma * alpha_n[j];
    }
    CircleOutput { loss, grad_sp, grad_sn }
}

impl From<CircleOutput> for LossGrad {
    fn from(o: CircleOutput) -> Self {
        let mut grad = o.grad_sp;
        grad.extend(o.grad_sn);
        LossGrad { value: o.loss, grad }
    }
}

/// Weighted sum of an ArcFace term and a Circle term.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub value: f64,
    pub grad_arcface: Vec<f64>,
    pub grad_circle: Vec<f64>,
}

pub fn combined_loss(la: &LossGrad, lc: &LossGrad, w: &CombinedLossWeights) -> CombinedOutput {
    CombinedOutput {
        value: w.delta0 * la.value + w.delta1 * lc.value,
        grad_arcface: la.grad.iter().map(|g| w.delta0 * g).collect(),
        grad_circle: lc.grad.iter().map(|g| w.delta1 * g).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdOutput {
    pub loss: f64,
    /// `kd_weight * T^2 * mean KL(teacher || student)`.
    pub kd_term: f64,
    /// `ce_weight * mean CE(student, labels)`.
    pub ce_term: f64,
    /// `n x C`, gradient with respect to the student logits.
    pub grad_student: Vec<f64>,
}

fn log_softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|v| v * scale).collect();
    let lse = math::log_sum_exp(&z);
    z.into_iter().map(|v| v - lse).collect()
}

/// Knowledge distillation loss on `n x classes` logits.
pub fn kd_distill_loss(
    student: &[f64],
    teacher: &[f64],
    labels: &[usize],
    classes: usize,
    p: &KdParams,
) -> Result<KdOutput> {
    p.validate()?;
    let n = labels.len();
    if classes == 0 || student.len() != n * classes || teacher.len() != n * classes {
        return Err(Error::Shape(format!(
            "student {} / teacher {} values for {n} labels x {classes} classes",
            student.len(),
            teacher.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let t = p.temperature;
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut kl_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut grad = vec![0.0; student.len()];
    for (i, &y) in labels.iter().enumerate() {
        let s = &student[i * classes..(i + 1) * classes];
        let te = &teacher[i * classes..(i + 1) * classes];
        let log_ps = log_softmax(s, 1.0 / t);
        let log_pt = log_softmax(te, 1.0 / t);
        let log_p = log_softmax(s, 1.0);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for c in 0..classes {
            let pt = math::exp(log_pt[c]);
            if pt > 0.0 {
                kl_sum += pt * (log_pt[c] - log_ps[c]);
            }
            let ps = math::exp(log_ps[c]);
            // d/dz of T^2 KL = T (p_s - p_t)
            g[c] = p.kd_weight * t * (ps - pt) * inv_n;
            let onehot = if c == y { 1.0 } else { 0.0 };
            g[c] += p.ce_weight * (math::exp(log_p[c]) - onehot) * inv_n;
        }
        ce_sum -= log_p[y];
    }
    let kd_term = p.kd_weight * t * t * kl_sum * inv_n;
    let ce_term = p.ce_weight * ce_sum * inv_n;
    Ok(KdOutput { loss: kd_term + ce_term, kd_term, ce_term, grad_student: grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = math::sqrt(math::dot_f64(v, v));
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn arcface_single_class_is_zero() {
        let e = unit(&[0.3, -0.2, 0.9]);
        let w = unit(&[0.1, 0.5, 0.2]);
        let out = arcface_loss(&e, &w, 3, &[0], &ArcFaceParams::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_embeddings.iter().chain(&out.grad_class_weights).all(|g| *g == 0.0));
    }

    #[test]
    fn arcface_zero_margin_is_scaled_softmax() {
        let e: Vec<f64> = [unit(&[1.0, 2.0]), unit(&[-1.0, 0.5])].concat();
        let w: Vec<f64> = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])].concat();
        let labels = [2, 0];
        let p = ArcFaceParams { margin: 0.0, scale: 4.0 };
        let out = arcface_loss(&e, &w, 2, &labels, &p).unwrap();
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let logits: Vec<f64> = (0..3).map(|j| 4.0 * math::dot_f64(&e[i * 2..i * 2 + 2], &w[j * 2..j * 2 + 2])).collect();
            let denom: f64 = logits.iter().map(|z| math::exp(*z)).sum();
            expected += -math::ln(math::exp(logits[y]) / denom);
        }
        assert!((out.loss - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn arcface_rejects_bad_inputs() {
        let e = unit(&[1.0, 0.0]);
        let w = unit(&[0.0, 1.0]);
        assert!(matches!(arcface_loss(&e, &w, 2, &[1], &ArcFaceParams::default()), Err(Error::Data(_))));
        assert!(matches!(arcface_loss(&[2.0, 0.0], &w, 2, &[0], &ArcFaceParams::default()), Err(Error::Data(_))));
        let bad = ArcFaceParams { margin: 2.0, scale: 1.0 };
        assert!(matches!(arcface_loss(&e, &w, 2, &[0], &bad), Err(Error::Param(_))));
    }

    #[test]
    fn circle_empty_sides() {
        let p = CircleParams::default();
        assert_eq!(circle_loss(&[0.5], &[], &p).unwrap().loss, 0.0);
        assert_eq!(circle_loss(&[], &[0.5], &p).unwrap().loss, 0.0);
        assert!(circle_loss(&[1.5], &[0.0], &p).is_err());
    }

    #[test]
    fn circle_matches_direct_formula() {
        let p = CircleParams::default();
        let out = circle_loss(&[0.9], &[0.4], &p).unwrap();
        // a_n = 0.65, a_p = 0.35; direct, unstabilized
        let direct = math::ln(1.0 + math::exp(32.0 * 0.65 * (0.4 - 0.25)) * math::exp(-32.0 * 0.35 * (0.9 - 0.75)));
        assert!((out.loss - direct).abs() < 1e-10);
    }

    #[test]
    fn combined_arithmetic() {
        let w = CombinedLossWeights::from_batch_size(4).unwrap();
        let la = LossGrad { value: 2.0, grad: vec![1.0] };
        let lc = LossGrad { value: 0.5, grad: vec![4.0] };
        let out = combined_loss(&la, &lc, &w);
        assert_eq!(out.value, 2.125);
        assert_eq!(out.grad_circle, vec![1.0]);
        let w1 = CombinedLossWeights::from_batch_size(1).unwrap();
        assert_eq!(combined_loss(&la, &lc, &w1).value, 2.5);
        assert!(CombinedLossWeights::from_batch_size(0).is_err());
        let zero = LossGrad { value: 0.0, grad: vec![] };
        assert_eq!(combined_loss(&la, &zero, &w).value, w.delta0 * 2.0);
    }

    #[test]
    fn kd_identical_logits_leave_ce_only() {
        let s = [0.2, -1.0, 3.0, 0.0, 0.5, 0.5];
        let out = kd_distill_loss(&s, &s, &[2, 0], 3, &KdParams::default()).unwrap();
        assert!(out.kd_term.abs() < 1e-15);
        assert_eq!(out.loss, out.kd_term + out.ce_term);
        let ce_only = kd_distill_loss(&s, &s, &[2, 0], 3, &KdParams { kd_weight: 0.0, ..Default::default() }).unwrap();
        assert!((out.loss - ce_only.loss).abs() < 1e-15);
    }

    #[test]
    fn kd_uniform_teacher_and_student() {
        let p = KdParams { temperature: 1.0, ..Default::default() };
        let out = kd_distill_loss(&[1.0; 4], &[0.0; 4], &[1], 4, &p).unwrap();
        assert!(out.kd_term.abs() < 1e-15);
    }

    #[test]
    fn kd_shape_mismatch() {
        assert!(matches!(
            kd_distill_loss(&[0.0; 4], &[0.0; 3], &[0], 4, &KdParams::default()),
            Err(Error::Shape(_))
        ));
    }
}
