//! Objective terms for the teachers and the student, and the consistency ramp-up.
//!
//! Every loss takes probability maps (post-softmax) and returns its value
//! together with the gradient with respect to the student-side map. Teacher
//! distributions are constants: their gradient is identically zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::tensor::{LabelMap, ProbMap};

/// Floor applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_con_max: f64,
    pub ramp_exponent_scale: f64,
    pub t_max: usize,
    /// Average the Dice loss over the background class as well.
    #[serde(default = "default_true")]
    pub dice_include_background: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kd: 0.1,
            lambda_con_max: 0.1,
            ramp_exponent_scale: 5.0,
            t_max: 50,
            dice_include_background: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_con_max", self.lambda_con_max),
            ("ramp_exponent_scale", self.ramp_exponent_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.t_max < 1 {
            return Err(Error::config("t_max must be at least 1"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: ProbMap<T>,
}

/// A two-distribution loss; `teacher` is the (always zero) gradient on the
/// detached teacher side.
#[derive(Debug, Clone)]
pub struct PairGrad<T> {
    pub value: T,
    pub student: ProbMap<T>,
    pub teacher: ProbMap<T>,
}

fn check_label<T: Real>(prob: &ProbMap<T>, target: &LabelMap) -> Result<()> {
    if prob.height != target.height || prob.width != target.width {
        return Err(Error::dim(format!(
            "prediction is {}x{}, target is {}x{}",
            prob.height, prob.width, target.height, target.width
        )));
    }
    if let Some(c) = target.max_class() {
        if c as usize >= prob.classes {
            return Err(Error::dim(format!(
                "target class {c} does not exist in a {}-class prediction",
                prob.classes
            )));
        }
    }
    Ok(())
}

fn check_mask(mask: Option<&[bool]>, pixels: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != pixels => Err(Error::dim(format!(
            "mask has {} entries for {pixels} pixels",
            m.len()
        ))),
        _ => Ok(()),
    }
}

fn check_pair<T: Real>(a: &ProbMap<T>, b: &ProbMap<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "distributions differ in shape: {}x{}x{} vs {}x{}x{}",
            a.classes, a.height, a.width, b.classes, b.height, b.width
        )));
    }
    Ok(())
}

/// Pixel-mean of `-log p[target]`, over the pixels selected by `mask`.
pub fn cross_entropy_grad<T: Real>(prob: &ProbMap<T>, target: &LabelMap, mask: Option<&[bool]>) -> Result<LossGrad<T>> {
    check_label(prob, target)?;
    let n = prob.pixels();
    check_mask(mask, n)?;
    let active = mask.map_or(n, |m| m.iter().filter(|&&b| b).count());
    let mut grad = ProbMap::zeros(prob.classes, prob.height, prob.width);
    if active == 0 {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    let count = T::from_usize(active).unwrap();
    let floor = T::lit(LOG_CLAMP);
    let mut total = T::zero();
    for (i, &c) in target.data.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let j = c as usize * n + i;
        let p = prob.data[j];
        if p > floor {
            total -= p.ln();
            grad.data[j] = -T::one() / (p * count);
        } else {
            total -= floor.ln();
        }
    }
    Ok(LossGrad {
        value: total / count,
        grad,
    })
}

pub fn cross_entropy<T: Real>(prob: &ProbMap<T>, target: &LabelMap) -> Result<T> {
    Ok(cross_entropy_grad(prob, target, None)?.value)
}

/// Soft multi-class Dice loss, `1 - mean_c d_c` with
/// `d_c = (2 sum p g + eps) / (sum p + sum g + eps)`.
pub fn dice_loss_grad<T: Real>(
    prob: &ProbMap<T>,
    target: &LabelMap,
    include_background: bool,
    mask: Option<&[bool]>,
) -> Result<LossGrad<T>> {
    check_label(prob, target)?;
    let n = prob.pixels();
    check_mask(mask, n)?;
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let first = if include_background { 0 } else { 1 };
    let classes: Vec<usize> = (first..prob.classes).collect();
    if classes.is_empty() {
        return Err(Error::config("dice loss needs at least one class to average"));
    }
    let inv_k = T::one() / T::from_usize(classes.len()).unwrap();
    let mut grad = ProbMap::zeros(prob.classes, prob.height, prob.width);
    let mut mean_d = T::zero();
    for &c in &classes {
        let ch = prob.channel(c);
        let mut inter = T::zero();
        let mut sum_p = T::zero();
        let mut sum_g = T::zero();
        for i in 0..n {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = target.data[i] as usize == c;
            sum_p += ch[i];
            if g {
                inter += ch[i];
                sum_g += T::one();
            }
        }
        let num = two * inter + eps;
        let den = sum_p + sum_g + eps;
        mean_d += num / den * inv_k;
        // d(loss)/dp_ic = -(1/K) (2 g_ic den - num) / den^2
        let den2 = den * den;
        let gd = &mut grad.data[c * n..(c + 1) * n];
        for i in 0..n {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = if target.data[i] as usize == c { two * den } else { T::zero() };
            gd[i] = -inv_k * (g - num) / den2;
        }
    }
    Ok(LossGrad {
        value: T::one() - mean_d,
        grad,
    })
}

pub fn dice_loss<T: Real>(prob: &ProbMap<T>, target: &LabelMap) -> Result<T> {
    Ok(dice_loss_grad(prob, target, true, None)?.value)
}

/// Cross-entropy plus soft Dice, the supervised segmentation objective.
pub fn seg_loss_grad<T: Real>(
    prob: &ProbMap<T>,
    target: &LabelMap,
    include_background: bool,
    mask: Option<&[bool]>,
) -> Result<LossGrad<T>> {
    let ce = cross_entropy_grad(prob, target, mask)?;
    let dice = dice_loss_grad(prob, target, include_background, mask)?;
    let mut grad = ce.grad;
    for (a, b) in grad.data.iter_mut().zip(dice.grad.data) {
        *a += b;
    }
    Ok(LossGrad {
        value: ce.value + dice.value,
        grad,
    })
}

pub fn seg_loss<T: Real>(prob: &ProbMap<T>, target: &LabelMap) -> Result<T> {
    Ok(seg_loss_grad(prob, target, true, None)?.value)
}

/// Soft-target cross-entropy `-sum_c p_teacher log p_student`, pixel mean.
pub fn kd_loss_grad<T: Real>(p_teacher: &ProbMap<T>, p_student: &ProbMap<T>) -> Result<PairGrad<T>> {
    check_pair(p_teacher, p_student)?;
    let n = p_student.pixels();
    let count = T::from_usize(n).unwrap();
    let floor = T::lit(LOG_CLAMP);
    let mut student = ProbMap::zeros(p_student.classes, p_student.height, p_student.width);
    let mut total = T::zero();
    for ((g, &pt), &ps) in student.data.iter_mut().zip(&p_teacher.data).zip(&p_student.data) {
        if ps > floor {
            total -= pt * ps.ln();
            *g = -pt / (ps * count);
        } else {
            total -= pt * floor.ln();
        }
    }
    Ok(PairGrad {
        value: total / count,
        student,
        teacher: ProbMap::zeros(p_teacher.classes, p_teacher.height, p_teacher.width),
    })
}

pub fn kd_loss<T: Real>(p_teacher: &ProbMap<T>, p_student: &ProbMap<T>) -> Result<T> {
    Ok(kd_loss_grad(p_teacher, p_student)?.value)
}

/// Mean squared difference over pixels and classes.
pub fn consistency_loss_grad<T: Real>(out_student: &ProbMap<T>, out_teacher: &ProbMap<T>) -> Result<PairGrad<T>> {
    check_pair(out_student, out_teacher)?;
    let count = T::from_usize(out_student.data.len()).unwrap();
    let two = T::lit(2.0);
    let mut student = ProbMap::zeros(out_student.classes, out_student.height, out_student.width);
    let mut total = T::zero();
    for ((g, &s), &t) in student.data.iter_mut().zip(&out_student.data).zip(&out_teacher.data) {
        let d = s - t;
        total += d * d;
        *g = two * d / count;
    }
    Ok(PairGrad {
        value: total / count,
        student,
        teacher: ProbMap::zeros(out_teacher.classes, out_teacher.height, out_teacher.width),
    })
}

pub fn consistency_loss<T: Real>(out_student: &ProbMap<T>, out_teacher: &ProbMap<T>) -> Result<T> {
    Ok(consistency_loss_grad(out_student, out_teacher)?.value)
}

/// Pixel-mean entropy of a distribution map.
pub fn entropy<T: Real>(p: &ProbMap<T>) -> T {
    let floor = T::lit(LOG_CLAMP);
    let total: T = p
        .data
        .iter()
        .map(|&v| if v > floor { -v * v.ln() } else { T::zero() })
        .sum();
    total / T::from_usize(p.pixels()).unwrap()
}

/// Gaussian ramp-up of the consistency weight,
/// `lambda_con_max * exp(-scale * (1 - t / t_max)^2)`, with `t` in epochs.
///
/// `t` outside `[0, t_max]` is clamped and logged.
pub fn lambda_con(t: f64, w: &LossWeights) -> f64 {
    let t_max = w.t_max.max(1) as f64;
    let t = if (0.0..=t_max).contains(&t) {
        t
    } else {
        log::warn!("lambda_con: epoch {t} outside [0, {t_max}], clamping");
        t.clamp(0.0, t_max)
    };
    let r = 1.0 - t / t_max;
    w.lambda_con_max * (-w.ramp_exponent_scale * r * r).exp()
}

/// Student objective: `seg + lambda_kd * kd + lambda_con(t) * con`.
pub fn student_total_loss(seg: f64, kd: f64, con: f64, t: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("seg", seg), ("kd", kd), ("con", con)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} loss is {v}")));
        }
        if v < 0.0 {
            return Err(Error::Input(format!("{name} loss is negative ({v})")));
        }
    }
    Ok(seg + w.lambda_kd * kd + lambda_con(t, w) * con)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map(classes: usize, h: usize, w: usize, pixel_major: &[f64]) -> ProbMap<f64> {
        // pixel-major input is easier to write by hand
        let n = h * w;
        let mut data = vec![0.0; classes * n];
        for i in 0..n {
            for c in 0..classes {
                data[c * n + i] = pixel_major[i * classes + c];
            }
        }
        ProbMap::new(classes, h, w, data).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let target = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let onehot = ProbMap::<f64>::one_hot(&target, 3).unwrap();
        assert_eq!(cross_entropy(&onehot, &target).unwrap(), 0.0);

        let t5 = LabelMap::new(2, 2, vec![0, 1, 4, 3]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&ProbMap::<f64>::uniform(5, 2, 2), &t5).unwrap(), 5f64.ln(), epsilon = 1e-12);

        let p = map(2, 1, 2, &[0.9, 0.1, 0.6, 0.4]);
        let t = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let v = cross_entropy(&p, &t).unwrap();
        assert_abs_diff_eq!(v, (-(0.9f64.ln()) - 0.4f64.ln()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.51083, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_shape_mismatch() {
        let t = LabelMap::new(2, 3, vec![0; 6]).unwrap();
        assert!(matches!(cross_entropy(&ProbMap::<f64>::uniform(2, 3, 2), &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn dice_loss_examples() {
        let target = LabelMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        let onehot = ProbMap::<f64>::one_hot(&target, 3).unwrap();
        assert!(dice_loss(&onehot, &target).unwrap() < 1e-4);

        // class 3 absent from both prediction and target contributes d = 1
        let p4 = ProbMap::<f64>::one_hot(&target, 4).unwrap();
        assert!(dice_loss(&p4, &target).unwrap() < 1e-4);

        // p(class 1) = (1,1,0,0), target class 1 = (1,0,0,1)
        let p = map(2, 1, 4, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let t = LabelMap::new(1, 4, vec![1, 0, 0, 1]).unwrap();
        let e = DICE_EPS;
        let d = (2.0 + e) / (4.0 + e);
        assert_abs_diff_eq!(dice_loss(&p, &t).unwrap(), 1.0 - d, epsilon = 1e-12);
        assert_abs_diff_eq!(dice_loss(&p, &t).unwrap(), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn seg_loss_on_uniform_prediction() {
        let t = LabelMap::filled(2, 2, 1);
        let p = ProbMap::<f64>::uniform(5, 2, 2);
        // classes other than 1: d = eps / (0.8 + eps); class 1: (0.4 + eps) / (4.8 + eps)
        let e = DICE_EPS;
        let d_other = e / (4.0 * 0.2 + e);
        let d1 = (2.0 * 0.8 + e) / (0.8 + 4.0 + e);
        let dice = 1.0 - (4.0 * d_other + d1) / 5.0;
        assert_abs_diff_eq!(seg_loss(&p, &t).unwrap(), 5f64.ln() + dice, epsilon = 1e-12);
    }

    #[test]
    fn kd_examples() {
        let u = ProbMap::<f64>::uniform(2, 1, 1);
        assert_abs_diff_eq!(kd_loss(&u, &u).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let t = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let oh = ProbMap::<f64>::one_hot(&t, 2).unwrap();
        assert_eq!(kd_loss(&oh, &oh).unwrap(), 0.0);
        let ps = map(2, 1, 1, &[0.9, 0.1]);
        let v = kd_loss(&u, &ps).unwrap();
        assert_abs_diff_eq!(v, -(0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.20397, epsilon = 1e-5);
    }

    #[test]
    fn consistency_examples() {
        let a = map(2, 1, 2, &[1.0, 0.0, 1.0, 0.0]);
        let b = map(2, 1, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), 1.0);
        let s = map(2, 1, 1, &[0.7, 0.3]);
        let t = map(2, 1, 1, &[0.6, 0.4]);
        assert_abs_diff_eq!(consistency_loss(&s, &t).unwrap(), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn pair_losses_reject_shape_mismatch() {
        let a = ProbMap::<f64>::uniform(2, 2, 2);
        let b = ProbMap::<f64>::uniform(3, 2, 2);
        assert!(kd_loss(&a, &b).is_err());
        assert!(consistency_loss(&a, &b).is_err());
    }

    #[test]
    fn ramp_values() {
        let w = LossWeights::default();
        assert_eq!(lambda_con(50.0, &w), 0.1);
        assert_abs_diff_eq!(lambda_con(0.0, &w), 0.1 * (-5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(lambda_con(0.0, &w), 6.7379e-4, epsilon = 1e-8);
        assert_abs_diff_eq!(lambda_con(25.0, &w), 0.028650, epsilon = 1e-6);
        // out of range clamps
        assert_eq!(lambda_con(80.0, &w), 0.1);
        assert_eq!(lambda_con(-3.0, &w), lambda_con(0.0, &w));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(student_total_loss(0.7, 0.0, 0.0, 10.0, &w).unwrap(), 0.7);
        assert_abs_diff_eq!(student_total_loss(1.0, 1.0, 1.0, 50.0, &w).unwrap(), 1.2, epsilon = 1e-15);
        let v = student_total_loss(0.5, 2.0, 3.0, 0.0, &w).unwrap();
        assert_abs_diff_eq!(v, 0.5 + 0.2 + 3.0 * 0.1 * (-5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.70202, epsilon = 1e-5);
        let err = student_total_loss(0.5, f64::NAN, 0.0, 0.0, &w).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref m) if m.contains("kd")));
    }

    #[test]
    fn masked_cross_entropy_ignores_excluded_pixels() {
        let p = map(2, 1, 2, &[0.9, 0.1, 0.2, 0.8]);
        let t = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let g = cross_entropy_grad(&p, &t, Some(&[true, false])).unwrap();
        assert_abs_diff_eq!(g.value, -(0.9f64.ln()), epsilon = 1e-12);
        assert_eq!(g.grad.data[1], 0.0);
        let none = cross_entropy_grad(&p, &t, Some(&[false, false])).unwrap();
        assert_eq!(none.value, 0.0);
    }
}
