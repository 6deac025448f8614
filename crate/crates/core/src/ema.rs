//! Intra-domain teacher: exponential moving average of the student weights.

use crate::error::{Error, Result};
use crate::float::Real;
use crate::segnet::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub alpha: f64,
    pub step: u64,
    pub teacher_params: ParamVector<T>,
    /// Averaged the same way as the parameters; empty for group norm.
    pub teacher_buffers: ParamVector<T>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::config(format!("EMA decay must lie in [0, 1), got {alpha}")))
    }
}

impl<T: Real> EmaState<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn init(student: &ParamVector<T>, alpha: f64) -> Result<Self> {
        Self::init_with_buffers(student, &ParamVector::default(), alpha)
    }

    pub fn init_with_buffers(student: &ParamVector<T>, buffers: &ParamVector<T>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(EmaState {
            alpha,
            step: 0,
            teacher_params: student.clone(),
            teacher_buffers: buffers.clone(),
        })
    }

    /// `(alpha, 1 - alpha)` in working precision, exactly as used by [`EmaState::update`].
    pub fn coefficients(&self) -> (T, T) {
        let a = T::lit(self.alpha);
        (a, T::one() - a)
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`.
    pub fn update(&mut self, student: &ParamVector<T>) -> Result<()> {
        self.update_with_buffers(student, None)
    }

    pub fn update_with_buffers(&mut self, student: &ParamVector<T>, buffers: Option<&ParamVector<T>>) -> Result<()> {
        self.teacher_params.check_compatible(student)?;
        if let Some(name) = student.first_non_finite() {
            return Err(Error::Divergence(format!("student parameter `{name}` is not finite")));
        }
        if let Some(b) = buffers {
            self.teacher_buffers.check_compatible(b)?;
        }
        let (a, b) = self.coefficients();
        blend(&mut self.teacher_params.values, &student.values, a, b);
        if let Some(buf) = buffers {
            blend(&mut self.teacher_buffers.values, &buf.values, a, b);
        }
        self.step += 1;
        Ok(())
    }
}

fn blend<T: Real>(teacher: &mut [T], student: &[T], a: T, b: T) {
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = a * *t + b * s;
    }
}

pub fn ema_init<T: Real>(student: &ParamVector<T>, alpha: f64) -> Result<EmaState<T>> {
    EmaState::init(student, alpha)
}

pub fn ema_update<T: Real>(mut state: EmaState<T>, student: &ParamVector<T>) -> Result<EmaState<T>> {
    state.update(student)?;
    Ok(state)
}
