use super::{Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Outcome of comparing a tape gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck<T> {
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`
    pub max_rel_error: T,
}

/// Differentiates the scalar function `f` at `x` on a fresh tape and compares
/// each coordinate against the central difference with the given `step`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(TensorError::Invalid("finite difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let out = f(&mut t, v)?;
        Ok(t.data(out)[0])
    };
    let two = T::lit(2.0);
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (two * step));
    }
    let max_rel_error =
        analytic.iter().zip(&numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(T::one())).fold(T::zero(), T::max);
    Ok(GradCheck { analytic, numeric, max_rel_error })
}
