use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference estimate of `∂f/∂x` for every coordinate of `x`.
pub fn central_difference<F, Fun>(f: &Fun, x: &Tensor<F>, h: f64) -> Result<Vec<f64>>
where
    F: Real,
    Fun: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out).f64())
    };
    let mut probe = x.clone();
    probe.set_requires_grad(false);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = F::of(orig.f64() + h);
        let up = eval(&probe)?;
        probe.data_mut()[i] = F::of(orig.f64() - h);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` maps a leaf holding `x` to a scalar. Callers keep `x` away from
/// relu/max kinks.
pub fn check_gradients<F, Fun>(f: Fun, x: &Tensor<F>, h: f64) -> Result<f64>
where
    F: Real,
    Fun: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);
    let numeric = central_difference(&f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a.f64() - n).abs() / a.f64().abs().max(1.0))
        .fold(0.0, f64::max))
}
