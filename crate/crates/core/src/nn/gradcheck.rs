use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `h`.
///
/// `f` must build a scalar from the leaf it is given. Relative error per
/// coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, shape: &[usize], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.variable(shape.to_vec(), point.to_vec())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(shape.to_vec(), p.to_vec())?;
        let y = f(&mut t, x)?;
        let v = t.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut p = point.to_vec();
    for j in 0..p.len() {
        let orig = p[j];
        p[j] = orig + h;
        let up = eval(&p)?;
        p[j] = orig - h;
        let down = eval(&p)?;
        p[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
