use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the parameters bound on a fresh tape. Returns
/// the maximum over every coordinate of every parameter of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// Non-smooth points (e.g. `relu` or `|x|` within `h` of the kink) make the
/// central difference meaningless and the reported error large.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::shape("finite_diff_check", "loss is not a scalar"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference probe".into()))
        }
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for i in 0..params[p].len() {
            let orig = params[p].values()[i];
            probe[p].values_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[p].values_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[p].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.values()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
