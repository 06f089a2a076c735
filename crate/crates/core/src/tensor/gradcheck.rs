use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)` over
/// every element of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Tape::new();
        let vars = xs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective(v));
        }
        Ok(v)
    };

    let mut g = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v0 = g.value(out).item();
    if !v0.is_finite() {
        return Err(Error::NonFiniteObjective(v0));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
