use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central finite
/// differences.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, theta: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.var(t.clone())).collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(theta[p].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for i in 0..theta[p].len() {
            let orig = theta[p].data()[i];
            probe[p].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[p].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Usage(format!("grad_check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}
