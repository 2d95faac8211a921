use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

fn evaluate<S, F>(f: &F, params: &[Tensor<S>]) -> Result<(Tape<S>, Vec<Var>, Var)>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

fn forward<S, F>(f: &F, params: &[Tensor<S>]) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, params)?;
    Ok(tape.value(out).item().to_f64_lossless())
}

/// Compares reverse-mode gradients of the scalar-valued `f` against central
/// differences with step `eps`, returning the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// parameter element.
///
/// `f` receives a fresh tape and one differentiable leaf per entry of
/// `params`. It is evaluated twice at the unperturbed point; any difference
/// means it is not a deterministic function of its parameters and the check
/// is refused.
pub fn finite_diff_check<S, F>(f: F, params: &[Tensor<S>], eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let (tape, vars, out) = evaluate(&f, params)?;
    let first = tape.value(out).item().to_f64_lossless();
    let second = forward(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<S>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + lit(eps);
            let up = forward(&f, &probe)?;
            probe[pi].data_mut()[i] = orig - lit(eps);
            let down = forward(&f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i].to_f64_lossless();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err.is_nan() {
                return Err(Error::NonFinite("finite_diff_check".into()));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0f64);
        let err = finite_diff_check(|t, v| t.mul(v[0], v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_nondeterministic_function() {
        let calls = Cell::new(0u32);
        let x = Tensor::scalar(1.0f64);
        let res = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let c = t.constant(Tensor::scalar(f64::from(calls.get())));
                t.mul(v[0], c)
            },
            &[x],
            1e-6,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }
}
