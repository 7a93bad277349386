use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Central-finite-difference check of a scalar-valued tensor function.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_multi(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`grad_check`]; perturbs every coordinate of every
/// input. The numeric side re-evaluates `f` on non-recording tapes, so it is
/// independent of the backward rules under test.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = xs.iter().map(|x| tape.watch(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !loss.value().is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt_or_zero(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = inputs.iter().map(|x| tape.watch(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            let mut plus = xs[i].data().to_vec();
            plus[j] = orig + eps;
            work[i] = Tensor::from_vec(xs[i].shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = xs[i].data().to_vec();
            minus[j] = orig - eps;
            work[i] = Tensor::from_vec(xs[i].shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            work[i] = xs[i].clone();

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
