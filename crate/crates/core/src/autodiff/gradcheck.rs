use super::{Tape, Var};
use crate::{Error, Matrix, Result};

/// Central-difference gradient of `f` with respect to every entry of `params`.
pub fn numeric_gradient<F>(f: &F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.scalar())
    };
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut grad = Matrix::zeros(params[k].dim());
        for idx in 0..params[k].len() {
            let (r, c) = (idx / params[k].ncols(), idx % params[k].ncols());
            let orig = params[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - h;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            grad[[r, c]] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// Returns the largest `|numeric − analytic| / max(1, |analytic|)` over all
/// parameter entries.
pub fn finite_difference_check<F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !loss.scalar().is_finite() {
        return Err(Error::NonFinite("loss under gradient check".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let numeric = numeric_gradient(&f, params, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max((n - a).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
