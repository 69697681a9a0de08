use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Pins a closure to the higher-ranked signature the checkers expect, which
/// closure inference does not pick on its own when the closure is bound to a
/// variable first.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Gradient of a scalar-valued tape function at `params`, via backward.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> crate::Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    f(&tape, &vars).item()
}

/// Central-difference gradient with step `eps`.
pub fn numerical_gradient<F>(f: &F, params: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = evaluate(f, &work);
            work[p].data_mut()[i] = orig - eps;
            let down = evaluate(f, &work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative disagreement between two gradients,
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if err.is_nan() {
                f64::INFINITY
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

/// Compares backward against central differences and returns the maximum
/// relative error over all parameter elements. A failing backward reports
/// an infinite error. `eps` must lie in `(0, 1e-3]`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(eps > 0.0 && eps <= 1e-3, "grad_check: eps {eps} outside (0, 1e-3]");
    let analytic = match analytic_gradient(&f, params) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let numeric = numerical_gradient(&f, params, eps);
    max_relative_error(&analytic, &numeric)
}
