use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between the analytic gradient of a
/// scalar function and its central finite difference.
///
/// The relative error of coordinate `i` is `|a - n| / max(|a|, |n|, 1e-3)`,
/// so coordinates with tiny gradients are compared absolutely.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Autodiff(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let xv = g.input(t);
        let y = f(&mut g, xv)?;
        if g.value(y).len() != 1 {
            return Err(Error::Autodiff("grad_check needs a scalar-valued function".into()));
        }
        let v = g.scalar(y);
        if !v.is_finite() {
            return Err(Error::Autodiff(format!("function value is not finite: {v}")));
        }
        Ok(v)
    };
    eval(x.clone())?;

    let mut g = Graph::new();
    let xv = g.input(x.clone().with_requires_grad(true));
    let y = f(&mut g, xv)?;
    let analytic = if g.requires_grad(y) {
        let grads = g.backward(y)?;
        grads
            .get(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
