//! Central-difference gradient verification.

use ndarray::Array2;

use crate::error::Result;
use crate::gradengine::graph::{Graph, Var};
use crate::gradengine::params::ParamStore;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Maximum over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one matrix argument.
///
/// Points where `f` is not differentiable (a ReLU exactly at its kink, a clamp
/// exactly at its bound) give meaningless numbers and must be avoided by the
/// caller.
pub fn grad_check<F>(f: F, point: &Array2<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Array2::zeros(point.dim()));

    let eval = |p: Array2<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut worst: f64 = 0.0;
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let mut plus = point.clone();
        plus[[r, c]] += eps;
        let mut minus = point.clone();
        minus[[r, c]] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[[r, c]], numeric));
    }
    Ok(worst)
}

/// Same measure as [`grad_check`], taken over every scalar of every parameter
/// in `store`. `loss` builds the scalar loss on a fresh graph and must be a
/// deterministic function of the parameters.
pub fn grad_check_store<F>(store: &ParamStore, loss: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss(store, &mut g)?;
    g.backward(root)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&g, 1.0)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(s, &mut g)?;
        Ok(g.scalar(root))
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let grad = analytic.grad(name)?.clone();
        for (idx, &a) in grad.iter().enumerate() {
            let cols = grad.ncols();
            let at = [idx / cols, idx % cols];
            let orig = store.value(name)?[at];
            probe.value_mut(name)?[at] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(name)?[at] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(name)?[at] = orig;
            let err = relative_error(a, (up - down) / (2.0 * eps));
            if err > worst {
                log::debug!("grad_check: {name}{at:?} analytic {a} numeric {}", (up - down) / (2.0 * eps));
                worst = err;
            }
        }
    }
    Ok(worst)
}
