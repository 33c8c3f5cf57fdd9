use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} evaluated to {v}")))
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one input tensor.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    finite(g.value(y).item(), "function")?;
    g.backward(y)?;
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        finite(g.value(y).item(), "function")
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let base = point.data()[i];
        probe.data_mut()[i] = base + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = base - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = base;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Same measure over every scalar of every parameter in `store`.
pub fn finite_difference_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    finite(g.value(y).item(), "function")?;
    g.backward(y)?;
    store.accumulate(&g);
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grad();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        finite(g.value(y).item(), "function")
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let base = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = base + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = base - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = base;
            worst = worst.max(relative_error(analytic[k][i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
