use std::collections::BTreeMap;

use super::{GraphError, Graph, ParamSet, Var};

/// Central-difference estimate of the gradient of `f` at `point`.
///
/// `f` rebuilds its computation on a fresh graph from the given parameters
/// and returns the scalar loss value.
pub fn central_difference<F>(f: F, point: &ParamSet, eps: f64) -> Result<ParamSet, GraphError>
where
    F: Fn(&ParamSet) -> Result<f64, GraphError>,
{
    let mut probe = point.clone();
    let mut out = ParamSet::new();
    for (name, t) in point.iter() {
        let mut g = t.clone();
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("param").data_mut()[i] = orig + eps;
            let up = f(&probe)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig - eps;
            let down = f(&probe)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Largest coordinate-wise discrepancy between reverse-mode and central
/// differences, measured as `|a - n| / max(1, |a|, |n|)`.
///
/// `f` records a scalar loss on the supplied graph using the registered
/// parameter handles.
pub fn grad_check<F>(f: F, point: &ParamSet, eps: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, GraphError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars = g.params_from(point);
    let loss = f(&mut g, &vars)?;
    let analytic = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let vars = g.params_from(p);
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let numeric = central_difference(eval, point, eps)?;

    let mut worst: f64 = 0.0;
    for (name, n) in numeric.iter() {
        let a = analytic.param(name).expect("registered parameter");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = 1f64.max(av.abs()).max(nv.abs());
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    Ok(worst)
}
