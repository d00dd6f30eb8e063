use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-12));
    (analytic - numeric).abs() / denom
}

/// Compares the recorded gradient of leaf `param` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one coordinate at a time, and returns the largest
/// relative error.
///
/// Runs `backward(loss)` first; the graph is restored to its original values
/// before returning.
pub fn finite_diff_check<T: Scalar>(graph: &mut Graph<'_, T>, loss: NodeId, param: NodeId, eps: T) -> Result<T> {
    if eps <= T::zero() {
        return Err(Error::Numerical("finite difference step must be positive".into()));
    }
    if !graph.is_trainable(param) {
        return Err(Error::Graph(format!("node {} is not a trainable leaf", param.index())));
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(param)
        .cloned()
        .ok_or_else(|| Error::Graph("parameter received no gradient".into()))?;
    let original = graph.value(param).clone();
    let two_eps = eps + eps;
    let mut worst = T::zero();
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus.data_mut()[i] += eps;
        graph.set_value(param, plus)?;
        graph.recompute()?;
        let f_plus = graph.value(loss).get(0, 0);

        let mut minus = original.clone();
        minus.data_mut()[i] -= eps;
        graph.set_value(param, minus)?;
        graph.recompute()?;
        let f_minus = graph.value(loss).get(0, 0);

        let numeric = (f_plus - f_minus) / two_eps;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    graph.set_value(param, original)?;
    graph.recompute()?;
    graph.backward(loss)?;
    Ok(worst)
}
