use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{MladError, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns `max |analytic − numeric| / max(1, |numeric|)`
/// over every parameter entry.
///
/// `f` builds the function on a fresh graph from the parameter leaves it is
/// handed. It must be deterministic; two forward passes at the same point
/// that disagree are reported as a contract error.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(MladError::Contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    let base = g.value(root).item();
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect();

    if eval(params)?.to_bits() != base.to_bits() {
        return Err(MladError::Contract(
            "function is not deterministic across forward passes".into(),
        ));
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..work[pi].numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
