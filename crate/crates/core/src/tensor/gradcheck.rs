//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::{Graph, NodeId, TResult, Tensor, TensorError};

/// Builds a scalar loss from leaves that were inserted for `inputs`.
pub trait LossFn: Fn(&mut Graph<f64>, &[NodeId]) -> TResult<NodeId> {}
impl<F: Fn(&mut Graph<f64>, &[NodeId]) -> TResult<NodeId>> LossFn for F {}

fn eval_loss(f: &impl LossFn, inputs: &[Tensor<f64>]) -> TResult<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.value(loss).item()
}

fn analytic_grads(f: &impl LossFn, inputs: &[Tensor<f64>]) -> TResult<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences on every
/// coordinate of every input. Returns the max relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(f: impl LossFn, inputs: &[Tensor<f64>], eps: f64) -> TResult<f64> {
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Like [`grad_check`] but probing at most `max_coords` random coordinates
/// per input tensor — the only tractable option for whole-model checks.
pub fn grad_check_sampled(
    f: impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> TResult<f64> {
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= max_coords {
                (0..n).collect()
            } else {
                rand::seq::index::sample(rng, n, max_coords).into_vec()
            }
        })
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

fn grad_check_coords(
    f: impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[Vec<usize>],
) -> TResult<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::contract(
            "grad_check",
            format!("eps {eps} outside [1e-6, 1e-3]"),
        ));
    }
    let analytic = analytic_grads(&f, inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for (ti, coord_list) in coords.iter().enumerate() {
        for &j in coord_list {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = eval_loss(&f, &work)?;
            work[ti].data_mut()[j] = orig - eps;
            let minus = eval_loss(&f, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic[ti].data()[j], numeric));
        }
    }
    Ok(max_err)
}
