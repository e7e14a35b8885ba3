//! Training objective: multi-level saliency cross-entropy plus the
//! modality-aware classification loss, combined as an unweighted sum.

use crate::modality::Modality;
use crate::tensor::{Element, Graph, NodeId, TResult, Tensor, TensorError};

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

/// Binary cross-entropy between one saliency map and the ground truth:
/// mean over pixels of -[y log s + (1-y) log(1-s)], probabilities clamped
/// to [1e-7, 1-1e-7]. `map` and `gt` must share shape; `gt` must be binary.
pub fn bce<E: Element>(g: &mut Graph<E>, map: NodeId, gt: NodeId) -> TResult<NodeId> {
    if g.value(map).shape() != g.value(gt).shape() {
        return Err(TensorError::dim(
            "bce",
            format!(
                "map {:?} vs ground truth {:?}",
                g.value(map).shape(),
                g.value(gt).shape()
            ),
        ));
    }
    if !g
        .value(gt)
        .data()
        .iter()
        .all(|&v| v == E::ZERO || v == E::ONE)
    {
        return Err(TensorError::contract(
            "bce",
            "ground truth must be binary {0,1}".to_string(),
        ));
    }
    let s = g.clamp(map, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_s = g.log(s)?;
    let one_minus_s = g.affine(s, -1.0, 1.0)?;
    let one_minus_s = g.clamp(one_minus_s, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_1ms = g.log(one_minus_s)?;
    let one_minus_y = g.affine(gt, -1.0, 1.0)?;
    let pos = g.mul(gt, log_s)?;
    let neg = g.mul(one_minus_y, log_1ms)?;
    let sum = g.add(pos, neg)?;
    let mean = g.mean_all(sum)?;
    g.affine(mean, -1.0, 0.0)
}

/// Saliency loss over the four decoder maps: each map is upsampled to the
/// ground-truth resolution, its per-pixel binary cross-entropy averaged, and
/// the four level losses summed.
pub fn saliency_loss<E: Element>(
    g: &mut Graph<E>,
    maps: &[NodeId; 4],
    gt: NodeId,
) -> TResult<NodeId> {
    let gshape = g.value(gt).shape().to_vec();
    if gshape.len() != 4 || gshape[1] != 1 {
        return Err(TensorError::dim(
            "saliency_loss",
            format!("ground truth must be [B,1,H,W], got {:?}", gshape),
        ));
    }
    let (h, w) = (gshape[2], gshape[3]);
    let mut total: Option<NodeId> = None;
    for &m in maps {
        let up = if g.value(m).shape()[2..] == [h, w] {
            m
        } else {
            g.bilinear_up(m, h, w)?
        };
        let level = bce(g, up, gt)?;
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    Ok(total.expect("four maps"))
}

/// Cross-entropy of predicted modality probabilities against true labels:
/// mean over the batch of -log p[label], probabilities clamped.
pub fn modality_ce<E: Element>(
    g: &mut Graph<E>,
    probs: NodeId,
    labels: &[Modality],
) -> TResult<NodeId> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::dim(
            "modality_ce",
            format!("probs {:?} vs {} labels", shape, labels.len()),
        ));
    }
    let k = shape[1];
    for &m in labels {
        if m.index() >= k {
            return Err(TensorError::contract(
                "modality_ce",
                format!("label {} outside K={}", m.label(), k),
            ));
        }
    }
    let mut mask = Tensor::zeros(vec![labels.len(), k]);
    for (i, &m) in labels.iter().enumerate() {
        mask.data_mut()[i * k + m.index()] = E::ONE;
    }
    let mask = g.constant(mask);
    let clamped = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let logp = g.log(clamped)?;
    let picked = g.mul(mask, logp)?;
    let sum = g.sum_all(picked)?;
    g.affine(sum, -1.0 / labels.len() as f64, 0.0)
}

/// Modality loss for a multi-modal batch: each modality's probabilities are
/// scored against its own label and the per-modality losses are averaged.
pub fn modality_loss<E: Element>(
    g: &mut Graph<E>,
    per_modality_probs: &[(Modality, NodeId)],
) -> TResult<NodeId> {
    if per_modality_probs.is_empty() {
        return Err(TensorError::contract(
            "modality_loss",
            "at least one modality required".to_string(),
        ));
    }
    let mut total: Option<NodeId> = None;
    for &(m, probs) in per_modality_probs {
        let batch = g.value(probs).shape()[0];
        let labels = vec![m; batch];
        let ce = modality_ce(g, probs, &labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    g.affine(total.unwrap(), 1.0 / per_modality_probs.len() as f64, 0.0)
}

/// L_total = L_modality + L_ce, unweighted.
pub fn total_loss<E: Element>(g: &mut Graph<E>, l_ce: NodeId, l_modality: NodeId) -> TResult<NodeId> {
    g.add(l_ce, l_modality)
}
