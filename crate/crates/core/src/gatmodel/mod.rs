//! The simplified graph attention recommender: linear attention without
//! feature transformation or activation, per-layer softmax propagation,
//! target-side aggregation over expanded ego graphs, mapper MLPs, the three
//! loss terms, and exact analytic gradients for every parameter.

mod backward;
mod mlp;
mod optim;

pub use backward::{
    backward_client, finetune_grads, finetune_step, forward_client, ClientForward, ClientGrads,
    FlopCounts, TransferHooks,
};
pub use mlp::{MapperMlp, MlpCache, MlpGrads};
pub use optim::Adam;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::DomainGraph;
use crate::matrix::{dot, squared_distance, Matrix};
use crate::{Error, Result};

/// Full per-domain model parameters: layer-0 embeddings plus the shared
/// attention vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub user_embeddings: Matrix,
    pub item_embeddings: Matrix,
    /// 2d weights scoring a (center, neighbor) embedding pair.
    pub attention: Vec<f64>,
    pub n_layers: usize,
    pub dim: usize,
}

impl GatParams {
    pub fn init(
        n_users: usize,
        n_items: usize,
        dim: usize,
        n_layers: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        Self {
            user_embeddings: Matrix::from_flat(n_users, dim, draw(n_users * dim)),
            item_embeddings: Matrix::from_flat(n_items, dim, draw(n_items * dim)),
            attention: draw(2 * dim),
            n_layers,
            dim,
        }
    }
}

/// Weights of the mapping and social-regularization terms in the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
        }
    }
}

/// Per-layer embeddings of one node, rows `l = 1..=L`.
pub type LayerStack = Matrix;

pub(crate) const SIM_SUM_FLOOR: f64 = 1e-8;
pub(crate) const PRED_CLAMP: f64 = 1e-12;

/// Attention logit of a (center, neighbor) pair: `a . [center || neighbor]`.
#[inline]
pub(crate) fn pair_logit(attention: &[f64], center: &[f64], neighbor: &[f64]) -> f64 {
    let d = center.len();
    dot(&attention[..d], center) + dot(&attention[d..], neighbor)
}

/// Softmax coefficients over `{center} U neighbors`, center first. Logits are
/// shifted by their max before exponentiation; the shift cancels exactly.
pub fn attention_coeffs(
    center: &[f64],
    neighbors: &[&[f64]],
    attention: &[f64],
) -> Result<Vec<f64>> {
    if !center.iter().all(|x| x.is_finite())
        || neighbors.iter().any(|n| n.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Validation("non-finite embedding entries".into()));
    }
    let mut logits = Vec::with_capacity(neighbors.len() + 1);
    logits.push(pair_logit(attention, center, center));
    for n in neighbors {
        logits.push(pair_logit(attention, center, n));
    }
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One message-propagation layer over the whole graph:
/// `e_u' = a_uu e_u + sum_v a_uv e_v`, items updated symmetrically from
/// their user neighbors.
pub fn propagate_layer(
    graph: &DomainGraph,
    users: &Matrix,
    items: &Matrix,
    attention: &[f64],
) -> Result<(Matrix, Matrix)> {
    let d = users.n_cols();
    let mut next_users = Matrix::zeros(users.n_rows(), d);
    for u in 0..users.n_rows() {
        let neighbors: Vec<&[f64]> = graph.user_neighbors(u).iter().map(|&v| items.row(v)).collect();
        let coeffs = attention_coeffs(users.row(u), &neighbors, attention)?;
        let out = weighted_sum(users.row(u), &neighbors, &coeffs);
        next_users.row_mut(u).copy_from_slice(&out);
    }
    let mut next_items = Matrix::zeros(items.n_rows(), d);
    for v in 0..items.n_rows() {
        let neighbors: Vec<&[f64]> = graph.item_neighbors(v).iter().map(|&u| users.row(u)).collect();
        let coeffs = attention_coeffs(items.row(v), &neighbors, attention)?;
        let out = weighted_sum(items.row(v), &neighbors, &coeffs);
        next_items.row_mut(v).copy_from_slice(&out);
    }
    Ok((next_users, next_items))
}

/// Target-side aggregation for one user: a single softmax over
/// `{self} U item neighbors U virtual users`. With no virtual users this is
/// exactly the plain propagation step for that user.
pub fn aggregate_target(
    center: &[f64],
    item_neighbors: &[&[f64]],
    virtual_users: &[&[f64]],
    attention: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut neighbors: Vec<&[f64]> = Vec::with_capacity(item_neighbors.len() + virtual_users.len());
    neighbors.extend_from_slice(item_neighbors);
    neighbors.extend_from_slice(virtual_users);
    let coeffs = attention_coeffs(center, &neighbors, attention)?;
    let out = weighted_sum(center, &neighbors, &coeffs);
    Ok((out, coeffs))
}

pub(crate) fn weighted_sum(center: &[f64], neighbors: &[&[f64]], coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; center.len()];
    for (c, o) in center.iter().zip(out.iter_mut()) {
        *o = coeffs[0] * c;
    }
    for (k, n) in neighbors.iter().enumerate() {
        for (x, o) in n.iter().zip(out.iter_mut()) {
            *o += coeffs[k + 1] * x;
        }
    }
    out
}

/// `l_m = sum_i sum_l || x_T^l - MLP_i(x_hat^l) ||^2` over mapped source
/// stacks, layers aligned index-for-index.
pub fn mapping_loss(target_stack: &LayerStack, mapped_sources: &[LayerStack]) -> f64 {
    let mut acc = 0.0;
    for src in mapped_sources {
        debug_assert_eq!(src.n_rows(), target_stack.n_rows());
        for l in 0..target_stack.n_rows() {
            acc += squared_distance(target_stack.row(l), src.row(l));
        }
    }
    acc
}

/// Social regularization against the cosine-similarity-weighted mean of the
/// perturbed (unmapped) source rows. Returns the loss and whether any layer
/// hit the degenerate similarity guard (zero-norm vector or a vanishing
/// similarity sum).
pub fn social_reg_loss(target_stack: &LayerStack, sources: &[LayerStack]) -> (f64, bool) {
    if sources.is_empty() {
        return (0.0, false);
    }
    let mut acc = 0.0;
    let mut degenerate = false;
    for l in 0..target_stack.n_rows() {
        let rows: Vec<&[f64]> = sources.iter().map(|s| s.row(l)).collect();
        let (term, degen) = social_layer_term(target_stack.row(l), &rows);
        acc += term;
        degenerate |= degen;
    }
    (acc, degenerate)
}

pub(crate) fn social_layer_term(h: &[f64], sources: &[&[f64]]) -> (f64, bool) {
    let mut degenerate = false;
    let nh = dot(h, h).sqrt();
    let sims: Vec<f64> = sources
        .iter()
        .map(|row| {
            let nr = dot(row, row).sqrt();
            if nh == 0.0 || nr == 0.0 {
                // zero-norm vector in the cosine: similarity treated as 0
                degenerate = true;
                0.0
            } else {
                dot(h, row) / (nh * nr)
            }
        })
        .collect();
    let raw_sum: f64 = sims.iter().sum();
    let sum = if raw_sum.abs() <= SIM_SUM_FLOOR {
        degenerate = true;
        SIM_SUM_FLOOR
    } else {
        raw_sum
    };
    let mut mean = vec![0.0; h.len()];
    for (s, row) in sims.iter().zip(sources) {
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += s * x / sum;
        }
    }
    (squared_distance(h, &mean), degenerate)
}

/// Interaction probability: `sigmoid(e_u . e_v)`.
pub fn predict(user: &[f64], item: &[f64]) -> f64 {
    sigmoid(dot(user, item))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Batch-mean binary cross entropy with predictions clamped away from 0/1.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(predictions.len(), labels.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    acc / predictions.len() as f64
}

/// `BCE + (alpha/2) l_m + (beta/2) l_s`.
pub fn total_loss(
    predictions: &[f64],
    labels: &[f64],
    l_m: f64,
    l_s: f64,
    weights: &LossWeights,
) -> f64 {
    bce_loss(predictions, labels) + 0.5 * weights.alpha * l_m + 0.5 * weights.beta * l_s
}
