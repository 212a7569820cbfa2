//! Client-local forward and backward passes. Each client owns a star graph:
//! the center user, their interacted items, and (in the target stage) one
//! virtual user per source domain attached only to the center. The backward
//! pass produces exact analytic gradients of the joint loss for the user
//! embedding, the touched item embeddings, the attention vector, and the
//! mapper parameters. Gradients never flow into the received source stacks.

use std::collections::BTreeMap;

use crate::matrix::{axpy, dot, squared_distance, Matrix};
use crate::{Error, Result};

use super::mlp::{MapperMlp, MlpCache, MlpGrads};
use super::{bce_loss, sigmoid, social_layer_term, softmax, LossWeights, SIM_SUM_FLOOR};

/// How source-domain knowledge enters the target forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TransferHooks<'a> {
    /// Perturbed source stacks, ascending domain order, each `L x d`.
    pub stacks: &'a [&'a Matrix],
    /// One mapper per stack; `None` passes rows through unmapped.
    pub mappers: Option<&'a [MapperMlp]>,
    /// Joint softmax over items and virtual users when true; otherwise the
    /// virtual contribution is the unweighted mean of the mapped rows.
    pub use_attention: bool,
}

impl<'a> TransferHooks<'a> {
    pub fn none() -> Self {
        Self {
            stacks: &[],
            mappers: None,
            use_attention: true,
        }
    }

    fn n_sources(&self) -> usize {
        self.stacks.len()
    }
}

/// Multiply-add counts of one client pass, split so that scaling tests can
/// look at graph-edge work alone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounts {
    /// Per-edge propagation work (logit dot + weighted-sum accumulate).
    pub edge_madds: u64,
    /// Same work for virtual-user slots.
    pub virtual_madds: u64,
    /// Mapper forward multiplies.
    pub mlp_madds: u64,
}

impl FlopCounts {
    pub fn add(&mut self, other: &FlopCounts) {
        self.edge_madds += other.edge_madds;
        self.virtual_madds += other.virtual_madds;
        self.mlp_madds += other.mlp_madds;
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ClientForward {
    /// User embedding per layer, `0..=L`.
    pub h_user: Vec<Vec<f64>>,
    /// Ego-item embeddings per layer, `0..=L`, each `p x d`.
    pub h_items: Vec<Matrix>,
    /// Virtual features fed to step `t`: `feats[t][i]` is the (mapped) row
    /// `t` of stack `i`.
    pub feats: Vec<Vec<Vec<f64>>>,
    mlp_caches: Option<Vec<Vec<MlpCache>>>,
    /// Softmax coefficients of the user aggregation at each step.
    pub user_coeffs: Vec<Vec<f64>>,
    /// Softmax coefficients (self, user) of each item update at each step.
    pub item_coeffs: Vec<Vec<[f64; 2]>>,
    pub final_user: Vec<f64>,
    pub scores: Vec<f64>,
    pub bce: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub total: f64,
    pub degenerate_sim: bool,
    pub flops: FlopCounts,
}

/// Gradients of one client's loss. Item gradients are sparse over the items
/// the client actually touched, sorted by index.
#[derive(Debug, Clone)]
pub struct ClientGrads {
    pub user_e0: Vec<f64>,
    pub items: Vec<(usize, Vec<f64>)>,
    pub attention: Vec<f64>,
    pub mappers: Option<Vec<MlpGrads>>,
    pub n_pairs: usize,
}

/// Run the client star graph forward for `n_layers` steps and score the
/// batch. `batch` pairs are (item index, label); scored items use their
/// layer-0 table rows so train and evaluation rank the same quantity.
#[allow(clippy::too_many_arguments)]
pub fn forward_client(
    user_e0: &[f64],
    item_table: &Matrix,
    ego_items: &[usize],
    attention: &[f64],
    hooks: &TransferHooks,
    batch: &[(usize, f64)],
    weights: &LossWeights,
    layer_average: bool,
    n_layers: usize,
) -> Result<ClientForward> {
    let d = user_e0.len();
    let p = ego_items.len();
    let s = hooks.n_sources();
    if attention.len() != 2 * d {
        return Err(Error::ShapeMismatch {
            what: "attention vector".into(),
            expected: format!("{}", 2 * d),
            actual: format!("{}", attention.len()),
        });
    }
    for stack in hooks.stacks {
        if stack.n_rows() != n_layers || stack.n_cols() != d {
            return Err(Error::ShapeMismatch {
                what: "knowledge stack".into(),
                expected: format!("{n_layers}x{d}"),
                actual: format!("{}x{}", stack.n_rows(), stack.n_cols()),
            });
        }
    }
    if let Some(mappers) = hooks.mappers {
        if mappers.len() != s {
            return Err(Error::ShapeMismatch {
                what: "mapper list".into(),
                expected: format!("{s}"),
                actual: format!("{}", mappers.len()),
            });
        }
    }

    let mut flops = FlopCounts::default();
    let mut h_user = vec![user_e0.to_vec()];
    let mut h_items = vec![{
        let mut m = Matrix::zeros(p, d);
        for (j, &v) in ego_items.iter().enumerate() {
            m.row_mut(j).copy_from_slice(item_table.row(v));
        }
        m
    }];
    let mut feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers);
    let mut mlp_caches: Option<Vec<Vec<MlpCache>>> = hooks.mappers.map(|_| Vec::new());
    let mut user_coeffs = Vec::with_capacity(n_layers);
    let mut item_coeffs = Vec::with_capacity(n_layers);

    for t in 0..n_layers {
        let cur_u = &h_user[t];
        let cur_i = &h_items[t];

        // virtual features for this step: (mapped) row t of every stack
        let mut step_feats = Vec::with_capacity(s);
        let mut step_caches = Vec::with_capacity(s);
        for (i, stack) in hooks.stacks.iter().enumerate() {
            let row = stack.row(t);
            match hooks.mappers {
                Some(mappers) => {
                    let cache = mappers[i].forward(row);
                    flops.mlp_madds += (super::mlp::HIDDEN[0] * d
                        + super::mlp::HIDDEN[1] * super::mlp::HIDDEN[0]
                        + d * super::mlp::HIDDEN[1]) as u64;
                    step_feats.push(cache.output.clone());
                    step_caches.push(cache);
                }
                None => step_feats.push(row.to_vec()),
            }
        }

        // user aggregation
        let (next_u, coeffs) = {
            let mut logits = Vec::with_capacity(1 + p + s);
            let a_self = dot(&attention[..d], cur_u);
            logits.push(a_self + dot(&attention[d..], cur_u));
            for j in 0..p {
                logits.push(a_self + dot(&attention[d..], cur_i.row(j)));
                flops.edge_madds += 2 * d as u64;
            }
            if hooks.use_attention {
                for f in &step_feats {
                    logits.push(a_self + dot(&attention[d..], f));
                    flops.virtual_madds += 2 * d as u64;
                }
            }
            let coeffs = softmax(&logits);
            let mut out = vec![0.0; d];
            axpy(&mut out, coeffs[0], cur_u);
            for j in 0..p {
                axpy(&mut out, coeffs[1 + j], cur_i.row(j));
            }
            if hooks.use_attention {
                for (i, f) in step_feats.iter().enumerate() {
                    axpy(&mut out, coeffs[1 + p + i], f);
                }
            } else if s > 0 {
                let inv = 1.0 / s as f64;
                for f in &step_feats {
                    axpy(&mut out, inv, f);
                }
            }
            (out, coeffs)
        };

        // item updates: each ego item sees only the center user
        let mut next_i = Matrix::zeros(p, d);
        let mut step_item_coeffs = Vec::with_capacity(p);
        for j in 0..p {
            let center = cur_i.row(j);
            let z_self =
                dot(&attention[..d], center) + dot(&attention[d..], center);
            let z_user = dot(&attention[..d], center) + dot(&attention[d..], cur_u);
            flops.edge_madds += 2 * d as u64;
            let b = softmax(&[z_self, z_user]);
            let row = next_i.row_mut(j);
            for k in 0..d {
                row[k] = b[0] * center[k] + b[1] * cur_u[k];
            }
            step_item_coeffs.push([b[0], b[1]]);
        }

        h_user.push(next_u);
        h_items.push(next_i);
        user_coeffs.push(coeffs);
        item_coeffs.push(step_item_coeffs);
        feats.push(step_feats);
        if let Some(caches) = mlp_caches.as_mut() {
            caches.push(step_caches);
        }
    }

    let final_user = if layer_average {
        let mut avg = vec![0.0; d];
        for h in &h_user {
            axpy(&mut avg, 1.0 / h_user.len() as f64, h);
        }
        avg
    } else {
        h_user[n_layers].clone()
    };

    let scores: Vec<f64> = batch
        .iter()
        .map(|&(v, _)| sigmoid(dot(&final_user, item_table.row(v))))
        .collect();
    let labels: Vec<f64> = batch.iter().map(|&(_, y)| y).collect();
    let bce = bce_loss(&scores, &labels);

    let mut l_m = 0.0;
    for t in 0..n_layers {
        for f in &feats[t] {
            l_m += squared_distance(&h_user[t + 1], f);
        }
    }

    // the social term runs over the virtual-user features as they entered
    // the graph: mapped rows when mappers are on, raw rows otherwise
    let mut l_s = 0.0;
    let mut degenerate_sim = false;
    if s > 0 {
        for t in 0..n_layers {
            let rows: Vec<&[f64]> = feats[t].iter().map(|f| f.as_slice()).collect();
            let (term, degen) = social_layer_term(&h_user[t + 1], &rows);
            l_s += term;
            degenerate_sim |= degen;
        }
    }

    let total = bce + 0.5 * weights.alpha * l_m + 0.5 * weights.beta * l_s;
    Ok(ClientForward {
        h_user,
        h_items,
        feats,
        mlp_caches,
        user_coeffs,
        item_coeffs,
        final_user,
        scores,
        bce,
        l_m,
        l_s,
        total,
        degenerate_sim,
        flops,
    })
}

/// Exact gradients of the forward pass in `fwd` with respect to the user
/// embedding, touched item embeddings, the attention vector, and the mapper
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn backward_client(
    item_table: &Matrix,
    ego_items: &[usize],
    attention: &[f64],
    hooks: &TransferHooks,
    batch: &[(usize, f64)],
    weights: &LossWeights,
    layer_average: bool,
    n_layers: usize,
    fwd: &ClientForward,
) -> ClientGrads {
    let d = fwd.final_user.len();
    let p = ego_items.len();
    let s = hooks.n_sources();
    let (a1, a2) = attention.split_at(d);

    let mut g_user: Vec<Vec<f64>> = vec![vec![0.0; d]; n_layers + 1];
    let mut g_items: Vec<Matrix> = (0..=n_layers).map(|_| Matrix::zeros(p, d)).collect();
    let mut g_feats: Vec<Vec<Vec<f64>>> = (0..n_layers).map(|_| vec![vec![0.0; d]; s]).collect();
    let mut g_att = vec![0.0; 2 * d];
    let mut direct_items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    // prediction head: mean BCE over the batch
    if !batch.is_empty() {
        let inv_n = 1.0 / batch.len() as f64;
        let mut g_final = vec![0.0; d];
        for (idx, &(v, y)) in batch.iter().enumerate() {
            let g_logit = (fwd.scores[idx] - y) * inv_n;
            axpy(&mut g_final, g_logit, item_table.row(v));
            let slot = direct_items.entry(v).or_insert_with(|| vec![0.0; d]);
            axpy(slot, g_logit, &fwd.final_user);
        }
        if layer_average {
            let inv_l = 1.0 / (n_layers + 1) as f64;
            for g in g_user.iter_mut() {
                axpy(g, inv_l, &g_final);
            }
        } else {
            axpy(&mut g_user[n_layers], 1.0, &g_final);
        }
    }

    // mapping-loss head: (alpha/2) sum ||h - feat||^2
    if weights.alpha != 0.0 {
        for t in 0..n_layers {
            for i in 0..s {
                let h = &fwd.h_user[t + 1];
                let f = &fwd.feats[t][i];
                for k in 0..d {
                    let r = weights.alpha * (h[k] - f[k]);
                    g_user[t + 1][k] += r;
                    g_feats[t][i][k] -= r;
                }
            }
        }
    }

    // social-regularization head: (beta/2) sum_l || h - simweighted(feats) ||^2
    if weights.beta != 0.0 && s > 0 {
        for t in 0..n_layers {
            let rows: Vec<&[f64]> = fwd.feats[t].iter().map(|f| f.as_slice()).collect();
            let (grad_h, grad_feats) = social_layer_grads(&fwd.h_user[t + 1], &rows);
            axpy(&mut g_user[t + 1], 0.5 * weights.beta, &grad_h);
            for (i, gf) in grad_feats.iter().enumerate() {
                axpy(&mut g_feats[t][i], 0.5 * weights.beta, gf);
            }
        }
    }

    // walk the layers in reverse
    for t in (0..n_layers).rev() {
        let cur_u = &fwd.h_user[t];
        let cur_i = &fwd.h_items[t];

        // user aggregation backward
        {
            let g = g_user[t + 1].clone();
            let coeffs = &fwd.user_coeffs[t];
            let n_soft = coeffs.len(); // 1 + p (+ s when attention)
            // u_k = g . x_k over the softmax participants
            let mut uk = Vec::with_capacity(n_soft);
            uk.push(dot(&g, cur_u));
            for j in 0..p {
                uk.push(dot(&g, cur_i.row(j)));
            }
            if hooks.use_attention {
                for f in &fwd.feats[t] {
                    uk.push(dot(&g, f));
                }
            }
            let mean: f64 = coeffs.iter().zip(&uk).map(|(c, u)| c * u).sum();
            let dz: Vec<f64> = coeffs
                .iter()
                .zip(&uk)
                .map(|(c, u)| c * (u - mean))
                .collect();
            let dz_sum: f64 = dz.iter().sum();

            // center: direct path, self-neighbor path, shared a1 term
            axpy(&mut g_user[t], coeffs[0], &g);
            axpy(&mut g_user[t], dz[0], a2);
            axpy(&mut g_user[t], dz_sum, a1);
            // attention vector
            axpy(&mut g_att[..d], dz_sum, cur_u);
            axpy(&mut g_att[d..], dz[0], cur_u);
            for j in 0..p {
                let gx = g_items[t].row_mut(j);
                axpy(gx, coeffs[1 + j], &g);
                axpy(gx, dz[1 + j], a2);
                axpy(&mut g_att[d..], dz[1 + j], cur_i.row(j));
            }
            if hooks.use_attention {
                for i in 0..s {
                    let gf = &mut g_feats[t][i];
                    axpy(gf, coeffs[1 + p + i], &g);
                    axpy(gf, dz[1 + p + i], a2);
                    axpy(&mut g_att[d..], dz[1 + p + i], &fwd.feats[t][i]);
                }
            } else if s > 0 {
                let inv = 1.0 / s as f64;
                for gf in g_feats[t].iter_mut() {
                    axpy(gf, inv, &g);
                }
            }
        }

        // item updates backward
        for j in 0..p {
            let g = g_items[t + 1].row(j).to_vec();
            let center = cur_i.row(j);
            let [b0, b1] = fwd.item_coeffs[t][j];
            let u0 = dot(&g, center);
            let u1 = dot(&g, cur_u);
            let mean = b0 * u0 + b1 * u1;
            let dz0 = b0 * (u0 - mean);
            let dz1 = b1 * (u1 - mean);
            let gx = g_items[t].row_mut(j);
            axpy(gx, b0, &g);
            axpy(gx, dz0, a2);
            axpy(gx, dz0 + dz1, a1);
            axpy(&mut g_user[t], b1, &g);
            axpy(&mut g_user[t], dz1, a2);
            axpy(&mut g_att[..d], dz0 + dz1, center);
            axpy(&mut g_att[d..], dz0, center);
            axpy(&mut g_att[d..], dz1, cur_u);
        }
    }

    // mapper parameters: backprop the accumulated virtual-feature gradients
    let mappers_grads = hooks.mappers.map(|mappers| {
        let mut out: Vec<MlpGrads> = mappers.iter().map(|m| MlpGrads::zeros(m.dim)).collect();
        let caches = fwd.mlp_caches.as_ref().expect("caches recorded with mappers");
        for t in 0..n_layers {
            for i in 0..s {
                mappers[i].backward(&caches[t][i], &g_feats[t][i], &mut out[i]);
            }
        }
        out
    });

    // fold propagation-path item gradients into the direct scoring ones
    for (j, &v) in ego_items.iter().enumerate() {
        let slot = direct_items.entry(v).or_insert_with(|| vec![0.0; d]);
        axpy(slot, 1.0, g_items[0].row(j));
    }

    ClientGrads {
        user_e0: g_user[0].clone(),
        items: direct_items.into_iter().collect(),
        attention: g_att,
        mappers: mappers_grads,
        n_pairs: batch.len(),
    }
}

/// Gradients of one social-regularization layer term `||h - w||^2` where
/// `w = sum_i s_i m_i / sum_i s_i` and `s_i = cos(h, m_i)`: with respect to
/// `h` and to every feature row `m_i`.
fn social_layer_grads(h: &[f64], rows: &[&[f64]]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = h.len();
    let nh = dot(h, h).sqrt();
    let mut sims = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for row in rows {
        let nr = dot(row, row).sqrt();
        norms.push(nr);
        if nh == 0.0 || nr == 0.0 {
            sims.push(0.0);
        } else {
            sims.push(dot(h, row) / (nh * nr));
        }
    }
    let raw_sum: f64 = sims.iter().sum();
    let floored = raw_sum.abs() <= SIM_SUM_FLOOR;
    let sum = if floored { SIM_SUM_FLOOR } else { raw_sum };

    let mut w = vec![0.0; d];
    for (s, row) in sims.iter().zip(rows) {
        axpy(&mut w, s / sum, row);
    }
    let r: Vec<f64> = h.iter().zip(&w).map(|(a, b)| a - b).collect();

    let mut grad_h: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
    let mut grad_rows = vec![vec![0.0; d]; rows.len()];
    for (i, row) in rows.iter().enumerate() {
        // direct path: w depends linearly on m_i with weight s_i / sum
        axpy(&mut grad_rows[i], -2.0 * sims[i] / sum, &r);
        if nh == 0.0 || norms[i] == 0.0 {
            continue; // similarity pinned at 0, no path through it
        }
        // (dw/ds_i) . 2r, with the quotient term dropped when floored
        let mut coef = 2.0 * dot(&r, row) / sum;
        if !floored {
            coef -= 2.0 * dot(&r, &w) / sum;
        }
        let inv = 1.0 / (nh * norms[i]);
        for k in 0..d {
            // ds_i/dh = m_i/(|h||m_i|) - s_i h / |h|^2
            grad_h[k] -= coef * (row[k] * inv - sims[i] * h[k] / (nh * nh));
            // ds_i/dm_i = h/(|h||m_i|) - s_i m_i / |m_i|^2
            grad_rows[i][k] -= coef * (h[k] * inv - sims[i] * row[k] / (norms[i] * norms[i]));
        }
    }
    (grad_h, grad_rows)
}

/// BCE-only gradients for fine-tuning: the user final embedding and the
/// scored item finals are the free parameters.
pub fn finetune_grads(
    user_final: &[f64],
    item_finals: &Matrix,
    batch: &[(usize, f64)],
) -> (f64, Vec<f64>, Vec<(usize, Vec<f64>)>) {
    let d = user_final.len();
    let scores: Vec<f64> = batch
        .iter()
        .map(|&(v, _)| sigmoid(dot(user_final, item_finals.row(v))))
        .collect();
    let labels: Vec<f64> = batch.iter().map(|&(_, y)| y).collect();
    let bce = bce_loss(&scores, &labels);
    let mut g_user = vec![0.0; d];
    let mut g_items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    if !batch.is_empty() {
        let inv_n = 1.0 / batch.len() as f64;
        for (idx, &(v, y)) in batch.iter().enumerate() {
            let g_logit = (scores[idx] - y) * inv_n;
            axpy(&mut g_user, g_logit, item_finals.row(v));
            let slot = g_items.entry(v).or_insert_with(|| vec![0.0; d]);
            axpy(slot, g_logit, user_final);
        }
    }
    (bce, g_user, g_items.into_iter().collect())
}

/// One plain gradient step on the free final embeddings; returns the batch
/// BCE before the step. Everything outside `user_final` and the touched rows
/// of `item_finals` is untouched.
pub fn finetune_step(
    user_final: &mut [f64],
    item_finals: &mut Matrix,
    batch: &[(usize, f64)],
    learning_rate: f64,
) -> f64 {
    let (bce, g_user, g_items) = finetune_grads(user_final, item_finals, batch);
    axpy(user_final, -learning_rate, &g_user);
    for (v, g) in g_items {
        axpy(item_finals.row_mut(v), -learning_rate, &g);
    }
    bce
}
