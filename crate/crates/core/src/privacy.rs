//! Attack-side machinery: a white-box inversion attack on published
//! knowledge stacks and the privacy-leakage score it earns. Demonstrates
//! that the clean forward map is reconstructible while perturbed outputs
//! are not.

use std::io::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::{l2_norm, Matrix};
use crate::rng::SeedTree;
use crate::transfer::{extract_knowledge, perturb, DpParams};
use crate::{Error, Result};

/// What the semi-honest attacker knows: the propagation parameters and the
/// graph structure, but not the embeddings it is trying to recover.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub attention: Vec<f64>,
    pub n_layers: usize,
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    /// Item neighbors per user.
    pub ego: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    /// Random restarts only.
    Random,
    /// First restart starts at the true embeddings: the ideal attack, an
    /// upper bound on what any reconstruction can achieve.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub init: AttackInit,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            iterations: 400,
            restarts: 3,
            init: AttackInit::Random,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Validation("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub users: Matrix,
    pub items: Matrix,
    /// Root of the summed squared distance between the published stacks and
    /// the forward map of the reconstruction.
    pub residual: f64,
    pub discarded_restarts: usize,
}

/// A self-contained attack scenario: the model under attack plus the true
/// embeddings the attacker is after.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: AttackModel,
    pub truth_users: Matrix,
    pub truth_items: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Isolated users, one propagation layer: the published row is the user
    /// embedding itself, so the forward map is invertible by construction.
    Identity,
    /// Users sharing items over two layers, more equations than unknowns.
    Star,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ScenarioKind::Identity),
            "star" => Ok(ScenarioKind::Star),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?} (expected identity or star)"
            ))),
        }
    }
}

pub fn build_scenario(kind: ScenarioKind, seed: u64) -> Scenario {
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream("scenario");
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    match kind {
        ScenarioKind::Identity => {
            let (n_users, dim) = (4usize, 4usize);
            Scenario {
                model: AttackModel {
                    attention: draw(2 * dim),
                    n_layers: 1,
                    dim,
                    n_users,
                    n_items: 0,
                    ego: vec![Vec::new(); n_users],
                },
                truth_users: Matrix::from_flat(n_users, dim, draw(n_users * dim)),
                truth_items: Matrix::zeros(0, dim),
            }
        }
        ScenarioKind::Star => {
            let (n_users, n_items, dim) = (6usize, 3usize, 4usize);
            let ego: Vec<Vec<usize>> = (0..n_users)
                .map(|u| {
                    let mut items = vec![u % n_items, (u + 1) % n_items];
                    items.sort_unstable();
                    items.dedup();
                    items
                })
                .collect();
            Scenario {
                model: AttackModel {
                    attention: draw(2 * dim),
                    n_layers: 2,
                    dim,
                    n_users,
                    n_items,
                    ego,
                },
                truth_users: Matrix::from_flat(n_users, dim, draw(n_users * dim)),
                truth_items: Matrix::from_flat(n_items, dim, draw(n_items * dim)),
            }
        }
    }
}

impl Scenario {
    /// What each user's client would publish: the clean per-layer stacks.
    pub fn clean_stacks(&self) -> Result<Vec<Matrix>> {
        (0..self.model.n_users)
            .map(|u| {
                extract_knowledge(
                    self.truth_users.row(u),
                    &self.truth_items,
                    &self.model.ego[u],
                    &self.model.attention,
                    self.model.n_layers,
                )
            })
            .collect()
    }

    /// Clean stacks passed through the Gaussian mechanism, one sub-stream
    /// per user.
    pub fn published_stacks(&self, dp: &DpParams, tree: &SeedTree) -> Result<Vec<Matrix>> {
        let clean = self.clean_stacks()?;
        Ok(clean
            .into_iter()
            .enumerate()
            .map(|(u, stack)| {
                let mut rng = tree.stream_with("publish", &[u as u64]);
                perturb(
                    Some(&stack),
                    0,
                    self.model.n_layers,
                    self.model.dim,
                    dp,
                    &mut rng,
                )
                .rows
            })
            .collect())
    }
}

fn candidate_len(model: &AttackModel) -> usize {
    (model.n_users + model.n_items) * model.dim
}

fn split_candidates(model: &AttackModel, flat: &[f64]) -> (Matrix, Matrix) {
    let nu = model.n_users * model.dim;
    (
        Matrix::from_flat(model.n_users, model.dim, flat[..nu].to_vec()),
        Matrix::from_flat(model.n_items, model.dim, flat[nu..].to_vec()),
    )
}

/// Total squared residual between the published stacks and the forward map
/// of a candidate embedding assignment.
fn objective(model: &AttackModel, published: &[Matrix], flat: &[f64]) -> Result<f64> {
    let (users, items) = split_candidates(model, flat);
    let mut acc = 0.0;
    for u in 0..model.n_users {
        let stack = extract_knowledge(
            users.row(u),
            &items,
            &model.ego[u],
            &model.attention,
            model.n_layers,
        )?;
        for (a, b) in stack.as_slice().iter().zip(published[u].as_slice()) {
            acc += (a - b) * (a - b);
        }
    }
    Ok(acc)
}

/// Gradient-descent inversion with random restarts: minimize the residual
/// over candidate user and item embeddings, keep the best restart. The
/// gradient is taken by central differences; the attacker needs nothing
/// from the model internals beyond the forward map.
pub fn inversion_attack(
    model: &AttackModel,
    published: &[Matrix],
    truth_hint: Option<(&Matrix, &Matrix)>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if published.len() != model.n_users {
        return Err(Error::ShapeMismatch {
            what: "published stacks".into(),
            expected: format!("{}", model.n_users),
            actual: format!("{}", published.len()),
        });
    }
    let tree = SeedTree::new(cfg.seed);
    let n = candidate_len(model);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut discarded = 0usize;

    for restart in 0..cfg.restarts {
        let mut flat: Vec<f64> = match (cfg.init, restart, truth_hint) {
            (AttackInit::Oracle, 0, Some((tu, ti))) => {
                let mut v = tu.as_slice().to_vec();
                v.extend_from_slice(ti.as_slice());
                v
            }
            _ => {
                let mut rng = tree.stream_with("attack-init", &[restart as u64]);
                let normal = Normal::new(0.0, 0.1).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };

        let mut opt = crate::gatmodel::Adam::new(n, cfg.step_size);
        let h = 1e-5;
        let mut failed = false;
        for _ in 0..cfg.iterations {
            let grads: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut plus = flat.clone();
                    plus[k] += h;
                    let mut minus = flat.clone();
                    minus[k] -= h;
                    let fp = objective(model, published, &plus).unwrap_or(f64::NAN);
                    let fm = objective(model, published, &minus).unwrap_or(f64::NAN);
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                failed = true;
                break;
            }
            opt.step(&mut flat, &grads);
        }
        let value = if failed {
            f64::NAN
        } else {
            objective(model, published, &flat)?
        };
        if !value.is_finite() {
            discarded += 1;
            continue;
        }
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            best = Some((value, flat));
        }
    }

    let (value, flat) = best.ok_or_else(|| Error::Validation("every restart diverged".into()))?;
    let (users, items) = split_candidates(model, &flat);
    Ok(AttackOutcome {
        users,
        items,
        residual: value.sqrt(),
        discarded_restarts: discarded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub lambda: f64,
    pub mean_user_leak: f64,
    pub mean_item_leak: f64,
    pub user_residuals: Vec<f64>,
    pub item_residuals: Vec<f64>,
}

/// `Lambda = 1 / (1 + mean_u ||e_u - e_u_hat|| + mean_v ||e_v - e_v_hat||)`.
pub fn privacy_leakage(
    reconstructed_users: &Matrix,
    reconstructed_items: &Matrix,
    true_users: &Matrix,
    true_items: &Matrix,
) -> Result<LeakageReport> {
    if reconstructed_users.n_rows() != true_users.n_rows()
        || reconstructed_items.n_rows() != true_items.n_rows()
        || reconstructed_users.n_cols() != true_users.n_cols()
    {
        return Err(Error::ShapeMismatch {
            what: "reconstruction".into(),
            expected: format!("{}u/{}v", true_users.n_rows(), true_items.n_rows()),
            actual: format!(
                "{}u/{}v",
                reconstructed_users.n_rows(),
                reconstructed_items.n_rows()
            ),
        });
    }
    let leak = |a: &Matrix, b: &Matrix| -> Vec<f64> {
        (0..a.n_rows())
            .map(|i| {
                let diff: Vec<f64> = a.row(i).iter().zip(b.row(i)).map(|(x, y)| x - y).collect();
                l2_norm(&diff)
            })
            .collect()
    };
    let user_residuals = leak(reconstructed_users, true_users);
    let item_residuals = leak(reconstructed_items, true_items);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let mean_user_leak = mean(&user_residuals);
    let mean_item_leak = mean(&item_residuals);
    Ok(LeakageReport {
        lambda: 1.0 / (1.0 + mean_user_leak + mean_item_leak),
        mean_user_leak,
        mean_item_leak,
        user_residuals,
        item_residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub lambda: f64,
    pub mean_user_leak: f64,
    pub mean_item_leak: f64,
    pub recon_error: f64,
}

/// Run the ideal (truth-seeded) attack over a privacy-budget grid, one row
/// per (epsilon, seed) cell.
pub fn leakage_sweep(
    epsilons: &[f64],
    delta: f64,
    kind: ScenarioKind,
    seeds: &[u64],
    attack: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    if epsilons.len() < 2 {
        return Err(Error::Validation(
            "sweep needs at least 2 epsilon values".into(),
        ));
    }
    let cells: Vec<(f64, u64)> = epsilons
        .iter()
        .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
        .collect();
    cells
        .iter()
        .map(|&(epsilon, seed)| {
            let scenario = build_scenario(kind, seed);
            let dp = DpParams {
                epsilon,
                delta,
                ..Default::default()
            };
            let tree = SeedTree::new(seed);
            let published = scenario.published_stacks(&dp, &tree)?;
            let cfg = AttackConfig {
                seed,
                init: AttackInit::Oracle,
                ..*attack
            };
            let outcome = inversion_attack(
                &scenario.model,
                &published,
                Some((&scenario.truth_users, &scenario.truth_items)),
                &cfg,
            )?;
            let leak = privacy_leakage(
                &outcome.users,
                &outcome.items,
                &scenario.truth_users,
                &scenario.truth_items,
            )?;
            Ok(SweepRow {
                epsilon,
                delta,
                seed,
                lambda: leak.lambda,
                mean_user_leak: leak.mean_user_leak,
                mean_item_leak: leak.mean_item_leak,
                recon_error: outcome.residual,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(
        out,
        "epsilon,delta,seed,lambda,mean_user_leak,mean_item_leak,recon_error"
    )
    .map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epsilon, r.delta, r.seed, r.lambda, r.mean_user_leak, r.mean_item_leak, r.recon_error
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vs.len()).collect();
        order.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).expect("finite"));
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vs[order[j + 1]] == vs[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &ix in &order[i..=j] {
                ranks[ix] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}
