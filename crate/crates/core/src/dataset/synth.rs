//! Synthetic multi-domain generator with controllable inter-domain
//! correlation. Shared-latent domains draw interaction probabilities from a
//! common user factor so that knowledge genuinely transfers between them;
//! pure-noise domains carry no signal at all, which is what a negative
//! transfer experiment needs as its poison source.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionSet, UserRegistry};
use crate::matrix::{dot, Matrix};
use crate::rng::SeedTree;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    /// Probabilities from the shared user latent and this domain's item
    /// latents: transfers positively to other shared-latent domains.
    SharedLatent,
    /// Probabilities from a domain-private user latent: real structure, but
    /// uncorrelated with other domains.
    IndependentLatent,
    /// Uniform interaction probability: nothing to learn or transfer.
    PureNoise,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    pub latent_dim: usize,
    /// Fraction of each domain's users that are shared across all domains.
    pub overlap: f64,
    /// One entry per domain.
    pub signals: Vec<SignalKind>,
    pub density: f64,
    /// Logit scale applied to latent scores; larger means sharper, more
    /// learnable preferences.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The default four-domain scenario: three shared-latent domains and one
    /// pure-noise domain, fully overlapping users.
    fn default() -> Self {
        Self {
            n_domains: 4,
            users_per_domain: 200,
            items_per_domain: 400,
            latent_dim: 8,
            overlap: 1.0,
            signals: vec![
                SignalKind::SharedLatent,
                SignalKind::SharedLatent,
                SignalKind::SharedLatent,
                SignalKind::PureNoise,
            ],
            density: 0.05,
            signal_scale: 3.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(Error::Validation("n_domains must be >= 2".into()));
        }
        if self.signals.len() != self.n_domains {
            return Err(Error::Validation(format!(
                "signals has {} entries, expected {}",
                self.signals.len(),
                self.n_domains
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Validation("overlap must be in [0,1]".into()));
        }
        if self.density <= 0.0 || self.density >= 1.0 {
            return Err(Error::Validation("density must be in (0,1)".into()));
        }
        if self.users_per_domain == 0 || self.items_per_domain == 0 || self.latent_dim == 0 {
            return Err(Error::Validation("counts must be positive".into()));
        }
        // every member user is guaranteed one interaction; if that alone
        // overshoots the requested density there is no way to hit it
        if self.density * (self.items_per_domain as f64) < 1.0 {
            return Err(Error::Validation(format!(
                "density {} unreachable with {} items (needs >= {:.6})",
                self.density,
                self.items_per_domain,
                1.0 / self.items_per_domain as f64
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Global user latents shared by all shared-latent domains.
    pub user_latents: Matrix,
    /// Per domain: item latents (pure-noise domains hold zeros).
    pub item_latents: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub domains: Vec<InteractionSet>,
    pub registry: UserRegistry,
    pub truth: SynthTruth,
}

/// Generate `n_domains` implicit-feedback domains with partially overlapping
/// users. Users `0..core` (in global order) belong to every domain; the rest
/// are exclusive to a single domain.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let m = cfg.n_domains;
    let core = (cfg.overlap * cfg.users_per_domain as f64).round() as usize;
    let exclusive = cfg.users_per_domain - core;
    let n_global = core + m * exclusive;

    let mut registry = UserRegistry::new();
    for g in 0..n_global {
        registry.intern(&format!("u{g:06}"));
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut lat_rng = tree.stream("synth-user-latents");
    let user_latents = Matrix::from_flat(
        n_global,
        cfg.latent_dim,
        (0..n_global * cfg.latent_dim)
            .map(|_| normal.sample(&mut lat_rng))
            .collect(),
    );

    let mut domains = Vec::with_capacity(m);
    let mut item_latents = Vec::with_capacity(m);
    for d in 0..m {
        let members: Vec<usize> = (0..core)
            .chain((0..exclusive).map(|j| core + d * exclusive + j))
            .collect();
        for &g in &members {
            registry.intern_local(d as u32, g);
        }

        let mut dom_rng = tree.stream_with("synth-items", &[d as u64]);
        let items = match cfg.signals[d] {
            SignalKind::PureNoise => Matrix::zeros(cfg.items_per_domain, cfg.latent_dim),
            _ => Matrix::from_flat(
                cfg.items_per_domain,
                cfg.latent_dim,
                (0..cfg.items_per_domain * cfg.latent_dim)
                    .map(|_| normal.sample(&mut dom_rng))
                    .collect(),
            ),
        };

        // domain-private user factors for the independent signal
        let private_users = match cfg.signals[d] {
            SignalKind::IndependentLatent => {
                let mut r = tree.stream_with("synth-private-users", &[d as u64]);
                Some(Matrix::from_flat(
                    n_global,
                    cfg.latent_dim,
                    (0..n_global * cfg.latent_dim)
                        .map(|_| normal.sample(&mut r))
                        .collect(),
                ))
            }
            _ => None,
        };

        // scores once per (member, item) cell; the calibration re-reads them
        let scale = cfg.signal_scale / (cfg.latent_dim as f64).sqrt();
        let n_items = cfg.items_per_domain;
        let scores: Vec<f64> = match cfg.signals[d] {
            SignalKind::PureNoise => vec![0.0; members.len() * n_items],
            _ => {
                let lats = match cfg.signals[d] {
                    SignalKind::IndependentLatent => {
                        private_users.as_ref().expect("private latents")
                    }
                    _ => &user_latents,
                };
                let mut out = Vec::with_capacity(members.len() * n_items);
                for &g in &members {
                    let urow = lats.row(g);
                    for i in 0..n_items {
                        out.push(scale * dot(urow, items.row(i)));
                    }
                }
                out
            }
        };

        let bias = calibrate_bias(&scores, cfg.density);

        let mut draw_rng = tree.stream_with("synth-draws", &[d as u64]);
        let mut interactions = Vec::new();
        for (local, _) in members.iter().enumerate() {
            let cell = &scores[local * n_items..(local + 1) * n_items];
            let mut row = Vec::new();
            for (i, s) in cell.iter().enumerate() {
                let p = sigmoid(s + bias);
                let hit = draw_rng.random::<f64>() < p;
                if hit {
                    let ts = draw_rng.random_range(0..1_000_000i64);
                    row.push(Interaction {
                        user: local,
                        item: i,
                        timestamp: ts,
                    });
                }
            }
            if row.is_empty() {
                // keep every member present in the domain
                let best = (0..n_items)
                    .max_by(|&a, &b| cell[a].partial_cmp(&cell[b]).expect("finite scores"))
                    .expect("items");
                row.push(Interaction {
                    user: local,
                    item: best,
                    timestamp: draw_rng.random_range(0..1_000_000i64),
                });
            }
            interactions.extend(row);
        }
        domains.push(InteractionSet::new(
            d as u32,
            members.len(),
            cfg.items_per_domain,
            interactions,
        ));
        item_latents.push(items);
    }

    Ok(SynthOutput {
        domains,
        registry,
        truth: SynthTruth {
            user_latents,
            item_latents,
        },
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bisect the logit shift so the mean interaction probability over all
/// (member, item) cells equals the requested density.
fn calibrate_bias(scores: &[f64], density: f64) -> f64 {
    let mean_p = |b: f64| -> f64 {
        scores.iter().map(|s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64
    };
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < density {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            n_domains: 2,
            users_per_domain: 30,
            items_per_domain: 40,
            latent_dim: 4,
            overlap: 1.0,
            signals: vec![SignalKind::SharedLatent, SignalKind::PureNoise],
            density: 0.1,
            signal_scale: 3.0,
            seed: 7,
        }
    }

    #[test]
    fn full_overlap_puts_every_user_in_both_domains() {
        let out = synth_generate(&base_cfg()).unwrap();
        assert_eq!(out.registry.n_global(), 30);
        for d in 0..2 {
            assert_eq!(out.registry.domain_members(d).len(), 30);
            assert_eq!(out.domains[d as usize].n_users, 30);
            for u in 0..30 {
                assert!(!out.domains[d as usize].user_interactions(u).is_empty());
            }
        }
    }

    #[test]
    fn partial_overlap_counts() {
        let mut cfg = base_cfg();
        cfg.overlap = 0.5;
        let out = synth_generate(&cfg).unwrap();
        // 15 shared + 2 * 15 exclusive
        assert_eq!(out.registry.n_global(), 45);
        assert_eq!(out.registry.domain_members(0).len(), 30);
        assert_eq!(out.registry.domain_members(1).len(), 30);
        let in_both: Vec<usize> = out
            .registry
            .domain_members(0)
            .iter()
            .filter(|g| out.registry.local(1, **g).is_some())
            .copied()
            .collect();
        assert_eq!(in_both.len(), 15);
    }

    #[test]
    fn density_concentrates_around_request() {
        let mut cfg = base_cfg();
        cfg.users_per_domain = 100;
        cfg.items_per_domain = 200;
        cfg.density = 0.05;
        cfg.signals = vec![SignalKind::SharedLatent, SignalKind::SharedLatent];
        let out = synth_generate(&cfg).unwrap();
        for d in &out.domains {
            let n = d.len();
            assert!((900..=1100).contains(&n), "count {n} outside [900,1100]");
        }
    }

    #[test]
    fn pure_noise_item_popularity_uniform_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut cfg = base_cfg();
        cfg.users_per_domain = 200;
        cfg.items_per_domain = 50;
        cfg.density = 0.2;
        let out = synth_generate(&cfg).unwrap();
        let noise = &out.domains[1];
        let mut counts = vec![0usize; noise.n_items];
        for it in noise.iter() {
            counts[it.item] += 1;
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / noise.n_items as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((noise.n_items - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.01, "chi-square p = {p} (stat {stat})");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&base_cfg()).unwrap();
        let b = synth_generate(&base_cfg()).unwrap();
        for (da, db) in a.domains.iter().zip(&b.domains) {
            assert_eq!(da, db);
        }
        let mut cfg = base_cfg();
        cfg.seed = 8;
        let c = synth_generate(&cfg).unwrap();
        assert_ne!(
            a.domains[0].iter().collect::<Vec<_>>(),
            c.domains[0].iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn unreachable_density_errors() {
        let mut cfg = base_cfg();
        cfg.items_per_domain = 40;
        cfg.density = 0.01; // forced 1 interaction per user already exceeds this
        assert!(synth_generate(&cfg).is_err());
    }
}
