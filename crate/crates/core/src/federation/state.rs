//! Actors of the simulated federation: per-domain servers holding the global
//! model, per-user clients holding their embeddings and received knowledge,
//! and the typed message payloads that cross between them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gatmodel::{Adam, ClientGrads, GatParams, MapperMlp, MlpGrads};
use crate::matrix::Matrix;
use crate::rng::SeedTree;
use crate::transfer::KnowledgeMatrix;

/// Everything that can travel between a client and a domain server. Raw
/// interactions and unperturbed source stacks have no variant here; the
/// schema itself rules them out of the protocol.
#[derive(Debug, Clone)]
pub enum Payload {
    /// Server -> client: the current global model.
    ModelDown {
        items: Matrix,
        attention: Vec<f64>,
        mappers: Vec<MapperMlp>,
    },
    /// Client -> server: gradients of the global model.
    GradUp {
        item_grads: Vec<(usize, Vec<f64>)>,
        attention_grad: Vec<f64>,
        mapper_grads: Option<Vec<MlpGrads>>,
        n_pairs: usize,
    },
    /// Server -> client during fine-tuning: item finals plus the server-held
    /// copy of this client's final embedding (zeros on the first epoch).
    FinetuneDown {
        item_finals: Matrix,
        user_final: Vec<f64>,
    },
    /// Client -> server during fine-tuning: item-final gradients and the
    /// client's updated final embedding.
    FinetuneUp {
        item_grads: Vec<(usize, Vec<f64>)>,
        user_final: Vec<f64>,
    },
}

impl Payload {
    /// Scalar count of the wire representation under sparse uploads.
    pub fn sparse_scalar_count(&self) -> u64 {
        match self {
            Payload::ModelDown {
                items,
                attention,
                mappers,
            } => {
                (items.as_slice().len()
                    + attention.len()
                    + mappers.iter().map(|m| m.flatten().len()).sum::<usize>())
                    as u64
            }
            Payload::GradUp {
                item_grads,
                attention_grad,
                mapper_grads,
                ..
            } => {
                let items: usize = item_grads.iter().map(|(_, g)| g.len() + 1).sum();
                let mappers: usize = mapper_grads
                    .as_ref()
                    .map(|gs| gs.iter().map(|g| g.flatten().len()).sum())
                    .unwrap_or(0);
                (items + attention_grad.len() + mappers) as u64
            }
            Payload::FinetuneDown {
                item_finals,
                user_final,
            } => (item_finals.as_slice().len() + user_final.len()) as u64,
            Payload::FinetuneUp {
                item_grads,
                user_final,
            } => {
                let items: usize = item_grads.iter().map(|(_, g)| g.len() + 1).sum();
                (items + user_final.len()) as u64
            }
        }
    }
}

/// Per-domain server: holds the global model (item table, attention vector,
/// mappers on the target domain), an Adam state over the flattened
/// parameters, and a per-round audit of the aggregated gradients it applied.
#[derive(Debug, Clone)]
pub struct DomainServer {
    pub domain_id: u32,
    pub items: Matrix,
    pub attention: Vec<f64>,
    pub mappers: Vec<MapperMlp>,
    optimizer: Adam,
    pub round: u64,
    pub grad_audit: Vec<Vec<f64>>,
}

impl DomainServer {
    pub fn init(
        domain_id: u32,
        n_items: usize,
        dim: usize,
        n_layers: usize,
        source_domains: &[u32],
        init_std: f64,
        learning_rate: f64,
        tree: &SeedTree,
    ) -> Self {
        let mut rng = tree.stream_with("server-init", &[domain_id as u64]);
        let params = GatParams::init(0, n_items, dim, n_layers, init_std, &mut rng);
        let mappers: Vec<MapperMlp> = source_domains
            .iter()
            .map(|_| MapperMlp::init(dim, init_std, &mut rng))
            .collect();
        let n_flat = n_items * dim + 2 * dim + mappers.len() * MapperMlp::param_count(dim);
        Self {
            domain_id,
            items: params.item_embeddings,
            attention: params.attention,
            mappers,
            optimizer: Adam::new(n_flat, learning_rate),
            round: 0,
            grad_audit: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.attention.len() / 2
    }

    /// Scalars a dense model broadcast (or dense gradient upload) carries.
    pub fn dense_scalar_count(&self) -> u64 {
        (self.items.as_slice().len()
            + self.attention.len()
            + self.mappers.len() * MapperMlp::param_count(self.dim())) as u64
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(self.items.as_slice());
        flat.extend_from_slice(&self.attention);
        for m in &self.mappers {
            flat.extend(m.flatten());
        }
        flat
    }

    fn unflatten_params(&mut self, flat: &[f64]) {
        let n_items = self.items.as_slice().len();
        self.items.as_mut_slice().copy_from_slice(&flat[..n_items]);
        let mut at = n_items;
        let n_att = self.attention.len();
        self.attention.copy_from_slice(&flat[at..at + n_att]);
        at += n_att;
        for m in &mut self.mappers {
            let n = MapperMlp::param_count(m.dim);
            m.unflatten(&flat[at..at + n]);
            at += n;
        }
        debug_assert_eq!(at, flat.len());
    }

    /// Weighted-average the client gradients (weights = pair counts) in
    /// ascending client order and take one optimizer step. Returns the
    /// aggregated flat gradient that was applied.
    pub fn aggregate_and_step(&mut self, mut uploads: Vec<(usize, ClientGrads)>) -> Vec<f64> {
        uploads.sort_by_key(|(client, _)| *client);
        let dim = self.dim();
        let n_items_flat = self.items.as_slice().len();
        let mapper_flat = self.mappers.len() * MapperMlp::param_count(dim);
        let mut agg = vec![0.0; n_items_flat + 2 * dim + mapper_flat];
        let total_weight: f64 = uploads.iter().map(|(_, g)| g.n_pairs as f64).sum();
        if total_weight > 0.0 {
            for (_, grads) in &uploads {
                let w = grads.n_pairs as f64 / total_weight;
                for (item, g) in &grads.items {
                    let at = item * dim;
                    for (k, x) in g.iter().enumerate() {
                        agg[at + k] += w * x;
                    }
                }
                for (k, x) in grads.attention.iter().enumerate() {
                    agg[n_items_flat + k] += w * x;
                }
                if let Some(mgs) = &grads.mappers {
                    let mut at = n_items_flat + 2 * dim;
                    for mg in mgs {
                        for x in mg.flatten() {
                            agg[at] += w * x;
                            at += 1;
                        }
                    }
                }
            }
        }
        let mut flat = self.flatten_params();
        self.optimizer.step(&mut flat, &agg);
        self.unflatten_params(&flat);
        self.round += 1;
        self.grad_audit.push(agg.clone());
        agg
    }

    /// Re-derive the parameter trajectory by replaying the audited
    /// aggregated gradients from a freshly initialized twin.
    pub fn replay_from(mut twin: DomainServer, audit: &[Vec<f64>]) -> DomainServer {
        for agg in audit {
            let mut flat = twin.flatten_params();
            twin.optimizer.step(&mut flat, agg);
            twin.unflatten_params(&flat);
            twin.round += 1;
        }
        twin
    }
}

/// One user across all domains: their local embeddings, local optimizer
/// states, received knowledge, and fine-tune state. Raw interactions live in
/// the dataset split and are never copied in here.
#[derive(Debug, Clone, Default)]
pub struct ClientState {
    pub global_id: usize,
    pub user_embeddings: BTreeMap<u32, Vec<f64>>,
    pub user_opts: BTreeMap<u32, Adam>,
    pub knowledge: Vec<KnowledgeMatrix>,
    pub final_user: Option<Vec<f64>>,
    pub finetune_opt: Option<Adam>,
}

impl ClientState {
    pub fn new(global_id: usize) -> Self {
        Self {
            global_id,
            ..Default::default()
        }
    }

    /// Lazily create this user's embedding for a domain from its own stream.
    pub fn ensure_domain(
        &mut self,
        domain: u32,
        dim: usize,
        init_std: f64,
        learning_rate: f64,
        tree: &SeedTree,
    ) {
        if self.user_embeddings.contains_key(&domain) {
            return;
        }
        let mut rng = tree.stream_with("user-init", &[domain as u64, self.global_id as u64]);
        let normal = rand_distr::Normal::new(0.0, init_std).expect("valid std");
        use rand_distr::Distribution;
        let emb: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        self.user_embeddings.insert(domain, emb);
        self.user_opts.insert(domain, Adam::new(dim, learning_rate));
    }
}

/// Serializable snapshot of a trained pipeline, enough to score candidates
/// and to restart evaluation from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub target_domain: u32,
    pub dim: usize,
    pub n_layers: usize,
    /// Final user embeddings by target-domain local index.
    pub user_finals: Vec<Vec<f64>>,
    pub item_finals: Matrix,
    pub attention: Vec<f64>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn write_json(&self, path: &std::path::Path) -> crate::Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| crate::Error::io(path, e))
    }

    pub fn read_json(path: &std::path::Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != Self::VERSION {
            return Err(crate::Error::Validation(format!(
                "checkpoint version {} unsupported (expected {})",
                ck.version,
                Self::VERSION
            )));
        }
        Ok(ck)
    }
}
