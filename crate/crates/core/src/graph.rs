//! Bipartite user-item graphs, per-user ego views for client-local
//! computation, and the per-client graph expansion that attaches one virtual
//! user per source domain via a virtual social link.

use crate::dataset::InteractionSet;
use crate::transfer::KnowledgeMatrix;
use crate::{Error, Result};

/// Whole-domain bipartite adjacency. Neighbor lists are sorted ascending and
/// duplicate-free; `u in item_adj[v]` iff `v in user_adj[u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGraph {
    pub n_users: usize,
    pub n_items: usize,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl DomainGraph {
    pub fn user_neighbors(&self, user: usize) -> &[usize] {
        &self.user_adj[user]
    }

    pub fn item_neighbors(&self, item: usize) -> &[usize] {
        &self.item_adj[item]
    }

    pub fn n_edges(&self) -> usize {
        self.user_adj.iter().map(|a| a.len()).sum()
    }
}

pub fn build_bipartite_graph(train: &InteractionSet) -> DomainGraph {
    let mut user_adj = vec![Vec::new(); train.n_users];
    let mut item_adj = vec![Vec::new(); train.n_items];
    for it in train.iter() {
        user_adj[it.user].push(it.item);
        item_adj[it.item].push(it.user);
    }
    for adj in user_adj.iter_mut().chain(item_adj.iter_mut()) {
        adj.sort_unstable();
        adj.dedup();
    }
    DomainGraph {
        n_users: train.n_users,
        n_items: train.n_items,
        user_adj,
        item_adj,
    }
}

/// The client-local view: the center user's sorted item list.
pub fn ego_graph(g: &DomainGraph, user: usize) -> Result<&[usize]> {
    if user >= g.n_users {
        return Err(Error::IndexOutOfRange {
            index: user,
            len: g.n_users,
        });
    }
    Ok(g.user_neighbors(user))
}

/// A center user's ego graph expanded with one virtual user per source
/// domain. Virtual users connect only to the center, never to items, and sit
/// in ascending source-domain order so attention slot `i` means the same
/// domain for every client.
#[derive(Debug, Clone)]
pub struct ExpandedEgoGraph {
    pub center: usize,
    pub items: Vec<usize>,
    pub virtuals: Vec<KnowledgeMatrix>,
}

pub fn expand_graph(
    center: usize,
    items: &[usize],
    knowledge: Vec<KnowledgeMatrix>,
    n_sources: usize,
    n_layers: usize,
    dim: usize,
) -> Result<ExpandedEgoGraph> {
    if knowledge.len() != n_sources {
        return Err(Error::ShapeMismatch {
            what: "knowledge list".into(),
            expected: format!("{n_sources} matrices"),
            actual: format!("{}", knowledge.len()),
        });
    }
    for km in &knowledge {
        if km.rows.n_rows() != n_layers || km.rows.n_cols() != dim {
            return Err(Error::ShapeMismatch {
                what: format!("knowledge matrix from domain {}", km.source_domain_id),
                expected: format!("{n_layers}x{dim}"),
                actual: format!("{}x{}", km.rows.n_rows(), km.rows.n_cols()),
            });
        }
    }
    if !knowledge.windows(2).all(|w| w[0].source_domain_id < w[1].source_domain_id) {
        return Err(Error::Validation(
            "knowledge matrices must be in ascending source-domain order".into(),
        ));
    }
    Ok(ExpandedEgoGraph {
        center,
        items: items.to_vec(),
        virtuals: knowledge,
    })
}

/// Edge-list dump for debugging: `user_idx,item_idx` rows.
pub fn write_edge_list(path: &std::path::Path, g: &DomainGraph) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "user_idx,item_idx").map_err(|e| Error::io(path, e))?;
    for u in 0..g.n_users {
        for &i in g.user_neighbors(u) {
            writeln!(out, "{u},{i}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}
