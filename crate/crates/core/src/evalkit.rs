//! Leave-one-out top-K evaluation: rank each user's held-out item among
//! sampled negatives and aggregate HR@K and NDCG@K.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<u32, f64>,
    pub ndcg: BTreeMap<u32, f64>,
    pub n_users: usize,
    pub seed: u64,
    /// Users without a held-out interaction.
    pub skipped_users: usize,
    #[serde(skip)]
    pub per_user_ranks: Vec<(usize, usize)>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    pub fn write_rank_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "user_idx,rank").map_err(|e| Error::io(path, e))?;
        for (user, rank) in &self.per_user_ranks {
            writeln!(out, "{user},{rank}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// 1-indexed rank of `positive` among the scored candidates, descending by
/// score with ties going to the smaller item index.
pub fn rank_candidates(scored: &[(usize, f64)], positive: usize) -> Result<usize> {
    let mut seen = HashSet::with_capacity(scored.len());
    for (item, _) in scored {
        if !seen.insert(*item) {
            return Err(Error::Validation(format!("duplicate candidate item {item}")));
        }
    }
    let &(_, pos_score) = scored
        .iter()
        .find(|(item, _)| *item == positive)
        .ok_or_else(|| Error::Validation(format!("positive item {positive} not in candidates")))?;
    let better = scored
        .iter()
        .filter(|&&(item, score)| {
            score > pos_score || (score == pos_score && item < positive)
        })
        .count();
    Ok(better + 1)
}

/// Fraction of ranks at or under the cutoff.
pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    hits as f64 / ranks.len() as f64
}

/// Single-relevant-item NDCG: `1/log2(rank+1)` inside the cutoff, 0 outside;
/// the ideal DCG for one relevant item is 1.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r as f64) + 1.0).log2() } else { 0.0 })
        .sum();
    sum / ranks.len() as f64
}

/// Score each held-out item against its pre-sampled negatives and aggregate.
/// `negatives[i]` belongs to `test[i]`; `n_users` is the domain's user count
/// so skipped (test-less) users can be reported.
pub fn evaluate(
    score: impl Fn(usize, usize) -> f64,
    test: &[Interaction],
    negatives: &[Vec<usize>],
    n_users: usize,
    ks: &[u32],
    seed: u64,
) -> MetricsReport {
    assert_eq!(test.len(), negatives.len());
    let mut ranks = Vec::with_capacity(test.len());
    let mut per_user_ranks = Vec::with_capacity(test.len());
    for (held, negs) in test.iter().zip(negatives) {
        let mut scored = Vec::with_capacity(negs.len() + 1);
        scored.push((held.item, score(held.user, held.item)));
        for &n in negs {
            scored.push((n, score(held.user, n)));
        }
        let rank = rank_candidates(&scored, held.item).expect("positive is in candidates");
        ranks.push(rank);
        per_user_ranks.push((held.user, rank));
    }
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k, hr_at_k(&ranks, k as usize));
        ndcg.insert(k, ndcg_at_k(&ranks, k as usize));
    }
    MetricsReport {
        hr,
        ndcg,
        n_users: test.len(),
        seed,
        skipped_users: n_users - test.len(),
        per_user_ranks,
    }
}
