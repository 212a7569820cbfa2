//! Seed derivation. Every random draw in the simulator flows from one root
//! seed through named sub-streams, so any component can be re-run in
//! isolation and two runs with the same root are bit-identical regardless of
//! scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Root of the per-run seed hierarchy.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Derive an independent stream for `label`.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.stream_with(label, &[])
    }

    /// Derive an independent stream for `label` plus integer coordinates
    /// (domain id, round, user id, ...).
    pub fn stream_with(&self, label: &str, indices: &[u64]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update([label.len() as u8]);
        hasher.update(label.as_bytes());
        for ix in indices {
            hasher.update(ix.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_label_same_stream() {
        let tree = SeedTree::new(42);
        let a: Vec<u64> = (0..8).map(|_| tree.stream("x").random()).collect();
        let b: Vec<u64> = (0..8).map(|_| tree.stream("x").random()).collect();
        // each call re-derives the stream from scratch
        let mut r1 = tree.stream("x");
        let mut r2 = tree.stream("x");
        for _ in 0..64 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_labels_distinct_streams() {
        let tree = SeedTree::new(42);
        let mut a = tree.stream("alpha");
        let mut b = tree.stream("beta");
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn indices_separate_streams() {
        let tree = SeedTree::new(7);
        let mut a = tree.stream_with("neg", &[0, 3]);
        let mut b = tree.stream_with("neg", &[0, 4]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn distinct_roots_distinct_streams() {
        let a: u64 = SeedTree::new(1).stream("x").random();
        let b: u64 = SeedTree::new(2).stream("x").random();
        assert_ne!(a, b);
    }
}
