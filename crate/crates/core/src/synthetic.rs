//! Seeded synthetic datasets for tests, benches and fixtures.
//!
//! Sequences are bags of tokens `w00`..`wNN`. Each task splits the shared
//! token pool into two clusters in its own way; a labeled pair is positive
//! iff both sides were drawn from the same cluster. Two tasks that split
//! the pool differently compete for the same embedding rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::retrieval::Document;
use crate::training::PairExample;

/// How a task assigns pool tokens to its two clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Token `i` belongs to cluster `i % 2`.
    Parity,
    /// Token `i` belongs to cluster 0 iff it is in the first half.
    Halves,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub pool_size: usize,
    pub seq_len: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            pool_size: 40,
            seq_len: 5,
        }
    }
}

pub fn token(i: usize) -> String {
    format!("w{i:02}")
}

fn cluster_tokens(spec: PoolSpec, split: Split, cluster: usize) -> Vec<usize> {
    (0..spec.pool_size)
        .filter(|&i| match split {
            Split::Parity => i % 2 == cluster,
            Split::Halves => usize::from(i >= spec.pool_size / 2) == cluster,
        })
        .collect()
}

fn sentence(rng: &mut ChaCha8Rng, spec: PoolSpec, members: &[usize]) -> String {
    (0..spec.seq_len)
        .map(|_| token(members[rng.random_range(0..members.len())]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` labeled pairs, alternating positive and negative.
pub fn cluster_pairs(spec: PoolSpec, split: Split, n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = [cluster_tokens(spec, split, 0), cluster_tokens(spec, split, 1)];
    (0..n)
        .map(|i| {
            let label = (i % 2 == 0) as u8;
            let ca = rng.random_range(0..2usize);
            let cb = if label == 1 { ca } else { 1 - ca };
            let a = sentence(&mut rng, spec, &clusters[ca]);
            let b = sentence(&mut rng, spec, &clusters[cb]);
            PairExample::labeled(a, b, label)
        })
        .collect()
}

/// Unlabeled (sentence, cluster name) pairs for in-batch-negative training.
pub fn topic_pairs(spec: PoolSpec, split: Split, topics: [&str; 2], n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = [cluster_tokens(spec, split, 0), cluster_tokens(spec, split, 1)];
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..2usize);
            PairExample::positive(sentence(&mut rng, spec, &clusters[c]), topics[c])
        })
        .collect()
}

/// Random sentences from the whole pool, with ids starting at `first_id`.
pub fn distractors(spec: PoolSpec, n: usize, first_id: u64, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..spec.pool_size).collect();
    (0..n as u64)
        .map(|i| Document {
            id: first_id + i,
            text: sentence(&mut rng, spec, &all),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_partition_the_pool() {
        let spec = PoolSpec::default();
        for split in [Split::Parity, Split::Halves] {
            let mut all = cluster_tokens(spec, split, 0);
            assert_eq!(all.len(), 20);
            all.extend(cluster_tokens(spec, split, 1));
            all.sort_unstable();
            assert_eq!(all, (0..40).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pairs_are_seeded_and_balanced() {
        let spec = PoolSpec::default();
        let a = cluster_pairs(spec, Split::Parity, 10, 1);
        assert_eq!(a, cluster_pairs(spec, Split::Parity, 10, 1));
        assert_ne!(a, cluster_pairs(spec, Split::Parity, 10, 2));
        assert_eq!(a.iter().filter(|p| p.label == Some(1)).count(), 5);
        let pos = &a[0];
        let parity = |s: &str| {
            s.split(' ')
                .map(|t| t[1..].parse::<usize>().unwrap() % 2)
                .collect::<Vec<_>>()
        };
        let pa = parity(&pos.text_a);
        assert!(pa.iter().all(|&x| x == pa[0]));
        assert!(parity(&pos.text_b).iter().all(|&x| x == pa[0]));
    }
}
