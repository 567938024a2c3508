//! Synthetic interaction data with cluster preferences and first-order
//! transition structure.
//!
//! Items are split into equal contiguous clusters and every user prefers one
//! of them. A fixed random permutation `next` over all items defines the
//! transitions. Each step follows `next(previous)` with probability
//! `transition_prob` and otherwise draws uniformly from the user's cluster.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSnapshot, DatasetStats, FilterMode, RawInteraction, SplitDataset, MIN_SPLIT_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transition_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 500,
            n_items: 200,
            n_clusters: 10,
            min_len: 8,
            max_len: 16,
            transition_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_clusters == 0 || self.n_items < self.n_clusters {
            return Err(Error::Config("need users, clusters, and at least one item per cluster".into()));
        }
        if self.min_len < MIN_SPLIT_LEN || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "sequence lengths must satisfy {MIN_SPLIT_LEN} <= min_len <= max_len"
            )));
        }
        if !(0.0..=1.0).contains(&self.transition_prob) {
            return Err(Error::Config("transition_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Cluster of item `i`.
    pub fn cluster_of_item(&self, i: usize) -> usize {
        (i * self.n_clusters / self.n_items).min(self.n_clusters - 1)
    }

    /// Preferred cluster of user `u`.
    pub fn cluster_of_user(&self, u: usize) -> usize {
        u % self.n_clusters
    }

    fn cluster_items(&self, c: usize) -> Vec<usize> {
        (0..self.n_items).filter(|&i| self.cluster_of_item(i) == c).collect()
    }
}

/// The generated sequences and the transition permutation behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub sequences: Vec<Vec<usize>>,
    pub transition: Vec<usize>,
}

impl SyntheticData {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut transition: Vec<usize> = (0..config.n_items).collect();
        transition.shuffle(&mut rng);
        let clusters: Vec<Vec<usize>> = (0..config.n_clusters).map(|c| config.cluster_items(c)).collect();
        let sequences = (0..config.n_users)
            .map(|u| {
                let pool = &clusters[config.cluster_of_user(u)];
                let len = rng.gen_range(config.min_len..=config.max_len);
                let mut seq = Vec::with_capacity(len);
                let mut prev = *pool.choose(&mut rng).expect("non-empty cluster");
                seq.push(prev);
                while seq.len() < len {
                    prev = if rng.gen_bool(config.transition_prob) {
                        transition[prev]
                    } else {
                        *pool.choose(&mut rng).expect("non-empty cluster")
                    };
                    seq.push(prev);
                }
                seq
            })
            .collect();
        Ok(SyntheticData {
            config: config.clone(),
            sequences,
            transition,
        })
    }

    pub fn split(&self) -> Result<SplitDataset> {
        SplitDataset::from_sequences(self.config.n_items, &self.sequences)
    }

    /// Raw records with tokens `u{id}` / `i{id}` and increasing timestamps,
    /// suitable for writing as a tab-separated log.
    pub fn to_raw(&self) -> Vec<RawInteraction> {
        let mut out = Vec::new();
        let mut ts = 0u64;
        for (u, seq) in self.sequences.iter().enumerate() {
            for &i in seq {
                out.push(RawInteraction {
                    user: format!("u{u}"),
                    item: format!("i{i}"),
                    timestamp: ts,
                });
                ts += 1;
            }
        }
        out
    }

    /// Snapshot of the unfiltered data with `u{id}` / `i{id}` tokens, so the
    /// generated set can be evaluated like a prepared one.
    pub fn snapshot(&self) -> Result<DatasetSnapshot> {
        let split = self.split()?;
        let n_interactions: usize = self.sequences.iter().map(Vec::len).sum();
        Ok(DatasetSnapshot {
            filter_mode: FilterMode::Fixpoint,
            min_count: 0,
            dropped_short_users: 0,
            stats: DatasetStats {
                n_users: split.n_users,
                n_items: split.n_items,
                n_interactions,
                avg_length: n_interactions as f64 / split.n_users as f64,
            },
            user_tokens: (0..split.n_users).map(|u| format!("u{u}")).collect(),
            item_tokens: (0..split.n_items).map(|i| format!("i{i}")).collect(),
            split,
        })
    }

    /// `user\titem\ttimestamp` lines.
    pub fn to_tsv(&self) -> String {
        self.to_raw()
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp))
            .collect()
    }
}
