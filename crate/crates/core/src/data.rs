//! Synthetic toy tasks with ground-truth attributions and implicit-feedback
//! interaction data with leave-one-out splits.
//!
//! Toy geometry: the paper's figures draw the clusters but never
//! parameterize them, so the constants here are chosen to make the claims
//! literally testable. Task (a) has four inner clusters at ±1.5 on one
//! axis, each pair separable on a single coordinate. Task (b) adds four
//! outer clusters at (±3, ±3) with XOR labels, inseparable on either
//! single axis, so only the bivariate expert can solve them. σ = 0.25
//! puts every pair of cluster means at least 6σ apart.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{rng_from_seed, DetRng};

pub const TOY_SIGMA: f64 = 0.25;

/// One Gaussian cluster with its label and ground-truth subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCluster {
    pub mean: (f64, f64),
    pub sigma: f64,
    pub label: f64,
    /// Index into the toy scheme's subsets ({X1}, {X2}, {X1,X2}).
    pub truth_subset: usize,
}

/// Cluster layout of toy task (a): four inner clusters, each attributed
/// to a univariate expert.
pub fn toy_a_clusters() -> Vec<ToyCluster> {
    vec![
        ToyCluster { mean: (-1.5, 0.0), sigma: TOY_SIGMA, label: 1.0, truth_subset: 0 },
        ToyCluster { mean: (1.5, 0.0), sigma: TOY_SIGMA, label: 0.0, truth_subset: 0 },
        ToyCluster { mean: (0.0, -1.5), sigma: TOY_SIGMA, label: 1.0, truth_subset: 1 },
        ToyCluster { mean: (0.0, 1.5), sigma: TOY_SIGMA, label: 0.0, truth_subset: 1 },
    ]
}

/// Task (b): the four inner clusters plus four outer clusters at (±3, ±3)
/// with XOR labels, attributed to the bivariate expert.
pub fn toy_b_clusters() -> Vec<ToyCluster> {
    let mut clusters = toy_a_clusters();
    clusters.extend([
        ToyCluster { mean: (3.0, 3.0), sigma: TOY_SIGMA, label: 1.0, truth_subset: 2 },
        ToyCluster { mean: (-3.0, -3.0), sigma: TOY_SIGMA, label: 1.0, truth_subset: 2 },
        ToyCluster { mean: (3.0, -3.0), sigma: TOY_SIGMA, label: 0.0, truth_subset: 2 },
        ToyCluster { mean: (-3.0, 3.0), sigma: TOY_SIGMA, label: 0.0, truth_subset: 2 },
    ]);
    clusters
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub clusters: Vec<ToyCluster>,
    /// `[N×2]` sample coordinates, grouped by cluster.
    pub x: Tensor,
    pub labels: Vec<f64>,
    pub truth_subset: Vec<usize>,
    pub cluster_of: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn gen_toy(clusters: Vec<ToyCluster>, seed: u64, n_per_cluster: usize) -> ToyDataset {
    let mut rng = rng_from_seed(seed);
    let mut coords = Vec::with_capacity(clusters.len() * n_per_cluster * 2);
    let mut labels = Vec::new();
    let mut truth_subset = Vec::new();
    let mut cluster_of = Vec::new();
    for (c_idx, c) in clusters.iter().enumerate() {
        let dist = Normal::new(0.0, c.sigma).expect("positive sigma");
        for _ in 0..n_per_cluster {
            coords.push(c.mean.0 + dist.sample(&mut rng));
            coords.push(c.mean.1 + dist.sample(&mut rng));
            labels.push(c.label);
            truth_subset.push(c.truth_subset);
            cluster_of.push(c_idx);
        }
    }
    let n = labels.len();
    ToyDataset {
        clusters,
        x: Tensor::from_vec(vec![n, 2], coords).expect("length matches"),
        labels,
        truth_subset,
        cluster_of,
    }
}

pub fn gen_toy_a(seed: u64, n_per_cluster: usize) -> ToyDataset {
    gen_toy(toy_a_clusters(), seed, n_per_cluster)
}

pub fn gen_toy_b(seed: u64, n_per_cluster: usize) -> ToyDataset {
    gen_toy(toy_b_clusters(), seed, n_per_cluster)
}

/// Deterministic shuffled train/holdout split of `0..n`.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_holdout = ((n as f64) * holdout_fraction) as usize;
    let holdout = order.split_off(n - n_holdout);
    (order, holdout)
}

// ── Implicit-feedback interactions ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Positive implicit-feedback dataset with dense ids and one/multi-hot
/// side features per user and item.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<Interaction>,
    pub user_features: Tensor,
    pub item_features: Tensor,
    pub user_feature_names: Vec<String>,
    pub item_feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// Ids out of range or duplicate (user, item) positives.
    InvalidDataset(String),
    /// A user's never-interacted item pool is smaller than the number of
    /// evaluation negatives to draw.
    SamplingError { user: usize, pool: usize, needed: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidDataset(msg) => write!(f, "invalid dataset: {msg}"),
            DataError::SamplingError { user, pool, needed } => write!(
                f,
                "user {user} has only {pool} never-interacted items, cannot sample {needed} negatives"
            ),
        }
    }
}

impl core::error::Error for DataError {}

impl InteractionDataset {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for it in &self.interactions {
            if it.user >= self.n_users || it.item >= self.n_items {
                return Err(DataError::InvalidDataset(alloc::format!(
                    "interaction ({}, {}) outside {}×{}",
                    it.user,
                    it.item,
                    self.n_users,
                    self.n_items
                )));
            }
            if !seen.insert((it.user, it.item)) {
                return Err(DataError::InvalidDataset(alloc::format!(
                    "duplicate positive ({}, {})",
                    it.user,
                    it.item
                )));
            }
        }
        if self.user_features.rows() != self.n_users || self.item_features.rows() != self.n_items {
            return Err(DataError::InvalidDataset(
                "feature matrix row counts do not match id spaces".into(),
            ));
        }
        Ok(())
    }
}

/// Leave-one-out evaluation data for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEval {
    pub user: usize,
    /// Latest positive by timestamp (ties to the larger item id).
    pub test_item: usize,
    /// A random training positive held out for validation.
    pub val_item: usize,
    pub train_items: Vec<usize>,
    /// Never-interacted items ranked against the test item.
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub users: Vec<UserEval>,
    /// Users dropped for having fewer than 3 positives.
    pub dropped_users: usize,
    pub n_negatives: usize,
}

/// Builds the leave-one-out split: per user the latest positive becomes
/// the test item, a random remaining one the validation item, and
/// `n_negatives` never-interacted items are drawn uniformly without
/// replacement.
pub fn make_split(
    dataset: &InteractionDataset,
    seed: u64,
    n_negatives: usize,
) -> Result<EvalSplit, DataError> {
    dataset.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut per_user: Vec<Vec<(usize, i64)>> = vec![Vec::new(); dataset.n_users];
    for it in &dataset.interactions {
        per_user[it.user].push((it.item, it.timestamp));
    }

    let mut users = Vec::new();
    let mut dropped = 0usize;
    for (user, mut positives) in per_user.into_iter().enumerate() {
        if positives.len() < 3 {
            dropped += 1;
            continue;
        }
        // Latest timestamp wins; ties break deterministically by item id.
        let (test_pos, _) = positives
            .iter()
            .enumerate()
            .max_by_key(|(_, &(item, ts))| (ts, item))
            .expect("non-empty");
        let test_item = positives.remove(test_pos).0;
        let val_pos = rng.random_range(0..positives.len());
        let val_item = positives.remove(val_pos).0;
        let train_items: Vec<usize> = positives.iter().map(|&(item, _)| item).collect();

        let mut positive_set: BTreeSet<usize> = train_items.iter().copied().collect();
        positive_set.insert(test_item);
        positive_set.insert(val_item);
        let pool: Vec<usize> = (0..dataset.n_items)
            .filter(|i| !positive_set.contains(i))
            .collect();
        if pool.len() < n_negatives {
            return Err(DataError::SamplingError {
                user,
                pool: pool.len(),
                needed: n_negatives,
            });
        }
        let negatives: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), n_negatives)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        users.push(UserEval {
            user,
            test_item,
            val_item,
            train_items,
            negatives,
        });
    }
    Ok(EvalSplit {
        users,
        dropped_users: dropped,
        n_negatives,
    })
}

/// Draws the per-epoch training pairs: every train positive plus
/// `negatives_per_positive` uniform negatives rejected against the user's
/// full positive set. Deterministic given the RNG state.
pub fn sample_training_pairs(
    split: &EvalSplit,
    n_items: usize,
    negatives_per_positive: usize,
    rng: &mut DetRng,
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for ue in &split.users {
        let mut positive_set: BTreeSet<usize> = ue.train_items.iter().copied().collect();
        positive_set.insert(ue.test_item);
        positive_set.insert(ue.val_item);
        for &pos in &ue.train_items {
            users.push(ue.user);
            items.push(pos);
            labels.push(1.0);
            for _ in 0..negatives_per_positive {
                let neg = loop {
                    let candidate = rng.random_range(0..n_items);
                    if !positive_set.contains(&candidate) {
                        break candidate;
                    }
                };
                users.push(ue.user);
                items.push(neg);
                labels.push(0.0);
            }
        }
    }
    (users, items, labels)
}

/// Order-insensitive FNV-1a digest of the split, for manifests and
/// determinism checks.
pub fn split_digest(split: &EvalSplit) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for ue in &split.users {
        eat(ue.user as u64);
        eat(ue.test_item as u64);
        eat(ue.val_item as u64);
        for &t in &ue.train_items {
            eat(t as u64);
        }
        for &n in &ue.negatives {
            eat(n as u64);
        }
    }
    hash
}
