//! Seeded synthetic graphs for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CsrGraph;
use crate::mat::DenseMat;

/// Erdos-Renyi G(n, p): each ordered pair (u, v), u != v, becomes an edge
/// with probability `p`; `symmetrize` folds in reverse edges.
pub fn gnp(n: usize, p: f64, symmetrize: bool, seed: u64) -> CsrGraph<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    CsrGraph::from_edges(n, &edges, symmetrize).expect("generated ids are in range")
}

/// Configuration for [`planted_partition`].
#[derive(Clone, Debug)]
pub struct PlantedConfig {
    pub num_nodes: usize,
    pub num_blocks: usize,
    pub feature_dim: usize,
    /// Within-block edge probability.
    pub p_in: f64,
    /// Cross-block edge probability.
    pub p_out: f64,
    /// Half-width of the uniform feature noise around each block mean.
    pub noise: f64,
    /// Fractions of nodes marked train / val (remainder is test).
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_nodes: 400,
            num_blocks: 4,
            feature_dim: 16,
            p_in: 0.05,
            p_out: 0.005,
            noise: 1.0,
            train_frac: 0.6,
            val_frac: 0.2,
        }
    }
}

/// Stochastic block model classification dataset: labels are block ids,
/// features are a block-dependent mean plus uniform noise, masks split the
/// nodes into train/val/test. Edges are symmetrized.
pub fn planted_partition(cfg: &PlantedConfig, seed: u64) -> CsrGraph<f32> {
    let n = cfg.num_nodes;
    let k = cfg.num_blocks.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let blocks: Vec<usize> = (0..n).map(|v| v % k).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if blocks[u] == blocks[v] { cfg.p_in } else { cfg.p_out };
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let mut g = CsrGraph::from_edges(n, &edges, true).expect("generated ids are in range");

    let f = cfg.feature_dim;
    let mut feat = DenseMat::zeros(n, f);
    for v in 0..n {
        let row = feat.row_mut(v);
        for (j, x) in row.iter_mut().enumerate() {
            let mean = if f > 0 && j == blocks[v] % f { 2.0 } else { 0.0 };
            *x = mean + rng.gen_range(-cfg.noise..cfg.noise) as f32;
        }
    }
    g.set_features(feat).unwrap();
    g.set_labels(blocks.iter().map(|&b| b as i32).collect()).unwrap();

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = ((n as f64) * cfg.train_frac).round() as usize;
    let n_val = ((n as f64) * cfg.val_frac).round() as usize;
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for (rank, &v) in order.iter().enumerate() {
        if rank < n_train {
            train[v] = true;
        } else if rank < n_train + n_val {
            val[v] = true;
        } else {
            test[v] = true;
        }
    }
    g.set_masks(train, val, test).unwrap();
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gnp_is_deterministic_per_seed() {
        let a = gnp(30, 0.1, true, 9);
        let b = gnp(30, 0.1, true, 9);
        assert_eq!(a.row_offsets(), b.row_offsets());
        assert_eq!(a.col_indices(), b.col_indices());
        assert_ne!(a.col_indices(), gnp(30, 0.1, true, 10).col_indices());
    }

    #[test]
    fn planted_partition_has_dense_intra_block_structure() {
        let cfg = PlantedConfig { num_nodes: 200, ..PlantedConfig::default() };
        let g = planted_partition(&cfg, 1);
        let labels = g.labels();
        let (mut intra, mut inter) = (0usize, 0usize);
        for (u, v) in g.edges() {
            if labels[u] == labels[v] {
                intra += 1;
            } else {
                inter += 1;
            }
        }
        assert!(intra > inter, "intra {intra} inter {inter}");
        let n_train = g.train_mask().iter().filter(|&&m| m).count();
        let n_val = g.val_mask().iter().filter(|&&m| m).count();
        let n_test = g.test_mask().iter().filter(|&&m| m).count();
        assert_eq!(n_train + n_val + n_test, 200);
        assert!(n_train > n_val && n_val >= n_test);
        assert_eq!(g.num_classes(), 4);
    }
}
