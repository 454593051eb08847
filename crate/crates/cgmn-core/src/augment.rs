//! View generation: two correlated corruptions of a graph, produced by
//! masking node features and removing edges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError};
use crate::seed::{self, TAG_AUGMENT};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("probability {name} must lie in [0,1], got {value}")]
    BadProbability { name: &'static str, value: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Masking granularity. Column masking zeroes whole feature dimensions for
/// every node of a view; entry masking draws i.i.d. per (node, dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Column,
    Entry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of masking a feature dimension (or entry).
    pub p_mask: f64,
    /// Probability of removing each edge.
    pub p_drop: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
}

impl AugmentConfig {
    pub fn new(p_mask: f64, p_drop: f64, seed: u64) -> Result<Self, AugmentError> {
        let cfg = AugmentConfig {
            p_mask,
            p_drop,
            seed,
            mask_mode: MaskMode::Column,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, value) in [("p_mask", self.p_mask), ("p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(AugmentError::BadProbability { name, value });
            }
        }
        Ok(())
    }
}

/// An augmented copy of a graph together with the corruption record that
/// produced it. Views never remove nodes.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub base_id: String,
    pub graph: Graph,
    /// Masked feature indices, per node.
    pub masked_dims: Vec<Vec<usize>>,
    pub dropped_edges: Vec<(usize, usize)>,
}

/// Generate two correlated views of `g`, drawn with independent randomness
/// from the same config. Deterministic per `(g, cfg.seed)`; the two view
/// indices use decorrelated substreams.
pub fn make_views(g: &Graph, cfg: &AugmentConfig) -> Result<(GraphView, GraphView), AugmentError> {
    cfg.validate()?;
    Ok((make_view(g, cfg, 0)?, make_view(g, cfg, 1)?))
}

fn make_view(g: &Graph, cfg: &AugmentConfig, view_index: u64) -> Result<GraphView, AugmentError> {
    let mut rng = seed::stream(cfg.seed, TAG_AUGMENT, view_index, 0);
    let d = g.feature_dim();

    let masked_dims: Vec<Vec<usize>> = match cfg.mask_mode {
        MaskMode::Column => {
            let cols: Vec<usize> = (0..d).filter(|_| rng.gen::<f64>() < cfg.p_mask).collect();
            vec![cols; g.n()]
        }
        MaskMode::Entry => (0..g.n())
            .map(|_| (0..d).filter(|_| rng.gen::<f64>() < cfg.p_mask).collect())
            .collect(),
    };

    let mut features = g.features.clone();
    for (node, dims) in masked_dims.iter().enumerate() {
        for &dim in dims {
            features.set(node, dim, 0.0);
        }
    }

    let mut kept = Vec::with_capacity(g.m());
    let mut dropped = Vec::new();
    for &e in g.edges() {
        if rng.gen::<f64>() < cfg.p_drop {
            dropped.push(e);
        } else {
            kept.push(e);
        }
    }

    let graph = Graph::new(g.id.clone(), g.n(), kept, features, g.node_labels.clone())?;
    Ok(GraphView {
        base_id: g.id.clone(),
        graph,
        masked_dims,
        dropped_edges: dropped,
    })
}

/// A view that is exactly the base graph; used at inference time when
/// augmentation is disabled.
pub fn identity_view(g: &Graph) -> GraphView {
    GraphView {
        base_id: g.id.clone(),
        graph: g.clone(),
        masked_dims: vec![Vec::new(); g.n()],
        dropped_edges: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Matrix;

    fn grid_graph() -> Graph {
        // 4-cycle with distinguishable features
        Graph::new(
            "grid",
            4,
            vec![(0, 1), (1, 2), (2, 3), (3, 0)],
            Matrix::from_rows(&[
                vec![1.0, 2.0, 3.0],
                vec![4.0, 5.0, 6.0],
                vec![7.0, 8.0, 9.0],
                vec![10.0, 11.0, 12.0],
            ])
            .unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_probabilities_reproduce_the_graph() {
        let g = grid_graph();
        let cfg = AugmentConfig::new(0.0, 0.0, 9).unwrap();
        let (v1, v2) = make_views(&g, &cfg).unwrap();
        assert_eq!(v1.graph, g);
        assert_eq!(v2.graph, g);
        assert!(v1.dropped_edges.is_empty());
        assert!(v1.masked_dims.iter().all(Vec::is_empty));
    }

    #[test]
    fn full_mask_zeroes_all_features() {
        let g = grid_graph();
        let cfg = AugmentConfig::new(1.0, 0.0, 1).unwrap();
        let (v1, v2) = make_views(&g, &cfg).unwrap();
        for v in [&v1, &v2] {
            assert!(v.graph.features.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn dropped_fraction_matches_bernoulli_mean() {
        // 10,000 trials on a 50-edge graph at p_drop = 0.2.
        let n = 51;
        let edges: Vec<(usize, usize)> = (0..50).map(|i| (i, i + 1)).collect();
        let g = Graph::new("path", n, edges, Matrix::filled(n, 1, 1.0), None).unwrap();
        let mut total = 0usize;
        let trials = 10_000;
        for t in 0..trials {
            let cfg = AugmentConfig::new(0.0, 0.2, t as u64).unwrap();
            let (v1, _) = make_views(&g, &cfg).unwrap();
            total += v1.dropped_edges.len();
        }
        let mean = total as f64 / (trials as f64 * 50.0);
        assert!((mean - 0.2).abs() < 0.01, "mean dropped fraction {mean}");
    }

    #[test]
    fn views_preserve_nodes_and_subset_edges() {
        let g = grid_graph();
        for s in 0..50 {
            let cfg = AugmentConfig::new(0.3, 0.5, s).unwrap();
            let (v1, v2) = make_views(&g, &cfg).unwrap();
            for v in [&v1, &v2] {
                assert_eq!(v.graph.n(), g.n());
                for e in v.graph.edges() {
                    assert!(g.has_edge(e.0, e.1));
                }
                for e in &v.dropped_edges {
                    assert!(g.has_edge(e.0, e.1));
                    assert!(!v.graph.has_edge(e.0, e.1));
                }
                assert_eq!(v.graph.m() + v.dropped_edges.len(), g.m());
            }
        }
    }

    #[test]
    fn masked_columns_are_recoverable() {
        let g = grid_graph();
        let mut cfg = AugmentConfig::new(0.5, 0.0, 123).unwrap();
        cfg.mask_mode = MaskMode::Entry;
        let (v1, _) = make_views(&g, &cfg).unwrap();
        for node in 0..g.n() {
            for dim in 0..g.feature_dim() {
                let masked = v1.masked_dims[node].contains(&dim);
                let expected = if masked { 0.0 } else { g.features.get(node, dim) };
                assert_eq!(v1.graph.features.get(node, dim), expected);
            }
        }
    }

    #[test]
    fn column_mode_masks_whole_dimensions() {
        let g = grid_graph();
        let cfg = AugmentConfig::new(0.5, 0.0, 77).unwrap();
        let (v1, _) = make_views(&g, &cfg).unwrap();
        // every node shares the same masked column set
        for node in 1..g.n() {
            assert_eq!(v1.masked_dims[node], v1.masked_dims[0]);
        }
    }

    #[test]
    fn same_seed_same_views_different_views_decorrelated() {
        let g = grid_graph();
        let cfg = AugmentConfig::new(0.4, 0.4, 5).unwrap();
        let (a1, a2) = make_views(&g, &cfg).unwrap();
        let (b1, b2) = make_views(&g, &cfg).unwrap();
        assert_eq!(a1.graph, b1.graph);
        assert_eq!(a2.graph, b2.graph);
        assert_eq!(a1.dropped_edges, b1.dropped_edges);
        // the two views of one call come from different substreams
        let differs = a1.graph != a2.graph || a1.masked_dims != a2.masked_dims;
        assert!(differs, "views should not be perfectly correlated");
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(matches!(
            AugmentConfig::new(1.5, 0.0, 0),
            Err(AugmentError::BadProbability { name: "p_mask", .. })
        ));
        assert!(matches!(
            AugmentConfig::new(0.0, -0.1, 0),
            Err(AugmentError::BadProbability { name: "p_drop", .. })
        ));
    }
}
