//! Synthetic dataset generation at oracle-tractable sizes.
//!
//! GED pairs are (graph, edited copy) with the exact distance filled in by
//! the oracle, never by the applied edit count (which is only an upper
//! bound). BSD pairs alternate between augmented copies of one base graph
//! (+1) and two independent random graphs (-1).

use rand::Rng;

use crate::augment::{make_views, AugmentConfig, AugmentError};
use crate::ged::{ged_exact, GedError};
use crate::graph::{one_hot_features, Graph, GraphError, GraphPair};
use crate::seed::{self, TAG_GENERATE};

/// Beyond this many nodes the oracle stops being interactive.
const ORACLE_CAP: usize = 16;
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("n_range ({0}, {1}) is invalid: need 1 <= min <= max")]
    BadRange(usize, usize),
    #[error("n_max {n_max} + edit_budget {budget} exceeds the oracle-tractable cap {ORACLE_CAP}")]
    Intractable { n_max: usize, budget: usize },
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("no feasible edit after {MAX_RESAMPLES} resamples")]
    NoFeasibleEdit,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ged(#[from] GedError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// A generated pair plus the number of edits actually applied; the oracle
/// distance in `pair.ged` never exceeds `edits_applied`.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub pair: GraphPair,
    pub edits_applied: u32,
}

struct Working {
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl Working {
    fn from_graph(g: &Graph) -> Self {
        Working {
            labels: (0..g.n()).map(|u| g.label(u)).collect(),
            edges: g.edges().to_vec(),
        }
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.contains(&key)
    }

    fn non_edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if !self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&u| !self.edges.iter().any(|&(a, b)| a == u || b == u))
            .collect()
    }

    fn into_graph(self, id: String, d: usize) -> Result<Graph, GraphError> {
        let features = one_hot_features(&self.labels, d);
        let labels = if d > 1 { Some(self.labels) } else { None };
        Graph::new(id, features.rows(), self.edges, features, labels)
    }
}

fn sample_graph(rng: &mut impl Rng, id: String, n_range: (usize, usize), d: usize) -> Result<Graph, SynthError> {
    let n = rng.gen_range(n_range.0..=n_range.1);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d)).collect();
    // target average degree around 2, matching sparse benchmark graphs
    let p_edge = if n > 1 { (2.0 / (n - 1) as f64).min(1.0) } else { 0.0 };
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p_edge {
                edges.push((u, v));
            }
        }
    }
    // attach isolated nodes so base graphs have minimum degree 1, like the
    // benchmark corpora; a node with no neighbors embeds identically in
    // every view and contrastive repulsion crushes it to zero
    if n > 1 {
        for u in 0..n {
            if !edges.iter().any(|&(a, b)| a == u || b == u) {
                let mut v = rng.gen_range(0..n - 1);
                if v >= u {
                    v += 1;
                }
                edges.push((u.min(v), u.max(v)));
            }
        }
    }
    let features = one_hot_features(&labels, d);
    let node_labels = if d > 1 { Some(labels) } else { None };
    Ok(Graph::new(id, n, edges, features, node_labels)?)
}

/// Apply one random unit edit. Infeasible draws (deleting the last node,
/// deleting a non-isolated node, inserting into a complete graph, deleting
/// from an empty one) are re-sampled up to [`MAX_RESAMPLES`] times.
fn apply_random_edit(w: &mut Working, rng: &mut impl Rng, d: usize) -> Result<(), SynthError> {
    for _ in 0..MAX_RESAMPLES {
        match rng.gen_range(0..4u8) {
            0 => {
                // insert node
                w.labels.push(rng.gen_range(0..d));
                return Ok(());
            }
            1 => {
                // delete node: only isolated nodes, never the last one
                let isolated = w.isolated_nodes();
                if isolated.is_empty() || w.n() == 1 {
                    continue;
                }
                let victim = isolated[rng.gen_range(0..isolated.len())];
                w.labels.remove(victim);
                for e in &mut w.edges {
                    if e.0 > victim {
                        e.0 -= 1;
                    }
                    if e.1 > victim {
                        e.1 -= 1;
                    }
                }
                return Ok(());
            }
            2 => {
                // insert edge
                let non_edges = w.non_edges();
                if non_edges.is_empty() {
                    continue;
                }
                let e = non_edges[rng.gen_range(0..non_edges.len())];
                w.edges.push(e);
                return Ok(());
            }
            _ => {
                // delete edge
                if w.edges.is_empty() {
                    continue;
                }
                let at = rng.gen_range(0..w.edges.len());
                w.edges.remove(at);
                return Ok(());
            }
        }
    }
    Err(SynthError::NoFeasibleEdit)
}

/// Generate `count` oracle-labeled GED pairs. Deterministic per seed; each
/// pair has its own RNG substream so output is byte-identical on re-runs.
pub fn generate_synthetic_pairs(
    count: usize,
    n_range: (usize, usize),
    d: usize,
    edit_budget: u32,
    seed: u64,
) -> Result<Vec<SyntheticPair>, SynthError> {
    validate(n_range, d)?;
    if n_range.1 + edit_budget as usize > ORACLE_CAP {
        return Err(SynthError::Intractable {
            n_max: n_range.1,
            budget: edit_budget as usize,
        });
    }
    let node_limit = n_range.1 + edit_budget as usize;

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seed::stream(seed, TAG_GENERATE, i as u64, 0);
        let base = sample_graph(&mut rng, format!("p{i:04}a"), n_range, d)?;

        let mut working = Working::from_graph(&base);
        let k = rng.gen_range(0..=edit_budget);
        for _ in 0..k {
            apply_random_edit(&mut working, &mut rng, d)?;
        }
        let edited = working.into_graph(format!("p{i:04}b"), d)?;

        let (cost, _) = ged_exact(&base, &edited, node_limit)?;
        out.push(SyntheticPair {
            pair: GraphPair::new(base, edited, Some(cost), None)?,
            edits_applied: k,
        });
    }
    Ok(out)
}

/// Augmentation strength used for BSD positives.
const BSD_P_MASK: f64 = 0.2;
const BSD_P_DROP: f64 = 0.2;

/// Generate `count` BSD pairs: even indices are (graph, augmented copy)
/// labeled +1, odd indices are two independent graphs labeled -1.
pub fn generate_bsd_pairs(
    count: usize,
    n_range: (usize, usize),
    d: usize,
    seed: u64,
) -> Result<Vec<GraphPair>, SynthError> {
    validate(n_range, d)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seed::stream(seed, TAG_GENERATE, i as u64, 1);
        let base = sample_graph(&mut rng, format!("b{i:04}a"), n_range, d)?;
        let (partner, label) = if i % 2 == 0 {
            let mut cfg = AugmentConfig::new(BSD_P_MASK, BSD_P_DROP, rng.gen())?;
            cfg.mask_mode = crate::augment::MaskMode::Column;
            let (view, _) = make_views(&base, &cfg)?;
            let mut g = view.graph;
            g.id = format!("b{i:04}b");
            (g, 1)
        } else {
            (sample_graph(&mut rng, format!("b{i:04}b"), n_range, d)?, -1)
        };
        out.push(GraphPair::new(base, partner, None, Some(label))?);
    }
    Ok(out)
}

fn validate(n_range: (usize, usize), d: usize) -> Result<(), SynthError> {
    if n_range.0 == 0 || n_range.0 > n_range.1 {
        return Err(SynthError::BadRange(n_range.0, n_range.1));
    }
    if d == 0 {
        return Err(SynthError::ZeroDim);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_gives_zero_ged() {
        let pairs = generate_synthetic_pairs(10, (3, 5), 2, 0, 7).unwrap();
        for sp in &pairs {
            assert_eq!(sp.pair.ged, Some(0));
            assert_eq!(sp.edits_applied, 0);
        }
    }

    #[test]
    fn oracle_never_exceeds_applied_edits() {
        let pairs = generate_synthetic_pairs(30, (3, 6), 3, 4, 11).unwrap();
        let mut nonzero = 0;
        for sp in &pairs {
            let ged = sp.pair.ged.unwrap();
            assert!(
                ged <= sp.edits_applied,
                "oracle {ged} > applied {}",
                sp.edits_applied
            );
            nonzero += u32::from(ged > 0);
        }
        assert!(nonzero > 5, "edits should usually change the graph");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_pairs(8, (3, 6), 2, 3, 5).unwrap();
        let b = generate_synthetic_pairs(8, (3, 6), 2, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pair.g1, y.pair.g1);
            assert_eq!(x.pair.g2, y.pair.g2);
            assert_eq!(x.pair.ged, y.pair.ged);
        }
    }

    #[test]
    fn intractable_budget_is_rejected() {
        assert!(matches!(
            generate_synthetic_pairs(1, (8, 14), 2, 6, 0),
            Err(SynthError::Intractable { .. })
        ));
    }

    #[test]
    fn dimension_one_gives_unlabeled_constant_features() {
        let pairs = generate_synthetic_pairs(3, (2, 4), 1, 1, 9).unwrap();
        for sp in &pairs {
            assert!(sp.pair.g1.node_labels.is_none());
            assert!(sp.pair.g1.features.as_slice().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn bsd_pairs_alternate_labels() {
        let pairs = generate_bsd_pairs(6, (3, 5), 2, 13).unwrap();
        assert_eq!(pairs.len(), 6);
        for (i, p) in pairs.iter().enumerate() {
            let expected = if i % 2 == 0 { 1 } else { -1 };
            assert_eq!(p.bsd_label, Some(expected));
            if expected == 1 {
                // positives keep the node count of the base graph
                assert_eq!(p.g1.n(), p.g2.n());
            }
        }
    }
}
