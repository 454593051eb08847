//! Exact graph edit distance for small graphs.
//!
//! Unit costs, four operations: node insert/delete and edge insert/delete.
//! Relabeling is not an atomic operation, so matching two nodes with
//! different labels is forbidden (a label change is delete + insert, cost 2).
//!
//! [`ged_exact`] runs A* over partial node assignments with an admissible
//! lower bound from label-multiset and edge-count differences. It returns a
//! witnessing [`EditPath`]; replaying the path on the first graph yields a
//! graph isomorphic to the second. [`ged_bruteforce`] exhaustively scores
//! every injective mapping and exists as an independent oracle for tests.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::graph::{Graph, GraphError};

pub const DEFAULT_NODE_LIMIT: usize = 8;
const BRUTEFORCE_LIMIT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum GedError {
    #[error("intractable size: graph {id} has {n} nodes, limit is {limit}")]
    IntractableSize { id: String, n: usize, limit: usize },
    #[error("brute force supports at most {BRUTEFORCE_LIMIT} nodes, graph {id} has {n}")]
    BruteForceSize { id: String, n: usize },
    #[error("invalid edit path: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One unit edit. Node ids are stable across the replay: deleting a node
/// never renumbers the others, and inserted nodes receive fresh ids starting
/// at the first graph's node count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum EditOp {
    InsertNode { id: usize, label: usize },
    DeleteNode { id: usize },
    InsertEdge { u: usize, v: usize },
    DeleteEdge { u: usize, v: usize },
}

/// A sequence of unit edits transforming one graph into another, with its
/// total cost (= number of operations).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPath {
    pub ops: Vec<EditOp>,
    pub cost: u32,
}

fn adjacency_masks(g: &Graph) -> Vec<u32> {
    let mut masks = vec![0u32; g.n()];
    for &(u, v) in g.edges() {
        masks[u] |= 1 << v;
        masks[v] |= 1 << u;
    }
    masks
}

fn check_limit(g: &Graph, limit: usize) -> Result<(), GedError> {
    if g.n() > limit {
        return Err(GedError::IntractableSize {
            id: g.id.clone(),
            n: g.n(),
            limit,
        });
    }
    Ok(())
}

#[derive(Clone)]
struct SearchState {
    /// Per g1 node: -2 unprocessed, -1 deleted, otherwise the matched g2 node.
    assignment: Vec<i8>,
    used: u32,
    depth: usize,
    cost: u32,
}

/// Exact minimum edit distance between `g1` and `g2` under unit costs,
/// together with a witnessing edit path. Graphs larger than `node_limit`
/// are rejected rather than approximated.
pub fn ged_exact(g1: &Graph, g2: &Graph, node_limit: usize) -> Result<(u32, EditPath), GedError> {
    check_limit(g1, node_limit)?;
    check_limit(g2, node_limit)?;

    let (n1, n2) = (g1.n(), g2.n());
    let adj1 = adjacency_masks(g1);
    let adj2 = adjacency_masks(g2);

    // Compact the label alphabet of both graphs.
    let mut alphabet: Vec<usize> = (0..n1).map(|u| g1.label(u)).chain((0..n2).map(|v| g2.label(v))).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let compact = |label: usize| alphabet.binary_search(&label).unwrap();
    let labels1: Vec<usize> = (0..n1).map(|u| compact(g1.label(u))).collect();
    let labels2: Vec<usize> = (0..n2).map(|v| compact(g2.label(v))).collect();
    let num_labels = alphabet.len();

    // Process high-degree g1 nodes first: they constrain the search most.
    let mut order: Vec<usize> = (0..n1).collect();
    order.sort_by_key(|&u| (Reverse(adj1[u].count_ones()), u));
    let step_of = {
        let mut s = vec![0usize; n1];
        for (k, &u) in order.iter().enumerate() {
            s[u] = k;
        }
        s
    };

    // Suffix label counts of unprocessed g1 nodes, per depth.
    let mut labels1_remaining = vec![vec![0u32; num_labels]; n1 + 1];
    for d in (0..n1).rev() {
        labels1_remaining[d] = labels1_remaining[d + 1].clone();
        labels1_remaining[d][labels1[order[d]]] += 1;
    }

    // Number of g1 edges still undecided at each depth: an edge is decided
    // once its later-processed endpoint is processed.
    let mut m1_remaining = vec![0u32; n1 + 1];
    for d in 0..=n1 {
        m1_remaining[d] = g1
            .edges()
            .iter()
            .filter(|&&(u, v)| step_of[u].max(step_of[v]) >= d)
            .count() as u32;
    }

    let heuristic = |depth: usize, used: u32| -> u32 {
        let mut available = vec![0u32; num_labels];
        for v in 0..n2 {
            if used & (1 << v) == 0 {
                available[labels2[v]] += 1;
            }
        }
        let remaining1: u32 = labels1_remaining[depth].iter().sum();
        let remaining2: u32 = available.len() as u32;
        let _ = remaining2;
        let avail_total: u32 = available.iter().sum();
        let matchable: u32 = labels1_remaining[depth]
            .iter()
            .zip(&available)
            .map(|(&a, &b)| a.min(b))
            .sum();
        let node_lb = (remaining1 - matchable) + (avail_total - matchable);

        let m2_remaining = g2
            .edges()
            .iter()
            .filter(|&&(a, b)| used & (1 << a) == 0 || used & (1 << b) == 0)
            .count() as u32;
        let edge_lb = m1_remaining[depth].abs_diff(m2_remaining);
        node_lb + edge_lb
    };

    // Cost of the unprocessed tail once every g1 node has been handled:
    // unmatched g2 nodes are inserted, along with their incident edges.
    let completion_cost = |used: u32| -> u32 {
        let inserted_nodes = n2 as u32 - used.count_ones();
        let inserted_edges = g2
            .edges()
            .iter()
            .filter(|&&(a, b)| used & (1 << a) == 0 || used & (1 << b) == 0)
            .count() as u32;
        inserted_nodes + inserted_edges
    };

    // Edge cost of assigning `u -> v` (v = None deletes u), counted against
    // every already-processed g1 node so each node pair is charged exactly
    // once.
    let delta_cost = |state: &SearchState, u: usize, v: Option<usize>| -> u32 {
        let mut cost = if v.is_none() { 1 } else { 0 };
        for &prev in &order[..state.depth] {
            let e1 = adj1[u] & (1 << prev) != 0;
            let prev_assign = state.assignment[prev];
            match (v, prev_assign) {
                (Some(v), a) if a >= 0 => {
                    let e2 = adj2[v] & (1 << a as usize) != 0;
                    if e1 != e2 {
                        cost += 1;
                    }
                }
                _ => {
                    if e1 {
                        cost += 1;
                    }
                }
            }
        }
        cost
    };

    let root = SearchState {
        assignment: vec![-2; n1],
        used: 0,
        depth: 0,
        cost: 0,
    };

    let mut arena = vec![root];
    let mut heap: BinaryHeap<Reverse<(u32, u64, usize)>> = BinaryHeap::new();
    heap.push(Reverse((heuristic(0, 0), 0, 0)));
    let mut seq: u64 = 1;

    while let Some(Reverse((f, _, idx))) = heap.pop() {
        let state = arena[idx].clone();
        if state.depth == n1 {
            let mapping: Vec<Option<usize>> = state
                .assignment
                .iter()
                .map(|&a| if a >= 0 { Some(a as usize) } else { None })
                .collect();
            let path = build_edit_path(g1, g2, &mapping);
            debug_assert_eq!(path.cost, f, "path cost must equal search cost");
            return Ok((f, path));
        }

        let u = order[state.depth];
        let mut push_child = |assign: i8, v: Option<usize>, heap: &mut BinaryHeap<_>, arena: &mut Vec<SearchState>| {
            let mut child = state.clone();
            child.assignment[u] = assign;
            if let Some(v) = v {
                child.used |= 1 << v;
            }
            child.depth += 1;
            child.cost += delta_cost(&state, u, v);
            let mut f = child.cost + heuristic(child.depth, child.used);
            if child.depth == n1 {
                child.cost += completion_cost(child.used);
                f = child.cost;
            }
            arena.push(child);
            heap.push(Reverse((f, seq, arena.len() - 1)));
            seq += 1;
        };

        for v in 0..n2 {
            if state.used & (1 << v) == 0 && labels2[v] == labels1[u] {
                push_child(v as i8, Some(v), &mut heap, &mut arena);
            }
        }
        push_child(-1, None, &mut heap, &mut arena);
    }

    unreachable!("the deletion branch always reaches a goal state");
}

/// Convenience wrapper using [`DEFAULT_NODE_LIMIT`].
pub fn ged_exact_default(g1: &Graph, g2: &Graph) -> Result<(u32, EditPath), GedError> {
    ged_exact(g1, g2, DEFAULT_NODE_LIMIT)
}

fn build_edit_path(g1: &Graph, g2: &Graph, mapping: &[Option<usize>]) -> EditPath {
    let mut reverse: Vec<Option<usize>> = vec![None; g2.n()];
    for (u, &m) in mapping.iter().enumerate() {
        if let Some(v) = m {
            reverse[v] = Some(u);
        }
    }

    let mut ops = Vec::new();
    // 1. delete g1 edges that are not preserved by the mapping
    for &(u, v) in g1.edges() {
        let keep = match (mapping[u], mapping[v]) {
            (Some(a), Some(b)) => g2.has_edge(a, b),
            _ => false,
        };
        if !keep {
            ops.push(EditOp::DeleteEdge { u, v });
        }
    }
    // 2. delete unmatched g1 nodes (now isolated)
    for (u, &m) in mapping.iter().enumerate() {
        if m.is_none() {
            ops.push(EditOp::DeleteNode { id: u });
        }
    }
    // 3. insert unmatched g2 nodes under fresh ids
    let mut working_id: Vec<usize> = vec![usize::MAX; g2.n()];
    let mut next_id = g1.n();
    for v in 0..g2.n() {
        match reverse[v] {
            Some(u) => working_id[v] = u,
            None => {
                ops.push(EditOp::InsertNode {
                    id: next_id,
                    label: g2.label(v),
                });
                working_id[v] = next_id;
                next_id += 1;
            }
        }
    }
    // 4. insert g2 edges that are not preserved
    for &(a, b) in g2.edges() {
        let preserved = match (reverse[a], reverse[b]) {
            (Some(u), Some(v)) => g1.has_edge(u, v),
            _ => false,
        };
        if !preserved {
            ops.push(EditOp::InsertEdge {
                u: working_id[a],
                v: working_id[b],
            });
        }
    }

    EditPath {
        cost: ops.len() as u32,
        ops,
    }
}

/// Replay an edit path on `g`, returning the resulting graph with nodes
/// re-indexed contiguously. Features are not modeled by edits; the result
/// carries constant-1 features and the replayed labels.
pub fn apply_edit_path(g: &Graph, path: &EditPath) -> Result<Graph, GedError> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut nodes: BTreeMap<usize, usize> = (0..g.n()).map(|u| (u, g.label(u))).collect();
    let mut edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();

    let err = |msg: String| GedError::InvalidPath(msg);
    for op in &path.ops {
        match *op {
            EditOp::DeleteEdge { u, v } => {
                let key = (u.min(v), u.max(v));
                if !edges.remove(&key) {
                    return Err(err(format!("delete of missing edge ({u},{v})")));
                }
            }
            EditOp::DeleteNode { id } => {
                if edges.iter().any(|&(a, b)| a == id || b == id) {
                    return Err(err(format!("node {id} still has incident edges")));
                }
                if nodes.remove(&id).is_none() {
                    return Err(err(format!("delete of missing node {id}")));
                }
            }
            EditOp::InsertNode { id, label } => {
                if nodes.insert(id, label).is_some() {
                    return Err(err(format!("insert of existing node {id}")));
                }
            }
            EditOp::InsertEdge { u, v } => {
                if u == v || !nodes.contains_key(&u) || !nodes.contains_key(&v) {
                    return Err(err(format!("edge ({u},{v}) has invalid endpoints")));
                }
                if !edges.insert((u.min(v), u.max(v))) {
                    return Err(err(format!("insert of existing edge ({u},{v})")));
                }
            }
        }
    }

    let index: BTreeMap<usize, usize> = nodes.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let labels: Vec<usize> = nodes.values().copied().collect();
    let edge_list: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (index[&a], index[&b])).collect();
    let n = nodes.len();
    if n == 0 {
        return Err(err("edit path deleted every node".into()));
    }
    Ok(Graph::new(
        format!("{}+edits", g.id),
        n,
        edge_list,
        Matrix::filled(n, 1, 1.0),
        Some(labels),
    )?)
}

/// Label-respecting graph isomorphism by backtracking; intended for the
/// small graphs this module works with.
pub fn is_isomorphic(a: &Graph, b: &Graph) -> bool {
    if a.n() != b.n() || a.m() != b.m() {
        return false;
    }
    let n = a.n();
    let mut deg_a: Vec<usize> = (0..n).map(|u| a.degree(u)).collect();
    let mut deg_b: Vec<usize> = (0..n).map(|v| b.degree(v)).collect();
    deg_a.sort_unstable();
    deg_b.sort_unstable();
    if deg_a != deg_b {
        return false;
    }
    let mut lab_a: Vec<usize> = (0..n).map(|u| a.label(u)).collect();
    let mut lab_b: Vec<usize> = (0..n).map(|v| b.label(v)).collect();
    lab_a.sort_unstable();
    lab_b.sort_unstable();
    if lab_a != lab_b {
        return false;
    }

    let adj_a = adjacency_masks(a);
    let adj_b = adjacency_masks(b);
    let mut mapping = vec![usize::MAX; n];
    let mut used = vec![false; n];

    fn backtrack(
        u: usize,
        n: usize,
        a: &Graph,
        b: &Graph,
        adj_a: &[u32],
        adj_b: &[u32],
        mapping: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if u == n {
            return true;
        }
        for v in 0..n {
            if used[v] || a.label(u) != b.label(v) || a.degree(u) != b.degree(v) {
                continue;
            }
            let consistent = (0..u).all(|prev| {
                let e1 = adj_a[u] & (1 << prev) != 0;
                let e2 = adj_b[v] & (1 << mapping[prev]) != 0;
                e1 == e2
            });
            if consistent {
                mapping[u] = v;
                used[v] = true;
                if backtrack(u + 1, n, a, b, adj_a, adj_b, mapping, used) {
                    return true;
                }
                used[v] = false;
                mapping[u] = usize::MAX;
            }
        }
        false
    }

    backtrack(0, n, a, b, &adj_a, &adj_b, &mut mapping, &mut used)
}

/// Exhaustive minimum edit cost over every injective node mapping plus
/// insert/delete completions. Only for graphs of at most 4 nodes; used as an
/// independent oracle for `ged_exact` in tests.
pub fn ged_bruteforce(g1: &Graph, g2: &Graph) -> Result<u32, GedError> {
    for g in [g1, g2] {
        if g.n() > BRUTEFORCE_LIMIT {
            return Err(GedError::BruteForceSize {
                id: g.id.clone(),
                n: g.n(),
            });
        }
    }

    fn mapping_cost(g1: &Graph, g2: &Graph, mapping: &[Option<usize>]) -> u32 {
        let matched = mapping.iter().flatten().count() as u32;
        let mut cost = (g1.n() as u32 - matched) + (g2.n() as u32 - matched);
        for &(u, v) in g1.edges() {
            let preserved = match (mapping[u], mapping[v]) {
                (Some(a), Some(b)) => g2.has_edge(a, b),
                _ => false,
            };
            if !preserved {
                cost += 1;
            }
        }
        let mut reverse = vec![None; g2.n()];
        for (u, &m) in mapping.iter().enumerate() {
            if let Some(v) = m {
                reverse[v] = Some(u);
            }
        }
        for &(a, b) in g2.edges() {
            let preserved = match (reverse[a], reverse[b]) {
                (Some(u), Some(v)) => g1.has_edge(u, v),
                _ => false,
            };
            if !preserved {
                cost += 1;
            }
        }
        cost
    }

    fn search(
        u: usize,
        g1: &Graph,
        g2: &Graph,
        mapping: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut u32,
    ) {
        if u == g1.n() {
            *best = (*best).min(mapping_cost(g1, g2, mapping));
            return;
        }
        for v in 0..g2.n() {
            if !used[v] && g1.label(u) == g2.label(v) {
                mapping[u] = Some(v);
                used[v] = true;
                search(u + 1, g1, g2, mapping, used, best);
                used[v] = false;
                mapping[u] = None;
            }
        }
        mapping[u] = None;
        search(u + 1, g1, g2, mapping, used, best);
    }

    let mut best = u32::MAX;
    search(
        0,
        g1,
        g2,
        &mut vec![None; g1.n()],
        &mut vec![false; g2.n()],
        &mut best,
    );
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(id: &str, n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(id, n, edges.to_vec(), Matrix::filled(n, 1, 1.0), None).unwrap()
    }

    fn labeled(id: &str, labels: &[usize], edges: &[(usize, usize)]) -> Graph {
        Graph::new(
            id,
            labels.len(),
            edges.to_vec(),
            Matrix::filled(labels.len(), 1, 1.0),
            Some(labels.to_vec()),
        )
        .unwrap()
    }

    #[test]
    fn identical_graphs_have_zero_distance() {
        let g = graph("a", 4, &[(0, 1), (1, 2), (2, 3)]);
        let (cost, path) = ged_exact_default(&g, &g).unwrap();
        assert_eq!(cost, 0);
        assert!(path.ops.is_empty());
    }

    #[test]
    fn triangle_minus_edge_costs_one() {
        let tri = graph("tri", 3, &[(0, 1), (1, 2), (0, 2)]);
        let path2 = graph("path", 3, &[(0, 1), (1, 2)]);
        let (cost, _) = ged_exact_default(&tri, &path2).unwrap();
        assert_eq!(cost, 1);
    }

    #[test]
    fn single_node_to_edge_pair_costs_two() {
        let single = graph("one", 1, &[]);
        let pair = graph("two", 2, &[(0, 1)]);
        let (cost, path) = ged_exact_default(&single, &pair).unwrap();
        assert_eq!(cost, 2);
        assert_eq!(path.ops.len(), 2);
    }

    #[test]
    fn node_limit_is_enforced() {
        let big = graph("big", 9, &[]);
        let small = graph("small", 2, &[]);
        assert!(matches!(
            ged_exact_default(&big, &small),
            Err(GedError::IntractableSize { n: 9, .. })
        ));
        assert!(ged_exact(&big, &small, 9).is_ok());
    }

    #[test]
    fn label_mismatch_forces_delete_insert() {
        let a = labeled("a", &[0], &[]);
        let b = labeled("b", &[1], &[]);
        let (cost, _) = ged_exact_default(&a, &b).unwrap();
        assert_eq!(cost, 2);
    }

    #[test]
    fn labeled_matching_prefers_equal_labels() {
        let a = labeled("a", &[0, 1], &[(0, 1)]);
        let b = labeled("b", &[1, 0], &[(0, 1)]);
        let (cost, _) = ged_exact_default(&a, &b).unwrap();
        assert_eq!(cost, 0);
    }

    #[test]
    fn star_versus_path() {
        let star = graph("star", 4, &[(0, 1), (0, 2), (0, 3)]);
        let path = graph("path", 4, &[(0, 1), (1, 2), (2, 3)]);
        let (cost, _) = ged_exact_default(&star, &path).unwrap();
        // delete one leaf edge of the star, insert one path edge
        assert_eq!(cost, 2);
        assert_eq!(cost, ged_bruteforce(&star, &path).unwrap());
    }

    #[test]
    fn bruteforce_symmetry() {
        let a = graph("a", 3, &[(0, 1)]);
        let b = graph("b", 4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(
            ged_bruteforce(&a, &b).unwrap(),
            ged_bruteforce(&b, &a).unwrap()
        );
    }

    #[test]
    fn bruteforce_isolated_node_target() {
        // g vs a single isolated node: delete all edges and all but one node
        let g = graph("g", 4, &[(0, 1), (1, 2), (0, 2)]);
        let single = graph("s", 1, &[]);
        assert_eq!(ged_bruteforce(&g, &single).unwrap(), 3 + 3);
    }

    #[test]
    fn bruteforce_rejects_large_graphs() {
        let big = graph("big", 5, &[]);
        assert!(matches!(
            ged_bruteforce(&big, &big),
            Err(GedError::BruteForceSize { n: 5, .. })
        ));
    }

    #[test]
    fn replayed_path_is_isomorphic_to_target() {
        let cases = [
            (graph("a", 3, &[(0, 1), (1, 2), (0, 2)]), graph("b", 4, &[(0, 1), (1, 2), (2, 3)])),
            (graph("c", 1, &[]), graph("d", 3, &[(0, 1), (0, 2)])),
            (labeled("e", &[0, 0, 1], &[(0, 2)]), labeled("f", &[1, 0], &[(0, 1)])),
            (graph("g", 4, &[(0, 1), (2, 3)]), graph("h", 4, &[(0, 1), (0, 2), (0, 3)])),
        ];
        for (g1, g2) in cases {
            let (cost, path) = ged_exact_default(&g1, &g2).unwrap();
            assert_eq!(cost, path.cost);
            assert_eq!(path.cost as usize, path.ops.len());
            let replayed = apply_edit_path(&g1, &path).unwrap();
            assert!(
                is_isomorphic(&replayed, &g2),
                "replay of {} -> {} must match",
                g1.id,
                g2.id
            );
        }
    }

    #[test]
    fn isomorphism_basic_cases() {
        let tri = graph("t1", 3, &[(0, 1), (1, 2), (0, 2)]);
        let tri2 = graph("t2", 3, &[(2, 1), (0, 2), (1, 0)]);
        assert!(is_isomorphic(&tri, &tri2));

        let path = graph("p", 3, &[(0, 1), (1, 2)]);
        assert!(!is_isomorphic(&tri, &path));

        let a = labeled("la", &[0, 1, 0], &[(0, 1), (1, 2)]);
        let b = labeled("lb", &[0, 0, 1], &[(0, 2), (2, 1)]);
        assert!(is_isomorphic(&a, &b));
        let c = labeled("lc", &[1, 1, 0], &[(0, 1), (1, 2)]);
        assert!(!is_isomorphic(&a, &c));
    }

    #[test]
    fn exact_matches_bruteforce_on_spot_checks() {
        let graphs = [
            graph("g0", 1, &[]),
            graph("g1", 2, &[]),
            graph("g2", 2, &[(0, 1)]),
            graph("g3", 3, &[(0, 1), (1, 2)]),
            graph("g4", 4, &[(0, 1), (1, 2), (2, 3), (3, 0)]),
            graph("g5", 4, &[(0, 1), (0, 2), (0, 3)]),
        ];
        for a in &graphs {
            for b in &graphs {
                let (exact, _) = ged_exact_default(a, b).unwrap();
                let brute = ged_bruteforce(a, b).unwrap();
                assert_eq!(exact, brute, "{} vs {}", a.id, b.id);
            }
        }
    }
}
