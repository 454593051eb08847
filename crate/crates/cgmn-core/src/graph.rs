//! Graph and dataset data model: attributed undirected graphs, graph pairs,
//! JSON-lines file I/O and deterministic dataset splitting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::seed::{self, TAG_SPLIT};

pub const GRAPH_FORMAT: &str = "cgmn-graphs";
pub const PAIR_FORMAT: &str = "cgmn-pairs";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph {id}: {rule}")]
    Invariant { id: String, rule: String },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing or invalid header (expected {{\"format\":\"{expected}\",\"version\":{version}}})")]
    BadHeader {
        path: String,
        expected: &'static str,
        version: u32,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("pair references unknown graph id {id:?}")]
    UnknownGraph { id: String },
    #[error("feature dimension mismatch: graph {id} has d={got}, dataset has d={expected}")]
    DimMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("empty pair list")]
    EmptyPairs,
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("bsd label must be 1 or -1, got {0}")]
    BadLabel(i8),
}

/// Undirected attributed graph: edge list plus a dense node-feature matrix.
/// The adjacency matrix is materialized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    n: usize,
    edges: Vec<(usize, usize)>,
    pub features: Matrix,
    pub node_labels: Option<Vec<usize>>,
}

impl Graph {
    /// Build a graph, normalizing and validating the edge list. Edges are
    /// stored as `(min, max)` pairs, sorted and deduplicated.
    pub fn new(
        id: impl Into<String>,
        n: usize,
        edges: Vec<(usize, usize)>,
        features: Matrix,
        node_labels: Option<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let id = id.into();
        let fail = |rule: &str| {
            Err(GraphError::Invariant {
                id: id.clone(),
                rule: rule.to_string(),
            })
        };
        if n == 0 {
            return fail("node count must be at least 1");
        }
        let mut normalized = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u == v {
                return fail(&format!("self-loop on node {u}"));
            }
            if u >= n || v >= n {
                return fail(&format!("edge ({u},{v}) endpoint out of range [0,{n})"));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        normalized.sort_unstable();
        let before = normalized.len();
        normalized.dedup();
        if normalized.len() != before {
            return fail("duplicate edge");
        }
        if features.rows() != n {
            return fail(&format!(
                "features has {} rows, expected {n}",
                features.rows()
            ));
        }
        if features.cols() == 0 {
            return fail("feature dimension must be at least 1");
        }
        if !features.is_finite() {
            return fail("features contain non-finite values");
        }
        if let Some(labels) = &node_labels {
            if labels.len() != n {
                return fail(&format!("{} node labels for {n} nodes", labels.len()));
            }
        }
        Ok(Graph {
            id,
            n,
            edges: normalized,
            features,
            node_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == u || b == u).count()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Label of node `u`; unlabeled graphs behave as if every node carried
    /// the same label 0.
    pub fn label(&self, u: usize) -> usize {
        self.node_labels.as_ref().map_or(0, |l| l[u])
    }

    /// Dense symmetric adjacency matrix with zero diagonal.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }
}

/// One-hot encode categorical node labels into a feature matrix with
/// `num_classes` columns.
pub fn one_hot_features(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes.max(1));
    for (i, &l) in labels.iter().enumerate() {
        m.set(i, l.min(num_classes.saturating_sub(1)), 1.0);
    }
    m
}

/// A pair of graphs with optional ground truth for either task.
#[derive(Debug, Clone)]
pub struct GraphPair {
    pub g1: Graph,
    pub g2: Graph,
    /// Exact graph edit distance, when known.
    pub ged: Option<u32>,
    /// Binary similarity label in {1, -1}, when known.
    pub bsd_label: Option<i8>,
}

impl GraphPair {
    pub fn new(g1: Graph, g2: Graph, ged: Option<u32>, bsd_label: Option<i8>) -> Result<Self, GraphError> {
        if let Some(l) = bsd_label {
            if l != 1 && l != -1 {
                return Err(GraphError::BadLabel(l));
            }
        }
        Ok(GraphPair {
            g1,
            g2,
            ged,
            bsd_label,
        })
    }
}

/// Pair record as stored on disk: graphs referenced by id.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PairRecord {
    pub g1: String,
    pub g2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ged: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i8>,
}

/// Disjoint, exhaustive train/valid/test partition of pair indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle followed by contiguous slicing. `|train| = round(f_train*N)`,
/// then the remaining mass goes to valid, then test.
pub fn split_dataset(
    num_pairs: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, GraphError> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(GraphError::BadFractions(fractions));
    }
    if num_pairs == 0 {
        return Err(GraphError::EmptyPairs);
    }
    let mut indices: Vec<usize> = (0..num_pairs).collect();
    let mut rng = seed::stream(seed, TAG_SPLIT, 0, 0);
    indices.shuffle(&mut rng);

    let n_train = ((ft * num_pairs as f64).round() as usize).min(num_pairs);
    let n_valid = ((fv * num_pairs as f64).round() as usize).min(num_pairs - n_train);
    let train = indices[..n_train].to_vec();
    let valid = indices[n_train..n_train + n_valid].to_vec();
    let test = indices[n_train + n_valid..].to_vec();
    Ok(DatasetSplit {
        train,
        valid,
        test,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    id: String,
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

fn open_lines(path: &Path, expected: &'static str) -> Result<Vec<(usize, String)>, GraphError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| GraphError::Io {
        path: display.clone(),
        source,
    })?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GraphError::Io {
            path: display.clone(),
            source,
        })?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let bad_header = || GraphError::BadHeader {
        path: display.clone(),
        expected,
        version: FORMAT_VERSION,
    };
    let (_, first) = lines.first().ok_or_else(bad_header)?;
    let header: Header = serde_json::from_str(first).map_err(|_| bad_header())?;
    if header.format != expected || header.version != FORMAT_VERSION {
        return Err(bad_header());
    }
    lines.remove(0);
    Ok(lines)
}

/// Load graphs from a JSON-lines file (header line first), validating all
/// invariants. Graphs are returned in file order and must share one feature
/// dimension.
pub fn load_graphs(path: impl AsRef<Path>) -> Result<Vec<Graph>, GraphError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut graphs: Vec<Graph> = Vec::new();
    for (line_no, line) in open_lines(path, GRAPH_FORMAT)? {
        let record: GraphRecord =
            serde_json::from_str(&line).map_err(|e| GraphError::Parse {
                path: display.clone(),
                line: line_no,
                msg: e.to_string(),
            })?;
        let g = Graph::new(record.id, record.n, record.edges, record.features, record.labels)?;
        if let Some(first) = graphs.first() {
            if g.feature_dim() != first.feature_dim() {
                let got = g.feature_dim();
                return Err(GraphError::DimMismatch {
                    id: g.id,
                    got,
                    expected: first.feature_dim(),
                });
            }
        }
        graphs.push(g);
    }
    Ok(graphs)
}

pub fn write_graphs(path: impl AsRef<Path>, graphs: &[Graph]) -> Result<(), GraphError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let io_err = |source| GraphError::Io {
        path: display.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = Header {
        format: GRAPH_FORMAT.into(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err)?;
    for g in graphs {
        let record = GraphRecord {
            id: g.id.clone(),
            n: g.n,
            edges: g.edges.clone(),
            features: g.features.clone(),
            labels: g.node_labels.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).unwrap()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_pair_records(path: impl AsRef<Path>) -> Result<Vec<PairRecord>, GraphError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (line_no, line) in open_lines(path, PAIR_FORMAT)? {
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            path: display.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if let Some(l) = record.label {
            if l != 1 && l != -1 {
                return Err(GraphError::BadLabel(l));
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_pair_records(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<(), GraphError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let io_err = |source| GraphError::Io {
        path: display.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = Header {
        format: PAIR_FORMAT.into(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).unwrap()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Resolve pair records against a graph list, cloning the referenced graphs.
pub fn resolve_pairs(records: &[PairRecord], graphs: &[Graph]) -> Result<Vec<GraphPair>, GraphError> {
    let by_id: BTreeMap<&str, &Graph> = graphs.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let g1 = *by_id.get(r.g1.as_str()).ok_or_else(|| GraphError::UnknownGraph {
            id: r.g1.clone(),
        })?;
        let g2 = *by_id.get(r.g2.as_str()).ok_or_else(|| GraphError::UnknownGraph {
            id: r.g2.clone(),
        })?;
        pairs.push(GraphPair::new((*g1).clone(), (*g2).clone(), r.ged, r.label)?);
    }
    Ok(pairs)
}
