//! Multi-layer GCN encoder producing node embeddings.
//!
//! Propagation uses the self-loop-normalized adjacency
//! `D^{-1/2} (A + I) D^{-1/2}`; each layer multiplies by a trainable weight
//! matrix and applies the hidden activation. The last layer is linear so the
//! cosine geometry of the embeddings is not clipped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Matrix, Tape, Tensor};
use crate::graph::Graph;
use crate::seed::{self, TAG_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Tensor) -> Result<Tensor, DiffError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// Per-layer GCN weights with chained dimensions `d -> h -> ... -> h`.
/// No bias terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub layers: Vec<Matrix>,
    pub activation: Activation,
}

impl GcnParams {
    /// Glorot-uniform initialization over the dimension chain `dims`,
    /// seeded for reproducibility.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = seed::stream(seed, TAG_INIT, l as u64, 0);
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Matrix::from_vec(fan_in, fan_out, data).unwrap());
        }
        GcnParams { layers, activation }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().cols()
    }
}

/// Self-loop-normalized propagation matrix `D^{-1/2} (A + I) D^{-1/2}` where
/// `D` is the degree matrix of `A + I`. Symmetric with nonnegative entries;
/// the added self-loops guarantee positive degrees.
pub fn normalize_adjacency(g: &Graph) -> Matrix {
    let n = g.n();
    let mut a = g.adjacency();
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| a.get(i, j)).sum();
            1.0 / deg.sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    a
}

/// Forward pass `H^l = act(A_hat H^{l-1} W^{l-1})` with `H^0 = X`.
/// `weights` are tape leaves (shared across views so gradients accumulate);
/// the hidden activation is applied to all but the last layer.
pub fn encode(
    tape: &mut Tape,
    x: Tensor,
    a_hat: Tensor,
    weights: &[Tensor],
    activation: Activation,
) -> Result<Tensor, DiffError> {
    let mut h = x;
    let last = weights.len() - 1;
    for (l, &w) in weights.iter().enumerate() {
        let propagated = tape.matmul(a_hat, h)?;
        h = tape.matmul(propagated, w)?;
        if l != last {
            h = activation.apply(tape, h)?;
        }
    }
    Ok(h)
}

/// Convenience wrapper: make leaves for a graph's features and propagation
/// matrix, then encode against existing weight leaves.
pub fn encode_graph(
    tape: &mut Tape,
    g: &Graph,
    weights: &[Tensor],
    activation: Activation,
) -> Result<Tensor, DiffError> {
    let x = tape.leaf(g.features.clone(), false);
    let a_hat = tape.leaf(normalize_adjacency(g), false);
    encode(tape, x, a_hat, weights, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::graph::Graph;

    fn leaf_weights(tape: &mut Tape, params: &GcnParams) -> Vec<Tensor> {
        params.layers.iter().map(|w| tape.leaf(w.clone(), true)).collect()
    }

    #[test]
    fn single_node_normalization_is_one() {
        let g = Graph::new("s", 1, vec![], Matrix::filled(1, 1, 1.0), None).unwrap();
        assert_eq!(normalize_adjacency(&g), Matrix::filled(1, 1, 1.0));
    }

    #[test]
    fn two_node_edge_normalization() {
        let g = Graph::new("e", 2, vec![(0, 1)], Matrix::filled(2, 1, 1.0), None).unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalization_is_symmetric_nonnegative() {
        let g = Graph::new(
            "g",
            5,
            vec![(0, 1), (0, 2), (1, 2), (3, 4)],
            Matrix::filled(5, 1, 1.0),
            None,
        )
        .unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..5 {
            for j in 0..5 {
                assert!(a.get(i, j) >= 0.0);
                assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_features_give_zero_embeddings() {
        let g = Graph::new("z", 3, vec![(0, 1)], Matrix::zeros(3, 2), None).unwrap();
        let params = GcnParams::init(&[2, 4, 4], Activation::Relu, 1);
        let mut tape = Tape::new();
        let ws = leaf_weights(&mut tape, &params);
        let h = encode_graph(&mut tape, &g, &ws, params.activation).unwrap();
        assert!(tape.value(h).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_linear_layer_identity_weights_reproduces_propagation() {
        let g = Graph::new("e", 2, vec![(0, 1)], Matrix::identity(2), None).unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::identity(2), false);
        let h = encode_graph(&mut tape, &g, &[w], Activation::Identity).unwrap();
        let hv = tape.value(h);
        for i in 0..2 {
            for j in 0..2 {
                assert!((hv.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let g = Graph::new(
            "g",
            4,
            vec![(0, 1), (1, 2), (2, 3)],
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.5, 0.5],
                vec![-1.0, 2.0],
            ])
            .unwrap(),
            None,
        )
        .unwrap();
        // permutation pi: new index of old node i
        let pi = [2usize, 0, 3, 1];
        let mut edges = Vec::new();
        for &(u, v) in g.edges() {
            edges.push((pi[u], pi[v]));
        }
        let mut feat = Matrix::zeros(4, 2);
        for i in 0..4 {
            for j in 0..2 {
                feat.set(pi[i], j, g.features.get(i, j));
            }
        }
        let pg = Graph::new("pg", 4, edges, feat, None).unwrap();

        let params = GcnParams::init(&[2, 3, 3], Activation::Relu, 7);
        let run = |graph: &Graph| {
            let mut tape = Tape::new();
            let ws = leaf_weights(&mut tape, &params);
            let h = encode_graph(&mut tape, graph, &ws, params.activation).unwrap();
            tape.value(h).clone()
        };
        let h = run(&g);
        let hp = run(&pg);
        for i in 0..4 {
            for j in 0..3 {
                assert!(
                    (h.get(i, j) - hp.get(pi[i], j)).abs() < 1e-12,
                    "node {i} dim {j}"
                );
            }
        }
    }

    #[test]
    fn three_layers_hidden_100_outputs_n_by_100() {
        let g = Graph::new(
            "g",
            5,
            vec![(0, 1), (2, 3), (3, 4)],
            Matrix::filled(5, 7, 0.5),
            None,
        )
        .unwrap();
        let params = GcnParams::init(&[7, 100, 100, 100], Activation::Relu, 0);
        assert_eq!(params.layer_count(), 3);
        let mut tape = Tape::new();
        let ws = leaf_weights(&mut tape, &params);
        let h = encode_graph(&mut tape, &g, &ws, params.activation).unwrap();
        assert_eq!(tape.value(h).shape(), (5, 100));
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let g = Graph::new(
            "g",
            3,
            vec![(0, 1), (1, 2)],
            Matrix::from_rows(&[vec![0.9, 0.2], vec![0.4, 1.3], vec![0.7, 0.6]]).unwrap(),
            None,
        )
        .unwrap();
        // check gradient w.r.t. the first-layer weights through a two-layer net
        let w1 = GcnParams::init(&[3, 3], Activation::Relu, 3).layers[0].clone();
        let at = GcnParams::init(&[2, 3], Activation::Relu, 11).layers[0].clone();
        let report = grad_check(
            move |tape, w0| {
                let tw1 = tape.leaf(w1.clone(), false);
                let h = encode_graph(tape, &g, &[w0, tw1], Activation::Relu)?;
                let sq = tape.square(h)?;
                tape.sum_all(sq)
            },
            &at,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = Graph::new("g", 2, vec![(0, 1)], Matrix::filled(2, 3, 1.0), None).unwrap();
        let params = GcnParams::init(&[2, 4], Activation::Relu, 0); // expects d=2
        let mut tape = Tape::new();
        let ws = leaf_weights(&mut tape, &params);
        assert!(encode_graph(&mut tape, &g, &ws, params.activation).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = GcnParams::init(&[4, 8, 8], Activation::Relu, 42);
        let b = GcnParams::init(&[4, 8, 8], Activation::Relu, 42);
        let c = GcnParams::init(&[4, 8, 8], Activation::Relu, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].as_slice().iter().all(|v| v.abs() < bound));
    }
}
