//! Node interaction and the contrastive objective.
//!
//! Three pieces: temperature-scaled similarity `exp(cos(.,.)/tau)`,
//! cross-view interaction (each node is extended with the cosine-weighted
//! aggregate of the sibling view's nodes), and cross-graph interaction (the
//! extended node is further matched against both views of the paired graph).
//! The contrastive loss pulls a node's two views together and pushes every
//! other node away.

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum InteractError {
    #[error("zero vector has no cosine direction")]
    ZeroVector,
    #[error("contrastive loss needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("views disagree on node count: {0} vs {1}")]
    ViewMismatch(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// How the cross-graph aggregates enter the matched embedding.
///
/// `Vector` concatenates cosine-weighted sums of the other graph's node
/// embeddings (node-to-node matching in vector form); `Scalar` concatenates
/// the plain cosine sums as two extra scalar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossGraphMode {
    #[default]
    Vector,
    Scalar,
}

/// Which nodes count as negatives in the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// Non-corresponding nodes of the other view plus the other nodes of the
    /// anchor's own view: N = 2(n-1).
    #[default]
    Both,
    /// Only the other view's non-corresponding nodes: N = n-1.
    InterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub tau: f64,
    pub cross_view_enabled: bool,
    pub cross_graph_enabled: bool,
    pub cross_graph_mode: CrossGraphMode,
    pub negatives: NegativeSet,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig {
            tau: 0.5,
            cross_view_enabled: true,
            cross_graph_enabled: true,
            cross_graph_mode: CrossGraphMode::Vector,
            negatives: NegativeSet::Both,
        }
    }
}

/// Cosine similarity of two vectors; zero vectors are an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, InteractError> {
    assert_eq!(a.len(), b.len(), "cosine: dimension mismatch");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(InteractError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Temperature-scaled similarity `exp(cos(h_u, h_v) / tau)`, in
/// `[exp(-1/tau), exp(1/tau)]`.
pub fn sim(h_u: &[f64], h_v: &[f64], tau: f64) -> Result<f64, InteractError> {
    Ok((cosine(h_u, h_v)? / tau).exp())
}

/// Extend every node of view `a` with the cosine-weighted sum of view `b`'s
/// node embeddings: rows of the result are `h_u ++ sum_v cos(h_u,h_v) h_v`.
pub fn cross_view_interact(
    tape: &mut Tape,
    h_a: Tensor,
    h_b: Tensor,
) -> Result<Tensor, InteractError> {
    let weights = tape.cosine_rows(h_a, h_b)?;
    let aggregate = tape.matmul(weights, h_b)?;
    Ok(tape.concat_cols(&[h_a, aggregate])?)
}

/// Match every extended node of `h_hat` against both views of the other
/// graph. In `Vector` mode the result rows are
/// `h ++ sum_i cos(h,h_i) h_i ++ sum_j cos(h,h_j) h_j` (dimension `3D`);
/// in `Scalar` mode the two aggregates are the plain cosine sums
/// (dimension `D + 2`).
pub fn cross_graph_interact(
    tape: &mut Tape,
    h_hat: Tensor,
    other_v1: Tensor,
    other_v2: Tensor,
    mode: CrossGraphMode,
) -> Result<Tensor, InteractError> {
    let c1 = tape.cosine_rows(h_hat, other_v1)?;
    let c2 = tape.cosine_rows(h_hat, other_v2)?;
    let out = match mode {
        CrossGraphMode::Vector => {
            let agg1 = tape.matmul(c1, other_v1)?;
            let agg2 = tape.matmul(c2, other_v2)?;
            tape.concat_cols(&[h_hat, agg1, agg2])?
        }
        CrossGraphMode::Scalar => {
            let s1 = tape.row_sums(c1)?;
            let s2 = tape.row_sums(c2)?;
            tape.concat_cols(&[h_hat, s1, s2])?
        }
    };
    Ok(out)
}

/// Contrastive loss over the matched embeddings of a graph's two views.
///
/// Node `i` of view 1 and node `i` of view 2 are a positive pair; negatives
/// are chosen per `negatives`. Per direction,
/// `loss = -log( sim(pos) / (sim(pos) + sum_k sim(neg_k)) )`, and the total
/// is the per-node mean of the two directions' average.
pub fn contrastive_loss(
    tape: &mut Tape,
    matched_v1: Tensor,
    matched_v2: Tensor,
    tau: f64,
    negatives: NegativeSet,
) -> Result<Tensor, InteractError> {
    let n1 = tape.value(matched_v1).rows();
    let n2 = tape.value(matched_v2).rows();
    if n1 != n2 {
        return Err(InteractError::ViewMismatch(n1, n2));
    }
    if n1 < 2 {
        return Err(InteractError::TooFewNodes(n1));
    }

    let inv_tau = 1.0 / tau;
    fn exp_sim(tape: &mut Tape, a: Tensor, b: Tensor, inv_tau: f64) -> Result<Tensor, InteractError> {
        let c = tape.cosine_rows(a, b)?;
        let scaled = tape.scalar_mul(c, inv_tau)?;
        Ok(tape.exp(scaled)?)
    }
    // row sums of the intra-view similarities, the self term removed:
    // self-similarity is not a negative
    fn intra_negatives(tape: &mut Tape, view: Tensor, inv_tau: f64) -> Result<Tensor, InteractError> {
        let e = exp_sim(tape, view, view, inv_tau)?;
        let sums = tape.row_sums(e)?;
        let own = tape.diag(e)?;
        Ok(tape.sub(sums, own)?)
    }

    let e12 = exp_sim(tape, matched_v1, matched_v2, inv_tau)?;
    let pos = tape.diag(e12)?;
    let inter_v1 = tape.row_sums(e12)?; // includes the positive term
    let e21 = tape.transpose(e12)?;
    let inter_v2 = tape.row_sums(e21)?;

    let (denom_v1, denom_v2) = match negatives {
        NegativeSet::InterOnly => (inter_v1, inter_v2),
        NegativeSet::Both => {
            let intra_v1 = intra_negatives(tape, matched_v1, inv_tau)?;
            let intra_v2 = intra_negatives(tape, matched_v2, inv_tau)?;
            (
                tape.add(inter_v1, intra_v1)?,
                tape.add(inter_v2, intra_v2)?,
            )
        }
    };

    let log_pos = tape.log(pos)?;
    let log_denom_v1 = tape.log(denom_v1)?;
    let loss_v1 = tape.sub(log_denom_v1, log_pos)?;
    let log_denom_v2 = tape.log(denom_v2)?;
    let loss_v2 = tape.sub(log_denom_v2, log_pos)?;
    let sum = tape.add(loss_v1, loss_v2)?;
    let half = tape.scalar_mul(sum, 0.5)?;
    Ok(tape.mean_all(half)?)
}
