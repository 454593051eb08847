//! Graph-level prediction: mean pooling, the exp-normalized edit-distance
//! target, the sigmoid MLP scoring head, the cosine head for binary
//! similarity, and the small calibration MLP fitted on a labeled subset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Matrix, Tape, Tensor};
use crate::encoder::Activation;
use crate::interact::{cosine, InteractError};
use crate::optim::Adam;
use crate::seed::{self, TAG_CALIBRATE};

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("calibration needs at least 2 labeled examples, got {0}")]
    TooFewLabels(usize),
    #[error("mlp input dimension {got} does not match expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Interact(#[from] InteractError),
}

/// Column-wise mean of the matched node embeddings: the graph-level
/// embedding. Permutation-invariant and differentiable.
pub fn pool(tape: &mut Tape, matched: Tensor) -> Result<Tensor, DiffError> {
    tape.row_mean(matched)
}

/// Exact edit distance converted to a similarity in `(0, 1]`:
/// `exp(-ged / (n1 + n2))`. Equals 1 iff `ged == 0` and decreases strictly
/// in `ged`.
pub fn normalized_ged(ged: u32, n1: usize, n2: usize) -> f64 {
    assert!(n1 >= 1 && n2 >= 1, "graphs have at least one node");
    (-(ged as f64) / (n1 + n2) as f64).exp()
}

/// Fully-connected layers with biases; used for both the scoring head and
/// the calibration map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = seed::stream(seed, TAG_CALIBRATE, l as u64, 1);
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data).unwrap());
            biases.push(Matrix::zeros(1, fan_out));
        }
        MlpParams {
            weights,
            biases,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    /// All parameter matrices in a fixed order (weights then bias per layer).
    pub fn flatten(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Leaves for every MLP parameter on `tape`, in `flatten` order.
pub fn mlp_leaves(tape: &mut Tape, mlp: &MlpParams, requires_grad: bool) -> Vec<Tensor> {
    mlp.flatten()
        .into_iter()
        .map(|m| tape.leaf(m.clone(), requires_grad))
        .collect()
}

/// Forward an `n x d` batch through the MLP leaves; hidden layers use the
/// MLP activation, the output layer is passed through sigmoid when
/// `sigmoid_out` is set.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Tensor,
    leaves: &[Tensor],
    activation: Activation,
    sigmoid_out: bool,
) -> Result<Tensor, DiffError> {
    let layers = leaves.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let (w, b) = (leaves[2 * l], leaves[2 * l + 1]);
        h = tape.matmul(h, w)?;
        h = tape.add_rowvec(h, b)?;
        if l + 1 < layers {
            h = activation.apply(tape, h)?;
        } else if sigmoid_out {
            h = tape.sigmoid(h)?;
        }
    }
    Ok(h)
}

/// Scoring head `sigmoid(MLP(z1 ++ z2))` over two `1 x D` graph embeddings.
/// Each embedding is scaled to unit norm at the head boundary so the score,
/// like the cosine head, does not depend on embedding magnitude and the MLP
/// sees bounded inputs. Asymmetric in its arguments by construction; callers
/// that want symmetry average both orders.
pub fn ged_head(
    tape: &mut Tape,
    z1: Tensor,
    z2: Tensor,
    leaves: &[Tensor],
    activation: Activation,
) -> Result<Tensor, HeadError> {
    let z1 = tape.l2_normalize_rows(z1)?;
    let z2 = tape.l2_normalize_rows(z2)?;
    let joint = tape.concat_cols(&[z1, z2])?;
    let expected = tape.value(leaves[0]).rows();
    let got = tape.value(joint).cols();
    if got != expected {
        return Err(HeadError::DimMismatch { got, expected });
    }
    Ok(mlp_forward(tape, joint, leaves, activation, true)?)
}

/// Plain-value scoring head over already-pooled embeddings.
pub fn ged_head_value(
    mlp: &MlpParams,
    z1: &Matrix,
    z2: &Matrix,
    symmetrize: bool,
) -> Result<f64, HeadError> {
    let mut tape = Tape::new();
    let leaves = mlp_leaves(&mut tape, mlp, false);
    let t1 = tape.leaf(z1.clone(), false);
    let t2 = tape.leaf(z2.clone(), false);
    let y = ged_head(&mut tape, t1, t2, &leaves, mlp.activation)?;
    let forward = tape.value(y).item();
    if !symmetrize {
        return Ok(forward);
    }
    let y_rev = ged_head(&mut tape, t2, t1, &leaves, mlp.activation)?;
    Ok(0.5 * (forward + tape.value(y_rev).item()))
}

/// Cosine similarity of the two graph embeddings, in `[-1, 1]`.
pub fn bsd_head(z1: &Matrix, z2: &Matrix) -> Result<f64, HeadError> {
    Ok(cosine(z1.as_slice(), z2.as_slice())?)
}

/// Threshold a cosine score into the similar (+1) / dissimilar (-1) decision.
pub fn bsd_decision(score: f64, threshold: f64) -> i8 {
    if score >= threshold {
        1
    } else {
        -1
    }
}

const CALIBRATE_HIDDEN: usize = 16;
const CALIBRATE_EPOCHS: usize = 4000;
const CALIBRATE_LR: f64 = 0.02;

/// Fit the calibration MLP (1 -> 16 -> 1, sigmoid output) mapping predicted
/// similarity scores onto the labeled targets by full-batch gradient descent
/// on squared error.
pub fn calibrate(scores: &[f64], targets: &[f64], seed: u64) -> Result<MlpParams, HeadError> {
    if scores.len() < 2 || scores.len() != targets.len() {
        return Err(HeadError::TooFewLabels(scores.len().min(targets.len())));
    }
    let mut mlp = identity_warm_start(scores, seed);
    let x = Matrix::from_vec(scores.len(), 1, scores.to_vec()).unwrap();
    let t = Matrix::from_vec(targets.len(), 1, targets.to_vec()).unwrap();
    fit_mlp(&mut mlp, &x, &t, CALIBRATE_EPOCHS, CALIBRATE_LR, 0.0)?;
    Ok(mlp)
}

/// Initialize the calibration net close to the identity map on the observed
/// score range: the pre-sigmoid layer interpolates `logit` piecewise
/// linearly with relu knots spread over the range. Gradient descent then
/// only has to learn the correction, and a zero-bias net (all relu kinks at
/// x = 0) would collapse to one affine piece on positive scores and stall at
/// the best `sigmoid(a x + b)` fit.
fn identity_warm_start(scores: &[f64], seed: u64) -> MlpParams {
    let mut mlp = MlpParams::init(&[1, CALIBRATE_HIDDEN, 1], Activation::Relu, seed);
    // Knot range: the observed scores, clamped away from 0 and 1 where the
    // logit diverges (steep warm-start slopes saturate the sigmoid and stall
    // training).
    let mut lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let mut lo = lo.clamp(0.02, 0.98);
    let mut hi = hi.clamp(0.02, 0.98);
    if hi - lo < 0.05 {
        let mid = 0.5 * (lo + hi);
        lo = (mid - 0.1).clamp(0.02, 0.98);
        hi = (mid + 0.1).clamp(0.02, 0.98);
    }
    let logit = |x: f64| (x / (1.0 - x)).ln();
    let h = CALIBRATE_HIDDEN;
    let step = (hi - lo) / h as f64;
    let knots: Vec<f64> = (0..h).map(|i| lo + step * i as f64).collect();
    // slope of segment i of the interpolant, as increments over relu terms
    let mut prev_slope = 0.0;
    for i in 0..h {
        let end = if i + 1 < h { knots[i + 1] } else { hi };
        let slope = (logit(end) - logit(knots[i])) / (end - knots[i]);
        mlp.weights[0].set(0, i, 1.0);
        mlp.biases[0].set(0, i, -knots[i]);
        mlp.weights[1].set(i, 0, slope - prev_slope);
        prev_slope = slope;
    }
    mlp.biases[1].set(0, 0, logit(knots[0]));
    mlp
}

/// Rescale each layer's weights so pre-activations have unit RMS on
/// `inputs`. Graph embeddings arrive with arbitrary norms; without this the
/// sigmoid saturates to exactly 0 or 1, where its gradient underflows to
/// zero and fitting stalls permanently.
pub fn normalize_init_scales(mlp: &mut MlpParams, inputs: &Matrix) {
    let mut h = inputs.clone();
    let layers = mlp.weights.len();
    for l in 0..layers {
        let mut pre = h.matmul(&mlp.weights[l]);
        let rms = (pre.as_slice().iter().map(|v| v * v).sum::<f64>()
            / pre.as_slice().len() as f64)
            .sqrt();
        if rms > 1e-12 {
            mlp.weights[l].scale_in_place(1.0 / rms);
            pre.scale_in_place(1.0 / rms);
        }
        for r in 0..pre.rows() {
            for (x, &b) in pre.row_mut(r).iter_mut().zip(mlp.biases[l].as_slice()) {
                *x += b;
            }
        }
        h = if l + 1 < layers {
            match mlp.activation {
                Activation::Relu => pre.map(|x| x.max(0.0)),
                Activation::Sigmoid => pre.map(|x| 1.0 / (1.0 + (-x).exp())),
                Activation::Identity => pre,
            }
        } else {
            pre
        };
    }
}

/// Train `mlp` in place against `targets` (squared error, sigmoid output)
/// with full-batch Adam; the learning rate drops by 10x for the last 40% of
/// the epochs to settle into the minimum. `weight_decay` applies decoupled
/// L2 shrinkage per step, which keeps a wide head from exploding off the
/// span of a small fitting set. Returns the final training MSE.
pub fn fit_mlp(
    mlp: &mut MlpParams,
    inputs: &Matrix,
    targets: &Matrix,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<f64, HeadError> {
    let mut adam = Adam::default();
    let mut last = f64::NAN;
    let decay_at = epochs * 3 / 5;
    for epoch in 0..epochs {
        let lr = if epoch < decay_at { lr } else { lr / 10.0 };
        let mut tape = Tape::new();
        let leaves = mlp_leaves(&mut tape, mlp, true);
        let x = tape.leaf(inputs.clone(), false);
        let t = tape.leaf(targets.clone(), false);
        let y = mlp_forward(&mut tape, x, &leaves, mlp.activation, true)?;
        let diff = tape.sub(y, t)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean_all(sq)?;
        tape.backward(loss)?;
        last = tape.value(loss).item();
        let grads: Vec<Matrix> = leaves
            .iter()
            .map(|&l| {
                tape.grad(l)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(tape.value(l).rows(), tape.value(l).cols()))
            })
            .collect();
        if weight_decay > 0.0 {
            for w in mlp.weights.iter_mut() {
                w.scale_in_place(1.0 - lr * weight_decay);
            }
        }
        adam.step(&mut mlp.flatten_mut(), &grads, lr);
    }
    Ok(last)
}

/// Apply a fitted calibration MLP to one raw score.
pub fn apply_calibration(mlp: &MlpParams, score: f64) -> Result<f64, HeadError> {
    let mut tape = Tape::new();
    let leaves = mlp_leaves(&mut tape, mlp, false);
    let x = tape.leaf(Matrix::scalar(score), false);
    let y = mlp_forward(&mut tape, x, &leaves, mlp.activation, true)?;
    Ok(tape.value(y).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn pool_value(m: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let t = tape.leaf(m.clone(), false);
        let p = pool(&mut tape, t).unwrap();
        tape.value(p).clone()
    }

    #[test]
    fn pool_single_node_is_identity() {
        assert_eq!(pool_value(&mat(&[&[3.0, 4.0]])), mat(&[&[3.0, 4.0]]));
    }

    #[test]
    fn pool_is_arithmetic_mean_and_permutation_invariant() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[3.0, 4.0], &[1.0, 2.0]]);
        assert_eq!(pool_value(&a), mat(&[&[2.0, 3.0]]));
        assert_eq!(pool_value(&a), pool_value(&b));
    }

    #[test]
    fn normalized_ged_values() {
        assert_eq!(normalized_ged(0, 3, 5), 1.0);
        assert!((normalized_ged(1, 3, 3) - (-1.0f64 / 6.0).exp()).abs() < 1e-15);
        assert!((normalized_ged(12, 3, 3) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn normalized_ged_monotonicity() {
        for g in 1..20 {
            assert!(normalized_ged(g, 4, 4) < normalized_ged(g - 1, 4, 4));
        }
        for n in 2..20 {
            assert!(normalized_ged(3, n + 1, 4) > normalized_ged(3, n, 4));
        }
    }

    #[test]
    fn ged_head_zero_weights_gives_half() {
        let mut mlp = MlpParams::init(&[4, 3, 1], Activation::Relu, 0);
        for w in mlp.flatten_mut() {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let z = mat(&[&[0.3, -0.9]]);
        let y = ged_head_value(&mlp, &z, &z, false).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn ged_head_output_in_open_unit_interval_and_asymmetric() {
        let mlp = MlpParams::init(&[4, 8, 1], Activation::Relu, 3);
        let z1 = mat(&[&[0.7, -0.2]]);
        let z2 = mat(&[&[-0.4, 1.1]]);
        let a = ged_head_value(&mlp, &z1, &z2, false).unwrap();
        let b = ged_head_value(&mlp, &z2, &z1, false).unwrap();
        assert!(a > 0.0 && a < 1.0);
        assert!((a - b).abs() > 1e-12, "random weights should break symmetry");
        let s1 = ged_head_value(&mlp, &z1, &z2, true).unwrap();
        let s2 = ged_head_value(&mlp, &z2, &z1, true).unwrap();
        assert!((s1 - s2).abs() < 1e-15);
    }

    #[test]
    fn ged_head_dimension_mismatch() {
        let mlp = MlpParams::init(&[6, 4, 1], Activation::Relu, 0);
        let z = mat(&[&[1.0, 2.0]]);
        assert!(matches!(
            ged_head_value(&mlp, &z, &z, false),
            Err(HeadError::DimMismatch { got: 4, expected: 6 })
        ));
    }

    #[test]
    fn bsd_head_cases() {
        let z = mat(&[&[0.6, -1.2]]);
        assert!((bsd_head(&z, &z).unwrap() - 1.0).abs() < 1e-12);

        let a = mat(&[&[1.0, 0.0]]);
        let b = mat(&[&[0.0, 3.0]]);
        let s = bsd_head(&a, &b).unwrap();
        assert!(s.abs() < 1e-15);
        assert_eq!(bsd_decision(s, 0.0), 1); // exactly at threshold counts as similar
        assert_eq!(bsd_decision(-0.1, 0.0), -1);

        let c = mat(&[&[1.0, 1.0]]);
        let s = bsd_head(&c, &a).unwrap();
        assert!((s - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(bsd_decision(s, 0.0), 1);
    }

    #[test]
    fn bsd_head_symmetric_scale_invariant() {
        let a = mat(&[&[0.4, -0.8, 1.3]]);
        let b = mat(&[&[-0.2, 0.9, 0.5]]);
        assert_eq!(bsd_head(&a, &b).unwrap(), bsd_head(&b, &a).unwrap());
        let mut scaled = a.clone();
        scaled.scale_in_place(250.0);
        assert!((bsd_head(&scaled, &b).unwrap() - bsd_head(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bsd_head_zero_embedding_is_error() {
        let z = Matrix::zeros(1, 3);
        let a = mat(&[&[1.0, 0.0, 0.0]]);
        assert!(bsd_head(&z, &a).is_err());
    }

    #[test]
    fn calibrate_rejects_single_label() {
        assert!(matches!(
            calibrate(&[0.5], &[0.5], 0),
            Err(HeadError::TooFewLabels(1))
        ));
    }

    #[test]
    fn calibrate_identity_map() {
        let scores: Vec<f64> = (0..40).map(|i| 0.1 + 0.8 * i as f64 / 39.0).collect();
        let mlp = calibrate(&scores, &scores, 5).unwrap();
        let mse: f64 = scores
            .iter()
            .map(|&s| {
                let y = apply_calibration(&mlp, s).unwrap();
                (y - s) * (y - s)
            })
            .sum::<f64>()
            / scores.len() as f64;
        assert!(mse <= 1e-4, "train MSE {mse}");
    }

    #[test]
    fn calibrate_constant_targets() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let targets = vec![0.42; 20];
        let mlp = calibrate(&scores, &targets, 1).unwrap();
        let mse: f64 = scores
            .iter()
            .map(|&s| {
                let y = apply_calibration(&mlp, s).unwrap();
                (y - 0.42) * (y - 0.42)
            })
            .sum::<f64>()
            / scores.len() as f64;
        assert!(mse <= 1e-6, "train MSE {mse}");
    }

    #[test]
    fn calibrate_affine_shift_reduces_mse() {
        let scores: Vec<f64> = (0..30).map(|i| 0.2 + 0.5 * i as f64 / 29.0).collect();
        let targets: Vec<f64> = scores.iter().map(|s| 0.3 * s + 0.15).collect();
        let pre: f64 = scores
            .iter()
            .zip(&targets)
            .map(|(s, t)| (s - t) * (s - t))
            .sum::<f64>()
            / scores.len() as f64;
        let mlp = calibrate(&scores, &targets, 2).unwrap();
        let post: f64 = scores
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| {
                let y = apply_calibration(&mlp, s).unwrap();
                (y - t) * (y - t)
            })
            .sum::<f64>()
            / scores.len() as f64;
        assert!(post < pre, "calibration must reduce MSE: {post} vs {pre}");
    }
}



