//! Training loop, checkpointing and evaluation.
//!
//! One training step per pair batch: make two views of each graph, encode
//! all four views, run cross-view then cross-graph interaction, take the
//! contrastive loss of both graphs, and apply the batch-averaged gradient.
//! For the edit-distance task a labeled subset then fits the scoring head
//! and the calibration map with the encoder frozen.
//!
//! Per-pair gradients are independent; with the `parallel` feature they are
//! computed on worker threads and merged in pair order, so results are
//! identical for every thread count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{identity_view, make_views, AugmentConfig, AugmentError, GraphView};
use crate::config::{ConfigError, Task, TrainConfig};
use crate::diff::{DiffError, Matrix, Tape, Tensor};
use crate::encoder::{encode_graph, GcnParams};
use crate::graph::{GraphError, GraphPair};
use crate::heads::{
    self, apply_calibration, bsd_decision, bsd_head, ged_head_value, normalized_ged,
    HeadError, MlpParams,
};
use crate::interact::{
    contrastive_loss, cross_graph_interact, cross_view_interact, InteractError, InteractionConfig,
};
use crate::metrics::{self, Candidate, MetricsError, RankedQueryResult};
use crate::optim::{sgd_step, Adam, Optimizer};
use crate::seed::{self, TAG_AUGMENT, TAG_HEAD_FIT, TAG_LABEL_SUBSET, TAG_SHUFFLE};

use rand::seq::SliceRandom;
use rand::Rng;

pub const CHECKPOINT_FORMAT: &str = "cgmn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEAD_FIT_EPOCHS: usize = 2000;
const HEAD_FIT_LR: f64 = 0.01;
const HEAD_FIT_WEIGHT_DECAY: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("numeric divergence at epoch {epoch}, batch {batch}: {msg}")]
    Divergence {
        epoch: usize,
        batch: usize,
        msg: String,
    },
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("no pairs to work with")]
    NoPairs,
    #[error("feature dimension mismatch: graph {id} has d={got}, expected {expected}")]
    DimMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("task {task} needs labeled pairs but none were found")]
    MissingLabels { task: Task },
    #[error("head fitting needs at least 2 labeled pairs, got {0}")]
    TooFewLabeled(usize),
    #[error("checkpoint {path} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")]
    BadCheckpoint { path: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Pipeline(e.to_string())
    }
}

impl From<InteractError> for TrainError {
    fn from(e: InteractError) -> Self {
        TrainError::Pipeline(e.to_string())
    }
}

impl From<HeadError> for TrainError {
    fn from(e: HeadError) -> Self {
        TrainError::Pipeline(e.to_string())
    }
}

impl From<AugmentError> for TrainError {
    fn from(e: AugmentError) -> Self {
        TrainError::Pipeline(e.to_string())
    }
}

/// Everything needed to reproduce an evaluation: parameters, heads,
/// calibration and the config snapshot. Round-trips losslessly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub gcn: GcnParams,
    pub ged_head: MlpParams,
    pub calibration: Option<MlpParams>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        std::fs::write(path, bytes).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|_| TrainError::BadCheckpoint {
                path: path.display().to_string(),
            })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::BadCheckpoint {
                path: path.display().to_string(),
            });
        }
        Ok(ckpt)
    }
}

pub fn interaction_config(cfg: &TrainConfig) -> InteractionConfig {
    InteractionConfig {
        tau: cfg.loss.tau,
        cross_view_enabled: cfg.model.cross_view,
        cross_graph_enabled: cfg.model.cross_graph,
        cross_graph_mode: cfg.model.cross_graph_mode,
        negatives: cfg.loss.negatives,
    }
}

/// Dimension of the matched node embeddings after the enabled interactions.
pub fn matched_dim(cfg: &TrainConfig) -> usize {
    let h = cfg.model.hidden;
    let extended = if cfg.model.cross_view { 2 * h } else { h };
    if cfg.model.cross_graph {
        match cfg.model.cross_graph_mode {
            crate::interact::CrossGraphMode::Vector => 3 * extended,
            crate::interact::CrossGraphMode::Scalar => extended + 2,
        }
    } else {
        extended
    }
}

fn gcn_dims(cfg: &TrainConfig, feature_dim: usize) -> Vec<usize> {
    let mut dims = vec![feature_dim];
    dims.extend(std::iter::repeat(cfg.model.hidden).take(cfg.model.layers));
    dims
}

fn head_dims(cfg: &TrainConfig) -> Vec<usize> {
    let mut dims = vec![2 * matched_dim(cfg)];
    dims.extend(&cfg.head.ged_mlp);
    dims.push(1);
    dims
}

/// Initialize encoder and head parameters for a dataset dimension.
pub fn init_params(cfg: &TrainConfig, feature_dim: usize) -> (GcnParams, MlpParams) {
    let gcn = GcnParams::init(&gcn_dims(cfg, feature_dim), cfg.model.activation, cfg.train.seed);
    let head_seed = seed::stream(cfg.train.seed, TAG_HEAD_FIT, 0, 0).gen();
    let head = MlpParams::init(&head_dims(cfg), cfg.model.activation, head_seed);
    (gcn, head)
}

/// Matched (post-interaction) node embeddings of all four views of a pair.
struct MatchedViews {
    g1_v1: Tensor,
    g1_v2: Tensor,
    g2_v1: Tensor,
    g2_v2: Tensor,
}

fn forward_pair(
    tape: &mut Tape,
    views: (&GraphView, &GraphView, &GraphView, &GraphView),
    weights: &[Tensor],
    cfg: &TrainConfig,
) -> Result<MatchedViews, TrainError> {
    let icfg = interaction_config(cfg);
    let act = cfg.model.activation;
    let h11 = encode_graph(tape, &views.0.graph, weights, act)?;
    let h12 = encode_graph(tape, &views.1.graph, weights, act)?;
    let h21 = encode_graph(tape, &views.2.graph, weights, act)?;
    let h22 = encode_graph(tape, &views.3.graph, weights, act)?;

    let (e11, e12, e21, e22) = if icfg.cross_view_enabled {
        (
            cross_view_interact(tape, h11, h12)?,
            cross_view_interact(tape, h12, h11)?,
            cross_view_interact(tape, h21, h22)?,
            cross_view_interact(tape, h22, h21)?,
        )
    } else {
        (h11, h12, h21, h22)
    };

    let matched = if icfg.cross_graph_enabled {
        let mode = icfg.cross_graph_mode;
        MatchedViews {
            g1_v1: cross_graph_interact(tape, e11, e21, e22, mode)?,
            g1_v2: cross_graph_interact(tape, e12, e21, e22, mode)?,
            g2_v1: cross_graph_interact(tape, e21, e11, e12, mode)?,
            g2_v2: cross_graph_interact(tape, e22, e11, e12, mode)?,
        }
    } else {
        MatchedViews {
            g1_v1: e11,
            g1_v2: e12,
            g2_v1: e21,
            g2_v2: e22,
        }
    };
    Ok(matched)
}

/// Corrupting a sparse one-hot feature row can zero a node's embedding,
/// which the cosine machinery treats as an error. Such draws are re-sampled
/// from deterministic fallback substreams; a genuinely collapsed encoder
/// fails every retry and still surfaces.
const VIEW_RETRIES: u64 = 16;

fn pair_views(
    pair: &GraphPair,
    cfg: &TrainConfig,
    epoch: usize,
    pair_index: usize,
    attempt: u64,
) -> Result<(GraphView, GraphView, GraphView, GraphView), TrainError> {
    let stream_a = epoch as u64 | (attempt << 40);
    let mut rng = seed::stream(cfg.augment_seed(), TAG_AUGMENT, stream_a, pair_index as u64);
    let view_cfg = |seed: u64| -> Result<AugmentConfig, TrainError> {
        let mut c = AugmentConfig::new(cfg.augment.p_mask, cfg.augment.p_drop, seed)?;
        c.mask_mode = cfg.augment.mask_mode;
        Ok(c)
    };
    let cfg1 = view_cfg(rng.gen())?;
    let cfg2 = view_cfg(rng.gen())?;
    let (v11, v12) = make_views(&pair.g1, &cfg1)?;
    let (v21, v22) = make_views(&pair.g2, &cfg2)?;
    Ok((v11, v12, v21, v22))
}

fn is_degenerate(e: &TrainError) -> bool {
    matches!(e, TrainError::Pipeline(msg) if msg.contains("degenerate embedding") || msg.contains("zero vector"))
}

/// Contrastive loss of one pair and its gradients w.r.t. every encoder
/// weight, under the view randomness of `(epoch, pair_index)`.
pub fn pair_loss_and_grads(
    gcn: &GcnParams,
    pair: &GraphPair,
    cfg: &TrainConfig,
    epoch: usize,
    pair_index: usize,
) -> Result<(f64, Vec<Matrix>), TrainError> {
    let mut attempt = 0;
    loop {
        match pair_loss_and_grads_once(gcn, pair, cfg, epoch, pair_index, attempt) {
            Err(e) if is_degenerate(&e) && attempt < VIEW_RETRIES => attempt += 1,
            other => return other,
        }
    }
}

fn pair_loss_and_grads_once(
    gcn: &GcnParams,
    pair: &GraphPair,
    cfg: &TrainConfig,
    epoch: usize,
    pair_index: usize,
    attempt: u64,
) -> Result<(f64, Vec<Matrix>), TrainError> {
    let views = pair_views(pair, cfg, epoch, pair_index, attempt)?;
    let mut tape = Tape::new();
    let weights: Vec<Tensor> = gcn.layers.iter().map(|w| tape.leaf(w.clone(), true)).collect();
    let matched = forward_pair(
        &mut tape,
        (&views.0, &views.1, &views.2, &views.3),
        &weights,
        cfg,
    )?;
    let icfg = interaction_config(cfg);
    let loss_g1 = contrastive_loss(&mut tape, matched.g1_v1, matched.g1_v2, icfg.tau, icfg.negatives)?;
    let loss_g2 = contrastive_loss(&mut tape, matched.g2_v1, matched.g2_v2, icfg.tau, icfg.negatives)?;
    let total = tape.add(loss_g1, loss_g2)?;
    tape.backward(total)?;
    let loss = tape.value(total).item();
    let grads = weights
        .iter()
        .map(|&w| {
            tape.grad(w)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.value(w).rows(), tape.value(w).cols()))
        })
        .collect();
    Ok((loss, grads))
}

/// Pooled graph-level embeddings of a pair with augmentation disabled: both
/// views collapse to the original graph and the interactions still run.
pub fn pair_embeddings(
    gcn: &GcnParams,
    pair: &GraphPair,
    cfg: &TrainConfig,
) -> Result<(Matrix, Matrix), TrainError> {
    let v1 = identity_view(&pair.g1);
    let v2 = identity_view(&pair.g2);
    let mut tape = Tape::new();
    let weights: Vec<Tensor> = gcn.layers.iter().map(|w| tape.leaf(w.clone(), false)).collect();
    let matched = forward_pair(&mut tape, (&v1, &v1, &v2, &v2), &weights, cfg)?;
    let z1 = heads::pool(&mut tape, matched.g1_v1)?;
    let z2 = heads::pool(&mut tape, matched.g2_v1)?;
    Ok((tape.value(z1).clone(), tape.value(z2).clone()))
}

fn check_dims(pairs: &[GraphPair]) -> Result<usize, TrainError> {
    let first = pairs.first().ok_or(TrainError::NoPairs)?;
    let d = first.g1.feature_dim();
    for p in pairs {
        for g in [&p.g1, &p.g2] {
            if g.feature_dim() != d {
                return Err(TrainError::DimMismatch {
                    id: g.id.clone(),
                    got: g.feature_dim(),
                    expected: d,
                });
            }
        }
    }
    Ok(d)
}

#[cfg(feature = "parallel")]
fn map_pairs<T: Send, E: Send>(
    items: Vec<(usize, &GraphPair)>,
    f: impl Fn(usize, &GraphPair) -> Result<T, E> + Sync,
) -> Result<Vec<T>, E> {
    use rayon::prelude::*;
    items
        .into_par_iter()
        .map(|(i, p)| f(i, p))
        .collect::<Result<Vec<_>, E>>()
}

#[cfg(not(feature = "parallel"))]
fn map_pairs<T, E>(
    items: Vec<(usize, &GraphPair)>,
    f: impl Fn(usize, &GraphPair) -> Result<T, E>,
) -> Result<Vec<T>, E> {
    items.into_iter().map(|(i, p)| f(i, p)).collect()
}

/// Train the encoder with the contrastive objective, then (for the GED task)
/// fit the scoring head and calibration on the labeled subset. Fully
/// deterministic per `(pairs, cfg)`.
pub fn train(pairs: &[GraphPair], cfg: &TrainConfig) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let d = check_dims(pairs)?;
    let (mut gcn, mut head) = init_params(cfg, d);

    let mut optimizer = Adam::default();
    let mut loss_history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = seed::stream(cfg.train.seed, TAG_SHUFFLE, epoch as u64, 0);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let items: Vec<(usize, &GraphPair)> = batch.iter().map(|&i| (i, &pairs[i])).collect();
            let results = map_pairs(items, |i, p| pair_loss_and_grads(&gcn, p, cfg, epoch, i))
                .map_err(|e| match e {
                    TrainError::Pipeline(msg) if msg.contains("non-finite") => {
                        TrainError::Divergence {
                            epoch,
                            batch: batch_no,
                            msg,
                        }
                    }
                    other => other,
                })?;

            let scale = 1.0 / results.len() as f64;
            let mut batch_grads: Vec<Matrix> = gcn
                .layers
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in batch_grads.iter_mut().zip(grads) {
                    acc.add_scaled(g, scale);
                }
            }

            let mut params: Vec<&mut Matrix> = gcn.layers.iter_mut().collect();
            match cfg.train.optimizer {
                Optimizer::Adam => optimizer.step(&mut params, &batch_grads, cfg.train.lr),
                Optimizer::Sgd => sgd_step(&mut params, &batch_grads, cfg.train.lr),
            }
        }

        let mean_loss = epoch_loss / pairs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: 0,
                msg: format!("epoch loss {mean_loss}"),
            });
        }
        loss_history.push(mean_loss);
    }

    let mut calibration = None;
    if cfg.train.task == Task::Ged {
        let (fitted_head, fitted_cal) = fit_ged_heads(&gcn, pairs, cfg)?;
        head = fitted_head;
        calibration = Some(fitted_cal);
    }

    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        gcn,
        ged_head: head,
        calibration,
        epoch: cfg.train.epochs,
        loss_history,
    })
}

/// Select the labeled subset (seeded, `calibrate.label_fraction` of the
/// labeled pairs, at least 2) and fit the scoring head plus the calibration
/// MLP on it. The encoder stays frozen.
pub fn fit_ged_heads(
    gcn: &GcnParams,
    pairs: &[GraphPair],
    cfg: &TrainConfig,
) -> Result<(MlpParams, MlpParams), TrainError> {
    let labeled: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].ged.is_some()).collect();
    if labeled.len() < 2 {
        return Err(TrainError::TooFewLabeled(labeled.len()));
    }
    let mut subset = labeled.clone();
    let mut rng = seed::stream(cfg.train.seed, TAG_LABEL_SUBSET, 0, 0);
    subset.shuffle(&mut rng);
    let want = (cfg.calibrate.label_fraction * labeled.len() as f64).round() as usize;
    let take = want.clamp(2, labeled.len());
    subset.truncate(take);
    subset.sort_unstable();

    let items: Vec<(usize, &GraphPair)> = subset.iter().map(|&i| (i, &pairs[i])).collect();
    let embeddings = map_pairs(items, |_, p| pair_embeddings(gcn, p, cfg))?;

    let dim = 2 * matched_dim(cfg);
    let unit = |z: &Matrix| -> Vec<f64> {
        let norm = z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        z.as_slice().iter().map(|v| v / norm).collect()
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (&i, (z1, z2)) in subset.iter().zip(&embeddings) {
        let pair = &pairs[i];
        let target = normalized_ged(pair.ged.unwrap(), pair.g1.n(), pair.g2.n());
        let (u1, u2) = (unit(z1), unit(z2));
        let mut row = Vec::with_capacity(dim);
        row.extend_from_slice(&u1);
        row.extend_from_slice(&u2);
        rows.push(row);
        targets.push(target);
        if cfg.head.symmetrize {
            let mut rev = Vec::with_capacity(dim);
            rev.extend_from_slice(&u2);
            rev.extend_from_slice(&u1);
            rows.push(rev);
            targets.push(target);
        }
    }
    let inputs = Matrix::from_rows(&rows).expect("rows share the embedding dimension");
    let target_mat = Matrix::from_vec(targets.len(), 1, targets.clone()).unwrap();

    let head_seed = seed::stream(cfg.train.seed, TAG_HEAD_FIT, 0, 0).gen();
    let mut head = MlpParams::init(&head_dims(cfg), cfg.model.activation, head_seed);
    heads::normalize_init_scales(&mut head, &inputs);
    heads::fit_mlp(
        &mut head,
        &inputs,
        &target_mat,
        HEAD_FIT_EPOCHS,
        HEAD_FIT_LR,
        HEAD_FIT_WEIGHT_DECAY,
    )?;

    let mut scores = Vec::with_capacity(subset.len());
    for (z1, z2) in &embeddings {
        scores.push(ged_head_value(&head, z1, z2, cfg.head.symmetrize)?);
    }
    let cal_targets: Vec<f64> = subset
        .iter()
        .map(|&i| {
            let p = &pairs[i];
            normalized_ged(p.ged.unwrap(), p.g1.n(), p.g2.n())
        })
        .collect();
    let cal_seed = seed::stream(cfg.train.seed, TAG_HEAD_FIT, 1, 0).gen();
    let calibration = heads::calibrate(&scores, &cal_targets, cal_seed).map_err(|e| match e {
        HeadError::TooFewLabels(n) => TrainError::TooFewLabeled(n),
        other => other.into(),
    })?;
    Ok((head, calibration))
}

/// Evaluation report; the GED task fills mse/rho/tau/p\@k, the BSD task
/// fills auc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_at: Option<BTreeMap<usize, Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub pairs_evaluated: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One scored pair from [`predict`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub g1: String,
    pub g2: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<i8>,
}

/// Score every pair with the checkpointed model. GED scores come from the
/// sigmoid head (plus calibration when fitted); BSD scores are embedding
/// cosines with the thresholded decision attached.
pub fn predict(
    ckpt: &Checkpoint,
    pairs: &[GraphPair],
    task: Task,
) -> Result<Vec<Prediction>, TrainError> {
    let cfg = &ckpt.config;
    let items: Vec<(usize, &GraphPair)> = pairs.iter().enumerate().map(|(i, p)| (i, p)).collect();
    let embeddings = map_pairs(items, |_, p| pair_embeddings(&ckpt.gcn, p, cfg))?;
    let mut out = Vec::with_capacity(pairs.len());
    for (pair, (z1, z2)) in pairs.iter().zip(&embeddings) {
        let prediction = match task {
            Task::Ged => {
                let score = ged_head_value(&ckpt.ged_head, z1, z2, cfg.head.symmetrize)?;
                let calibrated = match &ckpt.calibration {
                    Some(cal) => Some(apply_calibration(cal, score)?),
                    None => None,
                };
                Prediction {
                    g1: pair.g1.id.clone(),
                    g2: pair.g2.id.clone(),
                    score,
                    calibrated,
                    label: None,
                }
            }
            Task::Bsd => {
                let score = bsd_head(z1, z2)?;
                Prediction {
                    g1: pair.g1.id.clone(),
                    g2: pair.g2.id.clone(),
                    score,
                    calibrated: None,
                    label: Some(bsd_decision(score, cfg.head.bsd_threshold)),
                }
            }
        };
        out.push(prediction);
    }
    Ok(out)
}

/// Evaluate a checkpoint on labeled pairs. The GED path reports MSE, rank
/// correlations and mean p\@{10,20} (per-query candidate pools are built from
/// the labeled pairs, both directions); the BSD path reports AUC.
pub fn evaluate(ckpt: &Checkpoint, pairs: &[GraphPair], task: Task) -> Result<MetricsReport, TrainError> {
    match task {
        Task::Ged => {
            let labeled: Vec<&GraphPair> = pairs.iter().filter(|p| p.ged.is_some()).collect();
            if labeled.is_empty() {
                return Err(TrainError::MissingLabels { task });
            }
            let owned: Vec<GraphPair> = labeled.iter().map(|p| (*p).clone()).collect();
            let predictions = predict(ckpt, &owned, task)?;

            let mut pred = Vec::with_capacity(owned.len());
            let mut truth = Vec::with_capacity(owned.len());
            for (pair, p) in owned.iter().zip(&predictions) {
                pred.push(p.calibrated.unwrap_or(p.score));
                truth.push(normalized_ged(pair.ged.unwrap(), pair.g1.n(), pair.g2.n()));
            }

            let mse = metrics::mse(&pred, &truth)?;
            let rho = metrics::spearman_rho(&pred, &truth)?;
            let tau = metrics::kendall_tau(&pred, &truth)?;

            // Per-query candidate pools from the labeled pairs themselves.
            let mut pools: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
            for ((pair, &p), &t) in owned.iter().zip(&pred).zip(&truth) {
                for (query, candidate) in [(&pair.g1, &pair.g2), (&pair.g2, &pair.g1)] {
                    let pool = pools.entry(query.id.as_str()).or_default();
                    if !pool.iter().any(|c| c.id == candidate.id) {
                        pool.push(Candidate {
                            id: candidate.id.clone(),
                            pred: p,
                            truth: t,
                        });
                    }
                }
            }
            let mut p_at = BTreeMap::new();
            for k in [10usize, 20] {
                let mut scores = Vec::new();
                for (query_id, candidates) in &pools {
                    if candidates.len() >= k {
                        let result = RankedQueryResult {
                            query_id: (*query_id).to_string(),
                            candidates: candidates.clone(),
                        };
                        scores.push(metrics::precision_at_k(&result, k)?);
                    }
                }
                let mean = if scores.is_empty() {
                    None
                } else {
                    Some(scores.iter().sum::<f64>() / scores.len() as f64)
                };
                p_at.insert(k, mean);
            }

            Ok(MetricsReport {
                mse: Some(mse),
                rho: Some(rho),
                tau: Some(tau),
                p_at: Some(p_at),
                auc: None,
                pairs_evaluated: owned.len(),
            })
        }
        Task::Bsd => {
            let labeled: Vec<GraphPair> = pairs.iter().filter(|p| p.bsd_label.is_some()).cloned().collect();
            if labeled.is_empty() {
                return Err(TrainError::MissingLabels { task });
            }
            let predictions = predict(ckpt, &labeled, task)?;
            let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
            let labels: Vec<i8> = labeled.iter().map(|p| p.bsd_label.unwrap()).collect();
            let auc = metrics::auc(&scores, &labels)?;
            Ok(MetricsReport {
                mse: None,
                rho: None,
                tau: None,
                p_at: None,
                auc: Some(auc),
                pairs_evaluated: labeled.len(),
            })
        }
    }
}
