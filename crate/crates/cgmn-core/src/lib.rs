//! Self-supervised graph similarity learning with a contrastive graph
//! matching network.
//!
//! The pipeline: generate two corrupted views per graph ([`augment`]),
//! encode nodes with a GCN ([`encoder`]), enrich embeddings by cross-view
//! and cross-graph interaction and train with a temperature-scaled
//! contrastive loss ([`interact`]), then pool to graph level and score pairs
//! for edit-distance regression or binary similarity detection ([`heads`]).
//! An exact A* edit-distance oracle ([`ged`]) generates and verifies ground
//! truth at small scale, and [`metrics`] covers MSE, rank correlations,
//! precision at k and AUC. [`train`] orchestrates the whole thing with
//! seeded determinism; [`diff`] is the in-house reverse-mode autodiff the
//! rest builds on.

pub mod augment;
pub mod config;
pub mod diff;
pub mod encoder;
pub mod ged;
pub mod graph;
pub mod heads;
pub mod interact;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod train;

pub use config::{load_config, Task, TrainConfig};
pub use diff::{grad_check, Matrix, Tape, Tensor};
pub use graph::{Graph, GraphPair};
pub use train::{evaluate, predict, train, Checkpoint, MetricsReport};
