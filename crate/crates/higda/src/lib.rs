//! Hierarchical graph-of-nodes classifier for semi-supervised domain
//! adaptation.
//!
//! An image is split into patches that form a per-image local graph; a
//! mini-batch of pooled image features forms a global category graph whose
//! learned affinities weight cross-sample aggregation. Training combines a
//! node cross-entropy loss with an edge supervision loss, optionally extended
//! by episodic pseudo-labeling (graph active learning) and a minimax-entropy
//! adversarial term on unlabeled target data.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gal;
pub mod global_graph;
pub mod local_graph;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod train_eval;

pub use error::{HigdaError, Result};
