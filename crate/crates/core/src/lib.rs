//! Factor-graph inference laboratory.
//!
//! Learned recurrent message passing on factor graphs (a bipartite graph
//! attention network with GRU node updates), benchmarked against belief
//! propagation and exact or sampled ground truth for three model families:
//! Gaussian graphical models, binary third-order spin glasses, and continuous
//! third-order models with a quartic base measure.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod factor_graph;
pub mod belief_prop;
pub mod exact_oracles;
pub mod factor_gnn;
pub mod graph_gen;
pub mod graph_metrics;
pub mod mcmc;
pub mod tensor_nn;
pub mod train_eval;
