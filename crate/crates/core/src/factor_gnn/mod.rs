//! Recurrent bipartite graph-attention network on factor graphs.
//!
//! Factor states start from a per-type encoder of the factor's natural
//! parameters, variable states start at zero. Each round computes
//! multi-head attention messages in both directions from the current
//! states, scales factor summaries by a learned per-factor feature matrix,
//! and updates both node sets with LayerNorm-GRU cells. A decoder maps final
//! variable states to marginal summaries.

mod batch;
mod model;

pub use batch::{GraphBatch, TypeBlock};
pub use model::{DirectionWeights, FactorGnn, GnnState, RoundOutput, RoundWeights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::Family;
use crate::tensor_nn::NnError;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("model was built for {expected} graphs, got {got}")]
    FamilyMismatch { expected: Family, got: Family },
    #[error("batch contains no graphs")]
    EmptyBatch,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnMode {
    /// One weight set applied for a variable number of rounds.
    Recurrent,
    /// A fixed number of rounds, each with its own weights.
    Stacked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub family: Family,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Hidden width of each per-head message MLP.
    pub message_hidden: usize,
    /// Hidden width of each per-head attention scorer.
    pub attention_hidden: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Inclusive range for the number of rounds drawn per training batch.
    pub readout_range: [usize; 2],
    pub test_readout: usize,
    pub mode: GnnMode,
    pub stacked_layers: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            hidden_dim: 64,
            heads: 5,
            message_hidden: 64,
            attention_hidden: 64,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            readout_range: [30, 50],
            test_readout: 30,
            mode: GnnMode::Recurrent,
            stacked_layers: 10,
        }
    }
}

impl GnnConfig {
    pub fn for_family(family: Family) -> Self {
        Self { family, ..Self::default() }
    }

    pub fn output_width(&self) -> usize {
        self.family.target_width()
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: String| Err(GnnError::InvalidConfig(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.message_hidden == 0 || self.attention_hidden == 0 {
            return bad("widths and head count must be positive".into());
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return bad("encoder and decoder need at least one hidden layer".into());
        }
        if self.readout_range[0] == 0 || self.readout_range[0] > self.readout_range[1] {
            return bad(format!("readout range {:?}", self.readout_range));
        }
        if self.mode == GnnMode::Stacked && self.stacked_layers == 0 {
            return bad("stacked model needs at least one layer".into());
        }
        Ok(())
    }

    /// Rounds used at test time.
    pub fn eval_rounds(&self) -> usize {
        match self.mode {
            GnnMode::Recurrent => self.test_readout,
            GnnMode::Stacked => self.stacked_layers,
        }
    }
}
