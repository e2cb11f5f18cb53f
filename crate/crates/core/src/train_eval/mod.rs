//! Dataset manifests, training, metrics and evaluation reports.

mod artifacts;
mod dataset;
mod evaluate;
mod metrics;
mod report;
mod trainer;

pub use artifacts::{load_model, save_model, sidecar_path};
pub use dataset::{
    generate, label_continuous, read_jsonl, split_dataset, write_jsonl, DatasetKind, LabelInfo, Record, SizeRange,
    Targets,
};
pub use evaluate::{
    evaluate, mean_kl, BinnedRow, EvalOptions, EvalRecord, EvalReport, Method, SummaryRow, SUBSET_ALL, SUBSET_BP,
};
pub use metrics::{kl_bernoulli, kl_gaussian, kl_gaussian_precision, mse, r2_columns, r2_score, MIN_PRECISION, PROB_CLAMP};
pub use report::{binned_svg, scatter_svg, write_binned_csv, write_predictions_csv, write_report, write_summary_csv};
pub use trainer::{
    target_scaling, train, train_with_split, validation_loss, EpochLog, RunConfig, Schedule, ScheduleStep,
    TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::belief_prop::BpError;
use crate::exact_oracles::OracleError;
use crate::factor_gnn::GnnError;
use crate::graph_gen::GenError;
use crate::mcmc::McmcError;
use crate::tensor_nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("graph {id} has no targets")]
    MissingTargets { id: usize },
    #[error("non-finite loss in epoch {epoch}; offending graph ids {graph_ids:?}")]
    NonFinite { epoch: usize, graph_ids: Vec<usize> },
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
