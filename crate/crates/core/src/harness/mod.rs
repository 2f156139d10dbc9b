//! Training, evaluation and checkpoint persistence.

mod checkpoint;
mod config;
mod eval;
mod model;

pub use checkpoint::{Checkpoint, Header, TensorEntry, FORMAT_VERSION, MAGIC};
pub use config::{EncoderKind, ReconScope, TrainConfig};
pub use eval::{
    evaluate_reasoning, model_factor_vae, model_metrics, predict_batch, sweep, EvalReport, FactorBreakdown, SweepRun,
};
pub use model::{train, Model, Phase, StepRecord, CACHE_LIMIT, DIVERGENCE_LIMIT};
