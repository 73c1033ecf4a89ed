//! Dual-view training, evaluation and the experiment protocols.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod protocols;
pub mod run;
pub mod verify;

pub use config::TrainConfig;
pub use metrics::{argmax, score_predictions, MetricsReport, QTypeAccuracy};
pub use optim::{lr_at, AdamW};
pub use pipeline::{anchor_view, augmented_view, eval_stream, forward_loss, infer, train_step, StepLosses, StepOutput};
pub use protocols::{
    fraction_sweep, noisy_question, perturbation_report, Perturbation, PerturbationRow, Setup, SweepPoint, GRAPH_NOISE_SIGMA,
    QUESTION_NOISE_FRACTION,
};
pub use run::{
    eval_graphs, evaluate, evaluate_inputs, fraction_scenes, infer_all, model_config, normalized_std, repr_std, train,
    train_with, EpochRecord, StepRecord, TrainOutcome, EVAL_BATCH,
};
pub use verify::{check_batch, check_objectives, objective_configs, spread_params, ObjectiveCheck};
