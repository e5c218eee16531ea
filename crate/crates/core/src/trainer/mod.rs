//! Two-stage training (codec, then predictor with the codec frozen),
//! evaluation and checkpointing.

pub mod codec;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod predictor;

pub use codec::{codebook_usage, reconstruction_pve, train_codec, CodecEpochLog, CodecTrainOutcome};
pub use config::{AblationFlags, LossWeights, Stage, TrainConfig};
pub use evaluate::{
    evaluate, evaluate_predictor, most_frequent_tokens, EvalReport, GroundTruthOracle, MeanTokenBaseline, MeshPredictor,
    MetricsSummary, RawPrediction, SampleMetrics,
};
pub use optim::Adam;
pub use predictor::{
    check_dataset_codec, predictor_losses, train_predictor, PredictorEpochLog, PredictorTrainOutcome, StepContext,
};
