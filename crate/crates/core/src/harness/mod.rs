//! Synthetic data, toy encoders, training, evaluation and ablation drivers.

pub mod ablation;
pub mod config;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod train;
pub mod world;

pub use ablation::{run_ablation, AblationAxis, AblationReport, Arm, ArmResult};
pub use config::{ExperimentConfig, TrainConfig};
pub use encoder::{toy_image_encoder, EncoderConfig, VisualPromptEncoder};
pub use metrics::{compute_miou, ConfusionMatrix, EvalReport};
pub use model::{ModelConfig, SegModel, SegObjective};
pub use scene::{generate_scene, render_exemplar, SceneConfig, ShapeKind, ShapeMeta, SyntheticScene};
pub use train::{evaluate, run_training, train_model, TrainOutcome};
pub use world::{dataset_fingerprint, World, WorldConfig};
