//! Saliency segmentation with a frozen toy transformer encoder adapted by
//! SVD-parameterized low-rank triplets under an adaptive rank budget.
//!
//! Everything is f64, single-threaded, and bit-for-bit reproducible from a
//! seed: reductions run in fixed left-to-right order and every random draw
//! comes from a counter-based generator.

pub mod adalora;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adalora::{
    adapted_forward, adapted_forward_data, importance_scores, orthogonality_regularizer,
    standard_normal, BudgetSchedule, PruneReport, RankAllocator, SvdTriplet, TripletIds,
};
pub use checkpoint::{apply_base, load as load_checkpoint, load_full, save_base, save_full, Checkpoint};
pub use config::RunConfig;
pub use data::{
    epoch_batches, epoch_order, generate_synthetic, read_pgm_mask, read_ppm, write_pgm_mask,
    write_ppm, DatasetManifest, SaliencySample,
};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Result, SsomError};
pub use gradcheck::{grad_check, grad_check_multi};
pub use metrics::{adaptive_threshold, evaluate_dataset, f_beta, mae, EvalReport, ThresholdMode};
pub use model::{binarize, predict_logits, MaskDecoder, SaliencyPrompt, SsomModel};
pub use objective::{bce_loss, iou_loss, total_loss, LossBreakdown};
pub use tape::{Id, Tape};
pub use tensor::{Parameter, Tensor};
pub use trainer::{param_report, OptimizerKind, ParamReport, TrainConfig, Trainer};
