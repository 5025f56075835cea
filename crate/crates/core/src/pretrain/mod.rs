//! Autoregressive visual pre-training, contrastive image-report alignment, and the optimizer.

mod loss;
mod optim;
mod stages;

pub use loss::{
    ar_loss, contrastive_loss, mae_loss_baseline, masked_mse, random_mask, shifted_mse, ArHead, MaeDecoder,
};
pub use optim::{adamw_step, lr_at, AdamW, OptimState, Schedule};
pub use stages::{
    run_mae, run_stage1, run_stage2, top1_accuracy, DualEncoder, EpochRecord, MaeConfig, Stage1Config,
    Stage2Config, StageOutput, TrainConfig, LOG_TAU, TAU_INIT, TAU_RANGE,
};
pub(crate) use stages::{per_sample_batch, train_loop, EvalPoint};
