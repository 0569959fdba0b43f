//! Cooperative training: the per-step losses, the optimizer, and the loop.

mod adam;
mod losses;
mod sweep;
mod trainer;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use losses::{
    ebm_loss_and_grad, ebm_loss_scale, generator_loss_and_grad, inference_loss_and_grad, EbmLoss,
    GeneratorLoss, LossGrad,
};
pub use sweep::{interleaved_sweep, SweepArm};
pub use trainer::{
    continue_training, train_loop, train_step, AbortRecord, LossReport, RunOutput, StepOutcome,
    TrainConfig, TrainMode, TrainState,
};

#[cfg(test)]
mod tests;
