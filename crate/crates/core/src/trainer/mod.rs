//! Optimisation: AdamW, learning-rate schedules, gradient clipping, the
//! output-norm monitor and the training loop.

mod monitor;
mod optim;
mod run;

pub use monitor::{monitor_step, MonitorConfig, NormRecord, NormTrace};
pub use optim::{adamw_step, clip_global_norm, global_norm, lr_at, OptimConfig, OptimState, Schedule};
pub use run::{
    ablation_arms, checkpoint_dir, init_model, read_loss_csv, resume, run_ablation, train_loop,
    write_loss_csv, AblationArm, LossRow, RunSummary, TrainConfig, Trainer, ABLATIONS,
};
