//! Loss assembly, optimisation, the training loop, evaluation and the
//! ablation protocols.

mod ablate;
mod config;
mod loss;
mod optim;
mod run;

pub use ablate::{ablate, arm_instance, arm_semantic, arms, run_config, AblationTable, Arm, ArmResult, Protocol, RunCache};
pub use config::{AlignConfig, Config, DataConfig, TrainConfig};
pub use loss::{coarse_loss, fine_loss, segmentation_loss, LossBundle, LossValues, DICE_SMOOTH};
pub use optim::{clip_global_norm, global_norm, lr_at, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{evaluate, metrics_csv, pretrain_base, train, EpochLog, Session, TrainData, TrainOutcome};
