//! Cross-domain consistency learning: encoder plus linear classifier trained
//! on the labeled source and its stylised counterpart.

mod encoder;
mod losses;
mod pretrain;

pub use encoder::{Architecture, Encoder, LinearClassifier};
pub use losses::{bsr_penalty, bsr_penalty_grad, ce_loss, ce_loss_grad, ntxent_loss, ntxent_loss_grad};
pub use pretrain::{
    consistency_objective, pretrain, pretrain_checkpointed, EpochRecord, LossVariant, ObjectiveOutput, PretrainConfig,
    PretrainFailure, Pretrained,
};
