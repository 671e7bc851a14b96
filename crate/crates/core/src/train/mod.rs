//! Set-prediction losses, bipartite matching, optimisers and the training loops.

mod augment;
mod detector;
mod hungarian;
mod loss;
mod optim;
mod pretrain;

pub use crate::boxes::giou;
pub use augment::{augment, augment_image, AugmentConfig};
pub use detector::{
    batch_prompt_classes, image_loss_grad, loss_csv, train_detector, LossRecord, TrainConfig,
};
pub use hungarian::{hungarian, MatchAssignment};
pub use loss::{
    embedding_loss, focal_loss, focal_loss_logit, loss_with_grads, match_cost, match_cost_raw,
    total_loss, FocalConfig, GroundTruthSet, LossBreakdown, LossGrads, LossInputs, LossWeights,
};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use pretrain::{
    pretrain_clip, retrieval_accuracy, sample_embedding, PretrainConfig, PretrainRecord,
};
