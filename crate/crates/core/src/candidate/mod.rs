//! Executable candidate networks, the desk-scale task, GHN training and the
//! two accuracy signals: generated weights and directly trained weights.

mod data;
mod net;
mod train;

pub use data::{Batch, Dataset, TaskSpec, DATA_MAGIC};
pub use net::{
    argmax_rows, assemble, forward_loss, CandidateNet, Forward, LossOutput, OwnedWeights,
};
pub use train::{
    append_records, derive_seed, eval_with_generated, generate_candidate, ghn_gradients, ghn_loss,
    ghn_train_step, read_records, sgd_train_candidate, step_sample, train_ghn, Evaluation,
    GhnTrainConfig, GhnUse, NetShape, ResultRecord, SgdConfig, StepLog,
};
