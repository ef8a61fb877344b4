//! Supervised pre-training, fine-tuning and hyper-parameter search.

mod loops;
mod optim;
mod search;

pub use loops::{
    accuracy, add_into, batch_loss_grad, evaluate, finetune, fit, kshot_subset, pretrain_transfer, scale_params,
    EpochRecord, Example, FineTuneRegime, FinetuneOptions, FinetuneOutcome, FitOutcome, RegimeMode, TrainOptions,
    TrainedModel, TransferOutcome, CHUNK,
};
pub(crate) use loops::grads_to_params;
pub use optim::{cosine_annealing, EarlyStopper, LrGroups, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use search::{random_search, sample_config, Range, SearchOutcome, SearchSpace, TrialConfig, TrialRecord};
