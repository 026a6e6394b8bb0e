//! Self-supervised network fitting: a tape-based autodiff engine, the MLP
//! encoder, the differentiable signal decoder, and the training loop.

pub mod autodiff;
pub mod decode;
pub mod mlp;
pub mod train;

pub use autodiff::{Grads, Tape, Tid};
pub use decode::{decode, effective_latent, mse_loss, EffectiveLatent};
pub use mlp::{latent_bounds, Arch, Mlp, MlpSpec, OutputMap};
pub use train::{
    adam_step, eval_mse, grid_search, loss_and_grad, lr_at_epoch, predict_params, train_ssl,
    AdamState, EpochLoss, GridSearchResult, GridSpec, Scheduler, TrainConfig, TrainOutcome,
};
