//! Masked autoencoder: model, loss, training loop and checkpoints.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, load_optimizer, save_checkpoint,
    save_optimizer, CHECKPOINT_MAGIC, OPTIMIZER_MAGIC,
};
pub use config::{ChannelMode, LossScope, MaeConfig, TrainConfig};
pub use model::{masked_mse, masked_mse_loss, MaeModel, Reconstructor};
pub use train::{optimizer_for, prepare_sample, train, train_epoch, train_step, EpochLog};
