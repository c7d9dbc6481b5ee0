//! Smooth-L1 supervision of both outputs, Adam, the epoch loop and
//! checkpoint files.

mod adam;
mod checkpoint;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    best_checkpoint_path, config_from_text, config_to_text, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use loss::{total_loss, total_loss_maps, LossConfig, LossTargets};
pub use trainer::{random_crop, train, train_step, validation_epe, EpochLog, TrainOptions, TrainOutcome};
