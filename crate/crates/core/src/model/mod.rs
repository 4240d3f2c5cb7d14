//! The reference encoder-decoder transformer.

mod autodiff;
pub mod config;
pub mod forward;
pub mod io;
pub mod train;
pub mod types;
pub mod weights;

pub use config::{is_special, ModelConfig, BOS, EOS, N_SPECIAL, PAD, UNK};
pub use forward::{
    decode_step, encode, final_encoder_norm, forced_steps, greedy_decode, greedy_from_encoder,
    unembed, DecodeStep, EncoderOutput, ForwardHook, NoHook, Phase,
};
pub use io::{load_weights, load_weights_checked, save_weights};
pub use train::{
    evaluate_loss, loss_and_grad, train, train_with, Example, TrainOptions, TrainOutcome,
};
pub use types::{AudioFeatures, TokenSequence};
pub use weights::{BlockKind, ModelWeights};

/// Seeded initialisation (see [`ModelWeights::init`]).
pub fn init_model(config: &ModelConfig) -> crate::Result<ModelWeights> {
    ModelWeights::init(config)
}
