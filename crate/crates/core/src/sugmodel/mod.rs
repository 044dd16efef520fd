//! Encoder-decoder query generator.

mod context;
mod decode;
mod model;
mod train;
mod vocab;

pub use context::{assemble_input, InputLimits, UserContext};
pub use decode::{beam_search, score_many, score_sequence, BeamConfig, EncodedInput, Hypothesis};
pub use model::{causal_mask, positional_encoding, GenConfig, GenModel};
pub use train::{batch_sft_loss, sft_loss, train_sft, SftTraining, TokenizedExample};
pub use vocab::{Vocab, BOS, CLS, EOS, LIST_SEP, PAD, SEP, SPECIALS, UNK};
