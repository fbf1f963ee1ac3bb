//! Streaming encoder: causal convolution, left-context attention, and
//! feed-forward blocks with per-layer freeze flags.

mod checkpoint;
mod config;
mod state;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::EncoderConfig;
pub use state::{EncoderState, LayerParams};
