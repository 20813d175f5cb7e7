//! Layers shared by the labeler families.

mod attention;
mod layers;
mod lstm;
mod params;

pub use attention::{sinusoidal_positions, AttentionEncoder, AttentionLayer};
pub use layers::{Embedding, LayerNorm, Linear};
pub use lstm::{BiLstm, LstmCell, LstmState};
pub use params::{Bound, ParamId, ParamStore};
