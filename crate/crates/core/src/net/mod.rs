//! The IRCAM policy network.
//!
//! Audio and visual observations are patch-embedded into one token sequence,
//! refined by a self-attention encoder into the initial multimodal sequence
//! `E_0`, and then decoded iteratively: a learned query sequence
//! cross-attends over the memory, and the decoder output is concatenated in
//! front of the memory for the next iteration (`E_j = [D_j ; E_{j-1}]`).
//! The last decoder output is mean-pooled into the actor-critic state.

mod attention;
mod checkpoint;
mod config;
mod export;
mod model;

pub use attention::{multi_head_attention, AttentionVars, HeadWeights};
pub use checkpoint::{Checkpoint, CheckpointError, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AudioFrontend, IrcamConfig, NetworkVariant, NUM_ACTIONS, VIEW_CHANNELS};
pub use export::{attention_mass_summary, attention_table_csv, mass_summary_csv, MassRow};
pub use model::{
    AttentionMap, AttentionStage, Bound, ForwardOutput, IrcamForward, IrcamNet, ObservationBatch, PolicyOutput,
};

use std::fmt;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Where a token of the multimodal sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Audio,
    Visual,
    /// Output of decoder iteration `j` (1-based).
    Decoded(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Audio => f.write_str("audio"),
            Provenance::Visual => f.write_str("visual"),
            Provenance::Decoded(j) => write!(f, "decoded-{j}"),
        }
    }
}

/// A batch of token sequences `[B, L, d_model]` with per-token provenance.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    pub tokens: crate::tensor::Var,
    pub provenance: Vec<Provenance>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}
