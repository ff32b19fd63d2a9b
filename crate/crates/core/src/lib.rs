//! IRCAM: an iterative residual cross-attention policy for audio-visual
//! navigation, together with everything needed to train and score it at desk
//! scale.
//!
//! - [`tensor`]: f32 tensors, a tape for reverse-mode gradients, Adam.
//! - [`net`]: patch embeddings, the self-attention encoder, the iterative
//!   residual cross-attention decoder and the actor-critic heads.
//! - [`sim`]: procedurally generated grid worlds with binaural audio and
//!   egocentric vision.
//! - [`train`]: PPO with generalized advantage estimation.
//! - [`eval`]: SR / SPL / SNA, shortest-action oracles and baseline agents.
//! - [`config`]: the run configuration file shared by every CLI command.

pub mod config;
pub mod eval;
pub mod net;
pub mod sim;
pub mod tensor;
pub mod train;
