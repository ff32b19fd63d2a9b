use serde::{Deserialize, Serialize};

use super::NetError;

/// Channels of the egocentric view: occupancy and wall distance.
pub const VIEW_CHANNELS: usize = 2;
/// forward, turn-left, turn-right, stop
pub const NUM_ACTIONS: usize = 4;

/// Hyperparameters of one IRCAM network, including the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrcamConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    /// Number of residual decoding iterations.
    pub n_dec_iters: usize,
    /// Length of the learned query sequence; each iteration appends this many tokens.
    pub n_query: usize,
    pub ffn_mult: usize,
    pub view_height: usize,
    pub view_width: usize,
    pub visual_patch: usize,
    pub audio_bins: usize,
    pub audio_patch: usize,
    /// Spectra enter as `ln(1 + x / f) / ln(1 + 1 / f)` with this floor `f`;
    /// 0 feeds raw magnitudes.
    pub audio_log_floor: f32,
    /// One decoder weight set reused by every iteration instead of one per iteration.
    pub share_decoder_weights: bool,
    /// Replace the memory with the decoder output instead of concatenating.
    pub ablate_rt: bool,
    /// Embed audio with a strided convolution stack instead of patches.
    pub ablate_pe: bool,
    /// Skip the self-attention encoder.
    pub ablate_en: bool,
    pub seed: u64,
}

impl Default for IrcamConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_iters: 6,
            n_query: 8,
            ffn_mult: 4,
            view_height: 6,
            view_width: 6,
            visual_patch: 3,
            audio_bins: 32,
            audio_patch: 8,
            audio_log_floor: 0.0,
            share_decoder_weights: false,
            ablate_rt: false,
            ablate_pe: false,
            ablate_en: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioFrontend {
    Patch,
    Conv,
}

/// The network shape after ablation switches are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkVariant {
    pub encoder_layers: usize,
    pub residual_concat: bool,
    pub audio_frontend: AudioFrontend,
}

// strided conv stack used when patch embedding is ablated
pub(crate) const CONV1: (usize, usize, usize) = (4, 2, 8); // kernel, stride, channels
pub(crate) const CONV2: (usize, usize, usize) = (3, 2, 16);

fn conv_len(n: usize, kernel: usize, stride: usize) -> Option<usize> {
    (n >= kernel).then(|| (n - kernel) / stride + 1)
}

impl IrcamConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ablation_apply(&self) -> NetworkVariant {
        NetworkVariant {
            encoder_layers: if self.ablate_en { 0 } else { self.n_enc_layers },
            residual_concat: !self.ablate_rt,
            audio_frontend: if self.ablate_pe { AudioFrontend::Conv } else { AudioFrontend::Patch },
        }
    }

    pub fn visual_tokens(&self) -> usize {
        (self.view_height / self.visual_patch) * (self.view_width / self.visual_patch)
    }

    /// Positions per ear produced by the audio front end.
    pub fn audio_tokens_per_ear(&self) -> usize {
        match self.ablation_apply().audio_frontend {
            AudioFrontend::Patch => self.audio_bins / self.audio_patch,
            AudioFrontend::Conv => {
                conv_len(self.audio_bins, CONV1.0, CONV1.1).and_then(|n| conv_len(n, CONV2.0, CONV2.1)).unwrap_or(0)
            }
        }
    }

    pub fn audio_tokens(&self) -> usize {
        2 * self.audio_tokens_per_ear()
    }

    /// Length of the initial multimodal sequence.
    pub fn initial_len(&self) -> usize {
        self.audio_tokens() + self.visual_tokens()
    }

    pub fn decoder_weight_sets(&self) -> usize {
        if self.share_decoder_weights {
            1
        } else {
            self.n_dec_iters
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_dec_iters == 0 {
            return bad("n_dec_iters must be at least 1".into());
        }
        if self.n_query == 0 {
            return bad("n_query must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be at least 1".into());
        }
        if self.visual_patch == 0
            || self.view_height == 0
            || self.view_width == 0
            || !self.view_height.is_multiple_of(self.visual_patch)
            || !self.view_width.is_multiple_of(self.visual_patch)
        {
            return bad(format!(
                "view {}x{} is not divisible by visual_patch {}",
                self.view_height, self.view_width, self.visual_patch
            ));
        }
        match self.ablation_apply().audio_frontend {
            AudioFrontend::Patch => {
                if self.audio_patch == 0 || self.audio_bins == 0 || !self.audio_bins.is_multiple_of(self.audio_patch) {
                    return bad(format!(
                        "audio_bins {} is not divisible by audio_patch {}",
                        self.audio_bins, self.audio_patch
                    ));
                }
            }
            AudioFrontend::Conv => {
                if self.audio_tokens_per_ear() == 0 {
                    return bad(format!("audio_bins {} too short for the convolution front end", self.audio_bins));
                }
            }
        }
        if !(self.audio_log_floor >= 0.0 && self.audio_log_floor.is_finite()) {
            return bad(format!("audio_log_floor {} must be a finite non-negative number", self.audio_log_floor));
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer".into());
        }
        Ok(())
    }

    /// TOML text embedded in checkpoints.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("IrcamConfig serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, NetError> {
        let cfg: Self = toml::from_str(text).map_err(|e| NetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
