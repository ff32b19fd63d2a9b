use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{multi_head_attention, AttentionVars, HeadWeights};
use super::config::{AudioFrontend, IrcamConfig, CONV1, CONV2, NUM_ACTIONS, VIEW_CHANNELS};
use super::{MultimodalSequence, NetError, Provenance};
use crate::sim::ModalityObservation;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Attn {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: ParamId,
}

#[derive(Debug, Clone)]
struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_q: Norm,
    norm_kv: Norm,
    attn: Attn,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
enum AudioEmbed {
    Patch { proj: Linear, pos: ParamId, ear: ParamId },
    Conv { conv1: Linear, conv2: Linear, proj: Linear, pos: ParamId, ear: ParamId },
}

#[derive(Debug, Clone)]
struct Layout {
    visual_proj: Linear,
    visual_pos: ParamId,
    audio: AudioEmbed,
    encoder: Vec<EncoderLayer>,
    query: ParamId,
    decoder: Vec<DecoderLayer>,
    head_norm: Norm,
    actor: (Linear, Linear),
    critic: (Linear, Linear),
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId, NetError> {
        Ok(self.store.insert(name, t)?)
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId, NetError> {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-limit..=limit));
        self.add(name, t)
    }

    fn normal(&mut self, name: String, shape: [usize; 2], std: f32) -> Result<ParamId, NetError> {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear, NetError> {
        let w = self.xavier(format!("{name}.weight"), fan_in, fan_out)?;
        let b = if bias { Some(self.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?) } else { None };
        Ok(Linear { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm, NetError> {
        Ok(Norm {
            gamma: self.add(format!("{name}.gamma"), Tensor::full([d], 1.0))?,
            beta: self.add(format!("{name}.beta"), Tensor::zeros([d]))?,
        })
    }

    fn attn(&mut self, name: &str, cfg: &IrcamConfig) -> Result<Attn, NetError> {
        let (d, dk, h) = (cfg.d_model, cfg.d_k(), cfg.n_heads);
        let heads = |proj: &str, b: &mut Self| -> Result<Vec<ParamId>, NetError> {
            (0..h).map(|i| b.xavier(format!("{name}.{proj}.{i}"), d, dk)).collect()
        };
        let q = heads("q", self)?;
        let k = heads("k", self)?;
        let v = heads("v", self)?;
        let out = self.xavier(format!("{name}.out"), h * dk, d)?;
        Ok(Attn { q, k, v, out })
    }

    fn ffn(&mut self, name: &str, cfg: &IrcamConfig) -> Result<Ffn, NetError> {
        let hidden = cfg.d_model * cfg.ffn_mult;
        Ok(Ffn {
            fc1: self.linear(&format!("{name}.fc1"), cfg.d_model, hidden, true)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, cfg.d_model, true)?,
        })
    }
}

/// Every parameter of a network bound onto one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn lin(&self, l: &Linear) -> (Var, Option<Var>) {
        (self.var(l.w), l.b.map(|b| self.var(b)))
    }

    fn attn(&self, a: &Attn) -> AttentionVars {
        AttentionVars {
            q: a.q.iter().map(|&i| self.var(i)).collect(),
            k: a.k.iter().map(|&i| self.var(i)).collect(),
            v: a.v.iter().map(|&i| self.var(i)).collect(),
            out: self.var(a.out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionStage {
    Encoder {
        layer: usize,
    },
    /// 1-based decoder iteration.
    Decoder {
        iteration: usize,
    },
}

/// Captured softmax weights of one head at one stage, with the provenance of
/// every key token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub stage: AttentionStage,
    pub weights: HeadWeights,
    pub key_provenance: Vec<Provenance>,
}

/// Observation tensors for a batch: visual `[B, H, W, 2]`, audio `[B, 2, F]`.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub visual: Tensor,
    pub audio: Tensor,
}

impl ObservationBatch {
    pub fn new(cfg: &IrcamConfig, obs: &[&ModalityObservation]) -> Result<Self, NetError> {
        if obs.is_empty() {
            return Err(NetError::Config("empty observation batch".into()));
        }
        let vshape = [cfg.view_height, cfg.view_width, VIEW_CHANNELS];
        let ashape = [2, cfg.audio_bins];
        let mut visual = Vec::with_capacity(obs.len() * vshape.iter().product::<usize>());
        let mut audio = Vec::with_capacity(obs.len() * 2 * cfg.audio_bins);
        for o in obs {
            if o.visual.shape() != vshape || o.audio.shape() != ashape {
                return Err(NetError::Config(format!(
                    "observation shapes {:?}/{:?} do not match network {:?}/{:?}",
                    o.visual.shape(),
                    o.audio.shape(),
                    vshape,
                    ashape
                )));
            }
            visual.extend_from_slice(o.visual.data());
            audio.extend_from_slice(o.audio.data());
        }
        if cfg.audio_log_floor > 0.0 {
            let f = cfg.audio_log_floor;
            let scale = 1.0 / (1.0 / f).ln_1p();
            audio.iter_mut().for_each(|x| *x = (*x / f).ln_1p() * scale);
        }
        let b = obs.len();
        Ok(Self {
            visual: Tensor::new(vec![b, vshape[0], vshape[1], vshape[2]], visual)?,
            audio: Tensor::new(vec![b, 2, cfg.audio_bins], audio)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.visual.shape()[0]
    }
}

/// Result of the IRCAM trunk (embeddings, encoder, iterative decoder).
#[derive(Debug, Clone)]
pub struct IrcamForward {
    /// Mean-pooled last decoder output, `[B, d_model]`.
    pub state: Var,
    pub initial_len: usize,
    /// Memory length after each decoder iteration.
    pub memory_lengths: Vec<usize>,
    pub memory: MultimodalSequence,
    pub last_decoded: Var,
    pub attention: Vec<AttentionMap>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub trunk: IrcamForward,
    /// `[B, 4]`
    pub logits: Var,
    /// `[B]`
    pub value: Var,
}

/// Action logits and state value for one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub action_logits: [f32; NUM_ACTIONS],
    pub state_value: f32,
}

impl PolicyOutput {
    pub fn probabilities(&self) -> [f32; NUM_ACTIONS] {
        let max = self.action_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut p = self.action_logits.map(|l| (l - max).exp());
        let s: f32 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    }

    /// Index of the largest logit; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if self.action_logits[i] > self.action_logits[best] {
                best = i;
            }
        }
        best
    }
}

/// IRCAM network: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct IrcamNet {
    cfg: IrcamConfig,
    params: ParamStore,
    layout: Layout,
}

impl IrcamNet {
    /// Builds a freshly initialized network. Same config and seed give
    /// bitwise identical parameters.
    pub fn new(cfg: IrcamConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let variant = cfg.ablation_apply();
        let d = cfg.d_model;
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(cfg.seed) };

        let patch_dim = cfg.visual_patch * cfg.visual_patch * VIEW_CHANNELS;
        let visual_proj = b.linear("embed.visual.proj", patch_dim, d, true)?;
        let visual_pos = b.normal("embed.visual.pos".into(), [cfg.visual_tokens(), d], 0.02)?;

        let per_ear = cfg.audio_tokens_per_ear();
        let audio = match variant.audio_frontend {
            AudioFrontend::Patch => {
                let proj = b.linear("embed.audio.proj", cfg.audio_patch, d, true)?;
                let pos = b.normal("embed.audio.pos".into(), [per_ear, d], 0.02)?;
                let ear = b.normal("embed.audio.ear".into(), [2, d], 0.02)?;
                AudioEmbed::Patch { proj, pos, ear }
            }
            AudioFrontend::Conv => {
                let conv1 = b.linear("embed.audio.conv1", CONV1.0, CONV1.2, true)?;
                let conv2 = b.linear("embed.audio.conv2", CONV2.0 * CONV1.2, CONV2.2, true)?;
                let proj = b.linear("embed.audio.proj", CONV2.2, d, true)?;
                let pos = b.normal("embed.audio.pos".into(), [per_ear, d], 0.02)?;
                let ear = b.normal("embed.audio.ear".into(), [2, d], 0.02)?;
                AudioEmbed::Conv { conv1, conv2, proj, pos, ear }
            }
        };

        let mut encoder = Vec::new();
        for i in 0..variant.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm1: b.norm(&format!("{p}.norm1"), d)?,
                attn: b.attn(&format!("{p}.attn"), &cfg)?,
                norm2: b.norm(&format!("{p}.norm2"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), &cfg)?,
            });
        }

        let query = b.normal("decoder.query".into(), [cfg.n_query, d], 0.02)?;
        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_weight_sets() {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm_q: b.norm(&format!("{p}.norm_q"), d)?,
                norm_kv: b.norm(&format!("{p}.norm_kv"), d)?,
                attn: b.attn(&format!("{p}.attn"), &cfg)?,
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), &cfg)?,
            });
        }

        let head_norm = b.norm("head.norm", d)?;
        let actor = (b.linear("actor.fc1", d, d, true)?, b.linear("actor.fc2", d, NUM_ACTIONS, true)?);
        // near-uniform initial policy
        b.store.get_mut(actor.1.w).data_mut().iter_mut().for_each(|w| *w *= 0.01);
        let critic = (b.linear("critic.fc1", d, d, true)?, b.linear("critic.fc2", d, 1, true)?);

        let layout = Layout { visual_proj, visual_pos, audio, encoder, query, decoder, head_norm, actor, critic };
        Ok(Self { cfg, params: b.store, layout })
    }

    pub fn config(&self) -> &IrcamConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter count of all encoder blocks.
    pub fn encoder_numel(&self) -> usize {
        self.params.iter().filter(|(_, n, _)| n.starts_with("encoder.")).map(|(_, _, t)| t.numel()).sum()
    }

    /// Names of the attention and feed-forward output projections, the
    /// parameters whose zeroing collapses every block onto its residual path.
    pub fn output_projection_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| {
                (n.starts_with("encoder.") || n.starts_with("decoder."))
                    && (n.ends_with(".attn.out") || n.contains(".ffn.fc2."))
            })
            .map(str::to_string)
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bound, NetError> {
        let vars = self.params.ids().map(|id| g.param(&self.params, id)).collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// Non-overlapping patches of `[B, H, W, C]`, projected, plus positional
    /// embeddings. Returns `[B, Lv, d_model]`.
    pub fn patch_embed_visual(&self, g: &mut Graph, b: &Bound, visual: Var) -> Result<Var, NetError> {
        let cfg = &self.cfg;
        let s = g.shape(visual).to_vec();
        if s.len() != 4 || s[1] != cfg.view_height || s[2] != cfg.view_width || s[3] != VIEW_CHANNELS {
            return Err(NetError::Config(format!("visual input {s:?} does not match the view config")));
        }
        let (batch, h, w, c, p) = (s[0], s[1], s[2], s[3], cfg.visual_patch);
        let (ph, pw) = (h / p, w / p);
        let patch_dim = p * p * c;
        let mut index = Vec::with_capacity(batch * ph * pw * patch_dim);
        for bi in 0..batch {
            for py in 0..ph {
                for px in 0..pw {
                    for dy in 0..p {
                        for dx in 0..p {
                            let base = ((bi * h + py * p + dy) * w + px * p + dx) * c;
                            index.extend(base..base + c);
                        }
                    }
                }
            }
        }
        let lv = ph * pw;
        let patches = g.gather(visual, Arc::from(index), &[batch * lv, patch_dim])?;
        let (w_, b_) = b.lin(&self.layout.visual_proj);
        let tokens = g.linear(patches, w_, b_)?;
        let tokens = g.reshape(tokens, &[batch, lv, cfg.d_model])?;
        let pos = g.broadcast_batch(b.var(self.layout.visual_pos), batch)?;
        Ok(g.add(tokens, pos)?)
    }

    /// Per-ear spectrum patches (or the conv stack under the PE ablation),
    /// projected, plus positional and ear embeddings. Returns `[B, La, d_model]`
    /// with ear 0 tokens first.
    pub fn patch_embed_audio(&self, g: &mut Graph, b: &Bound, audio: Var) -> Result<Var, NetError> {
        let cfg = &self.cfg;
        let s = g.shape(audio).to_vec();
        if s.len() != 3 || s[1] != 2 || s[2] != cfg.audio_bins {
            return Err(NetError::Config(format!("audio input {s:?} does not match audio_bins {}", cfg.audio_bins)));
        }
        let (batch, f) = (s[0], s[2]);
        let per_ear = cfg.audio_tokens_per_ear();
        let d = cfg.d_model;
        let (tokens, pos, ear) = match &self.layout.audio {
            AudioEmbed::Patch { proj, pos, ear } => {
                let ap = cfg.audio_patch;
                let patches = g.reshape(audio, &[batch * 2 * per_ear, ap])?;
                let (w_, b_) = b.lin(proj);
                (g.linear(patches, w_, b_)?, *pos, *ear)
            }
            AudioEmbed::Conv { conv1, conv2, proj, pos, ear } => {
                let rows = batch * 2;
                let (k1, s1, c1) = CONV1;
                let (k2, s2, _) = CONV2;
                let p1 = (f - k1) / s1 + 1;
                let idx1: Vec<usize> = (0..rows)
                    .flat_map(|r| (0..p1).flat_map(move |t| (0..k1).map(move |k| r * f + t * s1 + k)))
                    .collect();
                let cols = g.gather(audio, Arc::from(idx1), &[rows * p1, k1])?;
                let (w_, b_) = b.lin(conv1);
                let h1 = g.linear(cols, w_, b_)?;
                let h1 = g.gelu(h1)?;
                let p2 = per_ear;
                let idx2: Vec<usize> = (0..rows)
                    .flat_map(|r| {
                        (0..p2).flat_map(move |t| {
                            (0..k2).flat_map(move |k| (0..c1).map(move |c| (r * p1 + t * s2 + k) * c1 + c))
                        })
                    })
                    .collect();
                let cols2 = g.gather(h1, Arc::from(idx2), &[rows * p2, k2 * c1])?;
                let (w_, b_) = b.lin(conv2);
                let h2 = g.linear(cols2, w_, b_)?;
                let h2 = g.gelu(h2)?;
                let (w_, b_) = b.lin(proj);
                (g.linear(h2, w_, b_)?, *pos, *ear)
            }
        };
        let tokens = g.reshape(tokens, &[batch, 2 * per_ear, d])?;
        let pos_rows: Vec<usize> = (0..2).flat_map(|_| 0..per_ear).collect();
        let ear_rows: Vec<usize> = (0..2).flat_map(|e| std::iter::repeat_n(e, per_ear)).collect();
        let pos_t = g.gather_rows(b.var(pos), &pos_rows)?;
        let ear_t = g.gather_rows(b.var(ear), &ear_rows)?;
        let extra = g.add(pos_t, ear_t)?;
        let extra = g.broadcast_batch(extra, batch)?;
        Ok(g.add(tokens, extra)?)
    }

    /// Concatenated audio then visual tokens, before the encoder.
    pub fn embed(&self, g: &mut Graph, b: &Bound, batch: &ObservationBatch) -> Result<MultimodalSequence, NetError> {
        let visual = g.constant(batch.visual.clone())?;
        let audio = g.constant(batch.audio.clone())?;
        self.embed_vars(g, b, visual, audio)
    }

    pub fn embed_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        visual: Var,
        audio: Var,
    ) -> Result<MultimodalSequence, NetError> {
        let a = self.patch_embed_audio(g, b, audio)?;
        let v = self.patch_embed_visual(g, b, visual)?;
        let la = g.shape(a)[1];
        let lv = g.shape(v)[1];
        let tokens = g.concat(&[a, v], 1)?;
        let mut provenance = vec![Provenance::Audio; la];
        provenance.extend(std::iter::repeat_n(Provenance::Visual, lv));
        Ok(MultimodalSequence { tokens, provenance })
    }

    fn norm(&self, g: &mut Graph, b: &Bound, n: &Norm, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, b.var(n.gamma), b.var(n.beta), LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, f: &Ffn, x: Var) -> Result<Var, TensorError> {
        let (w1, b1) = b.lin(&f.fc1);
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h)?;
        let (w2, b2) = b.lin(&f.fc2);
        g.linear(h, w2, b2)
    }

    pub fn encoder_layers(&self) -> usize {
        self.layout.encoder.len()
    }

    /// Pre-norm self-attention and feed-forward, each with a residual add.
    pub fn encoder_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        layer: usize,
        e: &MultimodalSequence,
        capture: Option<&mut Vec<HeadWeights>>,
    ) -> Result<MultimodalSequence, NetError> {
        let l = &self.layout.encoder[layer];
        let h = self.norm(g, b, &l.norm1, e.tokens)?;
        let a = multi_head_attention(g, h, h, &b.attn(&l.attn), capture)?;
        let x = g.add(e.tokens, a)?;
        let h = self.norm(g, b, &l.norm2, x)?;
        let f = self.ffn(g, b, &l.ffn, h)?;
        let tokens = g.add(x, f)?;
        Ok(MultimodalSequence { tokens, provenance: e.provenance.clone() })
    }

    /// Decoder weights used by 1-based iteration `iteration`.
    pub fn decoder_layer_for(&self, iteration: usize) -> usize {
        if self.cfg.share_decoder_weights {
            0
        } else {
            iteration - 1
        }
    }

    /// Queries `[B, n_query, d]` cross-attend over every token of `e`, then a
    /// feed-forward; both with residual adds. Returns `[B, n_query, d]`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        layer: usize,
        q_seq: Var,
        e: &MultimodalSequence,
        capture: Option<&mut Vec<HeadWeights>>,
    ) -> Result<Var, NetError> {
        let l = &self.layout.decoder[layer];
        let hq = self.norm(g, b, &l.norm_q, q_seq)?;
        let hkv = self.norm(g, b, &l.norm_kv, e.tokens)?;
        let a = multi_head_attention(g, hq, hkv, &b.attn(&l.attn), capture)?;
        let x = g.add(q_seq, a)?;
        let h = self.norm(g, b, &l.norm_ffn, x)?;
        let f = self.ffn(g, b, &l.ffn, h)?;
        Ok(g.add(x, f)?)
    }

    /// Learned queries broadcast over the batch: `[B, n_query, d]`.
    pub fn initial_queries(&self, g: &mut Graph, b: &Bound, batch: usize) -> Result<Var, NetError> {
        Ok(g.broadcast_batch(b.var(self.layout.query), batch)?)
    }

    /// Embeddings, encoder and the iterative residual decoder.
    pub fn ircam_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        visual: Var,
        audio: Var,
        capture: bool,
    ) -> Result<IrcamForward, NetError> {
        let mut attention = Vec::new();
        let mut heads = Vec::new();
        let take = |heads: &mut Vec<HeadWeights>,
                    stage: AttentionStage,
                    prov: &[Provenance],
                    out: &mut Vec<AttentionMap>| {
            out.extend(heads.drain(..).map(|weights| AttentionMap { stage, weights, key_provenance: prov.to_vec() }));
        };

        let mut e = self.embed_vars(g, b, visual, audio)?;
        for layer in 0..self.layout.encoder.len() {
            let next = self.encoder_block(g, b, layer, &e, capture.then_some(&mut heads))?;
            take(&mut heads, AttentionStage::Encoder { layer }, &e.provenance, &mut attention);
            e = next;
        }
        let initial_len = e.len();
        let batch = g.shape(visual)[0];
        let mut q = self.initial_queries(g, b, batch)?;
        let mut memory_lengths = Vec::with_capacity(self.cfg.n_dec_iters);
        let residual = self.cfg.ablation_apply().residual_concat;
        for j in 1..=self.cfg.n_dec_iters {
            let d_j = self.decoder_step(g, b, self.decoder_layer_for(j), q, &e, capture.then_some(&mut heads))?;
            take(&mut heads, AttentionStage::Decoder { iteration: j }, &e.provenance, &mut attention);
            let tags = std::iter::repeat_n(Provenance::Decoded(j), self.cfg.n_query);
            e = if residual {
                let tokens = g.concat(&[d_j, e.tokens], 1)?;
                let provenance = tags.chain(e.provenance.iter().copied()).collect();
                MultimodalSequence { tokens, provenance }
            } else {
                MultimodalSequence { tokens: d_j, provenance: tags.collect() }
            };
            memory_lengths.push(e.len());
            q = d_j;
        }
        let state = g.mean_axis(q, 1)?;
        Ok(IrcamForward { state, initial_len, memory_lengths, memory: e, last_decoded: q, attention })
    }

    /// Separate two-layer actor and critic heads over the layer-normed `[B, d]` state.
    pub fn actor_critic(&self, g: &mut Graph, b: &Bound, state: Var) -> Result<(Var, Var), NetError> {
        let batch = g.shape(state)[0];
        let state = self.norm(g, b, &self.layout.head_norm, state)?;
        let head = |g: &mut Graph, (l1, l2): &(Linear, Linear)| -> Result<Var, TensorError> {
            let (w, bias) = b.lin(l1);
            let h = g.linear(state, w, bias)?;
            let h = g.tanh(h)?;
            let (w, bias) = b.lin(l2);
            g.linear(h, w, bias)
        };
        let logits = head(g, &self.layout.actor)?;
        let value = head(g, &self.layout.critic)?;
        let value = g.reshape(value, &[batch])?;
        Ok((logits, value))
    }

    /// Full forward pass on a fresh binding.
    pub fn forward(&self, g: &mut Graph, batch: &ObservationBatch, capture: bool) -> Result<ForwardOutput, NetError> {
        let b = self.bind(g)?;
        self.forward_bound(g, &b, batch, capture)
    }

    pub fn forward_bound(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &ObservationBatch,
        capture: bool,
    ) -> Result<ForwardOutput, NetError> {
        let visual = g.constant(batch.visual.clone())?;
        let audio = g.constant(batch.audio.clone())?;
        let trunk = self.ircam_forward(g, b, visual, audio, capture)?;
        let (logits, value) = self.actor_critic(g, b, trunk.state)?;
        Ok(ForwardOutput { trunk, logits, value })
    }

    /// Inference over a batch of observations.
    pub fn policy(&self, obs: &[&ModalityObservation]) -> Result<Vec<PolicyOutput>, NetError> {
        let batch = ObservationBatch::new(&self.cfg, obs)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch, false)?;
        Ok(collect_policy(&g, &out))
    }

    /// Inference with attention capture.
    pub fn policy_with_attention(
        &self,
        obs: &[&ModalityObservation],
    ) -> Result<(Vec<PolicyOutput>, IrcamForward), NetError> {
        let batch = ObservationBatch::new(&self.cfg, obs)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch, true)?;
        Ok((collect_policy(&g, &out), out.trunk))
    }
}

pub(crate) fn collect_policy(g: &Graph, out: &ForwardOutput) -> Vec<PolicyOutput> {
    let logits = g.value(out.logits).data();
    let values = g.value(out.value).data();
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut action_logits = [0.0; NUM_ACTIONS];
            action_logits.copy_from_slice(&logits[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS]);
            PolicyOutput { action_logits, state_value: v }
        })
        .collect()
}
