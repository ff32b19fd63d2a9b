use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, RolloutBuffer, TrainConfig, TrainError};
use crate::net::{IrcamNet, ObservationBatch};
use crate::sim::ModalityObservation;
use crate::tensor::{clip_grad_norm, AdamState, Graph, Tensor, TensorError, Var};

/// Mean losses and diagnostics over every minibatch of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `old_logp - new_logp`.
    pub kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Graph nodes and scalar readouts of the PPO loss on one minibatch.
pub struct PpoLoss {
    pub total: Var,
    pub policy: f32,
    pub value: f32,
    pub entropy: f32,
    pub kl: f32,
    pub clip_frac: f32,
}

fn term(name: &'static str) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op } => TrainError::NonFinite { term: name, op },
        other => TrainError::Tensor(other),
    }
}

/// Builds the clipped-surrogate + value + entropy loss for the samples `idx`
/// of `buf`, given normalized advantages and returns.
pub fn ppo_loss(
    g: &mut Graph,
    net: &IrcamNet,
    buf: &RolloutBuffer,
    adv: &[f32],
    returns: &[f32],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<PpoLoss, TrainError> {
    let obs: Vec<&ModalityObservation> = idx.iter().map(|&i| &buf.observations[i]).collect();
    let batch = ObservationBatch::new(net.config(), &obs)?;
    let out = net.forward(g, &batch, false)?;
    let n = idx.len();
    let column = |xs: &[f32]| Tensor::new(vec![n], idx.iter().map(|&i| xs[i]).collect());
    let actions: Vec<usize> = idx.iter().map(|&i| buf.actions[i]).collect();

    let policy = (|| -> Result<(Var, f32, f32), TensorError> {
        let logp_all = g.log_softmax_last_dim(out.logits)?;
        let logp = g.pick_last_dim(logp_all, &actions)?;
        let old = g.constant(column(&buf.log_probs)?)?;
        let a = g.constant(column(adv)?)?;
        let log_ratio = g.sub(logp, old)?;
        let ratio = g.exp(log_ratio)?;
        let unclipped = g.mul(ratio, a)?;
        let clipped = g.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)?;
        let clipped = g.mul(clipped, a)?;
        let surrogate = g.minimum(unclipped, clipped)?;
        let mean = g.mean(surrogate)?;
        let loss = g.scale(mean, -1.0)?;
        let kl = -g.value(log_ratio).data().iter().sum::<f32>() / n as f32;
        let clip = g.value(ratio).data().iter().filter(|r| (**r - 1.0).abs() > cfg.clip_ratio).count();
        Ok((loss, kl, clip as f32 / n as f32))
    })()
    .map_err(term("policy"))?;

    let value = (|| -> Result<Var, TensorError> {
        let target = g.constant(column(returns)?)?;
        let diff = g.sub(out.value, target)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)
    })()
    .map_err(term("value"))?;

    let entropy = (|| -> Result<Var, TensorError> {
        let logp_all = g.log_softmax_last_dim(out.logits)?;
        let p = g.exp(logp_all)?;
        let plogp = g.mul(p, logp_all)?;
        let per_row = g.sum_last_dim(plogp)?;
        let mean = g.mean(per_row)?;
        g.scale(mean, -1.0)
    })()
    .map_err(term("entropy"))?;

    let total = (|| -> Result<Var, TensorError> {
        let v = g.scale(value, cfg.value_coef)?;
        let h = g.scale(entropy, -cfg.entropy_coef)?;
        let t = g.add(policy.0, v)?;
        g.add(t, h)
    })()
    .map_err(term("total"))?;

    Ok(PpoLoss {
        total,
        policy: g.value(policy.0).item(),
        value: g.value(value).item(),
        entropy: g.value(entropy).item(),
        kl: policy.1,
        clip_frac: policy.2,
    })
}

/// `epochs_per_update` passes of shuffled minibatches over `buf`, one Adam
/// step per minibatch. Advantages are normalized over the whole buffer first.
pub fn ppo_update(
    net: &mut IrcamNet,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, TrainError> {
    if buf.is_empty() {
        return Err(TrainError::Config("empty rollout buffer".into()));
    }
    let (mut adv, returns) = buf.advantages(cfg.gamma, cfg.gae_lambda);
    normalize(&mut adv);
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mb = cfg.minibatch_size.clamp(1, buf.len());
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let mut g = Graph::new();
            let loss = ppo_loss(&mut g, net, buf, &adv, &returns, idx, cfg)?;
            g.backward(loss.total)?;
            g.accumulate_param_grads(net.params_mut());
            let norm = clip_grad_norm(net.params_mut(), cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { term: "gradient", op: "clip_grad_norm" });
            }
            adam.step(net.params_mut())?;
            stats.policy_loss += f64::from(loss.policy);
            stats.value_loss += f64::from(loss.value);
            stats.entropy += f64::from(loss.entropy);
            stats.kl += f64::from(loss.kl);
            stats.clip_frac += f64::from(loss.clip_frac);
            stats.grad_norm += f64::from(norm);
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches as f64;
    for x in [
        &mut stats.policy_loss,
        &mut stats.value_loss,
        &mut stats.entropy,
        &mut stats.kl,
        &mut stats.clip_frac,
        &mut stats.grad_norm,
    ] {
        *x /= m;
    }
    Ok(stats)
}
