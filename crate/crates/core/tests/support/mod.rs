#![allow(dead_code)]

//! Independent oracles shared by the integration tests.

use std::collections::{BTreeMap, VecDeque};

use ircam::net::{IrcamConfig, IrcamNet, ObservationBatch};
use ircam::sim::{Cell, GridWorld, ModalityObservation};
use ircam::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(seed: u64) -> IrcamConfig {
    IrcamConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_iters: 2,
        n_query: 2,
        ffn_mult: 2,
        view_height: 4,
        view_width: 4,
        visual_patch: 2,
        audio_bins: 8,
        audio_patch: 4,
        seed,
        ..IrcamConfig::default()
    }
}

pub fn random_obs(cfg: &IrcamConfig, rng: &mut ChaCha8Rng) -> ModalityObservation {
    let vis = cfg.view_height * cfg.view_width * 2;
    let visual =
        Tensor::new(vec![cfg.view_height, cfg.view_width, 2], (0..vis).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
    let audio =
        Tensor::new(vec![2, cfg.audio_bins], (0..2 * cfg.audio_bins).map(|_| rng.random_range(0.0..0.5)).collect())
            .unwrap();
    ModalityObservation { visual, audio }
}

pub fn random_batch(cfg: &IrcamConfig, n: usize, seed: u64) -> Vec<ModalityObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_obs(cfg, &mut rng)).collect()
}

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), r * c);
        Self { r, c, d }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn matmul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                for j in 0..o.c {
                    d[i * o.c + j] += a * o.at(k, j);
                }
            }
        }
        M::new(self.r, o.c, d)
    }

    pub fn transpose(&self) -> M {
        let mut d = vec![0.0; self.r * self.c];
        for i in 0..self.r {
            for j in 0..self.c {
                d[j * self.r + i] = self.at(i, j);
            }
        }
        M::new(self.c, self.r, d)
    }

    pub fn add(&self, o: &M) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&v| f(v)).collect())
    }

    pub fn vstack(parts: &[&M]) -> M {
        let c = parts[0].c;
        let mut d = Vec::new();
        for p in parts {
            assert_eq!(p.c, c);
            d.extend_from_slice(&p.d);
        }
        M::new(d.len() / c, c, d)
    }

    pub fn hstack(parts: &[M]) -> M {
        let r = parts[0].r;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(p.row(i));
            }
        }
        M::new(r, c, d)
    }
}

pub fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Named parameters copied out of a network in f64.
#[derive(Debug, Clone)]
pub struct RefParams {
    pub values: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_net(net: &IrcamNet) -> Self {
        let values = net
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
            .collect();
        Self { values }
    }

    pub fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn mat(&self, name: &str) -> M {
        let (s, d) = self.values.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        match s.len() {
            1 => M::new(1, s[0], d.clone()),
            2 => M::new(s[0], s[1], d.clone()),
            _ => panic!("{name} has rank {}", s.len()),
        }
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.values[name].1.clone()
    }
}

pub struct RefNet<'a> {
    pub cfg: &'a IrcamConfig,
    pub p: &'a RefParams,
}

pub struct RefOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    /// Memory length after each decoder iteration.
    pub memory_lengths: Vec<usize>,
    /// Every attention row of every stage.
    pub attention_rows: Vec<Vec<f64>>,
    pub state: Vec<f64>,
}

impl RefNet<'_> {
    fn linear(&self, x: &M, prefix: &str) -> M {
        let y = x.matmul(&self.p.mat(&format!("{prefix}.weight")));
        let bname = format!("{prefix}.bias");
        if !self.p.has(&bname) {
            return y;
        }
        let b = self.p.vec(&bname);
        M::new(y.r, y.c, y.d.iter().enumerate().map(|(i, v)| v + b[i % y.c]).collect())
    }

    fn layer_norm(&self, x: &M, prefix: &str) -> M {
        let g = self.p.vec(&format!("{prefix}.gamma"));
        let b = self.p.vec(&format!("{prefix}.beta"));
        let mut d = Vec::with_capacity(x.d.len());
        for i in 0..x.r {
            let row = x.row(i);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let rs = 1.0 / (var + 1e-5).sqrt();
            d.extend(row.iter().enumerate().map(|(j, v)| (v - mu) * rs * g[j] + b[j]));
        }
        M::new(x.r, x.c, d)
    }

    fn attention(&self, q_in: &M, kv: &M, prefix: &str, rows: &mut Vec<Vec<f64>>) -> M {
        let dk = self.cfg.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let heads: Vec<M> = (0..self.cfg.n_heads)
            .map(|h| {
                let q = q_in.matmul(&self.p.mat(&format!("{prefix}.q.{h}")));
                let k = kv.matmul(&self.p.mat(&format!("{prefix}.k.{h}")));
                let v = kv.matmul(&self.p.mat(&format!("{prefix}.v.{h}")));
                let s = q.matmul(&k.transpose());
                let mut a = Vec::with_capacity(s.d.len());
                for i in 0..s.r {
                    let r = softmax(&s.row(i).iter().map(|x| x * scale).collect::<Vec<_>>());
                    rows.push(r.clone());
                    a.extend(r);
                }
                M::new(s.r, s.c, a).matmul(&v)
            })
            .collect();
        M::hstack(&heads).matmul(&self.p.mat(&format!("{prefix}.out")))
    }

    fn ffn(&self, x: &M, prefix: &str) -> M {
        let h = self.linear(x, &format!("{prefix}.fc1")).map(gelu);
        self.linear(&h, &format!("{prefix}.fc2"))
    }

    fn audio_tokens(&self, audio: &[f64]) -> M {
        let cfg = self.cfg;
        let f = cfg.audio_bins;
        let per_ear = cfg.audio_tokens_per_ear();
        let mut rows = Vec::new();
        for ear in 0..2 {
            let spec = &audio[ear * f..(ear + 1) * f];
            let t = if cfg.ablate_pe {
                // kernel 4 stride 2 to 8 channels, then kernel 3 stride 2 to 16
                let p1 = (f - 4) / 2 + 1;
                let cols1 = M::new(p1, 4, (0..p1).flat_map(|t| spec[t * 2..t * 2 + 4].to_vec()).collect());
                let h1 = self.linear(&cols1, "embed.audio.conv1").map(gelu);
                let cols2 = M::new(
                    per_ear,
                    24,
                    (0..per_ear)
                        .flat_map(|t| (0..3).flat_map(|k| h1.row(t * 2 + k).to_vec()).collect::<Vec<_>>())
                        .collect(),
                );
                let h2 = self.linear(&cols2, "embed.audio.conv2").map(gelu);
                self.linear(&h2, "embed.audio.proj")
            } else {
                let ap = cfg.audio_patch;
                self.linear(&M::new(per_ear, ap, spec.to_vec()), "embed.audio.proj")
            };
            let pos = self.p.mat("embed.audio.pos");
            let e = self.p.vec("embed.audio.ear");
            for i in 0..per_ear {
                rows.extend((0..cfg.d_model).map(|j| t.at(i, j) + pos.at(i, j) + e[ear * cfg.d_model + j]));
            }
        }
        M::new(2 * per_ear, cfg.d_model, rows)
    }

    fn visual_tokens(&self, visual: &[f64]) -> M {
        let cfg = self.cfg;
        let (h, w, p) = (cfg.view_height, cfg.view_width, cfg.visual_patch);
        let mut patches = Vec::new();
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..2 {
                            patches.push(visual[((py * p + dy) * w + px * p + dx) * 2 + c]);
                        }
                    }
                }
            }
        }
        let n = (h / p) * (w / p);
        let t = self.linear(&M::new(n, p * p * 2, patches), "embed.visual.proj");
        t.add(&self.p.mat("embed.visual.pos"))
    }

    pub fn forward(&self, obs: &ModalityObservation) -> RefOutput {
        let cfg = self.cfg;
        let floor = cfg.audio_log_floor as f64;
        let audio: Vec<f64> = obs
            .audio
            .data()
            .iter()
            .map(|&v| if floor > 0.0 { (1.0 + v as f64 / floor).ln() / (1.0 + 1.0 / floor).ln() } else { v as f64 })
            .collect();
        let visual: Vec<f64> = obs.visual.data().iter().map(|&v| v as f64).collect();
        let mut rows = Vec::new();
        let mut e = M::vstack(&[&self.audio_tokens(&audio), &self.visual_tokens(&visual)]);
        let enc = if cfg.ablate_en { 0 } else { cfg.n_enc_layers };
        for i in 0..enc {
            let p = format!("encoder.{i}");
            let h = self.layer_norm(&e, &format!("{p}.norm1"));
            let x = e.add(&self.attention(&h, &h, &format!("{p}.attn"), &mut rows));
            let h = self.layer_norm(&x, &format!("{p}.norm2"));
            e = x.add(&self.ffn(&h, &format!("{p}.ffn")));
        }
        let mut q = self.p.mat("decoder.query");
        let mut memory_lengths = Vec::new();
        for j in 1..=cfg.n_dec_iters {
            let layer = if cfg.share_decoder_weights { 0 } else { j - 1 };
            let p = format!("decoder.{layer}");
            let hq = self.layer_norm(&q, &format!("{p}.norm_q"));
            let hkv = self.layer_norm(&e, &format!("{p}.norm_kv"));
            let x = q.add(&self.attention(&hq, &hkv, &format!("{p}.attn"), &mut rows));
            let h = self.layer_norm(&x, &format!("{p}.norm_ffn"));
            let d = x.add(&self.ffn(&h, &format!("{p}.ffn")));
            e = if cfg.ablate_rt { d.clone() } else { M::vstack(&[&d, &e]) };
            memory_lengths.push(e.r);
            q = d;
        }
        let state: Vec<f64> =
            (0..cfg.d_model).map(|j| (0..q.r).map(|i| q.at(i, j)).sum::<f64>() / q.r as f64).collect();
        let s = self.layer_norm(&M::new(1, cfg.d_model, state.clone()), "head.norm");
        let head =
            |name: &str| self.linear(&self.linear(&s, &format!("{name}.fc1")).map(f64::tanh), &format!("{name}.fc2"));
        RefOutput { logits: head("actor").d, value: head("critic").d[0], memory_lengths, attention_rows: rows, state }
    }
}

/// Coefficients of the smooth surrogate loss used by the gradient checks:
/// `mean_b[w_b·log π(a_b) + (V_b − t_b)²] + Σ c_bk·logit_bk`.
#[derive(Debug, Clone)]
pub struct ProbeLoss {
    pub actions: Vec<usize>,
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
    pub logit_coef: Vec<f64>,
}

impl ProbeLoss {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            actions: (0..n).map(|_| rng.random_range(0..4)).collect(),
            weights: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            targets: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            logit_coef: (0..4 * n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    pub fn reference(&self, cfg: &IrcamConfig, p: &RefParams, obs: &[ModalityObservation]) -> f64 {
        let net = RefNet { cfg, p };
        let n = obs.len() as f64;
        let mut total = 0.0;
        for (b, o) in obs.iter().enumerate() {
            let out = net.forward(o);
            let lp = log_softmax(&out.logits);
            total += (self.weights[b] * lp[self.actions[b]] + (out.value - self.targets[b]).powi(2)) / n;
            total += (0..4).map(|k| self.logit_coef[b * 4 + k] * out.logits[k]).sum::<f64>();
        }
        total
    }
}

/// Plain BFS from the source over free cells, 4-connected.
pub fn bfs_distances(world: &GridWorld) -> Vec<Option<u32>> {
    let n = world.size();
    let mut dist = vec![None; n * n];
    let src = world.source();
    dist[src.row * n + src.col] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(c) = queue.pop_front() {
        let here = dist[c.row * n + c.col].unwrap();
        let neighbours = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)];
        for (dr, dc) in neighbours {
            let (r, cc) = (c.row as isize + dr, c.col as isize + dc);
            if r < 0 || cc < 0 || r >= n as isize || cc >= n as isize {
                continue;
            }
            let next = Cell { row: r as usize, col: cc as usize };
            if world.is_free(next) && dist[next.row * n + next.col].is_none() {
                dist[next.row * n + next.col] = Some(here + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

impl ProbeLoss {
    /// The same loss built on the tape; returns the loss and every
    /// parameter's gradient by name (missing gradients read as zeros).
    pub fn analytic(&self, net: &mut IrcamNet, obs: &[ModalityObservation]) -> (f64, BTreeMap<String, Vec<f64>>) {
        let n = obs.len();
        let refs: Vec<&ModalityObservation> = obs.iter().collect();
        let batch = ObservationBatch::new(net.config(), &refs).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &batch, false).unwrap();
        let f32s = |xs: &[f64]| xs.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let lp = g.log_softmax_last_dim(out.logits).unwrap();
        let picked = g.pick_last_dim(lp, &self.actions).unwrap();
        let w = g.constant(Tensor::new(vec![n], f32s(&self.weights)).unwrap()).unwrap();
        let pg = g.mul(picked, w).unwrap();
        let t = g.constant(Tensor::new(vec![n], f32s(&self.targets)).unwrap()).unwrap();
        let dv = g.sub(out.value, t).unwrap();
        let sq = g.mul(dv, dv).unwrap();
        let per = g.add(pg, sq).unwrap();
        let m = g.mean(per).unwrap();
        let c = g.constant(Tensor::new(vec![n, 4], f32s(&self.logit_coef)).unwrap()).unwrap();
        let cl = g.mul(out.logits, c).unwrap();
        let s = g.sum(cl).unwrap();
        let loss = g.add(m, s).unwrap();
        g.backward(loss).unwrap();
        net.params_mut().clear_grads();
        g.accumulate_param_grads(net.params_mut());
        let grads = net
            .params()
            .iter()
            .map(|(_, name, t)| {
                let gr = t.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.iter().map(|&v| v as f64).collect());
                (name.to_string(), gr)
            })
            .collect();
        (g.value(loss).item() as f64, grads)
    }
}

/// Per-tensor comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub numel: usize,
    /// `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖)`
    pub rel_err: f64,
    pub fd_norm: f64,
}

pub fn gradient_check(cfg: &IrcamConfig, batch: usize, seed: u64, step: f64) -> Vec<GradCheck> {
    let mut net = IrcamNet::new(cfg.clone()).unwrap();
    let obs = random_batch(cfg, batch, seed);
    let loss = ProbeLoss::random(batch, seed ^ 0x5eed);
    let (_, analytic) = loss.analytic(&mut net, &obs);
    let base = RefParams::from_net(&net);
    let mut out = Vec::new();
    for (name, (_, values)) in &base.values {
        let mut fd = Vec::with_capacity(values.len());
        let mut p = base.clone();
        for i in 0..values.len() {
            let orig = values[i];
            p.values.get_mut(name).unwrap().1[i] = orig + step;
            let up = loss.reference(cfg, &p, &obs);
            p.values.get_mut(name).unwrap().1[i] = orig - step;
            let down = loss.reference(cfg, &p, &obs);
            p.values.get_mut(name).unwrap().1[i] = orig;
            fd.push((up - down) / (2.0 * step));
        }
        let ga = &analytic[name];
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = ga.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(ga).max(norm(&fd));
        out.push(GradCheck {
            name: name.clone(),
            numel: values.len(),
            rel_err: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
            fd_norm: norm(&fd),
        });
    }
    out
}
