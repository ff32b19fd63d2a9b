mod support;

use ircam::net::{
    multi_head_attention, AttentionStage, AttentionVars, HeadWeights, IrcamConfig, IrcamNet, MultimodalSequence,
    ObservationBatch, Provenance,
};
use ircam::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{random_batch, toy_config, RefNet, RefParams};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

struct Mha {
    g: Graph,
    w: AttentionVars,
}

fn mha_weights(d: usize, heads: usize, seed: u64) -> Mha {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let dk = d / heads;
    let mut mk = |g: &mut Graph, s: &[usize]| g.constant(rand_tensor(s, &mut rng)).unwrap();
    let q = (0..heads).map(|_| mk(&mut g, &[d, dk])).collect();
    let k = (0..heads).map(|_| mk(&mut g, &[d, dk])).collect();
    let v = (0..heads).map(|_| mk(&mut g, &[d, dk])).collect();
    let out = mk(&mut g, &[heads * dk, d]);
    Mha { g, w: AttentionVars { q, k, v, out } }
}

fn run_mha(m: &mut Mha, q: &Tensor, kv: &Tensor) -> (Vec<f32>, Vec<HeadWeights>) {
    let qv = m.g.constant(q.clone()).unwrap();
    let kvv = m.g.constant(kv.clone()).unwrap();
    let mut cap = Vec::new();
    let y = multi_head_attention(&mut m.g, qv, kvv, &m.w, Some(&mut cap)).unwrap();
    (m.g.value(y).data().to_vec(), cap)
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn memory_grows_by_n_query_for_six_iterations() {
    let obs = random_batch(&IrcamConfig::default(), 2, 1);
    for ablate_rt in [false, true] {
        let cfg = IrcamConfig { ablate_rt, n_dec_iters: 6, ..IrcamConfig::default() };
        let net = IrcamNet::new(cfg.clone()).unwrap();
        let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
        let l0 = cfg.initial_len();
        assert_eq!(fwd.initial_len, l0);
        let want: Vec<usize> = (1..=6).map(|j| if ablate_rt { cfg.n_query } else { l0 + j * cfg.n_query }).collect();
        assert_eq!(fwd.memory_lengths, want);
        assert_eq!(fwd.memory.provenance.len(), *want.last().unwrap());
    }
}

#[test]
fn memory_provenance_orders_newest_first() {
    let cfg = IrcamConfig { n_dec_iters: 3, ..toy_config(2) };
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let obs = random_batch(&cfg, 1, 2);
    let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
    let p = &fwd.memory.provenance;
    let nq = cfg.n_query;
    assert!(p[..nq].iter().all(|&t| t == Provenance::Decoded(3)));
    assert!(p[nq..2 * nq].iter().all(|&t| t == Provenance::Decoded(2)));
    assert!(p[2 * nq..3 * nq].iter().all(|&t| t == Provenance::Decoded(1)));
    let rest = &p[3 * nq..];
    assert_eq!(rest.iter().filter(|&&t| t == Provenance::Audio).count(), cfg.audio_tokens());
    assert_eq!(rest.iter().filter(|&&t| t == Provenance::Visual).count(), cfg.visual_tokens());
    assert!(rest[..cfg.audio_tokens()].iter().all(|&t| t == Provenance::Audio));
}

#[test]
fn single_iteration_appends_one_query_block() {
    let cfg = IrcamConfig { n_dec_iters: 1, ..toy_config(3) };
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let obs = random_batch(&cfg, 1, 3);
    let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(fwd.memory_lengths, vec![cfg.initial_len() + cfg.n_query]);
}

#[test]
fn reference_memory_lengths_agree() {
    let cfg = IrcamConfig { n_dec_iters: 4, ..toy_config(4) };
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let obs = random_batch(&cfg, 1, 4);
    let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
    let p = RefParams::from_net(&net);
    let r = RefNet { cfg: &cfg, p: &p }.forward(&obs[0]);
    assert_eq!(r.memory_lengths, fwd.memory_lengths);
}

#[test]
fn every_attention_row_is_a_distribution_on_random_inputs() {
    let mut worst = 0.0f32;
    for (i, cfg) in [toy_config(5), IrcamConfig::default(), IrcamConfig { ablate_rt: true, ..toy_config(6) }]
        .into_iter()
        .enumerate()
    {
        let net = IrcamNet::new(cfg.clone()).unwrap();
        let obs = random_batch(&cfg, 100, 10 + i as u64);
        let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
        let stages = cfg.n_enc_layers + cfg.n_dec_iters;
        assert_eq!(fwd.attention.len(), stages * cfg.n_heads);
        for map in &fwd.attention {
            let w = &map.weights;
            assert_eq!(w.keys, map.key_provenance.len());
            for b in 0..w.batch {
                for q in 0..w.queries {
                    let row = w.row(b, q);
                    assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                    worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-6, "worst row-sum error {worst:e}");
}

#[test]
fn decoder_heatmaps_cover_the_whole_memory() {
    let cfg = toy_config(7);
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let obs = random_batch(&cfg, 1, 7);
    let (_, fwd) = net.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
    for j in 1..=cfg.n_dec_iters {
        let maps: Vec<_> =
            fwd.attention.iter().filter(|m| m.stage == AttentionStage::Decoder { iteration: j }).collect();
        assert_eq!(maps.len(), cfg.n_heads);
        let keys = cfg.initial_len() + (j - 1) * cfg.n_query;
        for m in maps {
            assert_eq!((m.weights.queries, m.weights.keys), (cfg.n_query, keys));
        }
    }
}

fn zeroed_outputs(cfg: IrcamConfig) -> IrcamNet {
    let mut net = IrcamNet::new(cfg).unwrap();
    for name in net.output_projection_names() {
        let id = net.params().id(&name).unwrap();
        net.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    net
}

#[test]
fn zero_output_projections_make_blocks_identities() {
    let cfg = IrcamConfig { n_enc_layers: 2, n_dec_iters: 3, ..toy_config(8) };
    let net = zeroed_outputs(cfg.clone());
    let obs = random_batch(&cfg, 3, 8);
    let batch = ObservationBatch::new(&cfg, &obs.iter().collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let b = net.bind(&mut g).unwrap();
    let e0 = net.embed(&mut g, &b, &batch).unwrap();
    let mut worst = 0.0f32;
    let mut diff = |g: &Graph, x: Var, y: Var| {
        for (a, c) in g.value(x).data().iter().zip(g.value(y).data()) {
            worst = worst.max((a - c).abs());
        }
    };
    let mut e = e0.clone();
    for layer in 0..net.encoder_layers() {
        let next = net.encoder_block(&mut g, &b, layer, &e, None).unwrap();
        assert_eq!(next.provenance, e.provenance);
        diff(&g, next.tokens, e.tokens);
        e = next;
    }
    let q = net.initial_queries(&mut g, &b, 3).unwrap();
    for j in 1..=cfg.n_dec_iters {
        let d = net.decoder_step(&mut g, &b, net.decoder_layer_for(j), q, &e, None).unwrap();
        diff(&g, d, q);
    }
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn single_key_attention_ignores_queries() {
    let d = 8;
    let mut m = mha_weights(d, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kv = rand_tensor(&[1, 1, d], &mut rng);
    let (y1, cap) = run_mha(&mut m, &rand_tensor(&[1, 3, d], &mut rng), &kv);
    let (y2, _) = run_mha(&mut m, &rand_tensor(&[1, 3, d], &mut rng), &kv);
    assert!(cap.iter().all(|h| h.weights.iter().all(|&w| w == 1.0)));
    assert!(close(&y1, &y2, 1e-6));
    // every row equals concat_i(kv W^V_i) W^O
    let mut g = Graph::new();
    let kvv = g.constant(Tensor::new(vec![1, d], kv.data().to_vec()).unwrap()).unwrap();
    let heads: Vec<Var> =
        m.w.v
            .iter()
            .map(|&v| {
                let vt = g.constant(m.g.value(v).clone()).unwrap();
                g.matmul(kvv, vt).unwrap()
            })
            .collect();
    let cat = g.concat(&heads, 1).unwrap();
    let wo = g.constant(m.g.value(m.w.out).clone()).unwrap();
    let want = g.matmul(cat, wo).unwrap();
    for row in y1.chunks(d) {
        assert!(close(row, g.value(want).data(), 1e-5));
    }
}

fn rows_permuted(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let d = s[2];
    let mut out = Vec::with_capacity(t.numel());
    for b in 0..s[0] {
        for &r in perm {
            let start = (b * s[1] + r) * d;
            out.extend_from_slice(&t.data()[start..start + d]);
        }
    }
    Tensor::new(vec![s[0], perm.len(), d], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, lq in 1usize..5, lk in 1usize..7) {
        let mut m = mha_weights(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let (_, cap) = run_mha(&mut m, &rand_tensor(&[2, lq, 8], &mut rng), &rand_tensor(&[2, lk, 8], &mut rng));
        for h in &cap {
            for b in 0..2 {
                for q in 0..lq {
                    prop_assert!((h.row(b, q).iter().sum::<f32>() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn duplicating_every_key_leaves_output_unchanged(seed in 0u64..1000, lk in 1usize..6) {
        let mut m = mha_weights(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let q = rand_tensor(&[1, 3, 8], &mut rng);
        let kv = rand_tensor(&[1, lk, 8], &mut rng);
        let doubled: Vec<usize> = (0..lk).chain(0..lk).collect();
        let (a, _) = run_mha(&mut m, &q, &kv);
        let (b, _) = run_mha(&mut m, &q, &rows_permuted(&kv, &doubled));
        prop_assert!(close(&a, &b, 1e-5));
    }

    #[test]
    fn permuting_keys_leaves_output_unchanged(seed in 0u64..1000, lk in 2usize..7) {
        let mut m = mha_weights(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let q = rand_tensor(&[2, 2, 8], &mut rng);
        let kv = rand_tensor(&[2, lk, 8], &mut rng);
        let mut perm: Vec<usize> = (0..lk).collect();
        perm.rotate_left(1 + seed as usize % (lk - 1));
        perm.swap(0, lk - 1);
        let (a, _) = run_mha(&mut m, &q, &kv);
        let (b, _) = run_mha(&mut m, &q, &rows_permuted(&kv, &perm));
        prop_assert!(close(&a, &b, 1e-5));
    }

    #[test]
    fn decoder_step_is_invariant_to_memory_order(seed in 0u64..200) {
        let cfg = toy_config(seed);
        let net = IrcamNet::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = 6;
        let mem = rand_tensor(&[1, l, cfg.d_model], &mut rng);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.reverse();
        let out = |mem: &Tensor| {
            let mut g = Graph::new();
            let b = net.bind(&mut g).unwrap();
            let tokens = g.constant(mem.clone()).unwrap();
            let e = MultimodalSequence { tokens, provenance: vec![Provenance::Audio; l] };
            let q = net.initial_queries(&mut g, &b, 1).unwrap();
            let d = net.decoder_step(&mut g, &b, 0, q, &e, None).unwrap();
            g.value(d).data().to_vec()
        };
        prop_assert!(close(&out(&mem), &out(&rows_permuted(&mem, &perm)), 1e-5));
    }

    #[test]
    fn encoder_keeps_length_for_any_sequence(seed in 0u64..200, l in 1usize..12) {
        let cfg = toy_config(seed);
        let net = IrcamNet::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let b = net.bind(&mut g).unwrap();
        let tokens = g.constant(rand_tensor(&[2, l, cfg.d_model], &mut rng)).unwrap();
        let e = MultimodalSequence { tokens, provenance: vec![Provenance::Visual; l] };
        let out = net.encoder_block(&mut g, &b, 0, &e, None).unwrap();
        prop_assert_eq!(g.shape(out.tokens), &[2, l, cfg.d_model][..]);
        prop_assert_eq!(out.len(), l);
    }

    #[test]
    fn policy_is_a_distribution(seed in 0u64..500) {
        let cfg = toy_config(seed);
        let net = IrcamNet::new(cfg.clone()).unwrap();
        let obs = random_batch(&cfg, 2, seed);
        for out in net.policy(&obs.iter().collect::<Vec<_>>()).unwrap() {
            prop_assert!(out.action_logits.iter().all(|l| l.is_finite()));
            prop_assert!((out.probabilities().iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn visual_patches_are_local() {
    let cfg = IrcamConfig { view_height: 8, view_width: 8, visual_patch: 4, ..toy_config(9) };
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&[1, 8, 8, 2], &mut rng);
    let mut b = a.clone();
    // one cell inside the bottom-right patch
    b.data_mut()[((6 * 8) + 5) * 2] += 1.0;
    let tokens = |t: &Tensor| {
        let mut g = Graph::new();
        let bound = net.bind(&mut g).unwrap();
        let v = g.constant(t.clone()).unwrap();
        let y = net.patch_embed_visual(&mut g, &bound, v).unwrap();
        assert_eq!(g.shape(y), &[1, 4, cfg.d_model]);
        g.value(y).data().to_vec()
    };
    let (ta, tb) = (tokens(&a), tokens(&b));
    for (p, (x, y)) in ta.chunks(cfg.d_model).zip(tb.chunks(cfg.d_model)).enumerate() {
        assert_eq!(x == y, p != 3, "patch {p}");
    }
}

#[test]
fn zero_inputs_leave_bias_and_position_tokens() {
    let cfg = IrcamConfig { audio_bins: 16, audio_patch: 8, ..toy_config(10) };
    let net = IrcamNet::new(cfg.clone()).unwrap();
    let d = cfg.d_model;
    let p = net.params();
    let get = |n: &str| p.by_name(n).unwrap().data().to_vec();
    let mut g = Graph::new();
    let bound = net.bind(&mut g).unwrap();
    let audio = g.constant(Tensor::zeros([1, 2, 16])).unwrap();
    let a = net.patch_embed_audio(&mut g, &bound, audio).unwrap();
    assert_eq!(g.shape(a), &[1, 4, d]);
    let (bias, pos, ear) = (get("embed.audio.proj.bias"), get("embed.audio.pos"), get("embed.audio.ear"));
    for (tok, row) in g.value(a).data().chunks(d).enumerate() {
        let (e, t) = (tok / 2, tok % 2);
        for j in 0..d {
            assert!((row[j] - (bias[j] + pos[t * d + j] + ear[e * d + j])).abs() < 1e-6);
        }
    }
    let visual = g.constant(Tensor::zeros([1, 4, 4, 2])).unwrap();
    let v = net.patch_embed_visual(&mut g, &bound, visual).unwrap();
    let (vb, vp) = (get("embed.visual.proj.bias"), get("embed.visual.pos"));
    for (tok, row) in g.value(v).data().chunks(d).enumerate() {
        for j in 0..d {
            assert!((row[j] - (vb[j] + vp[tok * d + j])).abs() < 1e-6);
        }
    }
}

#[test]
fn swapping_ears_with_symmetric_weights_swaps_tokens() {
    let cfg = IrcamConfig { audio_bins: 16, audio_patch: 8, ..toy_config(11) };
    let mut net = IrcamNet::new(cfg.clone()).unwrap();
    let d = cfg.d_model;
    let ear_id = net.params().id("embed.audio.ear").unwrap();
    let ear = net.params().get(ear_id).data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = rand_tensor(&[1, 2, 16], &mut rng);
    let mut swapped = spec.data()[16..].to_vec();
    swapped.extend_from_slice(&spec.data()[..16]);
    let swapped = Tensor::new(vec![1, 2, 16], swapped).unwrap();
    let run = |net: &IrcamNet, t: &Tensor| {
        let mut g = Graph::new();
        let b = net.bind(&mut g).unwrap();
        let a = g.constant(t.clone()).unwrap();
        let y = net.patch_embed_audio(&mut g, &b, a).unwrap();
        g.value(y).data().to_vec()
    };
    let before = run(&net, &spec);
    let mut flipped = ear[d..].to_vec();
    flipped.extend_from_slice(&ear[..d]);
    net.params_mut().get_mut(ear_id).data_mut().copy_from_slice(&flipped);
    let after = run(&net, &swapped);
    let per_ear = 2 * d;
    assert!(close(&before[..per_ear], &after[per_ear..], 1e-6));
    assert!(close(&before[per_ear..], &after[..per_ear], 1e-6));
}

#[test]
fn zero_state_with_zero_heads_is_uniform() {
    let cfg = toy_config(12);
    let mut net = IrcamNet::new(cfg.clone()).unwrap();
    for name in ["actor.fc2.weight", "actor.fc2.bias", "critic.fc2.weight", "critic.fc2.bias"] {
        let id = net.params().id(name).unwrap();
        net.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let b = net.bind(&mut g).unwrap();
    let state = g.constant(Tensor::zeros([3, cfg.d_model])).unwrap();
    let (logits, value) = net.actor_critic(&mut g, &b, state).unwrap();
    assert_eq!(g.shape(logits), &[3, 4]);
    assert!(g.value(logits).data().iter().all(|&l| l == 0.0));
    assert!(g.value(value).data().iter().all(|&v| v == 0.0));
}

#[test]
fn seeded_initialization_is_bitwise_reproducible() {
    let cfg = toy_config(13);
    let a = IrcamNet::new(cfg.clone()).unwrap().to_checkpoint().to_bytes().unwrap();
    let b = IrcamNet::new(cfg.clone()).unwrap().to_checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let c = IrcamNet::new(IrcamConfig { seed: 14, ..cfg }).unwrap().to_checkpoint().to_bytes().unwrap();
    assert_ne!(a, c);
}

#[test]
fn ablations_change_exactly_their_parameters() {
    let full = IrcamNet::new(IrcamConfig::default()).unwrap();
    let names = |n: &IrcamNet| n.params().iter().map(|(_, s, _)| s.to_string()).collect::<Vec<_>>();
    let wo_en = IrcamNet::new(IrcamConfig { ablate_en: true, ..IrcamConfig::default() }).unwrap();
    assert_eq!(full.params().numel() - wo_en.params().numel(), full.encoder_numel());
    assert!(names(&wo_en).iter().all(|n| !n.starts_with("encoder.")));
    let wo_rt = IrcamNet::new(IrcamConfig { ablate_rt: true, ..IrcamConfig::default() }).unwrap();
    assert_eq!(names(&wo_rt), names(&full));
    let wo_pe = IrcamNet::new(IrcamConfig { ablate_pe: true, ..IrcamConfig::default() }).unwrap();
    assert!(names(&wo_pe).iter().any(|n| n.starts_with("embed.audio.conv1")));
    let obs = random_batch(&IrcamConfig::default(), 2, 15);
    let (_, fwd) = wo_pe.policy_with_attention(&obs.iter().collect::<Vec<_>>()).unwrap();
    let audio = fwd.memory.provenance.iter().filter(|&&p| p == Provenance::Audio).count();
    assert_eq!(audio, IrcamConfig { ablate_pe: true, ..IrcamConfig::default() }.audio_tokens());
}

#[test]
fn indivisible_shapes_are_config_errors() {
    for cfg in [
        IrcamConfig { view_height: 7, ..IrcamConfig::default() },
        IrcamConfig { audio_bins: 30, ..IrcamConfig::default() },
        IrcamConfig { d_model: 30, n_heads: 4, ..IrcamConfig::default() },
        IrcamConfig { n_query: 0, ..IrcamConfig::default() },
        IrcamConfig { n_dec_iters: 0, ..IrcamConfig::default() },
    ] {
        assert!(IrcamNet::new(cfg).is_err());
    }
}
