use crate::tensor::{Graph, Result, Var};

/// Bound per-head projections `W^Q_i, W^K_i, W^V_i` (`[d_model, d_k]`) and the
/// shared output projection `W^O` (`[n_heads·d_k, d_model]`).
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub out: Var,
}

/// Softmax weights of one head, `[batch, queries, keys]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub head: usize,
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
}

impl HeadWeights {
    pub fn row(&self, b: usize, q: usize) -> &[f32] {
        let start = (b * self.queries + q) * self.keys;
        &self.weights[start..start + self.keys]
    }
}

/// Multi-head scaled dot-product attention from `q_in` (`[B, Lq, d]`) over
/// `kv` (`[B, Lk, d]`). Per head: `softmax(q W^Q (kv W^K)ᵀ / √d_k) · kv W^V`;
/// heads are concatenated and projected by `W^O`.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    kv: Var,
    w: &AttentionVars,
    mut capture: Option<&mut Vec<HeadWeights>>,
) -> Result<Var> {
    let n_heads = w.q.len();
    let d_k = g.shape(w.q[0])[1];
    let scale = 1.0 / (d_k as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = g.linear(q_in, w.q[h], None)?;
        let k = g.linear(kv, w.k[h], None)?;
        let v = g.linear(kv, w.v[h], None)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_last_dim(scores)?;
        if let Some(sink) = capture.as_deref_mut() {
            let s = g.shape(attn);
            sink.push(HeadWeights {
                head: h,
                batch: s[0],
                queries: s[1],
                keys: s[2],
                weights: g.value(attn).data().to_vec(),
            });
        }
        heads.push(g.bmm(attn, v, false)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
    g.linear(joined, w.out, None)
}
