//! Cached inference path.
//!
//! Weights are laid out per tensor-parallel rank: attention heads and MLP
//! columns are split column-wise, the output projections row-wise, and
//! embeddings, norms and heads are replicated. Each rank produces a partial
//! residual update; partials are summed in rank order before the replicated
//! bias is added. With `tp = 1` every dot product accumulates in the same
//! order as the graph forward, so cached decoding reproduces it exactly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{idx, HeadKind, Model, ModelConfig};
use crate::tensor::kernels::{gelu, layer_norm_row, matmul, matmul_acc, softmax_row};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Keys and values for every layer, laid out
/// `[layer][batch][heads][capacity][d_head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    n_layers: usize,
    batch: usize,
    n_heads: usize,
    capacity: usize,
    d_head: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    fill: Vec<usize>,
}

impl KVCache {
    pub fn new(n_layers: usize, batch: usize, n_heads: usize, capacity: usize, d_head: usize) -> Self {
        let per_layer = batch * n_heads * capacity * d_head;
        KVCache {
            n_layers,
            batch,
            n_heads,
            capacity,
            d_head,
            k: vec![vec![0.0; per_layer]; n_layers],
            v: vec![vec![0.0; per_layer]; n_layers],
            fill: vec![0; batch],
        }
    }

    /// `2 · layers · batch · heads · capacity · d_head · 4`
    pub fn bytes_for(n_layers: usize, batch: usize, n_heads: usize, capacity: usize, d_head: usize) -> u64 {
        2 * (n_layers * batch * n_heads * capacity * d_head) as u64 * 4
    }

    pub fn bytes(&self) -> u64 {
        Self::bytes_for(self.n_layers, self.batch, self.n_heads, self.capacity, self.d_head)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self, slot: usize) -> usize {
        self.fill[slot]
    }

    pub fn is_empty(&self, slot: usize) -> bool {
        self.fill[slot] == 0
    }

    pub fn reset(&mut self, slot: usize) {
        self.fill[slot] = 0;
    }

    fn offset(&self, slot: usize, head: usize, pos: usize) -> usize {
        ((slot * self.n_heads + head) * self.capacity + pos) * self.d_head
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SharedLayer {
    ln1_g: Vec<f32>,
    ln1_b: Vec<f32>,
    bo: Vec<f32>,
    ln2_g: Vec<f32>,
    ln2_b: Vec<f32>,
    b2: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
struct RankLayer {
    wq: Vec<f32>,
    bq: Vec<f32>,
    wk: Vec<f32>,
    bk: Vec<f32>,
    wv: Vec<f32>,
    bv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
}

impl RankLayer {
    fn floats(&self) -> usize {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.w1,
            &self.b1, &self.w2,
        ]
        .iter()
        .map(|v| v.len())
        .sum()
    }
}

/// Model weights partitioned for `tp` tensor-parallel ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct TpLayout {
    config: ModelConfig,
    tp: usize,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    shared: Vec<SharedLayer>,
    lnf_g: Vec<f32>,
    lnf_b: Vec<f32>,
    head_w: Vec<f32>,
    head_b: Vec<f32>,
    ranks: Vec<Vec<RankLayer>>,
}

fn column_block(w: &[f32], rows: usize, cols: usize, start: usize, end: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * (end - start));
    for r in 0..rows {
        out.extend_from_slice(&w[r * cols + start..r * cols + end]);
    }
    out
}

impl TpLayout {
    pub fn new(model: &Model, tp: usize) -> Result<Self> {
        let cfg = &model.config;
        if tp == 0 || cfg.n_heads % tp != 0 || cfg.d_ff % tp != 0 {
            return Err(Error::Config(format!(
                "tp degree {tp} must divide n_heads {} and d_ff {}",
                cfg.n_heads, cfg.d_ff
            )));
        }
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let c = d / tp;
        let fl = f / tp;
        let p = |i: usize| model.params[i].data();
        let mut shared = Vec::with_capacity(cfg.n_layers);
        let mut ranks = vec![Vec::with_capacity(cfg.n_layers); tp];
        for l in 0..cfg.n_layers {
            let w = |which| p(idx::layer(l, which));
            shared.push(SharedLayer {
                ln1_g: w(idx::LN1_G).to_vec(),
                ln1_b: w(idx::LN1_B).to_vec(),
                bo: w(idx::BO).to_vec(),
                ln2_g: w(idx::LN2_G).to_vec(),
                ln2_b: w(idx::LN2_B).to_vec(),
                b2: w(idx::B2).to_vec(),
            });
            for (r, rank) in ranks.iter_mut().enumerate() {
                let (a, b) = (r * c, (r + 1) * c);
                let (fa, fb) = (r * fl, (r + 1) * fl);
                rank.push(RankLayer {
                    wq: column_block(w(idx::WQ), d, d, a, b),
                    bq: w(idx::BQ)[a..b].to_vec(),
                    wk: column_block(w(idx::WK), d, d, a, b),
                    bk: w(idx::BK)[a..b].to_vec(),
                    wv: column_block(w(idx::WV), d, d, a, b),
                    bv: w(idx::BV)[a..b].to_vec(),
                    wo: w(idx::WO)[a * d..b * d].to_vec(),
                    w1: column_block(w(idx::W1), d, f, fa, fb),
                    b1: w(idx::B1)[fa..fb].to_vec(),
                    w2: w(idx::W2)[fa * d..fb * d].to_vec(),
                });
            }
        }
        let base = idx::final_base(cfg.n_layers);
        let head_b = match cfg.head_kind {
            HeadKind::Lm => Vec::new(),
            HeadKind::Scalar => p(base + 3).to_vec(),
        };
        Ok(TpLayout {
            config: cfg.clone(),
            tp,
            tok_emb: p(idx::TOK_EMB).to_vec(),
            pos_emb: p(idx::POS_EMB).to_vec(),
            shared,
            lnf_g: p(base).to_vec(),
            lnf_b: p(base + 1).to_vec(),
            head_w: p(base + 2).to_vec(),
            head_b,
            ranks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tp(&self) -> usize {
        self.tp
    }

    /// Floats per position of the output: vocab for LM heads, 1 for scalar.
    pub fn out_dim(&self) -> usize {
        match self.config.head_kind {
            HeadKind::Lm => self.config.vocab_size,
            HeadKind::Scalar => 1,
        }
    }

    /// Bytes of weights resident on one rank (replicated plus its shard).
    pub fn rank_weight_bytes(&self, rank: usize) -> u64 {
        let replicated = self.tok_emb.len()
            + self.pos_emb.len()
            + self
                .shared
                .iter()
                .map(|s| s.ln1_g.len() * 4 + s.bo.len() + s.b2.len())
                .sum::<usize>()
            + self.lnf_g.len()
            + self.lnf_b.len()
            + self.head_w.len()
            + self.head_b.len();
        let own: usize = self.ranks[rank].iter().map(RankLayer::floats).sum();
        4 * (replicated + own) as u64
    }

    /// One cache per rank, each holding that rank's heads.
    pub fn new_caches(&self, batch: usize, capacity: usize) -> Vec<KVCache> {
        let heads = self.config.n_heads / self.tp;
        (0..self.tp)
            .map(|_| KVCache::new(self.config.n_layers, batch, heads, capacity, self.config.d_head()))
            .collect()
    }

    /// Runs `tokens` through the model at the next free positions of `slot`,
    /// appending their keys and values. Returns `[n, out_dim]` outputs.
    pub fn forward_chunk(&self, caches: &mut [KVCache], slot: usize, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let cfg = &self.config;
        if caches.len() != self.tp {
            return Err(Error::Contract(format!(
                "{} caches for tp degree {}",
                caches.len(),
                self.tp
            )));
        }
        if slot >= caches[0].batch {
            return Err(Error::Contract(format!(
                "slot {slot} outside cache batch {}",
                caches[0].batch
            )));
        }
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Contract("empty token chunk".into()));
        }
        let start = caches[0].fill[slot];
        let needed = start + n;
        if needed > caches[0].capacity {
            return Err(Error::Capacity {
                needed,
                capacity: caches[0].capacity,
            });
        }
        if needed > cfg.max_seq_len {
            return Err(Error::Length {
                len: needed,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::dim(
                "embedding",
                format!("token {bad} outside vocab {}", cfg.vocab_size),
            ));
        }

        let d = cfg.d_model;
        let dh = cfg.d_head();
        let hl = cfg.n_heads / self.tp;
        let c = hl * dh;
        let fl = cfg.d_ff / self.tp;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        let mut x = vec![0.0f32; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &self.tok_emb[t as usize * d..(t as usize + 1) * d];
            let pe = &self.pos_emb[(start + i) * d..(start + i + 1) * d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        let mut hn = vec![0.0f32; n * d];
        let mut xhat = vec![0.0f32; d];
        let mut scores = vec![0.0f32; needed];
        let mut probs = vec![0.0f32; needed];

        for (l, sh) in self.shared.iter().enumerate() {
            for i in 0..n {
                layer_norm_row(&x[i * d..(i + 1) * d], &sh.ln1_g, &sh.ln1_b, &mut xhat, &mut hn[i * d..(i + 1) * d]);
            }
            let mut acc = vec![0.0f32; n * d];
            for (r, cache) in caches.iter_mut().enumerate() {
                let w = &self.ranks[r][l];
                let q = project(&hn, &w.wq, &w.bq, n, d, c);
                let k = project(&hn, &w.wk, &w.bk, n, d, c);
                let v = project(&hn, &w.wv, &w.bv, n, d, c);
                for i in 0..n {
                    for h in 0..hl {
                        let off = cache.offset(slot, h, start + i);
                        cache.k[l][off..off + dh].copy_from_slice(&k[i * c + h * dh..i * c + (h + 1) * dh]);
                        cache.v[l][off..off + dh].copy_from_slice(&v[i * c + h * dh..i * c + (h + 1) * dh]);
                    }
                }
                let mut ctx = vec![0.0f32; n * c];
                for h in 0..hl {
                    let base = cache.offset(slot, h, 0);
                    for i in 0..n {
                        let s = start + i + 1;
                        let qi = &q[i * c + h * dh..i * c + (h + 1) * dh];
                        for j in 0..s {
                            let kj = &cache.k[l][base + j * dh..base + (j + 1) * dh];
                            let mut dot = 0.0f32;
                            for (a, b) in qi.iter().zip(kj) {
                                dot += a * b;
                            }
                            scores[j] = dot * inv_sqrt;
                        }
                        softmax_row(&scores[..s], &mut probs[..s]);
                        matmul_acc(
                            &probs[..s],
                            &cache.v[l][base..base + s * dh],
                            &mut ctx[i * c + h * dh..i * c + (h + 1) * dh],
                            1,
                            s,
                            dh,
                        );
                    }
                }
                let partial = matmul(&ctx, &w.wo, n, c, d);
                for (a, p) in acc.iter_mut().zip(&partial) {
                    *a += p;
                }
            }
            add_rows(&mut acc, &sh.bo);
            for (xv, a) in x.iter_mut().zip(&acc) {
                *xv += a;
            }

            for i in 0..n {
                layer_norm_row(&x[i * d..(i + 1) * d], &sh.ln2_g, &sh.ln2_b, &mut xhat, &mut hn[i * d..(i + 1) * d]);
            }
            let mut acc = vec![0.0f32; n * d];
            for r in 0..self.tp {
                let w = &self.ranks[r][l];
                let mut f = project(&hn, &w.w1, &w.b1, n, d, fl);
                for v in f.iter_mut() {
                    *v = gelu(*v);
                }
                let partial = matmul(&f, &w.w2, n, fl, d);
                for (a, p) in acc.iter_mut().zip(&partial) {
                    *a += p;
                }
            }
            add_rows(&mut acc, &sh.b2);
            for (xv, a) in x.iter_mut().zip(&acc) {
                *xv += a;
            }
        }
        for cache in caches.iter_mut() {
            cache.fill[slot] = needed;
        }

        for i in 0..n {
            layer_norm_row(&x[i * d..(i + 1) * d], &self.lnf_g, &self.lnf_b, &mut xhat, &mut hn[i * d..(i + 1) * d]);
        }
        Ok(match cfg.head_kind {
            HeadKind::Lm => matmul(&hn, &self.head_w, n, d, cfg.vocab_size),
            HeadKind::Scalar => project(&hn, &self.head_w, &self.head_b, n, d, 1),
        })
    }
}

fn project(x: &[f32], w: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut y = matmul(x, w, n, k, m);
    add_rows(&mut y, b);
    y
}

fn add_rows(y: &mut [f32], b: &[f32]) {
    for row in y.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// A partitioned model together with its per-rank KV caches.
#[derive(Clone, Debug)]
pub struct Session {
    layout: Arc<TpLayout>,
    caches: Vec<KVCache>,
}

impl Session {
    pub fn new(layout: Arc<TpLayout>, batch: usize, capacity: usize) -> Result<Self> {
        if batch == 0 || capacity == 0 {
            return Err(Error::Contract("session needs a positive batch and capacity".into()));
        }
        if capacity > layout.config.max_seq_len {
            return Err(Error::Length {
                len: capacity,
                max: layout.config.max_seq_len,
            });
        }
        let caches = layout.new_caches(batch, capacity);
        Ok(Session { layout, caches })
    }

    pub fn layout(&self) -> &TpLayout {
        &self.layout
    }

    pub fn batch(&self) -> usize {
        self.caches[0].batch
    }

    pub fn capacity(&self) -> usize {
        self.caches[0].capacity
    }

    pub fn len(&self, slot: usize) -> usize {
        self.caches[0].fill[slot]
    }

    pub fn cache_bytes(&self) -> u64 {
        self.caches.iter().map(KVCache::bytes).sum()
    }

    pub fn caches(&self) -> &[KVCache] {
        &self.caches
    }

    pub fn reset(&mut self, slot: usize) {
        for c in &mut self.caches {
            c.reset(slot);
        }
    }

    pub fn reset_all(&mut self) {
        for slot in 0..self.batch() {
            self.reset(slot);
        }
    }

    /// Feeds a prompt into an empty slot and returns `[len, out_dim]`.
    pub fn prefill(&mut self, slot: usize, prompt: &[TokenId]) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        self.reset(slot);
        let out = self.layout.forward_chunk(&mut self.caches, slot, prompt)?;
        Tensor::new(vec![prompt.len(), self.layout.out_dim()], out)
    }

    /// Appends one token to `slot` and returns its `[out_dim]` output.
    pub fn step(&mut self, slot: usize, token: TokenId) -> Result<Vec<f32>> {
        if self.len(slot) == 0 {
            return Err(Error::Contract("incremental step on an empty prompt".into()));
        }
        self.layout.forward_chunk(&mut self.caches, slot, &[token])
    }

    /// One decode step across the whole batch: `[batch, out_dim]`.
    pub fn forward_incremental(&mut self, next: &[TokenId]) -> Result<Tensor> {
        if next.len() != self.batch() {
            return Err(Error::dim(
                "forward_incremental",
                format!("{} tokens for batch {}", next.len(), self.batch()),
            ));
        }
        let mut out = Vec::with_capacity(next.len() * self.layout.out_dim());
        for (slot, &t) in next.iter().enumerate() {
            out.extend(self.step(slot, t)?);
        }
        Tensor::new(vec![next.len(), self.layout.out_dim()], out)
    }
}

impl Model {
    /// Unpartitioned inference session over `batch` slots.
    pub fn session(&self, batch: usize, capacity: usize) -> Result<Session> {
        Session::new(Arc::new(TpLayout::new(self, 1)?), batch, capacity)
    }
}
