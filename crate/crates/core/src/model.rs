//! Deterministic toy transformer with incremental KV-cache forwarding.
//!
//! The model is intentionally small and fully pinned by its seed: weights
//! are drawn uniform in [-0.1, 0.1] from one xorshift64* stream in a fixed
//! order, all arithmetic is single-precision in a fixed loop order, and the
//! positional encoding is additive sinusoidal by absolute position, applied
//! once when a token is ingested. Positions are never re-based after
//! eviction, so cache surgery (strip, evict, alias) is pure metadata and
//! two paths that forward the same tokens at the same positions produce
//! bit-identical state.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::kv::{CellPool, RegionTag, SequenceId};
use crate::stats::{Cause, ForwardStats, Phase};
use crate::token::TokenId;

/// Vocabulary-wide scores produced at one absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f32>,
    pub position: u32,
}

impl Logits {
    pub fn new(values: Vec<f32>, position: u32) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite logit");
        Self { values, position }
    }
}

/// Greedy argmax with ties broken toward the lowest token id.
/// Returns the winning token and the logit gap (top-1 minus top-2).
pub fn greedy_sample(logits: &Logits) -> (TokenId, f32) {
    greedy_over(&logits.values)
}

pub fn greedy_over(values: &[f32]) -> (TokenId, f32) {
    debug_assert!(!values.is_empty());
    let mut best = 0usize;
    let mut top1 = f32::NEG_INFINITY;
    let mut top2 = f32::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > top1 {
            top2 = top1;
            top1 = v;
            best = i;
        } else if v > top2 {
            top2 = v;
        }
    }
    let gap = if top2 == f32::NEG_INFINITY { 0.0 } else { top1 - top2 };
    (TokenId(best as u32), gap)
}

/// One forward batch: tokens of one sequence, appended starting at
/// `start_pos`, accounted under (`cause`, `phase`).
#[derive(Debug, Clone, Copy)]
pub struct ForwardRequest<'a> {
    pub seq: SequenceId,
    pub start_pos: u32,
    pub tokens: &'a [TokenId],
    pub region: RegionTag,
    pub cause: Cause,
    pub phase: Phase,
}

struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

pub struct Model {
    cfg: ModelConfig,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    w_out: Vec<f32>,
}

/// y[j] = sum_i x[i] * w[i * cols + j], accumulated in input order.
fn matvec(x: &[f32], w: &[f32], cols: usize, y: &mut [f32]) {
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// Sinusoidal positional term for absolute position `pos`.
pub(crate) fn positional(pos: u32, dim: usize, out: &mut [f32]) {
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        out[i] = if i % 2 == 0 { angle.sin() as f32 } else { angle.cos() as f32 };
    }
}

impl Model {
    /// Builds all weights from `cfg.weight_seed`. Draw order: embedding
    /// (vocab x d, row-major), then per layer wq, wk, wv, wo (d x d each),
    /// w1 (d x ff), w2 (ff x d), then the output projection (d x vocab).
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::Xorshift64Star::new(cfg.weight_seed);
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.next_f32_in(-0.1, 0.1)).collect()
        };
        let d = cfg.model_dim;
        let ff = cfg.ff_dim();
        let embed = draw(cfg.vocab_size * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: draw(d * d),
                wk: draw(d * d),
                wv: draw(d * d),
                wo: draw(d * d),
                w1: draw(d * ff),
                w2: draw(ff * d),
            })
            .collect();
        let w_out = draw(d * cfg.vocab_size);
        Ok(Self { cfg: cfg.clone(), embed, layers, w_out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Raw weight views for the stateless reference evaluator:
    /// (embedding, per-layer (wq, wk, wv, wo, w1, w2), output projection).
    #[allow(clippy::type_complexity)]
    pub fn raw_weights(&self) -> (&[f32], Vec<(&[f32], &[f32], &[f32], &[f32], &[f32], &[f32])>, &[f32]) {
        (
            &self.embed,
            self.layers
                .iter()
                .map(|l| {
                    (&l.wq[..], &l.wk[..], &l.wv[..], &l.wo[..], &l.w1[..], &l.w2[..])
                })
                .collect(),
            &self.w_out,
        )
    }

    /// Forwards `tokens` into the cache and returns logits at the last
    /// token. See [`Model::forward_all`] for the per-token variant.
    pub fn forward(
        &self,
        pool: &mut CellPool,
        req: ForwardRequest<'_>,
        stats: &ForwardStats,
    ) -> Result<Logits> {
        let mut all = self.run(pool, req, stats, false)?;
        Ok(all.pop().expect("non-empty batch"))
    }

    /// Forwards `tokens` and returns logits at every new token, oldest
    /// first. Used by speculative verification.
    pub fn forward_all(
        &self,
        pool: &mut CellPool,
        req: ForwardRequest<'_>,
        stats: &ForwardStats,
    ) -> Result<Vec<Logits>> {
        self.run(pool, req, stats, true)
    }

    fn run(
        &self,
        pool: &mut CellPool,
        req: ForwardRequest<'_>,
        stats: &ForwardStats,
        want_all: bool,
    ) -> Result<Vec<Logits>> {
        let cfg = &self.cfg;
        if req.tokens.is_empty() {
            return Err(CoreError::EmptyTokens);
        }
        for t in req.tokens {
            if t.0 as usize >= cfg.vocab_size {
                return Err(CoreError::TokenOutOfRange { id: t.0, vocab: cfg.vocab_size as u32 });
            }
        }
        let end = req.start_pos as usize + req.tokens.len();
        if end > cfg.max_positions {
            return Err(CoreError::LengthOverflow { len: end, max: cfg.max_positions });
        }
        if let Some(last) = pool.last_position(req.seq)? {
            if req.start_pos <= last {
                return Err(CoreError::PositionOrder { seq: req.seq, pos: req.start_pos, last });
            }
        }
        // Reject up front if the whole batch cannot fit; no partial appends.
        let (used, cap) = pool.occupancy();
        let needed = req.tokens.len() as u64 * cfg.layers as u64;
        if used + needed > cap {
            return Err(CoreError::PoolExhausted { needed, available: cap - used });
        }

        let d = cfg.model_dim;
        let mut out = Vec::with_capacity(if want_all { req.tokens.len() } else { 1 });
        let mut x = vec![0.0f32; d];
        let mut pe = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut ctx = vec![0.0f32; d];
        let mut attn_out = vec![0.0f32; d];
        let mut h1 = vec![0.0f32; cfg.ff_dim()];
        let mut h2 = vec![0.0f32; d];

        for (i, tok) in req.tokens.iter().enumerate() {
            let pos = req.start_pos + i as u32;
            let row = &self.embed[tok.0 as usize * d..(tok.0 as usize + 1) * d];
            positional(pos, d, &mut pe);
            for j in 0..d {
                x[j] = row[j] + pe[j];
            }
            pool.append_token(req.seq, pos, req.region)?;
            for (layer_idx, lw) in self.layers.iter().enumerate() {
                matvec(&x, &lw.wq, d, &mut q);
                matvec(&x, &lw.wk, d, &mut k);
                matvec(&x, &lw.wv, d, &mut v);
                pool.write_last_cell(req.seq, layer_idx, &k, &v);
                self.attend(pool, req.seq, layer_idx, &q, &mut ctx);
                matvec(&ctx, &lw.wo, d, &mut attn_out);
                for j in 0..d {
                    x[j] += attn_out[j];
                }
                matvec(&x, &lw.w1, cfg.ff_dim(), &mut h1);
                for h in h1.iter_mut() {
                    if *h < 0.0 {
                        *h = 0.0;
                    }
                }
                matvec(&h1, &lw.w2, d, &mut h2);
                for j in 0..d {
                    x[j] += h2[j];
                }
            }
            if want_all || i == req.tokens.len() - 1 {
                let mut logits = vec![0.0f32; cfg.vocab_size];
                matvec(&x, &self.w_out, cfg.vocab_size, &mut logits);
                out.push(Logits::new(logits, pos));
            }
        }
        stats.record(req.cause, req.phase, req.tokens.len() as u64);
        Ok(out)
    }

    /// Causal attention of one query vector over every cached position of
    /// the sequence (gaps from eviction are simply absent). Softmax is
    /// max-subtracted; scores and the weighted sum run in position order.
    fn attend(&self, pool: &CellPool, seq: SequenceId, layer: usize, q: &[f32], ctx: &mut [f32]) {
        let heads = self.cfg.heads;
        let dk = self.cfg.head_dim;
        let scale = 1.0 / (dk as f32).sqrt();
        let n = pool.token_count(seq).expect("live sequence");
        let mut scores = vec![0.0f32; heads * n];
        for (j, (kc, _)) in pool.attention_cells(seq, layer).enumerate() {
            for h in 0..heads {
                let o = h * dk;
                let mut s = 0.0f32;
                for t in 0..dk {
                    s += q[o + t] * kc[o + t];
                }
                scores[h * n + j] = s * scale;
            }
        }
        for h in 0..heads {
            let row = &mut scores[h * n..(h + 1) * n];
            let mut m = f32::NEG_INFINITY;
            for &s in row.iter() {
                if s > m {
                    m = s;
                }
            }
            let mut z = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
        }
        ctx.fill(0.0);
        for (j, (_, vc)) in pool.attention_cells(seq, layer).enumerate() {
            for h in 0..heads {
                let w = scores[h * n + j];
                let o = h * dk;
                for t in 0..dk {
                    ctx[o + t] += w * vc[o + t];
                }
            }
        }
    }
}
