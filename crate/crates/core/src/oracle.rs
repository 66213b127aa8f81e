//! Stateless reference forward pass, used by tests as ground truth for the
//! cached incremental path. No cell pool, no sequences: the whole token
//! sequence is evaluated layer by layer over plain buffers.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::{positional, Model};
use crate::token::TokenId;

/// Logits at every position of `tokens`, computed without any cache.
/// Pure function of (config, tokens).
pub fn full_forward(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
    if tokens.len() > cfg.max_positions {
        return Err(CoreError::LengthOverflow { len: tokens.len(), max: cfg.max_positions });
    }
    let model = Model::new(cfg)?;
    Ok(full_forward_with(&model, tokens))
}

/// Same as [`full_forward`] but reuses an already-built model, which keeps
/// repeated oracle calls cheap in test loops. Weights are a pure function of
/// the config either way.
pub fn full_forward_with(model: &Model, tokens: &[TokenId]) -> Vec<Vec<f32>> {
    let cfg = model.config();
    let d = cfg.model_dim;
    let n = tokens.len();
    let weights = RawWeights::of(model);

    // x[i] = embedding + sinusoidal position term.
    let mut x: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut pe = vec![0.0f32; d];
    for (i, t) in tokens.iter().enumerate() {
        let row = &weights.embed[t.0 as usize * d..(t.0 as usize + 1) * d];
        positional(i as u32, d, &mut pe);
        x.push(row.iter().zip(&pe).map(|(a, b)| a + b).collect());
    }

    let heads = cfg.heads;
    let dk = cfg.head_dim;
    let scale = 1.0 / (dk as f32).sqrt();
    let ff = cfg.ff_dim();
    for layer in 0..cfg.layers {
        let lw = &weights.layers[layer];
        let mut ks: Vec<Vec<f32>> = Vec::with_capacity(n);
        let mut vs: Vec<Vec<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            // Q, K, V from the current residual stream; causal attention
            // at i sees positions 0..=i only, so processing positions in
            // order keeps this equivalent to incremental ingestion.
            let q = matvec(&x[i], &lw.wq, d);
            ks.push(matvec(&x[i], &lw.wk, d));
            vs.push(matvec(&x[i], &lw.wv, d));
            let mut ctx = vec![0.0f32; d];
            for h in 0..heads {
                let o = h * dk;
                let mut scores = Vec::with_capacity(i + 1);
                for k in ks.iter().take(i + 1) {
                    let mut s = 0.0f32;
                    for t in 0..dk {
                        s += q[o + t] * k[o + t];
                    }
                    scores.push(s * scale);
                }
                let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (s, v) in scores.iter().zip(vs.iter()) {
                    let w = s / z;
                    for t in 0..dk {
                        ctx[o + t] += w * v[o + t];
                    }
                }
            }
            let attn = matvec(&ctx, &lw.wo, d);
            for j in 0..d {
                x[i][j] += attn[j];
            }
            let mut h1 = matvec(&x[i], &lw.w1, ff);
            for h in h1.iter_mut() {
                if *h < 0.0 {
                    *h = 0.0;
                }
            }
            let h2 = matvec(&h1, &lw.w2, d);
            for j in 0..d {
                x[i][j] += h2[j];
            }
        }
    }
    x.iter().map(|xi| matvec(xi, &weights.w_out, cfg.vocab_size)).collect()
}

fn matvec(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

struct RawLayer<'a> {
    wq: &'a [f32],
    wk: &'a [f32],
    wv: &'a [f32],
    wo: &'a [f32],
    w1: &'a [f32],
    w2: &'a [f32],
}

struct RawWeights<'a> {
    embed: &'a [f32],
    layers: Vec<RawLayer<'a>>,
    w_out: &'a [f32],
}

impl<'a> RawWeights<'a> {
    fn of(model: &'a Model) -> Self {
        let (embed, layers, w_out) = model.raw_weights();
        RawWeights {
            embed,
            layers: layers
                .iter()
                .map(|l| RawLayer { wq: l.0, wk: l.1, wv: l.2, wo: l.3, w1: l.4, w2: l.5 })
                .collect(),
            w_out,
        }
    }
}

/// Relative comparison used across all cross-path checks:
/// |a - b| <= tol * max(1, |a|, |b|) element-wise.
pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f32.max(x.abs()).max(y.abs()))
        .fold(0.0, f32::max)
}

pub fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    let d = max_rel_diff(a, b);
    assert!(d <= tol, "relative diff {d} exceeds tolerance {tol}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_matches_base_case() {
        use crate::kv::{CellPool, RegionTag, SequenceId};
        use crate::model::ForwardRequest;
        use crate::stats::{Cause, ForwardStats, Phase};

        let cfg = ModelConfig::tiny_for_tests();
        let model = Model::new(&cfg).unwrap();
        let mut pool = CellPool::new(cfg.layers, cfg.model_dim, 1024);
        let s = SequenceId::session(1);
        pool.register_sequence(s).unwrap();
        let stats = ForwardStats::new();
        let l = model
            .forward(
                &mut pool,
                ForwardRequest {
                    seq: s,
                    start_pos: 0,
                    tokens: &[TokenId(42)],
                    region: RegionTag::Frozen,
                    cause: Cause::Session,
                    phase: Phase::Prefill,
                },
                &stats,
            )
            .unwrap();
        let full = full_forward(&cfg, &[TokenId(42)]).unwrap();
        assert_close(&l.values, &full[0], 1e-5);
    }

    #[test]
    fn length_overflow_is_rejected() {
        let cfg = ModelConfig { max_positions: 4, ..ModelConfig::tiny_for_tests() };
        let tokens: Vec<TokenId> = (0..5).map(TokenId).collect();
        assert!(full_forward(&cfg, &tokens).is_err());
    }
}
