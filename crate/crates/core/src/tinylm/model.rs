//! Pre-norm decoder-only transformer with RMS normalization, rotary
//! attention and a 4x GELU feed-forward.
//!
//! # Weight initialization
//!
//! Every parameter is drawn from one SplitMix64 stream seeded with
//! `weight_seed`: draw `x`, take `u = (x >> 11) * 2^-53`, store
//! `((2u - 1) / sqrt(hidden_dim)) as f32`. Tensors are filled row-major in
//! this order:
//!
//! 1. token embedding `[vocab x hidden]`
//! 2. per layer: attention norm `[hidden]`, `W_q`, `W_k`, `W_v`, `W_o`
//!    (each `[hidden x hidden]`), feed-forward norm `[hidden]`,
//!    `W_up [hidden x 4*hidden]`, `W_down [4*hidden x hidden]`
//! 3. final norm `[hidden]`
//! 4. unembedding `[hidden x vocab]`
//!
//! Projection matrices are stored input-major: `y[j] = sum_i x[i] * W[i][j]`.
//! Head `h` owns columns `h*head_dim .. (h+1)*head_dim` of the Q/K/V outputs.

use std::fmt;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::kv::{KvCache, KvTensor};
use super::mask::AttentionMask;
use super::rng::SplitMix64;
use super::rope;
use super::tokenizer::TokenSequence;
use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-5;

/// SHA-256 over the canonical config bytes followed by every weight's bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

#[derive(Debug, Clone)]
struct Layer {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embedding: Vec<f32>,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    unembedding: Vec<f32>,
    fingerprint: Fingerprint,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `[tokens x vocab]`.
    pub logits: Vec<f32>,
    pub vocab_size: usize,
    /// Keys and values of the input tokens, keyed at their input positions.
    pub present: KvCache,
    /// Post-rotation query projections, when requested.
    pub queries: Option<KvTensor>,
}

impl ForwardOutput {
    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits_row(&self, row: usize) -> &[f32] {
        &self.logits[row * self.vocab_size..(row + 1) * self.vocab_size]
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits_row(self.rows() - 1)
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden_dim;
        let ffn = config.ffn_dim();
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut rng = SplitMix64::new(config.weight_seed);
        let mut fill = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.next_symmetric(bound)).collect() };

        let embedding = fill(config.vocab_size * hidden);
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                attn_norm: fill(hidden),
                wq: fill(hidden * hidden),
                wk: fill(hidden * hidden),
                wv: fill(hidden * hidden),
                wo: fill(hidden * hidden),
                ffn_norm: fill(hidden),
                w_up: fill(hidden * ffn),
                w_down: fill(ffn * hidden),
            })
            .collect();
        let final_norm = fill(hidden);
        let unembedding = fill(hidden * config.vocab_size);

        let mut model = Model {
            config,
            embedding,
            layers,
            final_norm,
            unembedding,
            fingerprint: Fingerprint([0; 32]),
        };
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn embedding(&self) -> &[f32] {
        &self.embedding
    }

    /// All weights in initialization order.
    pub fn weights(&self) -> impl Iterator<Item = f32> + '_ {
        let layers = self.layers.iter().flat_map(|l| {
            [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_up, &l.w_down]
                .into_iter()
                .flat_map(|t| t.iter().copied())
        });
        self.embedding
            .iter()
            .copied()
            .chain(layers)
            .chain(self.final_norm.iter().copied())
            .chain(self.unembedding.iter().copied())
    }

    /// SHA-256 of the weight bits alone.
    pub fn weight_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for w in self.weights() {
            hasher.update(w.to_le_bytes());
        }
        hasher.finalize().into()
    }

    fn compute_fingerprint(&self) -> Fingerprint {
        let mut hasher = Sha256::new();
        hasher.update(self.config.canonical_bytes());
        hasher.update(self.weight_checksum());
        Fingerprint(hasher.finalize().into())
    }

    /// Layer-1 query projection of a single token, before rotation.
    /// Exposed for oracle checks.
    pub fn first_layer_projection(&self, token: u32, which: Projection) -> Vec<f32> {
        let hidden = self.config.hidden_dim;
        let t = token as usize;
        let x = &self.embedding[t * hidden..(t + 1) * hidden];
        let layer = &self.layers[0];
        let h = rms_norm(x, &layer.attn_norm);
        let w = match which {
            Projection::Query => &layer.wq,
            Projection::Key => &layer.wk,
            Projection::Value => &layer.wv,
        };
        matmul(&h, 1, w, hidden, hidden)
    }

    pub fn forward(
        &self,
        input: &TokenSequence,
        mask: &AttentionMask,
        past: Option<&KvCache>,
    ) -> Result<ForwardOutput> {
        self.run(input, mask, past, false)
    }

    /// Like [`Model::forward`] but also returns the rotated queries.
    pub fn forward_with_queries(
        &self,
        input: &TokenSequence,
        mask: &AttentionMask,
        past: Option<&KvCache>,
    ) -> Result<ForwardOutput> {
        self.run(input, mask, past, true)
    }

    fn check_inputs(&self, input: &TokenSequence, mask: &AttentionMask, past: Option<&KvCache>) -> Result<usize> {
        let cfg = &self.config;
        if input.is_empty() {
            return Err(Error::EmptyInput("forward input"));
        }
        input.validate(cfg.vocab_size, cfg.max_position)?;
        let past_len = match past {
            Some(p) => {
                p.check_consistent()?;
                if !p.keys.same_shape(cfg.num_layers, cfg.num_heads, cfg.head_dim)
                    || !p.values.same_shape(cfg.num_layers, cfg.num_heads, cfg.head_dim)
                {
                    return Err(Error::Dimension("past kv shape does not match model".into()));
                }
                p.len()
            }
            None => 0,
        };
        if mask.size() != past_len + input.len() {
            return Err(Error::Dimension(format!(
                "mask is {0}x{0} but past + input = {1} + {2}",
                mask.size(),
                past_len,
                input.len()
            )));
        }
        Ok(past_len)
    }

    fn run(
        &self,
        input: &TokenSequence,
        mask: &AttentionMask,
        past: Option<&KvCache>,
        capture_queries: bool,
    ) -> Result<ForwardOutput> {
        let past_len = self.check_inputs(input, mask, past)?;
        let cfg = &self.config;
        let (n, hidden, d, heads) = (input.len(), cfg.hidden_dim, cfg.head_dim, cfg.num_heads);
        let ffn = cfg.ffn_dim();
        let scale = 1.0 / (d as f32).sqrt();

        // One cos/sin table per input token.
        let rotations: Vec<(Vec<f32>, Vec<f32>)> = input
            .positions
            .iter()
            .map(|&p| rope::cos_sin(p as i64, d, cfg.rope_base))
            .collect();

        let mut x = Vec::with_capacity(n * hidden);
        for &t in &input.tokens {
            let t = t as usize;
            x.extend_from_slice(&self.embedding[t * hidden..(t + 1) * hidden]);
        }

        let mut present = KvCache::empty(cfg.num_layers, heads, d);
        present.positions = input.positions.clone();
        let mut queries = capture_queries.then(|| KvTensor::empty(cfg.num_layers, heads, d));

        let mut scores = Vec::with_capacity(past_len + n);
        let mut allowed = Vec::with_capacity(past_len + n);
        for (li, layer) in self.layers.iter().enumerate() {
            let h = rms_norm_rows(&x, n, &layer.attn_norm);
            let mut q = matmul(&h, n, &layer.wq, hidden, hidden);
            let mut k = matmul(&h, n, &layer.wk, hidden, hidden);
            let v = matmul(&h, n, &layer.wv, hidden, hidden);
            for (t, (cos, sin)) in rotations.iter().enumerate() {
                for head in 0..heads {
                    let off = t * hidden + head * d;
                    rope::rotate_with(&mut q[off..off + d], cos, sin);
                    rope::rotate_with(&mut k[off..off + d], cos, sin);
                }
            }
            for head in 0..heads {
                let kl = present.keys.lane_mut(li, head);
                let vl = present.values.lane_mut(li, head);
                for t in 0..n {
                    let off = t * hidden + head * d;
                    kl.extend_from_slice(&k[off..off + d]);
                    vl.extend_from_slice(&v[off..off + d]);
                }
                if let Some(qs) = queries.as_mut() {
                    let ql = qs.lane_mut(li, head);
                    for t in 0..n {
                        let off = t * hidden + head * d;
                        ql.extend_from_slice(&q[off..off + d]);
                    }
                }
            }

            let mut attn = vec![0.0f32; n * hidden];
            for t in 0..n {
                let row = past_len + t;
                allowed.clear();
                allowed.extend((0..past_len + n).filter(|&j| mask.allows(row, j)));
                for head in 0..heads {
                    let qv = &q[t * hidden + head * d..t * hidden + (head + 1) * d];
                    let (pk, pv) = match past {
                        Some(p) => (p.keys.lane(li, head), p.values.lane(li, head)),
                        None => (&[][..], &[][..]),
                    };
                    let nk = present.keys.lane(li, head);
                    let nv = present.values.lane(li, head);
                    let key = |j: usize| -> &[f32] {
                        if j < past_len {
                            &pk[j * d..(j + 1) * d]
                        } else {
                            let j = j - past_len;
                            &nk[j * d..(j + 1) * d]
                        }
                    };
                    let value = |j: usize| -> &[f32] {
                        if j < past_len {
                            &pv[j * d..(j + 1) * d]
                        } else {
                            let j = j - past_len;
                            &nv[j * d..(j + 1) * d]
                        }
                    };

                    scores.clear();
                    scores.extend(allowed.iter().map(|&j| dot(qv, key(j)) * scale));
                    softmax_in_place(&mut scores);
                    let out = &mut attn[t * hidden + head * d..t * hidden + (head + 1) * d];
                    for (&j, &w) in allowed.iter().zip(&scores) {
                        for (o, &vv) in out.iter_mut().zip(value(j)) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let proj = matmul(&attn, n, &layer.wo, hidden, hidden);
            add_assign(&mut x, &proj);

            let h2 = rms_norm_rows(&x, n, &layer.ffn_norm);
            let mut up = matmul(&h2, n, &layer.w_up, hidden, ffn);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            let down = matmul(&up, n, &layer.w_down, ffn, hidden);
            add_assign(&mut x, &down);
        }

        let h = rms_norm_rows(&x, n, &self.final_norm);
        let logits = matmul(&h, n, &self.unembedding, hidden, cfg.vocab_size);
        Ok(ForwardOutput {
            logits,
            vocab_size: cfg.vocab_size,
            present,
            queries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn rms_norm_rows(x: &[f32], rows: usize, gain: &[f32]) -> Vec<f32> {
    let width = gain.len();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend(rms_norm(&x[r * width..(r + 1) * width], gain));
    }
    out
}

/// `[rows x inner] * [inner x out]`.
fn matmul(x: &[f32], rows: usize, w: &[f32], inner: usize, out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * out];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let yr = &mut y[r * out..(r + 1) * out];
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * out..(i + 1) * out];
            for (yj, &wij) in yr.iter_mut().zip(wi) {
                *yj += xi * wij;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::tokenize;

    fn small() -> Model {
        Model::new(ModelConfig::new(2, 4, 8, 42)).unwrap()
    }

    #[test]
    fn first_embedding_weight_is_first_draw() {
        let m = small();
        // First SplitMix64(42) draw mapped into [-1/sqrt(32), 1/sqrt(32)).
        assert_eq!(m.embedding()[0].to_bits(), 0x3dae_e962);
        assert_eq!(m.embedding()[1].to_bits(), 0xbdf6_404d);
    }

    #[test]
    fn deterministic_weights() {
        let a = Model::new(ModelConfig::new(2, 4, 8, 7)).unwrap();
        let b = Model::new(ModelConfig::new(2, 4, 8, 7)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = Model::new(ModelConfig::new(2, 4, 8, 8)).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn weights_within_bound() {
        let m = small();
        let bound = 1.0 / (32f32).sqrt();
        assert!(m.weights().all(|w| w.abs() <= bound));
    }

    #[test]
    fn rejects_odd_head_dim() {
        assert!(Model::new(ModelConfig::new(2, 4, 7, 42)).is_err());
    }

    #[test]
    fn single_token_shape() {
        let m = small();
        let out = m.forward(&tokenize(b"a"), &AttentionMask::causal(1), None).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.logits.len(), 260);
        assert_eq!(out.present.keys.tokens(), 1);
    }

    #[test]
    fn mask_size_mismatch() {
        let m = small();
        let err = m.forward(&tokenize(b"ab"), &AttentionMask::causal(3), None);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn position_overflow() {
        let m = Model::new(ModelConfig::new(1, 2, 4, 1).with_max_position(4)).unwrap();
        let seq = TokenSequence::contiguous(vec![1, 2], 3);
        assert!(matches!(
            m.forward(&seq, &AttentionMask::causal(2), None),
            Err(Error::PositionOverflow { position: 4, .. })
        ));
    }

    #[test]
    fn deterministic_logits() {
        let m = small();
        let seq = tokenize(b"hello world");
        let a = m.forward(&seq, &AttentionMask::causal(seq.len()), None).unwrap();
        let b = m.forward(&seq, &AttentionMask::causal(seq.len()), None).unwrap();
        assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn values_are_unrotated_keys_are_rotated() {
        let m = small();
        let seq = TokenSequence::contiguous(vec![120], 9);
        let out = m.forward(&seq, &AttentionMask::causal(1), None).unwrap();
        let raw_k = m.first_layer_projection(120, Projection::Key);
        let raw_v = m.first_layer_projection(120, Projection::Value);
        for head in 0..4 {
            let want_k = rope::apply_rope(&raw_k[head * 8..(head + 1) * 8], 9, 10_000.0);
            for (a, b) in out.present.keys.vector(0, head, 0).iter().zip(&want_k) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(out.present.values.vector(0, head, 0), &raw_v[head * 8..(head + 1) * 8]);
        }
    }

    #[test]
    fn diagonal_mask_attends_to_own_value() {
        // With only the diagonal allowed, attention output equals each token's
        // own value, so every token behaves as if processed alone.
        let m = Model::new(ModelConfig::new(1, 2, 4, 3)).unwrap();
        let seq = tokenize(b"xyz");
        let masked = m.forward(&seq, &AttentionMask::diagonal(3), None).unwrap();
        for (i, &tok) in seq.tokens.iter().enumerate() {
            let alone = TokenSequence { tokens: vec![tok], positions: vec![i] };
            let solo = m.forward(&alone, &AttentionMask::causal(1), None).unwrap();
            for (a, b) in masked.logits_row(i).iter().zip(solo.logits_row(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn incremental_matches_contiguous() {
        let m = small();
        let seq = tokenize(b"the quick brown fox");
        let full = m.forward(&seq, &AttentionMask::causal(seq.len()), None).unwrap();
        let split = 7;
        let prefix = TokenSequence {
            tokens: seq.tokens[..split].to_vec(),
            positions: seq.positions[..split].to_vec(),
        };
        let suffix = TokenSequence {
            tokens: seq.tokens[split..].to_vec(),
            positions: seq.positions[split..].to_vec(),
        };
        let first = m.forward(&prefix, &AttentionMask::causal(split), None).unwrap();
        let second = m
            .forward(&suffix, &AttentionMask::causal(seq.len()), Some(&first.present))
            .unwrap();
        for r in 0..suffix.len() {
            for (a, b) in second.logits_row(r).iter().zip(full.logits_row(split + r)) {
                assert!((a - b).abs() <= 1e-4);
            }
        }
    }
}
