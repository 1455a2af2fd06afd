//! Self-check suite run by the `verify` subcommand.
//!
//! Every check compares the optimized path against an independent
//! recomputation on small randomized instances drawn from a fixed seed, so
//! two runs print identical results.

use std::f64::consts::LN_2;

use crate::kvpool::{build_pool, build_pool_with_instruction, decode_pool, encode_pool, CachePool};
use crate::probe::{build_cached_round, build_probe_plan, probe_entropy, run_cached_round, run_plan, select_shot_count, ProbeConfig};
use crate::reposition::{assemble_context, reencode_key};
use crate::retrieval::{encode_query, rank, PoolNormalizer, Scope};
use crate::tinylm::rng::SplitMix64;
use crate::tinylm::{apply_rope, encode, AttentionMask, KvTensor, Model, ModelConfig, TokenSequence, NO, YES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.next_symmetric(1.0)).collect()
}

fn random_text(rng: &mut SplitMix64, min: usize, max: usize) -> Vec<u8> {
    let len = min + (rng.next_u64() as usize) % (max - min + 1);
    (0..len).map(|_| b' ' + (rng.next_u64() % 95) as u8).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() || a.is_empty() {
        return f32::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Re-encoding a key rotated at `p` by `delta` equals rotating it at `p + delta`.
pub fn check_reencode(seed: u64, trials: usize) -> CheckResult {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f32;
    for i in 0..trials {
        let d = [8, 32, 64][i % 3];
        let raw = random_vec(&mut rng, d);
        let p = (rng.next_u64() % 4096) as usize;
        let delta = (rng.next_u64() % 4096) as usize;
        let moved = reencode_key(&apply_rope(&raw, p, 10_000.0), delta as i64, 10_000.0);
        worst = worst.max(max_abs_diff(&moved, &apply_rope(&raw, p + delta, 10_000.0)));
    }
    CheckResult::new("rope_reencode", worst <= 1e-5, format!("trials={trials} max_err={worst:.3e} tol=1e-5"))
}

/// Attention logits against two re-encoded cached blocks equal logits against
/// keys rotated directly at their assembled positions.
pub fn check_score_equivalence(seed: u64, trials: usize) -> CheckResult {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let d = 32;
        let len_a = 1 + (rng.next_u64() % 48) as usize;
        let len_b = 1 + (rng.next_u64() % 48) as usize;
        let raw: Vec<Vec<f32>> = (0..len_a + len_b).map(|_| random_vec(&mut rng, d)).collect();
        let query_pos = len_a + len_b + (rng.next_u64() % 64) as usize;
        let q = apply_rope(&random_vec(&mut rng, d), query_pos, 10_000.0);
        let scale = 1.0 / (d as f32).sqrt();
        // Block B is cached at origin 0 and moved by len_a; block A stays put.
        for t in 0..len_b {
            let cached = apply_rope(&raw[len_a + t], t, 10_000.0);
            let moved = reencode_key(&cached, len_a as i64, 10_000.0);
            let fresh = apply_rope(&raw[len_a + t], len_a + t, 10_000.0);
            worst = worst.max((dot(&q, &moved) * scale - dot(&q, &fresh) * scale).abs());
        }
        for (t, k) in raw[..len_a].iter().enumerate() {
            let cached = reencode_key(&apply_rope(k, t, 10_000.0), 0, 10_000.0);
            let fresh = apply_rope(k, t, 10_000.0);
            worst = worst.max((dot(&q, &cached) - dot(&q, &fresh)).abs() * scale);
        }
    }
    CheckResult::new("score_equivalence", worst <= 1e-5, format!("trials={trials} max_err={worst:.3e} tol=1e-5"))
}

/// Final-token logits of one probe run on its own over cached shots.
pub fn sequential_cached_probe(model: &Model, pool: &CachePool, ids: &[u64], count: usize, segment: &[u32]) -> Result<Vec<f32>> {
    let ctx = assemble_context(pool, ids, count)?;
    let input = TokenSequence::contiguous(segment.to_vec(), ctx.total_length);
    let mask = AttentionMask::causal(ctx.kv.len() + input.len());
    let past = (!ctx.kv.is_empty()).then_some(&ctx.kv);
    Ok(model.forward(&input, &mask, past)?.last_logits().to_vec())
}

/// Final-token logits of one probe run contiguously from raw text.
pub fn sequential_text_probe(model: &Model, pool: &CachePool, ids: &[u64], count: usize, segment: &[u32]) -> Result<Vec<f32>> {
    let mut tokens = pool.instruction().map(|i| encode(&i.text)).unwrap_or_default();
    for &id in &ids[..count] {
        tokens.extend(encode(pool.text(id)?));
    }
    tokens.extend_from_slice(segment);
    let seq = TokenSequence::contiguous(tokens, 0);
    Ok(model.forward(&seq, &AttentionMask::causal(seq.len()), None)?.last_logits().to_vec())
}

/// Worst elementwise gap between parallel and sequential probe logits, for
/// both the cached round and the raw-token plan.
pub fn parallel_probe_gap(model: &Model, pool: &CachePool, ids: &[u64], counts: &[usize], query: &[u8], prompt: &[u8]) -> Result<(f32, f32)> {
    let cfg = ProbeConfig { probe_prompt: prompt.to_vec(), ..ProbeConfig::default() };
    let mut segment = encode(query);
    segment.extend(encode(prompt));

    let round = build_cached_round(pool, ids, counts, query, prompt)?;
    let cached = run_cached_round(model, &round, &cfg)?;
    let plan = build_probe_plan(pool, ids, counts, query, prompt)?;
    let text = run_plan(model, &plan, &cfg)?;

    let (mut worst_cached, mut worst_text) = (0.0f32, 0.0f32);
    for (k, &n) in counts.iter().enumerate() {
        let seq_cached = sequential_cached_probe(model, pool, ids, n, &segment)?;
        worst_cached = worst_cached.max(max_abs_diff(&cached.logits[k], &seq_cached));
        let seq_text = sequential_text_probe(model, pool, ids, n, &segment)?;
        worst_text = worst_text.max(max_abs_diff(&text.logits[k], &seq_text));
    }
    Ok((worst_cached, worst_text))
}

pub fn check_parallel_probe(seed: u64, seeds: usize) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let (mut wc, mut wt) = (0.0f32, 0.0f32);
        for s in 0..seeds as u64 {
            let mut rng = SplitMix64::new(seed ^ s.wrapping_mul(0x9E37_79B9));
            let model = Model::new(ModelConfig::new(2, 4, 32, seed.wrapping_add(s)))?;
            let texts: Vec<Vec<u8>> = (0..8).map(|_| random_text(&mut rng, 4, 16)).collect();
            let instruction = random_text(&mut rng, 2, 8);
            let pool = build_pool_with_instruction(&model, &texts, Some(&instruction))?;
            let mut ids: Vec<u64> = (0..8).collect();
            ids.rotate_left((s % 8) as usize);
            let query = random_text(&mut rng, 3, 12);
            let (c, t) = parallel_probe_gap(&model, &pool, &ids, &[2, 4, 6, 8], &query, b" sure?")?;
            wc = wc.max(c);
            wt = wt.max(t);
        }
        Ok((
            wc <= 1e-4 && wt <= 1e-4,
            format!("seeds={seeds} cached_max_err={wc:.3e} token_max_err={wt:.3e} tol=1e-4"),
        ))
    };
    CheckResult::from_result("parallel_probe", run())
}

pub fn check_entropy(seed: u64, trials: usize) -> CheckResult {
    let row = |yes: f32, no: f32| {
        let mut r = vec![0.0f32; 260];
        r[YES as usize] = yes;
        r[NO as usize] = no;
        r
    };
    let run = || -> Result<(bool, String)> {
        let equal = probe_entropy(&row(0.7, 0.7), YES, NO)?;
        let gap = probe_entropy(&row(30.0, 0.0), YES, NO)?;
        let mut rng = SplitMix64::new(seed);
        let mut in_bounds = true;
        for _ in 0..trials {
            let (y, n) = (rng.next_symmetric(40.0), rng.next_symmetric(40.0));
            let h = probe_entropy(&row(y, n), YES, NO)?;
            in_bounds &= (0.0..=LN_2).contains(&h);
        }
        let ok = (equal - LN_2).abs() <= 1e-9 && gap < 1e-9 && in_bounds;
        Ok((ok, format!("H(equal)={equal:.12} H(gap30)={gap:.3e} bounded={in_bounds} trials={trials}")))
    };
    CheckResult::from_result("entropy", run())
}

/// Replays the recorded two-round entropy sequence through the selector.
pub fn check_selector_replay() -> CheckResult {
    let recorded = [[0.6731, 0.7023, 0.7044, 0.6671], [0.6862, 0.6884, 0.6232, 0.6450]];
    let cfg = ProbeConfig { tau: 0.65, step: 4, probes_per_round: 4, max_shots: 32, ..ProbeConfig::default() };
    let mut round = 0;
    let trace = select_shot_count(&cfg, 1024, |counts| {
        let e = recorded.get(round).ok_or(Error::EmptyInput("recorded entropies"))?[..counts.len()].to_vec();
        round += 1;
        Ok(e)
    });
    let run = trace.map(|t| (t.chosen_count == 28 && !t.fallback, format!("chosen={} rounds={}", t.chosen_count, t.rounds.len())));
    CheckResult::from_result("selector_replay", run)
}

/// Relevance scores by explicit loops in f64, pool-wide softmax per query row.
pub fn brute_force_scores(query: &KvTensor, pool: &CachePool, layer: usize) -> Vec<(u64, f64)> {
    let (heads, d, tq) = (query.num_heads(), query.head_dim(), query.tokens());
    let scale = 1.0 / (d as f64).sqrt();
    let blocks: Vec<_> = pool.blocks().collect();
    let mut scores = vec![0.0f64; blocks.len()];
    for h in 0..heads {
        for t in 0..tq {
            let q = query.vector(layer, h, t);
            let mut all: Vec<Vec<f64>> = Vec::new();
            for b in &blocks {
                let mut row = Vec::new();
                for j in 0..b.token_count() {
                    let k = b.keys.vector(layer, h, j);
                    let mut s = 0.0f64;
                    for i in 0..d {
                        s += q[i] as f64 * k[i] as f64;
                    }
                    row.push(s * scale);
                }
                all.push(row);
            }
            let mut z = 0.0f64;
            for row in &all {
                for &l in row {
                    z += l.exp();
                }
            }
            for (bi, row) in all.iter().enumerate() {
                let mut mass = 0.0;
                for &l in row {
                    mass += l.exp() / z;
                }
                scores[bi] += mass / (tq * row.len()) as f64 / heads as f64;
            }
        }
    }
    let mut out: Vec<(u64, f64)> = blocks.iter().map(|b| b.example_id).zip(scores).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

pub fn check_retrieval(seed: u64, pools: usize) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = SplitMix64::new(seed);
        let mut mismatches = 0;
        let mut worst_row = 0.0f64;
        for p in 0..pools {
            let model = Model::new(ModelConfig::new(2, 2, 16, seed + p as u64))?;
            let n = 1 + (rng.next_u64() % 32) as usize;
            let texts: Vec<Vec<u8>> = (0..n).map(|_| random_text(&mut rng, 1, 24)).collect();
            let pool = build_pool(&model, &texts)?;
            let query = random_text(&mut rng, 1, 16);
            let layer = (rng.next_u64() % 2) as usize;
            let ranked = rank(&model, &pool, &query, layer)?;
            let q = encode_query(&model, &query)?;
            let oracle: Vec<u64> = brute_force_scores(&q, &pool, layer).into_iter().map(|(id, _)| id).collect();
            if oracle != ranked.ranked_ids {
                mismatches += 1;
            }
            let norm = PoolNormalizer::new(&q, pool.blocks(), layer)?;
            for h in 0..2 {
                let mut sums = vec![0.0f64; q.tokens()];
                for block in pool.blocks() {
                    let t = block.token_count();
                    let local = crate::retrieval::attention_matrix(&q, block, layer, h, Scope::Block)?;
                    for row in local.chunks(t) {
                        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                    let global = crate::retrieval::attention_matrix(&q, block, layer, h, Scope::Pool(&norm))?;
                    for (r, row) in global.chunks(t).enumerate() {
                        sums[r] += row.iter().sum::<f64>();
                    }
                }
                for s in sums {
                    worst_row = worst_row.max((s - 1.0).abs());
                }
            }
        }
        Ok((
            mismatches == 0 && worst_row <= 1e-6,
            format!("pools={pools} order_mismatches={mismatches} max_row_sum_err={worst_row:.3e}"),
        ))
    };
    CheckResult::from_result("retrieval_oracle", run())
}

/// Round trip is bit-exact; a cache loaded under a model with a different
/// rope base is rejected by fingerprint; truncations are rejected.
pub fn check_serialization(seed: u64, pools: usize) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = SplitMix64::new(seed);
        let mut exact = 0;
        for p in 0..pools {
            let model = Model::new(ModelConfig::new(1 + p % 2, 2, 8, seed + p as u64))?;
            let n = 1 + (rng.next_u64() % 6) as usize;
            let texts: Vec<Vec<u8>> = (0..n).map(|_| random_text(&mut rng, 1, 12)).collect();
            let instr = (p % 2 == 0).then(|| random_text(&mut rng, 1, 6));
            let pool = build_pool_with_instruction(&model, &texts, instr.as_deref())?;
            let bytes = encode_pool(&pool);
            if decode_pool(&bytes, &model)?.bits_eq(&pool) {
                exact += 1;
            }
        }
        let model = Model::new(ModelConfig::new(2, 2, 8, seed))?;
        let mut tampered_cfg = model.config().clone();
        tampered_cfg.rope_base = 20_000.0;
        let tampered = Model::new(tampered_cfg)?;
        let bytes = encode_pool(&build_pool(&model, &["abc", "defg"])?);
        let mismatch = matches!(decode_pool(&bytes, &tampered), Err(Error::FingerprintMismatch { .. }));
        let truncation = (0..bytes.len()).step_by(7).all(|cut| matches!(decode_pool(&bytes[..cut], &model), Err(Error::Truncated { .. })));
        Ok((
            exact == pools && mismatch && truncation,
            format!("round_trips={exact}/{pools} fingerprint_guard={mismatch} truncation_rejected={truncation}"),
        ))
    };
    CheckResult::from_result("serialization", run())
}

/// The full suite in a fixed order.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check_reencode(seed, 10_000),
        check_score_equivalence(seed + 1, 1_000),
        check_parallel_probe(seed + 2, 50),
        check_entropy(seed + 3, 10_000),
        check_selector_replay(),
        check_retrieval(seed + 4, 12),
        check_serialization(seed + 5, 10),
    ]
}
