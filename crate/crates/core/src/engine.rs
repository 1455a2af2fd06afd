//! End-to-end inference: rank, probe, assemble, decode.
//!
//! [`BenchMode::Cached`] never runs the model over shot tokens: ranking reads
//! cached keys, probes run against re-encoded cached blocks and the answer is
//! decoded over the assembled context. [`BenchMode::FullPrefill`] performs the
//! same pipeline from raw text, recomputing every shot it touches. Probe KV is
//! discarded before the answer is decoded in both modes.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kvpool::{prefill_example, CachePool, KvBlock};
use crate::probe::{adaptive_select, adaptive_select_uncached, EntropyTrace, ProbeConfig};
use crate::reposition::assemble_context;
use crate::retrieval::{encode_query, rank_blocks, ActiveSet, RankOptions};
use crate::tinylm::{detokenize, encode, AttentionMask, KvCache, Model, TokenSequence, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Cached,
    FullPrefill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotPolicy {
    Adaptive,
    /// Skip ranking and probing; decode over the instruction alone.
    ZeroShot,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub rank_ms: f64,
    pub probe_ms: f64,
    pub assemble_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub query: Vec<u8>,
    pub mode: BenchMode,
    pub chosen_shots: usize,
    /// Ids of the shots in context, in placement order.
    pub shot_ids: Vec<u64>,
    pub entropy_trace: EntropyTrace,
    pub answer: Vec<u8>,
    pub answer_tokens: Vec<u32>,
    pub timing: Timing,
    /// Tokens run through the model (prefill and decode).
    pub model_tokens: usize,
    /// Tokens belonging to shot examples that were run through the model.
    pub shot_tokens_recomputed: usize,
    /// Full-prefill total for the same query, when measured.
    pub baseline_total_ms: Option<f64>,
}

impl InferenceReport {
    /// `key=value` lines for the summary file.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("query={}", String::from_utf8_lossy(&self.query).escape_default()),
            format!("mode={}", mode_name(self.mode)),
            format!("chosen_shots={}", self.chosen_shots),
            format!("fallback={}", self.entropy_trace.fallback),
            format!("probe_rounds={}", self.entropy_trace.rounds.len()),
            format!(
                "shot_ids={}",
                self.shot_ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            ),
            format!("answer={}", String::from_utf8_lossy(&self.answer).escape_default()),
            format!("model_tokens={}", self.model_tokens),
            format!("shot_tokens_recomputed={}", self.shot_tokens_recomputed),
            format!("rank_ms={:.3}", self.timing.rank_ms),
            format!("probe_ms={:.3}", self.timing.probe_ms),
            format!("assemble_ms={:.3}", self.timing.assemble_ms),
            format!("decode_ms={:.3}", self.timing.decode_ms),
            format!("total_ms={:.3}", self.timing.total_ms),
        ];
        if let Some(b) = self.baseline_total_ms {
            lines.push(format!("baseline_total_ms={b:.3}"));
        }
        lines
    }
}

fn mode_name(mode: BenchMode) -> &'static str {
    match mode {
        BenchMode::Cached => "cached",
        BenchMode::FullPrefill => "full_prefill",
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Greedy decode after running `prompt` on top of `past`. Stops at EOS,
/// after `max_new_tokens`, or when the next position would overflow.
/// Returns the generated tokens (EOS excluded) and the number of tokens run.
pub fn greedy_decode(model: &Model, past: KvCache, prompt: &TokenSequence, max_new_tokens: usize) -> Result<(Vec<u32>, usize)> {
    let max_position = model.config().max_position;
    let mut cache = past;
    let mask = AttentionMask::causal(cache.len() + prompt.len());
    let out = model.forward(prompt, &mask, (!cache.is_empty()).then_some(&cache))?;
    cache.append(&out.present)?;
    let mut next = argmax(out.last_logits());
    let mut position = *prompt.positions.last().unwrap() + 1;
    let mut generated = Vec::new();
    let mut run = prompt.len();
    while generated.len() < max_new_tokens && next != EOS {
        generated.push(next);
        if generated.len() == max_new_tokens || position >= max_position {
            break;
        }
        let step = TokenSequence { tokens: vec![next], positions: vec![position] };
        let out = model.forward(&step, &AttentionMask::causal(cache.len() + 1), Some(&cache))?;
        cache.append(&out.present)?;
        next = argmax(out.last_logits());
        position += 1;
        run += 1;
    }
    Ok((generated, run))
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub struct Engine<'a> {
    model: &'a Model,
    pool: &'a CachePool,
    probe: ProbeConfig,
    rank_options: RankOptions,
    max_new_tokens: usize,
}

impl<'a> Engine<'a> {
    /// Scores at the last layer by default.
    pub fn new(model: &'a Model, pool: &'a CachePool, probe: ProbeConfig) -> Result<Self> {
        pool.check_model(model)?;
        probe.validate()?;
        Ok(Self {
            model,
            pool,
            probe,
            rank_options: RankOptions::at_layer(model.config().num_layers - 1),
            max_new_tokens: 16,
        })
    }

    pub fn with_scoring_layer(mut self, layer: usize) -> Result<Self> {
        let num_layers = self.model.config().num_layers;
        if layer >= num_layers {
            return Err(Error::LayerOutOfRange { layer, num_layers });
        }
        self.rank_options.layer = layer;
        Ok(self)
    }

    pub fn with_max_new_tokens(mut self, n: usize) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn pool(&self) -> &CachePool {
        self.pool
    }

    pub fn probe_config(&self) -> &ProbeConfig {
        &self.probe
    }

    /// Cached, adaptive inference.
    pub fn answer(&self, query: &[u8]) -> Result<InferenceReport> {
        self.answer_with(query, BenchMode::Cached, ShotPolicy::Adaptive)
    }

    pub fn answer_with(&self, query: &[u8], mode: BenchMode, policy: ShotPolicy) -> Result<InferenceReport> {
        if query.is_empty() {
            return Err(Error::EmptyInput("query"));
        }
        let started = Instant::now();
        let mut timing = Timing::default();
        let mut model_tokens = 0usize;
        let mut shot_tokens = 0usize;

        let t = Instant::now();
        let active = match policy {
            ShotPolicy::ZeroShot => ActiveSet::default(),
            ShotPolicy::Adaptive => {
                let q = encode_query(self.model, query)?;
                model_tokens += query.len();
                match mode {
                    BenchMode::Cached => {
                        let blocks: Vec<&KvBlock> = self.pool.blocks().collect();
                        rank_blocks(&q, &blocks, &self.rank_options)?
                    }
                    BenchMode::FullPrefill => {
                        let fresh: Vec<KvBlock> = self
                            .pool
                            .ids()
                            .map(|id| prefill_example(self.model, id, self.pool.text(id)?))
                            .collect::<Result<_>>()?;
                        let recomputed: usize = fresh.iter().map(KvBlock::token_count).sum();
                        model_tokens += recomputed;
                        shot_tokens += recomputed;
                        let blocks: Vec<&KvBlock> = fresh.iter().collect();
                        rank_blocks(&q, &blocks, &self.rank_options)?
                    }
                }
            }
        };
        timing.rank_ms = ms_since(t);

        let t = Instant::now();
        let trace = match policy {
            ShotPolicy::ZeroShot => EntropyTrace { rounds: Vec::new(), chosen_count: 0, fallback: false },
            ShotPolicy::Adaptive => {
                let ids = &active.ranked_ids;
                let trace = match mode {
                    BenchMode::Cached => adaptive_select(self.model, self.pool, ids, query, &self.probe)?,
                    BenchMode::FullPrefill => adaptive_select_uncached(self.model, self.pool, ids, query, &self.probe)?,
                };
                let segment = query.len() + self.probe.probe_prompt.len();
                for round in &trace.rounds {
                    model_tokens += round.counts.len() * segment;
                    if mode == BenchMode::FullPrefill {
                        let shots: usize = ids[..*round.counts.last().unwrap()]
                            .iter()
                            .map(|&id| self.pool.text(id).map(<[u8]>::len))
                            .sum::<Result<usize>>()?;
                        model_tokens += shots + self.pool.instruction_len();
                        shot_tokens += shots;
                    }
                }
                trace
            }
        };
        timing.probe_ms = ms_since(t);

        let chosen = trace.chosen_count;
        let shot_ids: Vec<u64> = active.ranked_ids[..chosen].to_vec();

        let (generated, run) = match mode {
            BenchMode::Cached => {
                let t = Instant::now();
                let context = assemble_context(self.pool, &shot_ids, chosen)?;
                timing.assemble_ms = ms_since(t);

                let t = Instant::now();
                let prompt = TokenSequence::contiguous(encode(query), context.total_length);
                check_fits(self.model, &prompt)?;
                let decoded = greedy_decode(self.model, context.kv, &prompt, self.max_new_tokens)?;
                timing.decode_ms = ms_since(t);
                decoded
            }
            BenchMode::FullPrefill => {
                let t = Instant::now();
                let mut text = self.pool.instruction().map(|i| i.text.clone()).unwrap_or_default();
                for &id in &shot_ids {
                    let shot = self.pool.text(id)?;
                    shot_tokens += shot.len();
                    text.extend_from_slice(shot);
                }
                text.extend_from_slice(query);
                let prompt = TokenSequence::contiguous(encode(&text), 0);
                check_fits(self.model, &prompt)?;
                timing.assemble_ms = ms_since(t);

                let t = Instant::now();
                let cfg = self.model.config();
                let empty = KvCache::empty(cfg.num_layers, cfg.num_heads, cfg.head_dim);
                let decoded = greedy_decode(self.model, empty, &prompt, self.max_new_tokens)?;
                timing.decode_ms = ms_since(t);
                decoded
            }
        };
        model_tokens += run;
        timing.total_ms = ms_since(started);

        Ok(InferenceReport {
            query: query.to_vec(),
            mode,
            chosen_shots: chosen,
            shot_ids,
            entropy_trace: trace,
            answer: detokenize(&generated)?,
            answer_tokens: generated,
            timing,
            model_tokens,
            shot_tokens_recomputed: shot_tokens,
            baseline_total_ms: None,
        })
    }
}

fn check_fits(model: &Model, prompt: &TokenSequence) -> Result<()> {
    let max_position = model.config().max_position;
    match prompt.positions.last() {
        Some(&p) if p >= max_position => Err(Error::PositionOverflow { position: p, max_position }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub cached: InferenceReport,
    pub full: InferenceReport,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.full.timing.total_ms / self.cached.timing.total_ms
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub mean_cached_ms: f64,
    pub mean_full_ms: f64,
}

impl BenchReport {
    /// Ratio of average full-prefill latency to average cached latency.
    pub fn speedup(&self) -> f64 {
        self.mean_full_ms / self.mean_cached_ms
    }

    pub fn table_lines(&self) -> Vec<String> {
        let mut lines = vec![format!(
            "{:>4} {:>6} {:>6} {:>12} {:>12} {:>8}",
            "#", "shots", "full", "cached_ms", "full_ms", "speedup"
        )];
        for (i, row) in self.rows.iter().enumerate() {
            lines.push(format!(
                "{:>4} {:>6} {:>6} {:>12.3} {:>12.3} {:>7.2}x",
                i,
                row.cached.chosen_shots,
                row.full.chosen_shots,
                row.cached.timing.total_ms,
                row.full.timing.total_ms,
                row.speedup()
            ));
        }
        lines.push(format!(
            "mean cached_ms={:.3} full_ms={:.3} speedup={:.2}x",
            self.mean_cached_ms,
            self.mean_full_ms,
            self.speedup()
        ));
        lines
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("queries={}", self.rows.len()),
            format!("mean_cached_ms={:.3}", self.mean_cached_ms),
            format!("mean_full_ms={:.3}", self.mean_full_ms),
            format!("speedup={:.4}", self.speedup()),
        ];
        for (i, row) in self.rows.iter().enumerate() {
            lines.push(format!("q{i}.chosen_shots={}", row.cached.chosen_shots));
            lines.push(format!("q{i}.cached_ms={:.3}", row.cached.timing.total_ms));
            lines.push(format!("q{i}.full_ms={:.3}", row.full.timing.total_ms));
            lines.push(format!("q{i}.cached_model_tokens={}", row.cached.model_tokens));
            lines.push(format!("q{i}.full_model_tokens={}", row.full.model_tokens));
        }
        lines
    }
}

/// Run every query in both modes and compare latencies.
pub fn bench<Q: AsRef<[u8]>>(engine: &Engine<'_>, queries: &[Q], policy: ShotPolicy) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("bench queries"));
    }
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let mut cached = engine.answer_with(q.as_ref(), BenchMode::Cached, policy)?;
        let full = engine.answer_with(q.as_ref(), BenchMode::FullPrefill, policy)?;
        cached.baseline_total_ms = Some(full.timing.total_ms);
        rows.push(BenchRow { cached, full });
    }
    let n = rows.len() as f64;
    let mean_cached_ms = rows.iter().map(|r| r.cached.timing.total_ms).sum::<f64>() / n;
    let mean_full_ms = rows.iter().map(|r| r.full.timing.total_ms).sum::<f64>() / n;
    Ok(BenchReport { rows, mean_cached_ms, mean_full_ms })
}
