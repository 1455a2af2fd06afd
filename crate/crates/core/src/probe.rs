//! Probe-based shot-count selection.
//!
//! A probe is the query followed by a short confidence prompt; the model's
//! next-token preference between YES and NO, renormalized over those two
//! tokens, gives a two-class entropy. Low entropy means the context is
//! sufficient.
//!
//! Several candidate shot counts are probed in one forward pass. Probe
//! segments are packed after the shots and a tree mask lets probe `k` see
//! only the instruction, the first `n_k` shots and its own tokens. Shots are
//! numbered as if no probes were present and each probe continues from the
//! end of its last visible shot, so every probe sees exactly the positions of
//! a standalone run with `n_k` shots.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::kvpool::CachePool;
use crate::reposition::{assemble_context, AssembledContext};
use crate::tinylm::{encode, AttentionMask, Model, TokenSequence, NO, YES};

pub const DEFAULT_PROBE_PROMPT: &str = "Are you confident enough to answer? ";

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Entropy threshold, in `(0, ln 2]`.
    pub tau: f64,
    /// Shots added per candidate.
    pub step: usize,
    pub probes_per_round: usize,
    pub max_shots: usize,
    pub probe_prompt: Vec<u8>,
    pub yes_token: u32,
    pub no_token: u32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            tau: 0.65,
            step: 4,
            probes_per_round: 4,
            max_shots: 32,
            probe_prompt: DEFAULT_PROBE_PROMPT.as_bytes().to_vec(),
            yes_token: YES,
            no_token: NO,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProbeConfig(m));
        if !(self.tau > 0.0 && self.tau <= LN_2) {
            return bad(format!("tau must lie in (0, ln 2], got {}", self.tau));
        }
        if self.step == 0 || self.probes_per_round == 0 {
            return bad("step and probes_per_round must be positive".into());
        }
        if self.step * self.probes_per_round > self.max_shots {
            return bad(format!(
                "step * probes_per_round = {} exceeds max_shots {}",
                self.step * self.probes_per_round,
                self.max_shots
            ));
        }
        if self.yes_token == self.no_token {
            return Err(Error::SameProbeTokens(self.yes_token));
        }
        Ok(())
    }

    /// Probe rounds for a pool with `available` ranked examples: round `r`
    /// probes `r*m*n + n, ..., r*m*n + m*n`, capped at
    /// `min(max_shots, available)`, until the cap is reached.
    pub fn schedule(&self, available: usize) -> Vec<Vec<usize>> {
        let cap = self.max_shots.min(available);
        let mut rounds = Vec::new();
        let mut last = 0;
        let mut r = 0;
        while last < cap {
            let base = r * self.probes_per_round * self.step;
            let mut counts = Vec::with_capacity(self.probes_per_round);
            for k in 1..=self.probes_per_round {
                let c = (base + k * self.step).min(cap);
                if c > last {
                    counts.push(c);
                    last = c;
                }
            }
            rounds.push(counts);
            r += 1;
        }
        rounds
    }
}

/// Entropy (nats) of the YES/NO distribution renormalized over those two logits.
pub fn probe_entropy(logits_row: &[f32], yes_token: u32, no_token: u32) -> Result<f64> {
    if yes_token == no_token {
        return Err(Error::SameProbeTokens(yes_token));
    }
    let get = |t: u32| {
        logits_row
            .get(t as usize)
            .copied()
            .ok_or(Error::UnknownToken { token: t, vocab_size: logits_row.len() })
    };
    let gap = (get(yes_token)? as f64 - get(no_token)? as f64).abs();
    Ok(binary_entropy_from_gap(gap))
}

/// `H(sigmoid(gap))`, evaluated without cancellation for large gaps.
fn binary_entropy_from_gap(gap: f64) -> f64 {
    let e = (-gap).exp();
    let h = e.ln_1p() + gap * e / (1.0 + e);
    h.clamp(0.0, LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Instruction,
    /// Index into the ranked order (0 = most relevant).
    Shot(usize),
    Probe(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// One parallel probe round over raw tokens: shots and probe segments
/// interleaved in a single sequence.
#[derive(Debug, Clone)]
pub struct ProbePlan {
    pub candidate_counts: Vec<usize>,
    pub packed: TokenSequence,
    pub mask: AttentionMask,
    /// Index of each probe's final token in `packed`.
    pub probe_positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

/// One parallel probe round over cached shots: the assembled context is the
/// past, and only the probe segments are run through the model.
#[derive(Debug, Clone)]
pub struct CachedProbeRound {
    pub candidate_counts: Vec<usize>,
    pub context: AssembledContext,
    pub input: TokenSequence,
    /// Square over `context ++ input`.
    pub mask: AttentionMask,
    /// Index of each probe's final token in `input`.
    pub probe_positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    /// Final-token logits of each probe.
    pub logits: Vec<Vec<f32>>,
    pub entropies: Vec<f64>,
}

fn check_counts(counts: &[usize], available: usize) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::InvalidCounts(counts.to_vec(), "no candidate counts"));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidCounts(counts.to_vec(), "counts must be strictly increasing"));
    }
    if *counts.last().unwrap() > available {
        return Err(Error::InvalidCounts(counts.to_vec(), "counts exceed the ranked examples"));
    }
    Ok(())
}

fn probe_segment(query: &[u8], prompt: &[u8]) -> Result<Vec<u32>> {
    let mut seg = encode(query);
    seg.extend(encode(prompt));
    if seg.is_empty() {
        return Err(Error::EmptyInput("probe segment"));
    }
    Ok(seg)
}

/// Interleave `[instruction] shot_1..shot_n1 probe_1 shot_n1+1..shot_n2 probe_2 ...`
/// with the tree mask described in the module docs.
pub fn build_probe_plan(
    pool: &CachePool,
    sorted_ids: &[u64],
    counts: &[usize],
    query: &[u8],
    probe_prompt: &[u8],
) -> Result<ProbePlan> {
    check_counts(counts, sorted_ids.len())?;
    let max_position = pool.config().max_position;
    let probe = probe_segment(query, probe_prompt)?;

    let mut packed = TokenSequence::default();
    let mut segments = Vec::new();
    let mut probe_positions = Vec::with_capacity(counts.len());
    let mut logical = 0usize;
    if let Some(instr) = pool.instruction() {
        segments.push(Segment { kind: SegmentKind::Instruction, start: 0, len: instr.text.len() });
        packed.extend_contiguous(&encode(&instr.text), 0);
        logical = instr.text.len();
    }
    let mut shot = 0usize;
    for (k, &n) in counts.iter().enumerate() {
        while shot < n {
            let tokens = encode(pool.text(sorted_ids[shot])?);
            segments.push(Segment { kind: SegmentKind::Shot(shot), start: packed.len(), len: tokens.len() });
            packed.extend_contiguous(&tokens, logical);
            logical += tokens.len();
            shot += 1;
        }
        segments.push(Segment { kind: SegmentKind::Probe(k), start: packed.len(), len: probe.len() });
        packed.extend_contiguous(&probe, logical);
        probe_positions.push(packed.len() - 1);
    }
    if let Some(&position) = packed.positions.iter().max().filter(|&&p| p >= max_position) {
        return Err(Error::PositionOverflow { position, max_position });
    }

    let mut seg_of = vec![0usize; packed.len()];
    for (s, seg) in segments.iter().enumerate() {
        seg_of[seg.start..seg.start + seg.len].fill(s);
    }
    let mask = AttentionMask::from_fn(packed.len(), |i, j| {
        let (si, sj) = (seg_of[i], seg_of[j]);
        if si == sj {
            return j <= i;
        }
        match (segments[si].kind, segments[sj].kind) {
            (_, SegmentKind::Instruction) => true,
            (SegmentKind::Shot(a), SegmentKind::Shot(b)) => b < a,
            (SegmentKind::Probe(k), SegmentKind::Shot(b)) => b < counts[k],
            _ => false,
        }
    })?;

    Ok(ProbePlan { candidate_counts: counts.to_vec(), packed, mask, probe_positions, segments })
}

/// Probe segments over the re-encoded cached prefix of `counts.last()` shots.
pub fn build_cached_round(
    pool: &CachePool,
    sorted_ids: &[u64],
    counts: &[usize],
    query: &[u8],
    probe_prompt: &[u8],
) -> Result<CachedProbeRound> {
    check_counts(counts, sorted_ids.len())?;
    let probe = probe_segment(query, probe_prompt)?;
    let context = assemble_context(pool, sorted_ids, *counts.last().unwrap())?;
    let max_position = pool.config().max_position;

    let mut input = TokenSequence::default();
    let mut probe_positions = Vec::with_capacity(counts.len());
    // (first input index, visible past prefix) per probe
    let mut spans = Vec::with_capacity(counts.len());
    for &n in counts {
        let start = context.end_of_shot(n);
        if start + probe.len() > max_position {
            return Err(Error::PositionOverflow { position: start + probe.len() - 1, max_position });
        }
        spans.push((input.len(), start));
        input.extend_contiguous(&probe, start);
        probe_positions.push(input.len() - 1);
    }

    let past = context.kv.len();
    let seg_len = probe.len();
    let mask = AttentionMask::from_fn(past + input.len(), |i, j| {
        if i < past {
            return j <= i;
        }
        let (seg_start, visible) = spans[(i - past) / seg_len];
        if j < past {
            j < visible
        } else {
            j - past >= seg_start && j <= i
        }
    })?;

    Ok(CachedProbeRound { candidate_counts: counts.to_vec(), context, input, mask, probe_positions })
}

fn collect_probes(rows: impl Iterator<Item = Vec<f32>>, cfg: &ProbeConfig) -> Result<RoundOutput> {
    let logits: Vec<Vec<f32>> = rows.collect();
    let entropies = logits
        .iter()
        .map(|row| probe_entropy(row, cfg.yes_token, cfg.no_token))
        .collect::<Result<_>>()?;
    Ok(RoundOutput { logits, entropies })
}

/// One masked forward over the packed tokens.
pub fn run_plan(model: &Model, plan: &ProbePlan, cfg: &ProbeConfig) -> Result<RoundOutput> {
    let out = model.forward(&plan.packed, &plan.mask, None)?;
    collect_probes(plan.probe_positions.iter().map(|&p| out.logits_row(p).to_vec()), cfg)
}

/// One masked forward over the probe segments, with cached shots as the past.
pub fn run_cached_round(model: &Model, round: &CachedProbeRound, cfg: &ProbeConfig) -> Result<RoundOutput> {
    let out = model.forward(&round.input, &round.mask, Some(&round.context.kv))?;
    collect_probes(round.probe_positions.iter().map(|&p| out.logits_row(p).to_vec()), cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub counts: Vec<usize>,
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrace {
    pub rounds: Vec<RoundRecord>,
    pub chosen_count: usize,
    /// No probe passed; `chosen_count` is the shot budget.
    pub fallback: bool,
}

impl EntropyTrace {
    /// `round=<r> count=<k> H=<v>` per probe, then `chosen=<k>` or `fallback=<k>`.
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for (r, round) in self.rounds.iter().enumerate() {
            for (c, h) in round.counts.iter().zip(&round.entropies) {
                lines.push(format!("round={r} count={c} H={h:.6}"));
            }
        }
        let tag = if self.fallback { "fallback" } else { "chosen" };
        lines.push(format!("{tag}={}", self.chosen_count));
        lines
    }
}

/// Drive the round schedule with an entropy source. Stops at the first round
/// containing any `H <= tau` and picks the smallest passing count there.
pub fn select_shot_count(
    cfg: &ProbeConfig,
    available: usize,
    mut entropies_for: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<EntropyTrace> {
    cfg.validate()?;
    let mut rounds = Vec::new();
    for counts in cfg.schedule(available) {
        let entropies = entropies_for(&counts)?;
        if entropies.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "{} entropies for {} candidate counts",
                entropies.len(),
                counts.len()
            )));
        }
        let pass = counts.iter().zip(&entropies).find(|(_, &h)| h <= cfg.tau).map(|(&c, _)| c);
        rounds.push(RoundRecord { counts, entropies });
        if let Some(chosen_count) = pass {
            return Ok(EntropyTrace { rounds, chosen_count, fallback: false });
        }
    }
    let budget = cfg.max_shots.min(available);
    Ok(EntropyTrace { rounds, chosen_count: budget, fallback: budget > 0 })
}

/// Probe over cached, re-encoded shots in relevance order.
pub fn adaptive_select(
    model: &Model,
    pool: &CachePool,
    sorted_ids: &[u64],
    query: &[u8],
    cfg: &ProbeConfig,
) -> Result<EntropyTrace> {
    select_shot_count(cfg, sorted_ids.len(), |counts| {
        let round = build_cached_round(pool, sorted_ids, counts, query, &cfg.probe_prompt)?;
        Ok(run_cached_round(model, &round, cfg)?.entropies)
    })
}

/// Same schedule, but every round re-runs the shot tokens through the model.
pub fn adaptive_select_uncached(
    model: &Model,
    pool: &CachePool,
    sorted_ids: &[u64],
    query: &[u8],
    cfg: &ProbeConfig,
) -> Result<EntropyTrace> {
    select_shot_count(cfg, sorted_ids.len(), |counts| {
        let plan = build_probe_plan(pool, sorted_ids, counts, query, &cfg.probe_prompt)?;
        Ok(run_plan(model, &plan, cfg)?.entropies)
    })
}
