//! Attention-score relevance ranking of cached examples.
//!
//! The query is encoded alone at positions `0..T_q`; its rotated query
//! vectors at one layer are scored against each block's cached origin keys.
//! The relevance of example `i` is the mean of its `T_q x T_i` attention
//! matrix, averaged over heads.
//!
//! Two normalization scopes are supported. [`Scope::Block`] takes the softmax
//! of each query row over that block's keys alone; every row then sums to 1
//! and the mean collapses to `1/T_i` whatever the content. [`Scope::Pool`]
//! normalizes each query row over the keys of every block in the pool, so
//! blocks compete for attention mass. Ranking uses the pool scope.

use crate::error::{Error, Result};
use crate::kvpool::{CachePool, KvBlock};
use crate::tinylm::{tokenize, AttentionMask, KvTensor, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    #[default]
    AllHeads,
    Single(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    Block,
    #[default]
    Pool,
}

/// Softmax scope for one scoring call.
#[derive(Debug, Clone, Copy)]
pub enum Scope<'a> {
    Block,
    Pool(&'a PoolNormalizer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    pub layer: usize,
    pub heads: HeadMode,
    pub normalization: Normalization,
}

impl RankOptions {
    pub fn at_layer(layer: usize) -> Self {
        Self { layer, heads: HeadMode::AllHeads, normalization: Normalization::Pool }
    }
}

/// Examples in descending relevance, ties broken by ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSet {
    pub ranked_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.ranked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_ids.is_empty()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.ranked_ids.iter().copied().zip(self.scores.iter().copied()).take(k)
    }
}

/// Rotated query vectors `[layers x heads x T_q x d]` of `query`.
pub fn encode_query(model: &Model, query: &[u8]) -> Result<KvTensor> {
    let seq = tokenize(query);
    if seq.is_empty() {
        return Err(Error::EmptyInput("query"));
    }
    let max = model.config().max_position;
    if seq.len() > max {
        return Err(Error::PositionOverflow { position: seq.len() - 1, max_position: max });
    }
    let out = model.forward_with_queries(&seq, &AttentionMask::causal(seq.len()), None)?;
    Ok(out.queries.expect("queries requested"))
}

fn check_layer(query: &KvTensor, layer: usize) -> Result<()> {
    if layer >= query.num_layers() {
        return Err(Error::LayerOutOfRange { layer, num_layers: query.num_layers() });
    }
    Ok(())
}

fn heads_of(mode: HeadMode, num_heads: usize) -> Result<Vec<usize>> {
    match mode {
        HeadMode::AllHeads => Ok((0..num_heads).collect()),
        HeadMode::Single(h) if h < num_heads => Ok(vec![h]),
        HeadMode::Single(head) => Err(Error::HeadOutOfRange { head, num_heads }),
    }
}

fn check_block(query: &KvTensor, block: &KvBlock) -> Result<()> {
    if !block.keys.same_shape(query.num_layers(), query.num_heads(), query.head_dim()) {
        return Err(Error::Dimension(format!("block {} does not match query shape", block.example_id)));
    }
    Ok(())
}

/// Scaled dot products `q . k / sqrt(d)` for every (query row, key) pair.
fn logits(query: &KvTensor, block: &KvBlock, layer: usize, head: usize) -> Vec<f64> {
    let d = query.head_dim();
    let scale = 1.0 / (d as f32).sqrt();
    let keys = block.keys.lane(layer, head);
    let mut out = Vec::with_capacity(query.tokens() * block.token_count());
    for q in query.lane(layer, head).chunks_exact(d) {
        for k in keys.chunks_exact(d) {
            let s: f32 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            out.push((s * scale) as f64);
        }
    }
    out
}

/// Per (head, query row) log-partition over every block of a pool.
#[derive(Debug, Clone)]
pub struct PoolNormalizer {
    layer: usize,
    rows: usize,
    log_z: Vec<f64>,
}

impl PoolNormalizer {
    /// Blocks are folded in the order given; pass them in id order for a
    /// result independent of insertion history.
    pub fn new<'b>(query: &KvTensor, blocks: impl IntoIterator<Item = &'b KvBlock>, layer: usize) -> Result<Self> {
        check_layer(query, layer)?;
        let heads = query.num_heads();
        let rows = query.tokens();
        let blocks: Vec<&KvBlock> = blocks.into_iter().collect();
        let mut log_z = Vec::with_capacity(heads * rows);
        for head in 0..heads {
            let per_block: Vec<Vec<f64>> = blocks
                .iter()
                .map(|b| check_block(query, b).map(|_| logits(query, b, layer, head)))
                .collect::<Result<_>>()?;
            for r in 0..rows {
                let row_of = |b: usize| {
                    let t = blocks[b].token_count();
                    &per_block[b][r * t..(r + 1) * t]
                };
                let max = (0..blocks.len())
                    .flat_map(|b| row_of(b).iter().copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..blocks.len()).flat_map(|b| row_of(b).iter().map(|l| (l - max).exp())).sum();
                log_z.push(max + z.ln());
            }
        }
        Ok(Self { layer, rows, log_z })
    }

    fn log_z(&self, head: usize, row: usize) -> f64 {
        self.log_z[head * self.rows + row]
    }
}

/// The `T_q x T_i` attention matrix of one head, row-major.
pub fn attention_matrix(query: &KvTensor, block: &KvBlock, layer: usize, head: usize, scope: Scope<'_>) -> Result<Vec<f64>> {
    check_layer(query, layer)?;
    check_block(query, block)?;
    heads_of(HeadMode::Single(head), query.num_heads())?;
    let t = block.token_count();
    let mut a = logits(query, block, layer, head);
    for (r, row) in a.chunks_exact_mut(t).enumerate() {
        let log_z = match scope {
            Scope::Block => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
            }
            Scope::Pool(norm) => {
                if norm.layer != layer || norm.rows != query.tokens() {
                    return Err(Error::Dimension("pool normalizer built for a different query or layer".into()));
                }
                norm.log_z(head, r)
            }
        };
        row.iter_mut().for_each(|l| *l = (*l - log_z).exp());
    }
    Ok(a)
}

/// Mean attention mass of the query on `block`, averaged over the selected heads.
pub fn score_example(query: &KvTensor, block: &KvBlock, layer: usize, heads: HeadMode, scope: Scope<'_>) -> Result<f64> {
    check_layer(query, layer)?;
    let heads = heads_of(heads, query.num_heads())?;
    let mut total = 0.0;
    for &h in &heads {
        let a = attention_matrix(query, block, layer, h, scope)?;
        total += a.iter().sum::<f64>() / a.len() as f64;
    }
    Ok(total / heads.len() as f64)
}

fn sort_ranked(mut scored: Vec<(u64, f64)>) -> ActiveSet {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (ranked_ids, scores) = scored.into_iter().unzip();
    ActiveSet { ranked_ids, scores }
}

/// Rank `blocks` (in id order) against already-encoded query vectors.
pub fn rank_blocks(query: &KvTensor, blocks: &[&KvBlock], options: &RankOptions) -> Result<ActiveSet> {
    let norm;
    let scope = match options.normalization {
        Normalization::Block => Scope::Block,
        Normalization::Pool => {
            norm = PoolNormalizer::new(query, blocks.iter().copied(), options.layer)?;
            Scope::Pool(&norm)
        }
    };
    let scored = blocks
        .iter()
        .map(|b| score_example(query, b, options.layer, options.heads, scope).map(|s| (b.example_id, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_ranked(scored))
}

pub fn rank_with(model: &Model, pool: &CachePool, query: &[u8], options: &RankOptions) -> Result<ActiveSet> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("pool"));
    }
    pool.check_model(model)?;
    let q = encode_query(model, query)?;
    let blocks: Vec<&KvBlock> = pool.blocks().collect();
    rank_blocks(&q, &blocks, options)
}

/// Rank every pool example at `layer` with pool-wide normalization over all heads.
pub fn rank(model: &Model, pool: &CachePool, query: &[u8], layer: usize) -> Result<ActiveSet> {
    rank_with(model, pool, query, &RankOptions::at_layer(layer))
}
