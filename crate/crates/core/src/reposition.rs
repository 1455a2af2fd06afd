//! Moving cached keys to new logical positions.
//!
//! A key rotated at position `p` becomes the key at `p + delta` after one
//! further rotation by `delta`. Blocks stay at origin positions in the pool
//! and are re-encoded only when an ordering is assembled. Values are never
//! rotated.

use crate::error::{Error, Result};
use crate::kvpool::{CachePool, KvBlock};
use crate::tinylm::{rope, KvCache, KvTensor};

/// `cos(delta * theta)` and `sin(delta * theta)` over all `head_dim`
/// coordinates, each frequency duplicated across its pair.
pub fn rotation_factors(delta: i64, head_dim: usize, rope_base: f64) -> (Vec<f32>, Vec<f32>) {
    rope::cos_sin(delta, head_dim, rope_base)
}

/// `key * cos(delta*theta) + rotate_half(key) * sin(delta*theta)`.
pub fn reencode_key(key: &[f32], delta: i64, rope_base: f64) -> Vec<f32> {
    let mut out = key.to_vec();
    if delta != 0 {
        let (cos, sin) = rotation_factors(delta, key.len(), rope_base);
        rope::rotate_with(&mut out, &cos, &sin);
    }
    out
}

/// Re-encode every key in `keys` by the same offset.
pub fn reencode_tensor(keys: &mut KvTensor, delta: i64, rope_base: f64) {
    if delta == 0 {
        return;
    }
    let d = keys.head_dim();
    let (cos, sin) = rotation_factors(delta, d, rope_base);
    for lane in keys.lanes_mut() {
        for key in lane.chunks_exact_mut(d) {
            rope::rotate_with(key, &cos, &sin);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedBlock {
    pub example_id: u64,
    pub start: usize,
    pub len: usize,
}

/// Instruction plus a prefix of the active examples, laid out gaplessly
/// from position 0 with keys rotated into place.
#[derive(Debug, Clone)]
pub struct AssembledContext {
    pub ordered_blocks: Vec<PlacedBlock>,
    pub instruction_len: usize,
    pub total_length: usize,
    pub kv: KvCache,
}

impl AssembledContext {
    /// Logical end of the first `shots` placed blocks.
    pub fn end_of_shot(&self, shots: usize) -> usize {
        match shots {
            0 => self.instruction_len,
            n => {
                let b = self.ordered_blocks[n - 1];
                b.start + b.len
            }
        }
    }
}

fn place(kv: &mut KvCache, block: &KvBlock, start: usize, rope_base: f64) -> Result<()> {
    let mut keys = block.keys.clone();
    reencode_tensor(&mut keys, start as i64, rope_base);
    kv.keys.append(&keys)?;
    kv.values.append(&block.values)?;
    kv.positions.extend(start..start + block.token_count());
    Ok(())
}

/// Instruction at position 0, then the first `up_to` ids of `active_ids`.
pub fn assemble_context(pool: &CachePool, active_ids: &[u64], up_to: usize) -> Result<AssembledContext> {
    if up_to > active_ids.len() {
        return Err(Error::InvalidCounts(
            vec![up_to],
            "assembly asks for more shots than the active set holds",
        ));
    }
    let cfg = pool.config();
    let mut kv = KvCache::empty(cfg.num_layers, cfg.num_heads, cfg.head_dim);
    let mut cursor = 0usize;
    if let Some(instr) = pool.instruction() {
        place(&mut kv, &instr.block, 0, cfg.rope_base)?;
        cursor = instr.block.token_count();
    }
    let instruction_len = cursor;

    let mut ordered_blocks = Vec::with_capacity(up_to);
    for &id in &active_ids[..up_to] {
        let block = pool.block(id)?;
        let len = block.token_count();
        if cursor + len > cfg.max_position {
            return Err(Error::PositionOverflow { position: cursor + len - 1, max_position: cfg.max_position });
        }
        place(&mut kv, block, cursor, cfg.rope_base)?;
        ordered_blocks.push(PlacedBlock { example_id: id, start: cursor, len });
        cursor += len;
    }
    Ok(AssembledContext { ordered_blocks, instruction_len, total_length: cursor, kv })
}
