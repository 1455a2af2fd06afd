//! One-time per-example prefill and the on-disk example pool.
//!
//! Every example is prefilled on its own at positions `0..T`, so blocks never
//! see each other. Layer-1 keys and values depend only on each token's
//! embedding and position, so they match a contiguous prefill exactly once
//! re-positioned; deeper layers are an approximation of joint context.
//!
//! # File layout (`ADSHPOOL`, version 1, little-endian)
//!
//! ```text
//! magic       8 bytes  "ADSHPOOL"
//! version     u32
//! fingerprint 32 bytes (model config + weights)
//! count       u64
//! count x block:
//!     example_id u64
//!     tokens     u32
//!     keys       f32 x (layers * heads * tokens * head_dim), (layer, head, token, dim) order
//!     values     f32 x same
//!     text_len   u32
//!     text       bytes
//! has_instr   u8 (0 or 1)
//! [instruction block, same layout, example_id = u64::MAX]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tinylm::{tokenize, AttentionMask, Fingerprint, KvTensor, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"ADSHPOOL";
pub const FORMAT_VERSION: u32 = 1;
const INSTRUCTION_ID: u64 = u64::MAX;

/// Keys and values of one example, computed at origin positions `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub example_id: u64,
    pub keys: KvTensor,
    pub values: KvTensor,
}

impl KvBlock {
    pub fn token_count(&self) -> usize {
        self.keys.tokens()
    }

    pub fn origin_positions(&self) -> std::ops::Range<usize> {
        0..self.token_count()
    }

    pub fn bits_eq(&self, other: &KvBlock) -> bool {
        self.example_id == other.example_id && self.keys.bits_eq(&other.keys) && self.values.bits_eq(&other.values)
    }
}

#[derive(Debug, Clone)]
pub struct Instruction {
    pub text: Vec<u8>,
    pub block: KvBlock,
}

/// The global example pool.
#[derive(Debug, Clone)]
pub struct CachePool {
    fingerprint: Fingerprint,
    config: ModelConfig,
    blocks: BTreeMap<u64, KvBlock>,
    texts: BTreeMap<u64, Vec<u8>>,
    instruction: Option<Instruction>,
}

impl CachePool {
    pub fn empty(model: &Model) -> Self {
        Self {
            fingerprint: model.fingerprint(),
            config: model.config().clone(),
            blocks: BTreeMap::new(),
            texts: BTreeMap::new(),
            instruction: None,
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.blocks.keys().copied()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KvBlock> {
        self.blocks.values()
    }

    pub fn block(&self, id: u64) -> Result<&KvBlock> {
        self.blocks.get(&id).ok_or(Error::UnknownExample(id))
    }

    pub fn text(&self, id: u64) -> Result<&[u8]> {
        self.texts.get(&id).map(Vec::as_slice).ok_or(Error::UnknownExample(id))
    }

    pub fn instruction(&self) -> Option<&Instruction> {
        self.instruction.as_ref()
    }

    pub fn instruction_len(&self) -> usize {
        self.instruction.as_ref().map_or(0, |i| i.block.token_count())
    }

    /// Number of cached key values across all blocks (instruction excluded).
    pub fn key_value_count(&self) -> usize {
        self.blocks.values().map(|b| b.keys.value_count()).sum()
    }

    pub fn insert(&mut self, text: Vec<u8>, block: KvBlock) -> Result<()> {
        self.check_block(&block)?;
        let id = block.example_id;
        if id == INSTRUCTION_ID || self.blocks.contains_key(&id) {
            return Err(Error::DuplicateExample(id));
        }
        self.texts.insert(id, text);
        self.blocks.insert(id, block);
        Ok(())
    }

    pub fn set_instruction(&mut self, text: Vec<u8>, mut block: KvBlock) -> Result<()> {
        self.check_block(&block)?;
        block.example_id = INSTRUCTION_ID;
        self.instruction = Some(Instruction { text, block });
        Ok(())
    }

    /// Fails unless `model` is the model this pool was built with.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if model.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: model.fingerprint().to_string(),
                found: self.fingerprint.to_string(),
            });
        }
        Ok(())
    }

    fn check_block(&self, block: &KvBlock) -> Result<()> {
        let c = &self.config;
        let shape_ok = block.keys.same_shape(c.num_layers, c.num_heads, c.head_dim)
            && block.values.same_shape(c.num_layers, c.num_heads, c.head_dim)
            && block.keys.tokens() == block.values.tokens();
        if !shape_ok || block.token_count() == 0 {
            return Err(Error::Dimension(format!(
                "block {} does not match pool dims [{} x {} x T x {}]",
                block.example_id, c.num_layers, c.num_heads, c.head_dim
            )));
        }
        Ok(())
    }

    /// Bit-level equality of fingerprint, blocks, texts and instruction.
    pub fn bits_eq(&self, other: &CachePool) -> bool {
        let instr_eq = match (&self.instruction, &other.instruction) {
            (None, None) => true,
            (Some(a), Some(b)) => a.text == b.text && a.block.bits_eq(&b.block),
            _ => false,
        };
        self.fingerprint == other.fingerprint
            && self.texts == other.texts
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|((ia, a), (ib, b))| ia == ib && a.bits_eq(b))
            && instr_eq
    }
}

/// Causal prefill of one example at positions `0..T`.
pub fn prefill_example(model: &Model, example_id: u64, text: &[u8]) -> Result<KvBlock> {
    let seq = tokenize(text);
    if seq.is_empty() {
        return Err(Error::EmptyInput("example text"));
    }
    let max = model.config().max_position;
    if seq.len() > max {
        return Err(Error::PositionOverflow { position: seq.len() - 1, max_position: max });
    }
    let out = model.forward(&seq, &AttentionMask::causal(seq.len()), None)?;
    Ok(KvBlock {
        example_id,
        keys: out.present.keys,
        values: out.present.values,
    })
}

pub fn build_pool<T: AsRef<[u8]> + Sync>(model: &Model, texts: &[T]) -> Result<CachePool> {
    build_pool_with_instruction(model, texts, None)
}

/// Prefills every text independently (in parallel) with ids `0..N`.
pub fn build_pool_with_instruction<T: AsRef<[u8]> + Sync>(
    model: &Model,
    texts: &[T],
    instruction: Option<&[u8]>,
) -> Result<CachePool> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("example list"));
    }
    let blocks: Vec<KvBlock> = texts
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            prefill_example(model, i as u64, t.as_ref()).map_err(|e| Error::Prefill { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;

    let mut pool = CachePool::empty(model);
    for (text, block) in texts.iter().zip(blocks) {
        pool.insert(text.as_ref().to_vec(), block)?;
    }
    if let Some(instr) = instruction.filter(|i| !i.is_empty()) {
        let block = prefill_example(model, INSTRUCTION_ID, instr)?;
        pool.set_instruction(instr.to_vec(), block)?;
    }
    Ok(pool)
}

pub fn encode_pool(pool: &CachePool) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * pool.key_value_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&pool.fingerprint.0);
    out.extend_from_slice(&(pool.blocks.len() as u64).to_le_bytes());
    for (id, block) in &pool.blocks {
        write_block(&mut out, *id, block, &pool.texts[id]);
    }
    match &pool.instruction {
        Some(instr) => {
            out.push(1);
            write_block(&mut out, INSTRUCTION_ID, &instr.block, &instr.text);
        }
        None => out.push(0),
    }
    out
}

fn write_block(out: &mut Vec<u8>, id: u64, block: &KvBlock, text: &[u8]) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(block.token_count() as u32).to_le_bytes());
    for tensor in [&block.keys, &block.values] {
        for v in tensor.lanes().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text);
}

pub fn save_pool(pool: &CachePool, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pool(pool))?;
    Ok(())
}

pub fn load_pool(path: impl AsRef<Path>, model: &Model) -> Result<CachePool> {
    let bytes = std::fs::read(path)?;
    decode_pool(&bytes, model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(Error::Truncated { offset: self.offset, needed: n, what }),
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_pool(bytes: &[u8], model: &Model) -> Result<CachePool> {
    let mut r = Reader { bytes, offset: 0 };
    if bytes.len() < MAGIC.len() && !MAGIC.starts_with(bytes) {
        return Err(Error::BadMagic);
    }
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let found = Fingerprint(r.take(32, "fingerprint")?.try_into().unwrap());
    if found != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: model.fingerprint().to_string(),
            found: found.to_string(),
        });
    }

    let mut pool = CachePool::empty(model);
    let count = r.u64("block count")?;
    for _ in 0..count {
        let (text, block) = read_block(&mut r, pool.config())?;
        let id = block.example_id;
        pool.insert(text, block).map_err(|_| Error::Format {
            offset: r.offset,
            message: format!("invalid or duplicate example id {id}"),
        })?;
    }
    match r.u8("instruction flag")? {
        0 => {}
        1 => {
            let at = r.offset;
            let (text, block) = read_block(&mut r, pool.config())?;
            if block.example_id != INSTRUCTION_ID {
                return Err(Error::Format { offset: at, message: "instruction block has a regular id".into() });
            }
            pool.set_instruction(text, block)?;
        }
        flag => {
            return Err(Error::Format { offset: r.offset - 1, message: format!("instruction flag {flag}") });
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    Ok(pool)
}

fn read_block(r: &mut Reader<'_>, config: &ModelConfig) -> Result<(Vec<u8>, KvBlock)> {
    let id = r.u64("example id")?;
    let at = r.offset;
    let tokens = r.u32("token count")? as usize;
    if tokens == 0 || tokens > config.max_position {
        return Err(Error::Format { offset: at, message: format!("block {id} has {tokens} tokens") });
    }
    let (l, h, d) = (config.num_layers, config.num_heads, config.head_dim);
    let n = l * h * tokens * d;
    let keys = KvTensor::from_flat(l, h, d, tokens, &r.f32s(n, "keys")?)?;
    let values = KvTensor::from_flat(l, h, d, tokens, &r.f32s(n, "values")?)?;
    let text_len = r.u32("text length")? as usize;
    let text = r.take(text_len, "text")?.to_vec();
    Ok((text, KvBlock { example_id: id, keys, values }))
}
