//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const YES: u32 = 258;
pub const NO: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Token ids with the logical position each one is encoded at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    /// Positions `start, start+1, ...`.
    pub fn contiguous(tokens: Vec<u32>, start: usize) -> Self {
        let positions = (start..start + tokens.len()).collect();
        Self { tokens, positions }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: u32, position: usize) {
        self.tokens.push(token);
        self.positions.push(position);
    }

    pub fn extend_contiguous(&mut self, tokens: &[u32], start: usize) {
        for (i, &t) in tokens.iter().enumerate() {
            self.push(t, start + i);
        }
    }

    pub fn validate(&self, vocab_size: usize, max_position: usize) -> Result<()> {
        if self.tokens.len() != self.positions.len() {
            return Err(Error::Dimension(format!(
                "{} tokens but {} positions",
                self.tokens.len(),
                self.positions.len()
            )));
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::UnknownToken { token, vocab_size });
        }
        if let Some(&position) = self.positions.iter().find(|&&p| p >= max_position) {
            return Err(Error::PositionOverflow { position, max_position });
        }
        Ok(())
    }
}

pub fn tokenize(text: &[u8]) -> TokenSequence {
    TokenSequence::contiguous(encode(text), 0)
}

/// Token ids only.
pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Specials render as `<bos>`, `<eos>`, `<yes>`, `<no>`.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            BOS => out.extend_from_slice(b"<bos>"),
            EOS => out.extend_from_slice(b"<eos>"),
            YES => out.extend_from_slice(b"<yes>"),
            NO => out.extend_from_slice(b"<no>"),
            _ => return Err(Error::UnknownToken { token: t, vocab_size: VOCAB_SIZE }),
        }
    }
    Ok(out)
}
