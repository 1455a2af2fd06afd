use crate::error::{Error, Result};

/// Square attention mask over `past ++ input`. Row `i` lists which columns
/// token `i` may attend to. Only rows belonging to the input are consulted
/// by the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttentionMask {
    /// Lower-triangular, stored implicitly.
    Causal { size: usize },
    Explicit { size: usize, allowed: Vec<bool> },
}

impl AttentionMask {
    pub fn causal(size: usize) -> Self {
        AttentionMask::Causal { size }
    }

    /// All-false except the diagonal.
    pub fn diagonal(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            allowed[i * size + i] = true;
        }
        AttentionMask::Explicit { size, allowed }
    }

    /// Explicit mask from a predicate; the diagonal must be allowed.
    pub fn from_fn(size: usize, mut allow: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allowed[i * size + j] = allow(i, j);
            }
            if !allowed[i * size + i] {
                return Err(Error::Dimension(format!("mask row {i} does not allow its own token")));
            }
        }
        Ok(AttentionMask::Explicit { size, allowed })
    }

    pub fn size(&self) -> usize {
        match self {
            AttentionMask::Causal { size } | AttentionMask::Explicit { size, .. } => *size,
        }
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        match self {
            AttentionMask::Causal { .. } => col <= row,
            AttentionMask::Explicit { size, allowed } => allowed[row * size + col],
        }
    }

    /// Indices a given row may attend to.
    pub fn row(&self, row: usize) -> Vec<usize> {
        (0..self.size()).filter(|&c| self.allows(row, c)).collect()
    }
}
