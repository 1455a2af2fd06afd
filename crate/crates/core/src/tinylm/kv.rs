use crate::error::{Error, Result};

/// Per-layer, per-head matrix of `tokens x head_dim` vectors.
///
/// Lanes are indexed `layer * num_heads + head`; each lane is row-major over
/// tokens. Iterating lanes in order yields the (layer, head, token, dim)
/// layout used on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    lanes: Vec<Vec<f32>>,
}

impl KvTensor {
    pub fn empty(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            lanes: vec![Vec::new(); num_layers * num_heads],
        }
    }

    /// Build from a flat buffer in (layer, head, token, dim) order.
    pub fn from_flat(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        tokens: usize,
        flat: &[f32],
    ) -> Result<Self> {
        let lane_len = tokens * head_dim;
        if flat.len() != num_layers * num_heads * lane_len {
            return Err(Error::Dimension(format!(
                "flat buffer of {} values does not fit [{num_layers} x {num_heads} x {tokens} x {head_dim}]",
                flat.len()
            )));
        }
        let lanes = flat.chunks(lane_len.max(1)).map(<[f32]>::to_vec).collect::<Vec<_>>();
        let lanes = if lane_len == 0 {
            vec![Vec::new(); num_layers * num_heads]
        } else {
            lanes
        };
        Ok(Self { num_layers, num_heads, head_dim, lanes })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.lanes.first().map_or(0, |l| l.len() / self.head_dim)
    }

    pub fn lane(&self, layer: usize, head: usize) -> &[f32] {
        &self.lanes[layer * self.num_heads + head]
    }

    pub fn lane_mut(&mut self, layer: usize, head: usize) -> &mut Vec<f32> {
        &mut self.lanes[layer * self.num_heads + head]
    }

    pub fn vector(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let d = self.head_dim;
        &self.lane(layer, head)[token * d..(token + 1) * d]
    }

    pub fn lanes(&self) -> impl Iterator<Item = &[f32]> {
        self.lanes.iter().map(Vec::as_slice)
    }

    pub fn lanes_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.lanes.iter_mut()
    }

    pub fn value_count(&self) -> usize {
        self.lanes.iter().map(Vec::len).sum()
    }

    /// Append `other`'s tokens after ours, lane by lane.
    pub fn append(&mut self, other: &KvTensor) -> Result<()> {
        self.check_shape(other)?;
        for (dst, src) in self.lanes.iter_mut().zip(&other.lanes) {
            dst.extend_from_slice(src);
        }
        Ok(())
    }

    pub fn same_shape(&self, num_layers: usize, num_heads: usize, head_dim: usize) -> bool {
        self.num_layers == num_layers && self.num_heads == num_heads && self.head_dim == head_dim
    }

    fn check_shape(&self, other: &KvTensor) -> Result<()> {
        if !other.same_shape(self.num_layers, self.num_heads, self.head_dim) {
            return Err(Error::Dimension(format!(
                "kv shape [{} x {} x _ x {}] vs [{} x {} x _ x {}]",
                self.num_layers, self.num_heads, self.head_dim, other.num_layers, other.num_heads, other.head_dim
            )));
        }
        Ok(())
    }

    pub fn bits_eq(&self, other: &KvTensor) -> bool {
        self.same_shape(other.num_layers, other.num_heads, other.head_dim)
            && self
                .lanes
                .iter()
                .zip(&other.lanes)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Keys (already rotated to their logical positions), values, and the
/// logical position of every cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub keys: KvTensor,
    pub values: KvTensor,
    pub positions: Vec<usize>,
}

impl KvCache {
    pub fn empty(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            keys: KvTensor::empty(num_layers, num_heads, head_dim),
            values: KvTensor::empty(num_layers, num_heads, head_dim),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn append(&mut self, other: &KvCache) -> Result<()> {
        self.keys.append(&other.keys)?;
        self.values.append(&other.values)?;
        self.positions.extend_from_slice(&other.positions);
        Ok(())
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let n = self.positions.len();
        if self.keys.tokens() != n || self.values.tokens() != n {
            return Err(Error::Dimension(format!(
                "kv cache holds {} keys, {} values, {} positions",
                self.keys.tokens(),
                self.values.tokens(),
                n
            )));
        }
        Ok(())
    }
}
