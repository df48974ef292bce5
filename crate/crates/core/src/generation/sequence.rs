use crate::error::{Error, Result};

/// Token grid shape: temporal slots × rows × columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridMeta {
    pub slots: usize,
    pub height: usize,
    pub width: usize,
}

impl GridMeta {
    pub fn new(slots: usize, height: usize, width: usize) -> Self {
        Self { slots, height, width }
    }

    pub fn per_slot(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.slots * self.per_slot()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// As the `[B, S, Gh, Gw]` grid used by the tokenizer, with `B = 1`.
    pub fn as_grid(&self) -> [usize; 4] {
        [1, self.slots, self.height, self.width]
    }
}

/// Codebook indices of one sample, indexed `[slot][row][col]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub meta: GridMeta,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(meta: GridMeta, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != meta.len() {
            return Err(Error::invalid(format!(
                "token grid {}×{}×{} needs {} indices, got {}",
                meta.slots,
                meta.height,
                meta.width,
                meta.len(),
                indices.len()
            )));
        }
        Ok(Self { meta, indices })
    }

    pub fn at(&self, slot: usize, row: usize, col: usize) -> usize {
        self.indices[(slot * self.meta.height + row) * self.meta.width + col]
    }
}

/// A flattened grid plus its optional class condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// code ids in raster order
    pub tokens: Vec<usize>,
    /// class id in `[0, num_classes)`; enters the model as token `K + class`
    pub cond: Option<usize>,
    pub meta: GridMeta,
}

impl TokenSequence {
    /// Sequence length including the condition token.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.cond.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Temporal-major, then row-major within each slot.
pub fn flatten_raster(grid: &TokenGrid, cond: Option<usize>) -> TokenSequence {
    let m = grid.meta;
    let mut tokens = Vec::with_capacity(m.len());
    for s in 0..m.slots {
        for r in 0..m.height {
            for c in 0..m.width {
                tokens.push(grid.at(s, r, c));
            }
        }
    }
    TokenSequence { tokens, cond, meta: m }
}

/// Inverse of [`flatten_raster`].
pub fn unflatten(seq: &TokenSequence) -> Result<TokenGrid> {
    let m = seq.meta;
    let mut indices = vec![0; seq.tokens.len()];
    if indices.len() != m.len() {
        return Err(Error::invalid(format!(
            "sequence of {} tokens does not fill a {}×{}×{} grid",
            seq.tokens.len(),
            m.slots,
            m.height,
            m.width
        )));
    }
    let mut k = 0;
    for s in 0..m.slots {
        for r in 0..m.height {
            for c in 0..m.width {
                indices[(s * m.height + r) * m.width + c] = seq.tokens[k];
                k += 1;
            }
        }
    }
    TokenGrid::new(m, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_slot_is_row_major() {
        let g = TokenGrid::new(GridMeta::new(1, 2, 2), vec![10, 11, 12, 13]).unwrap();
        assert_eq!(flatten_raster(&g, None).tokens, vec![10, 11, 12, 13]);
    }

    #[test]
    fn slots_come_first() {
        let g = TokenGrid::new(GridMeta::new(2, 1, 2), vec![1, 2, 3, 4]).unwrap();
        let s = flatten_raster(&g, Some(0));
        assert_eq!(s.tokens, vec![1, 2, 3, 4]);
        assert_eq!(s.len(), 5);
        assert_eq!(unflatten(&s).unwrap(), g);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(TokenGrid::new(GridMeta::new(1, 2, 2), vec![0; 3]).is_err());
    }
}
