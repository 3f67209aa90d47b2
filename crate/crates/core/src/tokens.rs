use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Grid of codebook indices. Ids lie in `[0, codebook_size)` or equal the
/// reserved MASK id, which is `codebook_size` itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub codebook_size: u32,
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, codebook_size: u32, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(contract(format!("{} ids for a {rows}x{cols} grid", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i > codebook_size) {
            return Err(contract(format!("token id {bad} outside codebook of size {codebook_size}")));
        }
        Ok(Self { rows, cols, codebook_size, ids })
    }

    pub fn mask_id(&self) -> u32 {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.ids[i] == self.codebook_size
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == self.codebook_size).count()
    }

    pub fn is_complete(&self) -> bool {
        self.masked_count() == 0
    }
}
