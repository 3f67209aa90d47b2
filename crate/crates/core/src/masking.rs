//! Perturbed center edit masks and their token-resolution counterparts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::tokens::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta_x: i64,
    pub delta_y: i64,
}

impl Perturbation {
    /// Integer offsets drawn uniformly from `[-W/16, W/16]` and `[-H/16, H/16]`.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let (my, mx) = ((height / 16) as i64, (width / 16) as i64);
        let delta_y = rng.random_range(-my..=my);
        let delta_x = rng.random_range(-mx..=mx);
        Self { delta_x, delta_y }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask {
    pub height: usize,
    pub width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub center_row: usize,
    pub center_col: usize,
    pub perturbation: Perturbation,
    /// Row-major, 1 marks pixels to regenerate.
    #[serde(skip)]
    pub grid: Vec<u8>,
}

impl EditMask {
    /// Patch of `patch_height x patch_width` around `(H/2 + dy, W/2 + dx)`,
    /// covering rows `[center_row - H'/2, center_row - H'/2 + H')`.
    pub fn with_perturbation(
        height: usize,
        width: usize,
        patch_height: usize,
        patch_width: usize,
        perturbation: Perturbation,
    ) -> Result<Self> {
        if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
            return Err(config(format!("mask size {height}x{width} must be a positive multiple of 16")));
        }
        if patch_height == 0 || patch_width == 0 || patch_height > height / 2 || patch_width > width / 2 {
            return Err(config(format!(
                "patch {patch_height}x{patch_width} must be nonempty and at most half of {height}x{width}"
            )));
        }
        let (my, mx) = ((height / 16) as i64, (width / 16) as i64);
        let Perturbation { delta_x, delta_y } = perturbation;
        if delta_y.abs() > my || delta_x.abs() > mx {
            return Err(config(format!("perturbation ({delta_y}, {delta_x}) exceeds ({my}, {mx})")));
        }
        let center_row = (height / 2) as i64 + delta_y;
        let center_col = (width / 2) as i64 + delta_x;
        let top = (center_row - (patch_height / 2) as i64) as usize;
        let left = (center_col - (patch_width / 2) as i64) as usize;
        let mut grid = vec![0u8; height * width];
        for y in top..top + patch_height {
            grid[y * width + left..y * width + left + patch_width].fill(1);
        }
        Ok(Self {
            height,
            width,
            patch_height,
            patch_width,
            center_row: center_row as usize,
            center_col: center_col as usize,
            perturbation,
            grid,
        })
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        let top = self.center_row - self.patch_height / 2;
        top..top + self.patch_height
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        let left = self.center_col - self.patch_width / 2;
        left..left + self.patch_width
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    /// Rebuilds the pixel grid after deserialization.
    pub fn restore_grid(&mut self) -> Result<()> {
        let fresh =
            Self::with_perturbation(self.height, self.width, self.patch_height, self.patch_width, self.perturbation)?;
        self.grid = fresh.grid;
        Ok(())
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    patch_height: usize,
    patch_width: usize,
    rng: &mut R,
) -> Result<EditMask> {
    let delta = Perturbation::sample(height, width, rng);
    EditMask::with_perturbation(height, width, patch_height, patch_width, delta)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub rows: usize,
    pub cols: usize,
    pub factor: usize,
    pub grid: Vec<u8>,
}

impl TokenMask {
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.grid.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| i)
    }
}

/// Max-pools the pixel mask over `factor x factor` blocks.
pub fn downsample_mask(mask: &EditMask, factor: usize) -> Result<TokenMask> {
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(config(format!("factor {factor} does not divide {}x{}", mask.height, mask.width)));
    }
    let (rows, cols) = (mask.height / factor, mask.width / factor);
    let mut grid = vec![0u8; rows * cols];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.grid[y * mask.width + x] == 1 {
                grid[(y / factor) * cols + x / factor] = 1;
            }
        }
    }
    Ok(TokenMask { rows, cols, factor, grid })
}

/// Replaces every token under the mask with the MASK id.
pub fn apply_mask(tokens: &TokenGrid, mask: &TokenMask) -> Result<TokenGrid> {
    if tokens.rows != mask.rows || tokens.cols != mask.cols {
        return Err(contract(format!(
            "token grid {}x{} does not match mask {}x{}",
            tokens.rows, tokens.cols, mask.rows, mask.cols
        )));
    }
    let mut out = tokens.clone();
    for i in mask.ones() {
        out.ids[i] = tokens.mask_id();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unperturbed_and_perturbed_patches() {
        let m = EditMask::with_perturbation(64, 64, 32, 32, Perturbation { delta_x: 0, delta_y: 0 }).unwrap();
        assert_eq!((m.rows(), m.cols()), (16..48, 16..48));
        let m = EditMask::with_perturbation(64, 64, 32, 32, Perturbation { delta_x: 4, delta_y: -4 }).unwrap();
        assert_eq!((m.center_row, m.center_col), (28, 36));
        assert_eq!((m.rows(), m.cols()), (12..44, 20..52));
        for y in 0..64 {
            for x in 0..64 {
                let inside = (12..44).contains(&y) && (20..52).contains(&x);
                assert_eq!(m.grid[y * 64 + x] == 1, inside);
            }
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let mut r = crate::seed::rng(0);
        assert!(matches!(sample_mask(64, 64, 33, 16, &mut r), Err(crate::Error::Config(_))));
        assert!(matches!(sample_mask(60, 64, 16, 16, &mut r), Err(crate::Error::Config(_))));
    }

    #[test]
    fn token_mask_examples() {
        let m = EditMask::with_perturbation(64, 64, 32, 32, Perturbation { delta_x: 4, delta_y: -4 }).unwrap();
        let t = downsample_mask(&m, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expected = (1..=5).contains(&i) && (2..=6).contains(&j);
                assert_eq!(t.grid[i * 8 + j] == 1, expected, "cell ({i}, {j})");
            }
        }
        assert!(downsample_mask(&m, 3).is_err());
    }

    #[test]
    fn apply_mask_substitutes() {
        let tokens = TokenGrid::new(2, 2, 8, vec![1, 2, 3, 4]).unwrap();
        let mask = TokenMask { rows: 2, cols: 2, factor: 8, grid: vec![0, 1, 1, 0] };
        assert_eq!(apply_mask(&tokens, &mask).unwrap().ids, vec![1, 8, 8, 4]);
        let wrong = TokenMask { rows: 1, cols: 4, factor: 8, grid: vec![0; 4] };
        assert!(matches!(apply_mask(&tokens, &wrong), Err(crate::Error::Contract(_))));
    }
}
