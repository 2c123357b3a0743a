//! Left/right asymmetry features: the patch grid is split at its vertical
//! midline, the right half is mirrored into left-half coordinates, and the
//! halves cross-attend to each other in both directions.

use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, Attended, QkvParams};
use crate::autograd::Var;
use crate::embed::{Grid, TokenSeq};
use crate::error::{AhanError, Result};
use crate::trace::{AttnSite, FaamDirection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// One half of the patch grid, `rows × cols/2` tokens in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct HalfTokens<'g> {
    pub tokens: Var<'g>,
    pub side: Side,
    pub grid: Grid,
}

/// Shared projections used for both attention directions.
pub type FaamParams<T> = QkvParams<T>;

/// Splits patch tokens into the column ranges `[0, W/2)` and `[W/2, W)`.
pub fn split_halves<'g>(x: TokenSeq<'g>) -> Result<(HalfTokens<'g>, HalfTokens<'g>)> {
    let Grid { rows, cols } = x.grid;
    if cols % 2 != 0 {
        return Err(AhanError::invalid(
            "split_halves",
            format!("{rows}x{cols} grid has an odd width and cannot be split into equal halves"),
        ));
    }
    let half = cols / 2;
    let patches = x.patch_tokens()?;
    let side_indices = |offset: usize| -> Vec<usize> {
        (0..rows)
            .flat_map(|r| (0..half).map(move |c| r * cols + offset + c))
            .collect()
    };
    let grid = Grid::new(rows, half);
    let left = HalfTokens {
        tokens: patches.gather_rows(&side_indices(0))?,
        side: Side::Left,
        grid,
    };
    let right = HalfTokens {
        tokens: patches.gather_rows(&side_indices(half))?,
        side: Side::Right,
        grid,
    };
    Ok((left, right))
}

/// Reverses column order within every grid row.
pub fn hflip<'g>(h: HalfTokens<'g>) -> Result<HalfTokens<'g>> {
    let Grid { rows, cols } = h.grid;
    let idx: Vec<usize> = (0..rows)
        .flat_map(|r| (0..cols).rev().map(move |c| r * cols + c))
        .collect();
    Ok(HalfTokens {
        tokens: h.tokens.gather_rows(&idx)?,
        ..h
    })
}

/// `(A_lr, A_rl)`: left queries over right keys/values, and the mirror.
pub fn asym_cross_attention<'g>(
    left: HalfTokens<'g>,
    right_flipped: HalfTokens<'g>,
    params: &FaamParams<Var<'g>>,
) -> Result<(Attended<'g>, Attended<'g>)> {
    if left.tokens.shape() != right_flipped.tokens.shape() {
        return Err(AhanError::shape(
            "asym_cross_attention",
            format!(
                "left {:?} vs right {:?}",
                left.tokens.shape(),
                right_flipped.tokens.shape()
            ),
        ));
    }
    let lr = cross_attention(left.tokens, right_flipped.tokens, params)?;
    let rl = cross_attention(right_flipped.tokens, left.tokens, params)?;
    let g = left.tokens.graph();
    g.record_attention(
        AttnSite::Faam {
            direction: FaamDirection::LeftToRight,
        },
        lr.weights,
    );
    g.record_attention(
        AttnSite::Faam {
            direction: FaamDirection::RightToLeft,
        },
        rl.weights,
    );
    Ok((lr, rl))
}

/// Row mean of `|A_lr − A_rl|`, a nonnegative `1×d` row.
pub fn asymmetry_signature<'g>(a_lr: Var<'g>, a_rl: Var<'g>) -> Result<Var<'g>> {
    if a_lr.shape() != a_rl.shape() {
        return Err(AhanError::shape(
            "asymmetry_signature",
            format!("{:?} vs {:?}", a_lr.shape(), a_rl.shape()),
        ));
    }
    a_lr.sub(a_rl)?.abs().mean_pool(0)
}

/// Split, mirror, cross-attend and summarize.
pub fn faam_forward<'g>(x: TokenSeq<'g>, params: &FaamParams<Var<'g>>) -> Result<Var<'g>> {
    let (left, right) = split_halves(x)?;
    let (lr, rl) = asym_cross_attention(left, hflip(right)?, params)?;
    asymmetry_signature(lr.output, rl.output)
}
