//! Patch tokenization: image → flattened patches → projected tokens with a
//! prepended class token and additive positional embeddings.

use rand::Rng;

use crate::autograd::{concat, Graph, Var};
use crate::error::{AhanError, Result};
use crate::tensor::Tensor;

/// Patch-grid geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token matrix with its patch-grid layout. With `has_cls`, row 0 is the
/// class token and rows `1..=grid.len()` are patches in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct TokenSeq<'g> {
    pub tokens: Var<'g>,
    pub grid: Grid,
    pub has_cls: bool,
}

impl<'g> TokenSeq<'g> {
    pub fn new(tokens: Var<'g>, grid: Grid, has_cls: bool) -> Result<Self> {
        let expected = grid.len() + usize::from(has_cls);
        if tokens.shape().len() != 2 || tokens.rows() != expected {
            return Err(AhanError::shape(
                "token_seq",
                format!(
                    "{:?} does not hold {} tokens for a {}x{} grid (class token: {has_cls})",
                    tokens.shape(),
                    expected,
                    grid.rows,
                    grid.cols
                ),
            ));
        }
        Ok(TokenSeq {
            tokens,
            grid,
            has_cls,
        })
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The patch tokens only, as an `N×d` matrix.
    pub fn patch_tokens(&self) -> Result<Var<'g>> {
        if !self.has_cls {
            return Ok(self.tokens);
        }
        let idx: Vec<usize> = (1..=self.grid.len()).collect();
        self.tokens.gather_rows(&idx)
    }

    /// The class token as a `1×d` row.
    pub fn cls_token(&self) -> Result<Var<'g>> {
        if !self.has_cls {
            return Err(AhanError::invalid("cls_token", "sequence has no class token"));
        }
        self.tokens.gather_rows(&[0])
    }

    pub fn with_tokens(&self, tokens: Var<'g>) -> Result<Self> {
        TokenSeq::new(tokens, self.grid, self.has_cls)
    }
}

/// Splits an `H×W×C` image into non-overlapping `patch×patch` tiles.
///
/// Tiles are ordered row-major over the grid; each row of the result is one
/// tile flattened in `(y, x, channel)` order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(AhanError::shape(
            "patchify",
            format!("expected an HxWxC image, got {shape:?}"),
        ));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(AhanError::shape(
            "patchify",
            format!("image {h}x{w} is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gr * gc * pd);
    for py in 0..gr {
        for px in 0..gc {
            for y in 0..patch {
                let row = py * patch + y;
                let start = (row * w + px * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gr * gc, pd], out)
}

/// Learned tokenizer parameters.
#[derive(Debug, Clone)]
pub struct EmbedParams<T> {
    /// `(P·P·C)×d`
    pub projection: T,
    /// `1×d`
    pub cls_token: T,
    /// `(N+1)×d`
    pub pos_embed: T,
}

impl EmbedParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        patch_dim: usize,
        num_patches: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        EmbedParams {
            projection: Tensor::randn(&[patch_dim, dim], std, rng),
            cls_token: Tensor::randn(&[1, dim], std, rng),
            pos_embed: Tensor::randn(&[num_patches + 1, dim], std, rng),
        }
    }
}

impl<T> EmbedParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EmbedParams<U> {
        EmbedParams {
            projection: f(&self.projection),
            cls_token: f(&self.cls_token),
            pos_embed: f(&self.pos_embed),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.projection"), &self.projection);
        f(format!("{prefix}.cls_token"), &self.cls_token);
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.projection"), &mut self.projection);
        f(format!("{prefix}.cls_token"), &mut self.cls_token);
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
    }
}

/// `[cls; patches·projection] + pos_embed`
pub fn embed<'g>(
    patches: Var<'g>,
    params: &EmbedParams<Var<'g>>,
    grid: Grid,
) -> Result<TokenSeq<'g>> {
    if patches.rows() != grid.len() {
        return Err(AhanError::shape(
            "embed",
            format!("{} patches for a {}-cell grid", patches.rows(), grid.len()),
        ));
    }
    let projected = patches.matmul(params.projection)?;
    let stacked = concat(&[params.cls_token, projected], 0)?;
    if stacked.shape() != params.pos_embed.shape() {
        return Err(AhanError::shape(
            "embed",
            format!(
                "tokens {:?} vs positional embedding {:?}",
                stacked.shape(),
                params.pos_embed.shape()
            ),
        ));
    }
    TokenSeq::new(stacked.add(params.pos_embed)?, grid, true)
}

/// Binds `params` into `g` and embeds `image` in one call.
pub fn embed_image<'g>(
    g: &'g Graph,
    image: &Tensor,
    patch: usize,
    params: &EmbedParams<Var<'g>>,
) -> Result<TokenSeq<'g>> {
    let patches = patchify(image, patch)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    embed(g.leaf(patches), params, Grid::new(h / patch, w / patch))
}
