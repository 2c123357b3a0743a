//! Scaled dot-product attention, multi-head self-attention and the pre-norm
//! transformer block used by the backbone.

use rand::Rng;

use crate::autograd::{concat, Var};
use crate::embed::TokenSeq;
use crate::error::{AhanError, Result};
use crate::tapwca;
use crate::tensor::Tensor;
use crate::trace::AttnSite;

/// Output of [`scaled_attention`] together with its row-stochastic weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended<'g> {
    pub output: Var<'g>,
    pub weights: Var<'g>,
}

/// `softmax(Q·Kᵀ / √d_q) · V`, where `d_q` is the column count of `Q`.
pub fn scaled_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Attended<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(AhanError::shape(
            "scaled_attention",
            format!("Q {qs:?}, K {ks:?}, V {vs:?} must all be matrices"),
        ));
    }
    if ks[0] != vs[0] {
        return Err(AhanError::shape(
            "scaled_attention",
            format!("K has {} rows but V has {}", ks[0], vs[0]),
        ));
    }
    if qs[1] != ks[1] {
        return Err(AhanError::shape(
            "scaled_attention",
            format!("Q width {} differs from K width {}", qs[1], ks[1]),
        ));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let logits = q.matmul(k.transpose()?)?.scale(scale);
    let weights = logits.softmax(1)?;
    let output = weights.matmul(v)?;
    Ok(Attended { output, weights })
}

/// Per-head projections plus the output projection.
#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    /// One `d×(d/h)` matrix per head.
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    /// `d×d`
    pub wo: T,
}

impl AttnParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        let hd = dim / heads;
        let per_head = |rng: &mut R| -> Vec<Tensor> {
            (0..heads).map(|_| Tensor::randn(&[dim, hd], std, rng)).collect()
        };
        let wq = per_head(rng);
        let wk = per_head(rng);
        let wv = per_head(rng);
        AttnParams {
            wq,
            wk,
            wv,
            wo: Tensor::randn(&[dim, dim], std, rng),
        }
    }
}

impl<T> AttnParams<T> {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttnParams<U> {
        AttnParams {
            wq: self.wq.iter().map(&mut *f).collect(),
            wk: self.wk.iter().map(&mut *f).collect(),
            wv: self.wv.iter().map(&mut *f).collect(),
            wo: f(&self.wo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, mats) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            for (h, m) in mats.iter().enumerate() {
                f(format!("{prefix}.{name}.{h}"), m);
            }
        }
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (name, mats) in [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)] {
            for (h, m) in mats.iter_mut().enumerate() {
                f(format!("{prefix}.{name}.{h}"), m);
            }
        }
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

fn check_attn_params(x: Var<'_>, params: &AttnParams<Var<'_>>) -> Result<()> {
    let d = x.cols();
    let heads = params.heads();
    if heads == 0 || d % heads != 0 {
        return Err(AhanError::shape(
            "mhsa",
            format!("width {d} is not divisible by {heads} heads"),
        ));
    }
    for w in params.wq.iter().chain(&params.wk).chain(&params.wv) {
        if w.shape() != [d, d / heads] {
            return Err(AhanError::shape(
                "mhsa",
                format!("head projection {:?}, expected [{d}, {}]", w.shape(), d / heads),
            ));
        }
    }
    if params.wo.shape() != [d, d] {
        return Err(AhanError::shape(
            "mhsa",
            format!("output projection {:?}, expected [{d}, {d}]", params.wo.shape()),
        ));
    }
    Ok(())
}

/// Multi-head attention over a (normalized) token matrix.
///
/// With `distractor`, each head's keys and values are extended by the
/// distractor's projected tokens (anchor rows first) and the attention is
/// recorded as twin distraction instead of plain self-attention. `layer` is
/// only used to label traced attention weights.
pub fn multi_head<'g>(
    x: Var<'g>,
    params: &AttnParams<Var<'g>>,
    distractor: Option<Var<'g>>,
    layer: usize,
) -> Result<Var<'g>> {
    check_attn_params(x, params)?;
    if let Some(t) = distractor {
        if t.cols() != x.cols() {
            return Err(AhanError::shape(
                "mhsa",
                format!("distractor width {} vs {}", t.cols(), x.cols()),
            ));
        }
    }
    let g = x.graph();
    let mut heads = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let q = x.matmul(params.wq[h])?;
        let k = x.matmul(params.wk[h])?;
        let v = x.matmul(params.wv[h])?;
        let att = match distractor {
            None => {
                let att = scaled_attention(q, k, v)?;
                g.record_attention(AttnSite::Backbone { layer, head: h }, att.weights);
                att
            }
            Some(t) => {
                let kt = t.matmul(params.wk[h])?;
                let vt = t.matmul(params.wv[h])?;
                let (kc, vc) = tapwca::combine_kv(k, Some(kt), v, Some(vt))?;
                let att = tapwca::ta_attention(q, kc, vc)?;
                g.record_attention(AttnSite::TwinDistraction { layer, head: h }, att.weights);
                att
            }
        };
        heads.push(att.output);
    }
    concat(&heads, 1)?.matmul(params.wo)
}

/// Multi-head self-attention; token count and width are preserved.
pub fn mhsa<'g>(x: TokenSeq<'g>, params: &AttnParams<Var<'g>>) -> Result<TokenSeq<'g>> {
    x.with_tokens(multi_head(x.tokens, params, None, 0)?)
}

/// Single-head query/key/value projections, each `d×d`.
#[derive(Debug, Clone)]
pub struct QkvParams<T> {
    pub q: T,
    pub k: T,
    pub v: T,
}

impl QkvParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        QkvParams {
            q: Tensor::randn(&[dim, dim], std, rng),
            k: Tensor::randn(&[dim, dim], std, rng),
            v: Tensor::randn(&[dim, dim], std, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        QkvParams {
            q: Tensor::eye(dim),
            k: Tensor::eye(dim),
            v: Tensor::eye(dim),
        }
    }
}

impl<T> QkvParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> QkvParams<U> {
        QkvParams {
            q: f(&self.q),
            k: f(&self.k),
            v: f(&self.v),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.q"), &self.q);
        f(format!("{prefix}.k"), &self.k);
        f(format!("{prefix}.v"), &self.v);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.q"), &mut self.q);
        f(format!("{prefix}.k"), &mut self.k);
        f(format!("{prefix}.v"), &mut self.v);
    }
}

/// Cross-attention of `queries` over `context`, both projected by `proj`.
pub fn cross_attention<'g>(
    queries: Var<'g>,
    context: Var<'g>,
    proj: &QkvParams<Var<'g>>,
) -> Result<Attended<'g>> {
    let q = queries.matmul(proj.q)?;
    let k = context.matmul(proj.k)?;
    let v = context.matmul(proj.v)?;
    scaled_attention(q, k, v)
}

/// Pre-norm transformer block parameters.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub attn: AttnParams<T>,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    /// `d×(r·d)`
    pub ff_w1: T,
    pub ff_b1: T,
    /// `(r·d)×d`
    pub ff_w2: T,
    pub ff_b2: T,
}

impl BlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        BlockParams {
            attn: AttnParams::init(dim, heads, std, rng),
            ln1_gamma: Tensor::ones(&[1, dim]),
            ln1_beta: Tensor::zeros(&[1, dim]),
            ln2_gamma: Tensor::ones(&[1, dim]),
            ln2_beta: Tensor::zeros(&[1, dim]),
            ff_w1: Tensor::randn(&[dim, hidden], std, rng),
            ff_b1: Tensor::zeros(&[1, hidden]),
            ff_w2: Tensor::randn(&[hidden, dim], std, rng),
            ff_b2: Tensor::zeros(&[1, dim]),
        }
    }

    /// Zeroes every weight whose output feeds a residual branch, turning
    /// the block into the identity map.
    pub fn zero_sublayers(&mut self) {
        self.attn.wo.fill(0.0);
        self.ff_w2.fill(0.0);
        self.ff_b2.fill(0.0);
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.map(f),
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            ff_w1: f(&self.ff_w1),
            ff_b1: f(&self.ff_b1),
            ff_w2: f(&self.ff_w2),
            ff_b2: f(&self.ff_b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &self.ln1_beta);
        f(format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &self.ln2_beta);
        f(format!("{prefix}.ff_w1"), &self.ff_w1);
        f(format!("{prefix}.ff_b1"), &self.ff_b1);
        f(format!("{prefix}.ff_w2"), &self.ff_w2);
        f(format!("{prefix}.ff_b2"), &self.ff_b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        f(format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(format!("{prefix}.ff_w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff_b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff_w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff_b2"), &mut self.ff_b2);
    }
}

/// Pre-norm input of the attention sub-layer, `γ₁ ⊙ LN(x) + β₁`.
pub fn attention_input<'g>(
    x: Var<'g>,
    params: &BlockParams<Var<'g>>,
    eps: f64,
) -> Result<Var<'g>> {
    x.layer_norm(eps)?
        .mul_row(params.ln1_gamma)?
        .add_row(params.ln1_beta)
}

/// One block: `x + attn(norm(x))`, then `+ ffn(norm(·))`.
///
/// `distractor`, when present, is the pre-norm attention input of the twin
/// sequence at the same layer and switches attention to twin distraction.
pub fn block_forward<'g>(
    x: TokenSeq<'g>,
    params: &BlockParams<Var<'g>>,
    eps: f64,
    layer: usize,
    distractor: Option<Var<'g>>,
) -> Result<TokenSeq<'g>> {
    if x.width() != params.ln1_gamma.cols() {
        return Err(AhanError::shape(
            "transformer_block",
            format!("token width {} vs block width {}", x.width(), params.ln1_gamma.cols()),
        ));
    }
    let normed = attention_input(x.tokens, params, eps)?;
    let h = x
        .tokens
        .add(multi_head(normed, &params.attn, distractor, layer)?)?;
    let n2 = h.layer_norm(eps)?.mul_row(params.ln2_gamma)?.add_row(params.ln2_beta)?;
    let ff = n2
        .matmul(params.ff_w1)?
        .add_row(params.ff_b1)?
        .gelu()
        .matmul(params.ff_w2)?
        .add_row(params.ff_b2)?;
    x.with_tokens(h.add(ff)?)
}

/// Standard block without twin distraction.
pub fn transformer_block<'g>(
    x: TokenSeq<'g>,
    params: &BlockParams<Var<'g>>,
    eps: f64,
) -> Result<TokenSeq<'g>> {
    block_forward(x, params, eps, 0, None)
}
