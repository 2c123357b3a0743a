//! The full network: patch embedding, a pre-norm backbone whose middle
//! layers may be twin-distracted during training, and a fused embedding
//! `[class token; region features; asymmetry signature]` of width `6d`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::{block_forward, BlockParams, QkvParams};
use crate::autograd::{concat, Graph, Var};
use crate::config::AhanConfig;
use crate::embed::{embed_image, EmbedParams};
use crate::error::{AhanError, Result};
use crate::faam::faam_forward;
use crate::hca::{hca_forward, HcaParams};
use crate::losses::{arcface_loss, total_loss, twin_triplet_loss, ArcHead, IdentityBatch};
use crate::tapwca::{gated_layer_forward, layer_is_gated, Mode};
use crate::tensor::Tensor;

/// Every learned tensor of the model plus the classifier head.
#[derive(Debug, Clone)]
pub struct AhanWeights<T> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub hca: HcaParams<T>,
    pub faam: QkvParams<T>,
    /// `6d × classes`
    pub arc: T,
}

impl AhanWeights<Tensor> {
    /// Normal(0, `init_std`) projections, unit layer-norm gains, zero biases
    /// and zero scale logits.
    pub fn init<R: Rng + ?Sized>(cfg: &AhanConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(AhanError::invalid("init", "need at least one class"));
        }
        let (d, std) = (cfg.dim, cfg.init_std);
        Ok(AhanWeights {
            embed: EmbedParams::init(cfg.patch_dim(), cfg.num_patches(), d, std, rng),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::init(d, cfg.heads, cfg.mlp_ratio, std, rng))
                .collect(),
            hca: HcaParams::init(d, cfg.scales.len(), std, rng),
            faam: QkvParams::init(d, std, rng),
            arc: Tensor::randn(&[cfg.embedding_dim(), num_classes], std, rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arc.cols()
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Binds every tensor as a leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> AhanWeights<Var<'g>> {
        self.map(&mut |t| g.leaf(t.clone()))
    }

    /// Tensors in [`AhanWeights::visit`] order.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl<T> AhanWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AhanWeights<U> {
        AhanWeights {
            embed: self.embed.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            hca: self.hca.map(f),
            faam: self.faam.map(f),
            arc: f(&self.arc),
        }
    }

    /// Visits tensors in a fixed order with dotted names.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.embed.visit(&p("embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&p(&format!("block{i}")), f);
        }
        self.hca.visit(&p("hca"), f);
        self.faam.visit(&p("faam"), f);
        f(p("arc"), &self.arc);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.embed.visit_mut(&p("embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&p(&format!("block{i}")), f);
        }
        self.hca.visit_mut(&p("hca"), f);
        self.faam.visit_mut(&p("faam"), f);
        f(p("arc"), &mut self.arc);
    }

    /// Same structure with the given tensors in visit order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Result<AhanWeights<U>> {
        let expected = {
            let mut n = 0;
            self.visit("", &mut |_, _| n += 1);
            n
        };
        if values.len() != expected {
            return Err(AhanError::invalid(
                "rebuild",
                format!("{} tensors for {expected} slots", values.len()),
            ));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }
}

/// Forward pass to the fused `1×6d` embedding.
///
/// In training mode with `gate` set, layers inside the configured range let
/// the anchor attend to `twin`, which must then be present. Inference never
/// reads `twin` or `gate`.
pub fn ahan_forward<'g>(
    g: &'g Graph,
    image: &Tensor,
    weights: &AhanWeights<Var<'g>>,
    cfg: &AhanConfig,
    mode: Mode,
    twin: Option<&Tensor>,
    gate: bool,
) -> Result<Var<'g>> {
    if weights.blocks.len() != cfg.depth {
        return Err(AhanError::shape(
            "ahan_forward",
            format!("{} blocks for depth {}", weights.blocks.len(), cfg.depth),
        ));
    }
    let eps = cfg.layer_norm_eps;
    let distract = (1..=cfg.depth).any(|l| layer_is_gated(l, &cfg.tapwca, mode, gate));
    let mut anchor = embed_image(g, image, cfg.patch, &weights.embed)?;
    let mut twin_seq = if distract {
        let t = twin.ok_or_else(|| {
            AhanError::invalid(
                "ahan_forward",
                "twin-distracted training forward needs a twin image",
            )
        })?;
        Some(embed_image(g, t, cfg.patch, &weights.embed)?)
    } else {
        None
    };
    let last_gated = cfg.tapwca.layer_range[1];
    for (i, block) in weights.blocks.iter().enumerate() {
        let layer = i + 1;
        let next = gated_layer_forward(layer, anchor, twin_seq, block, eps, &cfg.tapwca, mode, gate)?;
        twin_seq = match twin_seq {
            Some(t) if layer < last_gated => Some(block_forward(t, block, eps, 0, None)?),
            _ => None,
        };
        anchor = next;
    }
    let regions = cfg.region_specs()?;
    let f_global = anchor.cls_token()?;
    let f_hca = hca_forward(anchor, &regions, &cfg.scales, &weights.hca)?;
    let f_asym = faam_forward(anchor, &weights.faam)?;
    concat(&[f_global, f_hca, f_asym], 1)
}

/// Inference embeddings, one `1×6d` row per image.
pub fn embed_images(weights: &AhanWeights<Tensor>, cfg: &AhanConfig, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let g = Graph::new();
            let w = weights.bind(&g);
            let f = ahan_forward(&g, img, &w, cfg, Mode::Infer, None, false)?;
            let row = f.value().data().to_vec();
            Ok(row)
        })
        .collect()
}

/// Cosine similarity of two embeddings.
pub fn verify(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AhanError::shape(
            "verify",
            format!("embedding widths {} and {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(AhanError::invalid("verify", "zero embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One training sample: anchor image, class label and optional twin image.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a Tensor,
    pub label: usize,
    pub twin: Option<&'a Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub arcface: Var<'g>,
    pub triplet: Var<'g>,
    pub total: Var<'g>,
}

/// Forward every sample and combine the objectives. Samples without a twin
/// take the plain path even in a gated batch.
pub fn batch_loss<'g>(
    g: &'g Graph,
    weights: &AhanWeights<Var<'g>>,
    cfg: &AhanConfig,
    samples: &[Sample<'_>],
    gate: bool,
    twin_of: &BTreeMap<usize, usize>,
) -> Result<LossTerms<'g>> {
    if samples.is_empty() {
        return Err(AhanError::invalid("batch_loss", "empty batch"));
    }
    let rows = samples
        .iter()
        .map(|s| ahan_forward(g, s.image, weights, cfg, Mode::Train, s.twin, gate && s.twin.is_some()))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = concat(&rows, 0)?;
    let labels = samples.iter().map(|s| s.label).collect();
    let batch = IdentityBatch::new(embeddings, labels, twin_of.clone())?;
    let head = ArcHead {
        weight: weights.arc,
        margin: cfg.loss.arc_margin,
        scale: cfg.loss.arc_scale,
    };
    let arcface = arcface_loss(&batch, &head)?;
    let triplet = twin_triplet_loss(&batch, cfg.loss.triplet_margin)?;
    let total = total_loss(arcface, triplet, cfg.loss.lambda)?;
    Ok(LossTerms {
        arcface,
        triplet,
        total,
    })
}
