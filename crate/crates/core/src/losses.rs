//! Training objectives and the twin-oversampling batch sampler.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::autograd::Var;
use crate::error::{AhanError, Result};
use crate::manifest::TwinManifest;
use crate::tensor::Tensor;

/// Stacked embeddings with class labels and the (symmetric) twin relation
/// between classes.
#[derive(Debug, Clone)]
pub struct IdentityBatch<'g> {
    pub embeddings: Var<'g>,
    pub labels: Vec<usize>,
    pub twin_of: BTreeMap<usize, usize>,
}

impl<'g> IdentityBatch<'g> {
    pub fn new(
        embeddings: Var<'g>,
        labels: Vec<usize>,
        twin_of: BTreeMap<usize, usize>,
    ) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
            return Err(AhanError::shape(
                "identity_batch",
                format!("{:?} embeddings for {} labels", embeddings.shape(), labels.len()),
            ));
        }
        for (&a, &b) in &twin_of {
            if a == b || twin_of.get(&b) != Some(&a) {
                return Err(AhanError::invalid(
                    "identity_batch",
                    format!("twin relation is not an involution at class {a}"),
                ));
            }
        }
        Ok(IdentityBatch {
            embeddings,
            labels,
            twin_of,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Additive-angular-margin classifier head; `weight` is `D×classes`.
#[derive(Debug, Clone)]
pub struct ArcHead<T> {
    pub weight: T,
    pub margin: f64,
    pub scale: f64,
}

impl<T> ArcHead<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ArcHead<U> {
        ArcHead {
            weight: f(&self.weight),
            margin: self.margin,
            scale: self.scale,
        }
    }
}

/// Cosine logits between normalized embeddings and normalized class columns.
pub fn cosine_logits<'g>(embeddings: Var<'g>, weight: Var<'g>) -> Result<Var<'g>> {
    let e = embeddings.l2_normalize_rows()?;
    let w = weight.transpose()?.l2_normalize_rows()?.transpose()?;
    e.matmul(w)
}

/// Cross-entropy over `s · cos(θ_y + m)`-adjusted cosine logits.
pub fn arcface_loss<'g>(batch: &IdentityBatch<'g>, head: &ArcHead<Var<'g>>) -> Result<Var<'g>> {
    let classes = head.weight.cols();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(AhanError::invalid(
            "arcface_loss",
            format!("label {bad} outside {classes} classes"),
        ));
    }
    cosine_logits(batch.embeddings, head.weight)?
        .arc_margin(&batch.labels, head.margin)?
        .scale(head.scale)
        .cross_entropy(&batch.labels)
}

/// Positive and negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining on a cosine-similarity matrix: the least similar
/// same-class sample is the positive; the most similar twin-class sample is
/// the negative when one is present, otherwise the most similar sample of any
/// other class. Ties go to the lowest index. Anchors lacking a positive or a
/// negative are skipped.
pub fn mine_triplets(sim: &Tensor, labels: &[usize], twin_of: &BTreeMap<usize, usize>) -> Vec<Triplet> {
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        let pick = |pred: &dyn Fn(usize) -> bool, better: &dyn Fn(f64, f64) -> bool| {
            let mut best: Option<usize> = None;
            for j in (0..b).filter(|&j| j != a && pred(j)) {
                if best.is_none_or(|k| better(sim.at(a, j), sim.at(a, k))) {
                    best = Some(j);
                }
            }
            best
        };
        let Some(positive) = pick(&|j| labels[j] == labels[a], &|x, y| x < y) else {
            continue;
        };
        let twin = twin_of.get(&labels[a]).copied();
        let negative = twin
            .and_then(|t| pick(&|j| labels[j] == t, &|x, y| x > y))
            .or_else(|| pick(&|j| labels[j] != labels[a], &|x, y| x > y));
        if let Some(negative) = negative {
            out.push(Triplet {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    out
}

/// Mean of `max(0, d(a,p) − d(a,n) + margin)` over mined anchors, with cosine
/// distance `d = 1 − cos`.
pub fn twin_triplet_loss<'g>(batch: &IdentityBatch<'g>, margin: f64) -> Result<Var<'g>> {
    let e = batch.embeddings.l2_normalize_rows()?;
    let sim = e.matmul(e.transpose()?)?;
    let triplets = mine_triplets(&sim.value(), &batch.labels, &batch.twin_of);
    if triplets.is_empty() {
        return Err(AhanError::invalid(
            "twin_triplet_loss",
            "no anchor has both a positive and a negative in the batch",
        ));
    }
    let b = batch.len();
    let pos: Vec<usize> = triplets.iter().map(|t| t.anchor * b + t.positive).collect();
    let neg: Vec<usize> = triplets.iter().map(|t| t.anchor * b + t.negative).collect();
    // d(a,p) − d(a,n) = cos(a,n) − cos(a,p)
    Ok(sim
        .pick(&neg)?
        .sub(sim.pick(&pos)?)?
        .add_scalar(margin)
        .relu()
        .mean())
}

/// `l_arc + λ · l_trip`.
pub fn total_loss<'g>(l_arc: Var<'g>, l_trip: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    l_arc.add(l_trip.scale(lambda))
}

/// One sampled anchor: manifest entry, class label, and the twin image used
/// for distraction (absent for twinless identities).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub image: usize,
    pub label: usize,
    pub twin_image: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub items: Vec<BatchItem>,
}

impl SampledBatch {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Anchors whose twin class also contributes anchors to this batch.
    pub fn twin_paired(&self, twin_classes: &[Option<usize>]) -> usize {
        self.items
            .iter()
            .filter(|i| {
                twin_classes[i.label].is_some_and(|t| self.items.iter().any(|j| j.label == t))
            })
            .count()
    }
}

/// Draws batches built from two-image identity units. A twin block holds a
/// unit of each sibling; a fraction `ratio / (ratio + 1)` of the anchors, in
/// expectation, comes from twin blocks and the rest from twinless units.
/// Without twinless identities every batch is made of twin blocks.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    images: Vec<Vec<usize>>,
    twin_classes: Vec<Option<usize>>,
    families: Vec<(usize, usize)>,
    singles: Vec<usize>,
    batch_size: usize,
    twin_fraction: f64,
}

impl BatchSampler {
    pub fn new(manifest: &TwinManifest, batch_size: usize, ratio: f64) -> Result<Self> {
        if manifest.is_empty() {
            return Err(AhanError::invalid("sample_batch", "empty manifest"));
        }
        if batch_size < 2 {
            return Err(AhanError::invalid("sample_batch", "batch size must be at least 2"));
        }
        if !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(AhanError::invalid("sample_batch", "oversample ratio must be >= 0"));
        }
        let images = manifest.images_by_identity();
        let twin_classes = manifest.twin_classes();
        let mut families = Vec::new();
        let mut singles = Vec::new();
        for (c, twin) in twin_classes.iter().enumerate() {
            match twin {
                Some(t) if c < *t => families.push((c, *t)),
                Some(_) => {}
                None => singles.push(c),
            }
        }
        if families.is_empty() {
            return Err(AhanError::invalid(
                "sample_batch",
                "manifest has no twin pair with images on both sides",
            ));
        }
        Ok(BatchSampler {
            images,
            twin_classes,
            families,
            singles,
            batch_size,
            twin_fraction: ratio / (ratio + 1.0),
        })
    }

    pub fn twin_classes(&self) -> &[Option<usize>] {
        &self.twin_classes
    }

    pub fn num_classes(&self) -> usize {
        self.images.len()
    }

    /// Twin relation between classes, both directions.
    pub fn twin_map(&self) -> BTreeMap<usize, usize> {
        self.twin_classes
            .iter()
            .enumerate()
            .filter_map(|(c, t)| t.map(|t| (c, t)))
            .collect()
    }

    fn draw_images<R: Rng + ?Sized>(&self, class: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let pool = &self.images[class];
        if pool.len() >= n {
            pool.choose_multiple(rng, n).copied().collect()
        } else {
            (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    }

    fn push_unit<R: Rng + ?Sized>(
        &self,
        items: &mut Vec<BatchItem>,
        class: usize,
        twin: Option<usize>,
        n: usize,
        rng: &mut R,
    ) {
        for image in self.draw_images(class, n, rng) {
            let twin_image = twin.map(|t| self.draw_images(t, 1, rng)[0]);
            items.push(BatchItem {
                image,
                label: class,
                twin_image,
            });
        }
    }

    fn push_family<R: Rng + ?Sized>(
        &self,
        items: &mut Vec<BatchItem>,
        (a, b): (usize, usize),
        size: usize,
        rng: &mut R,
    ) {
        let na = size.div_ceil(2);
        self.push_unit(items, a, Some(b), na, rng);
        if size > na {
            self.push_unit(items, b, Some(a), size - na, rng);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledBatch {
        let b = self.batch_size;
        let blocks = if self.singles.is_empty() {
            b.div_ceil(4)
        } else {
            let target = self.twin_fraction * b as f64 / 4.0;
            let mut blocks = target.floor() as usize;
            if rng.random::<f64>() < target.fract() {
                blocks += 1;
            }
            blocks.min(b / 4)
        };

        let mut families = self.families.clone();
        families.shuffle(rng);
        let mut items = Vec::with_capacity(b);
        for k in 0..blocks {
            let size = (b - items.len()).min(4);
            let fam = if k < families.len() {
                families[k]
            } else {
                families[rng.random_range(0..families.len())]
            };
            self.push_family(&mut items, fam, size, rng);
        }
        let mut singles = self.singles.clone();
        singles.shuffle(rng);
        let mut k = 0;
        while items.len() < b {
            let size = (b - items.len()).min(2);
            let class = if k < singles.len() {
                singles[k]
            } else {
                singles[rng.random_range(0..singles.len())]
            };
            self.push_unit(&mut items, class, None, size, rng);
            k += 1;
        }
        SampledBatch { items }
    }
}

/// One batch from a fresh sampler over `manifest`.
pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &TwinManifest,
    batch_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<SampledBatch> {
    Ok(BatchSampler::new(manifest, batch_size, ratio)?.sample(rng))
}
