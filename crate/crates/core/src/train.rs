//! Optimization loop: twin-oversampled batches, per-batch distraction gate,
//! gradient accumulation and AdamW with a cosine learning-rate schedule.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{AdamConfig, AugmentConfig, RunConfig};
use crate::error::{AhanError, Result};
use crate::losses::BatchSampler;
use crate::manifest::TwinManifest;
use crate::model::{batch_loss, AhanWeights, Sample};
use crate::tapwca::{GateSampler, Mode};
use crate::tensor::Tensor;

/// `base · ½(1 + cos(π t / total))` for update index `t` in `[0, total)`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// Adam moments with weight decay decoupled from the gradient and scaled by
/// the learning rate, so `lr = 0` leaves weights untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let AdamConfig {
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

/// Horizontal flip and multiplicative brightness jitter, clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let mut out = image.clone();
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if cfg.hflip && rng.random::<bool>() {
        let src = image.data();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (a, b) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
                dst[a..a + c].copy_from_slice(&src[b..b + c]);
            }
        }
    }
    if cfg.brightness > 0.0 {
        let factor = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
        out = out.map(|v| (v * factor).clamp(0.0, 1.0));
    }
    out
}

/// Augmentations present in the config that the trainer does not apply.
pub fn unsupported_augmentations(cfg: &AugmentConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if cfg.contrast != 0.0 {
        out.push("contrast");
    }
    if cfg.saturation != 0.0 {
        out.push("saturation");
    }
    if cfg.rotation_deg != 0.0 {
        out.push("rotation_deg");
    }
    out
}

/// Loss values of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based micro-batch index.
    pub step: usize,
    pub total: f64,
    pub arcface: f64,
    pub triplet: f64,
    /// Learning rate of the update this micro-batch contributes to.
    pub lr: f64,
    pub gated: bool,
    /// Whether an optimizer update followed this micro-batch.
    pub updated: bool,
}

/// Owns the weights, optimizer state and every random stream of a run.
pub struct Trainer {
    cfg: RunConfig,
    weights: AhanWeights<Tensor>,
    optimizer: AdamW,
    images: Vec<Tensor>,
    sampler: BatchSampler,
    batch_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    gates: GateSampler,
    accum: Vec<Tensor>,
    step: usize,
}

impl Trainer {
    /// `images[i]` is the decoded image of `manifest.entries()[i]`, `H×W×C`
    /// in `[0, 1]`.
    pub fn new(cfg: &RunConfig, manifest: &TwinManifest, images: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        if images.len() != manifest.len() {
            return Err(AhanError::invalid(
                "trainer",
                format!("{} images for {} manifest entries", images.len(), manifest.len()),
            ));
        }
        let m = &cfg.model;
        let expected = [m.image_size, m.image_size, m.channels];
        if let Some(bad) = images.iter().find(|t| t.shape() != expected) {
            return Err(AhanError::shape(
                "trainer",
                format!("image {:?}, model expects {expected:?}", bad.shape()),
            ));
        }
        let sampler = BatchSampler::new(manifest, cfg.train.batch_size, m.loss.oversample_ratio)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let weights = AhanWeights::init(m, sampler.num_classes(), &mut init_rng)?;
        let flat = weights.flatten();
        let accum = flat.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Trainer {
            optimizer: AdamW::new(cfg.train.optimizer.clone(), &flat),
            cfg: cfg.clone(),
            weights,
            images,
            sampler,
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1)),
            augment_rng: ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(2)),
            gates: GateSampler::new(m.tapwca.rng_seed),
            accum,
            step: 0,
        })
    }

    pub fn weights(&self) -> &AhanWeights<Tensor> {
        &self.weights
    }

    pub fn into_weights(self) -> AhanWeights<Tensor> {
        self.weights
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Optimizer updates over the whole run.
    pub fn total_updates(&self) -> usize {
        self.cfg.train.steps.div_ceil(self.cfg.train.accum_steps)
    }

    /// One micro-batch: sample, forward, backward, accumulate; applies an
    /// update every `accum_steps` micro-batches and after the final one.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let cfg = &self.cfg;
        let batch = self.sampler.sample(&mut self.batch_rng);
        let gate = self.gates.draw(&cfg.model.tapwca, Mode::Train);
        let anchors: Vec<Tensor> = batch
            .items
            .iter()
            .map(|it| augment(&self.images[it.image], &cfg.train.augment, &mut self.augment_rng))
            .collect();
        let samples: Vec<Sample<'_>> = batch
            .items
            .iter()
            .zip(&anchors)
            .map(|(it, img)| Sample {
                image: img,
                label: it.label,
                twin: it.twin_image.map(|t| &self.images[t]),
            })
            .collect();
        if gate && cfg.model.tapwca.enabled && samples.iter().all(|s| s.twin.is_none()) {
            return Err(AhanError::invalid(
                "train_step",
                "distraction gate is on but the batch carries no twin images",
            ));
        }

        let g = Graph::new();
        let bound = self.weights.bind(&g);
        let terms = batch_loss(&g, &bound, &cfg.model, &samples, gate, &self.sampler.twin_map())?;
        let (arcface, triplet, total) = (
            terms.arcface.value().item()?,
            terms.triplet.value().item()?,
            terms.total.value().item()?,
        );
        for (term, value) in [("arcface", arcface), ("triplet", triplet), ("total", total)] {
            if !value.is_finite() {
                return Err(AhanError::NonFinite { term, value, step });
            }
        }
        let grads = g.backward(terms.total)?;
        let mut leaves = Vec::new();
        bound.visit("", &mut |_, v| leaves.push(*v));
        let inv = 1.0 / cfg.train.accum_steps as f64;
        for (acc, leaf) in self.accum.iter_mut().zip(&leaves) {
            if let Some(grad) = grads.get(*leaf) {
                acc.add_assign_scaled(grad, inv);
            }
        }

        let update_idx = (step - 1) / cfg.train.accum_steps;
        let lr = cosine_lr(cfg.train.optimizer.lr, update_idx, self.total_updates());
        let updated = step % cfg.train.accum_steps == 0 || step == cfg.train.steps;
        if updated {
            let mut params = self.weights.flatten();
            self.optimizer.step(&mut params, &self.accum, lr);
            self.weights = self.weights.rebuild(params)?;
            self.accum.iter_mut().for_each(|a| a.fill(0.0));
        }
        self.step = step;
        Ok(StepRecord {
            step,
            total,
            arcface,
            triplet,
            lr,
            gated: gate,
            updated,
        })
    }

    /// Runs the remaining configured steps, reporting each record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.cfg.train.steps {
            let r = self.train_step()?;
            on_step(&r);
            records.push(r);
        }
        Ok(records)
    }
}
