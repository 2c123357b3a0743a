//! Seeded synthetic twin faces.
//!
//! Each family shares a smooth base pattern that is mirror-symmetric about
//! the vertical midline. Each identity adds its own Gaussian marks at random
//! positions, with amplitudes proportional to `twin_divergence`; singletons
//! get a base of their own. Images are the identity template plus fresh
//! per-pixel noise, clamped and quantized to 8 bits.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SynthConfig;
use crate::error::{AhanError, Result};
use crate::image_io::{quantize, Image8};
use crate::manifest::{ManifestEntry, Split, TwinManifest};
use crate::tensor::Tensor;

const BASE_COMPONENTS: usize = 6;
/// Peak mark amplitude per unit of divergence.
const MARK_GAIN: f64 = 0.5;

/// Noise-free appearance of one identity before clamping.
#[derive(Debug, Clone)]
pub struct IdentityTemplate {
    pub identity_id: String,
    pub twin_identity_id: Option<String>,
    pub template: Tensor,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: TwinManifest,
    /// Decoded images in manifest order, values `byte / 255`.
    pub images: Vec<Tensor>,
    pub templates: Vec<IdentityTemplate>,
}

impl SynthDataset {
    /// Entries and images of one split.
    pub fn split(&self, split: Split) -> Result<(TwinManifest, Vec<Tensor>)> {
        let mut entries = Vec::new();
        let mut images = Vec::new();
        for (e, img) in self.manifest.entries().iter().zip(&self.images) {
            if e.split == split {
                entries.push(e.clone());
                images.push(img.clone());
            }
        }
        Ok((TwinManifest::new(entries)?, images))
    }
}

fn base_face<R: Rng + ?Sized>(size: usize, channels: usize, rng: &mut R) -> Tensor {
    let comps: Vec<(f64, f64, f64, f64)> = (0..BASE_COMPONENTS)
        .map(|_| {
            (
                rng.random_range(0.04..0.1),
                rng.random_range(0.0..2.5),
                rng.random_range(0.0..2.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tints: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.05..0.05)).collect();
    let center = (size as f64 - 1.0) / 2.0;
    let s = size as f64;
    let mut t = Tensor::zeros(&[size, size, channels]);
    let data = t.data_mut();
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - center).abs() / s;
            let dy = y as f64 / s;
            let v: f64 = 0.5
                + comps
                    .iter()
                    .map(|&(a, u, w, phi)| a * (2.0 * PI * (u * dx + w * dy) + phi).cos())
                    .sum::<f64>();
            for (c, tint) in tints.iter().enumerate() {
                data[(y * size + x) * channels + c] = v + tint;
            }
        }
    }
    t
}

fn add_marks<R: Rng + ?Sized>(t: &mut Tensor, cfg: &SynthConfig, rng: &mut R) {
    let (size, channels) = (cfg.image_size, cfg.channels);
    let sigma = cfg.mark_radius * size as f64;
    for _ in 0..cfg.marks_per_identity {
        let lo = sigma.min(size as f64 / 2.0);
        let cy = rng.random_range(lo..=(size as f64 - lo));
        let cx = rng.random_range(lo..=(size as f64 - lo));
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let amp = sign * rng.random_range(0.5..1.0) * MARK_GAIN * cfg.twin_divergence;
        let data = t.data_mut();
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..channels {
                    data[(y * size + x) * channels + c] += v;
                }
            }
        }
    }
}

fn identity_name(family: usize, side: char) -> String {
    format!("f{family:03}{side}")
}

/// Generates the dataset in memory. Every random quantity derives from
/// `cfg.seed`, so equal configs give bit-identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut templates = Vec::new();
    let mut template_seeds = Vec::new();
    for f in 0..cfg.n_families {
        let mut fam_rng = ChaCha8Rng::seed_from_u64(root.random());
        let base = base_face(cfg.image_size, cfg.channels, &mut fam_rng);
        let (a, b) = (identity_name(f, 'a'), identity_name(f, 'b'));
        for (me, other) in [(&a, &b), (&b, &a)] {
            let mut t = base.clone();
            add_marks(&mut t, cfg, &mut fam_rng);
            templates.push(IdentityTemplate {
                identity_id: me.clone(),
                twin_identity_id: Some(other.clone()),
                template: t,
            });
            template_seeds.push(fam_rng.random::<u64>());
        }
    }
    for s in 0..cfg.n_singletons {
        let mut rng = ChaCha8Rng::seed_from_u64(root.random());
        let mut t = base_face(cfg.image_size, cfg.channels, &mut rng);
        add_marks(&mut t, cfg, &mut rng);
        templates.push(IdentityTemplate {
            identity_id: format!("s{s:03}"),
            twin_identity_id: None,
            template: t,
        });
        template_seeds.push(rng.random::<u64>());
    }

    let ext = if cfg.channels == 1 { "pgm" } else { "ppm" };
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (tpl, &seed) in templates.iter().zip(&template_seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
            .map_err(|e| AhanError::config("synth.noise_std", e.to_string()))?;
        let n_train = cfg.train_images_per_identity;
        for k in 0..n_train + cfg.test_images_per_identity {
            let pixels: Vec<f64> = tpl
                .template
                .data()
                .iter()
                .map(|&v| {
                    let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    f64::from(quantize(v + n)) / 255.0
                })
                .collect();
            let image_id = format!("{}_{k:03}", tpl.identity_id);
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("images/{image_id}.{ext}")),
                image_id,
                identity_id: tpl.identity_id.clone(),
                twin_identity_id: tpl.twin_identity_id.clone(),
                split: if k < n_train { Split::Train } else { Split::Test },
            });
            images.push(Tensor::new(tpl.template.shape().to_vec(), pixels)?);
        }
    }
    Ok(SynthDataset {
        manifest: TwinManifest::new(entries)?,
        images,
        templates,
    })
}

/// Generates the dataset and writes `manifest.csv` plus `images/` under
/// `out_dir`. Manifest paths are relative to `out_dir`.
pub fn gen_twin_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let out_dir = out_dir.as_ref();
    let data = generate(cfg)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| AhanError::io(&image_dir, e))?;
    for (entry, img) in data.manifest.entries().iter().zip(&data.images) {
        Image8::from_tensor(img)?.write(out_dir.join(&entry.path))?;
    }
    data.manifest.write_csv(out_dir.join("manifest.csv"))?;
    Ok(data)
}

/// Mean absolute per-pixel difference between the templates of each twin
/// pair, averaged over families.
pub fn mean_twin_template_gap(templates: &[IdentityTemplate]) -> f64 {
    let mut gaps = Vec::new();
    for a in templates {
        if let Some(twin) = &a.twin_identity_id {
            if a.identity_id < *twin {
                if let Some(b) = templates.iter().find(|t| &t.identity_id == twin) {
                    let n = a.template.numel() as f64;
                    let sum: f64 = a
                        .template
                        .data()
                        .iter()
                        .zip(b.template.data())
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    gaps.push(sum / n);
                }
            }
        }
    }
    if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}
