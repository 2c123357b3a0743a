//! JSON run configuration.
//!
//! Two profiles ship with the crate: `paper` (ViT-B/16 scale, 224×224 RGB)
//! and `desk` (32×32 grayscale, small enough for finite-difference checks
//! and minute-scale training). Every struct rejects unknown keys, and
//! [`RunConfig::validate`] checks all cross-field invariants with messages
//! that name the offending key.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AhanError, Result};
use crate::hca::{Region, RegionSpec};

pub const DESK_PROFILE_JSON: &str = include_str!("../configs/desk.json");
pub const PAPER_PROFILE_JSON: &str = include_str!("../configs/paper.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub model: AhanConfig,
    pub train: TrainOptions,
    pub synth: SynthConfig,
    pub eval: EvalOptions,
}

/// Architecture plus the training-time regularizer and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AhanConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// Downsampling factors of the hierarchical cross-attention.
    pub scales: Vec<usize>,
    pub regions: RegionMasks,
    pub tapwca: TapwcaConfig,
    pub loss: LossConfig,
}

/// Patch-grid masks for the four facial regions, in fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMasks {
    pub eyes: RegionMask,
    pub nose: RegionMask,
    pub mouth: RegionMask,
    pub jaw: RegionMask,
}

/// Union of grid rectangles and explicit patch indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMask {
    #[serde(default)]
    pub rects: Vec<PatchRect>,
    #[serde(default)]
    pub indices: Vec<usize>,
}

/// Half-open rectangle `[row0, row1) × [col0, col1)` on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapwcaConfig {
    pub enabled: bool,
    pub probability: f64,
    /// Inclusive, 1-based block range that receives twin distraction.
    pub layer_range: [usize; 2],
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the triplet term in `arc + lambda * triplet`.
    pub lambda: f64,
    pub triplet_margin: f64,
    /// Additive angular margin, radians.
    pub arc_margin: f64,
    pub arc_scale: f64,
    /// Twin-paired to unpaired anchors, e.g. 3.0 for 3:1.
    pub oversample_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Number of micro-batches.
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer update.
    pub accum_steps: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Only `hflip` and `brightness` are applied by the trainer; the remaining
/// fields are carried for profile fidelity and trigger a warning when nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_families: usize,
    /// Identities without a twin.
    pub n_singletons: usize,
    pub train_images_per_identity: usize,
    pub test_images_per_identity: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Seeds the low-frequency base faces and the identity marks.
    pub seed: u64,
    pub twin_divergence: f64,
    pub noise_std: f64,
    pub marks_per_identity: usize,
    /// Mark radius as a fraction of the image side.
    pub mark_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub max_pairs: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::from_json(DESK_PROFILE_JSON).expect("shipped desk profile is valid")
    }

    pub fn paper() -> Self {
        Self::from_json(PAPER_PROFILE_JSON).expect("shipped paper profile is valid")
    }

    /// Looks up a shipped profile by name.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(AhanError::config(
                "profile",
                format!("unknown profile `{other}` (expected desk or paper)"),
            )),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != self.model.image_size {
            return Err(AhanError::config(
                "synth.image_size",
                format!("must equal model.image_size ({})", self.model.image_size),
            ));
        }
        if self.synth.channels != self.model.channels {
            return Err(AhanError::config(
                "synth.channels",
                format!("must equal model.channels ({})", self.model.channels),
            ));
        }
        if self.eval.max_pairs == 0 {
            return Err(AhanError::config("eval.max_pairs", "must be positive"));
        }
        Ok(())
    }
}

/// Reads and validates a configuration file. A bare profile name (`desk`,
/// `paper`) selects the shipped profile.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    if !path.exists() {
        if let Some(name) = path.to_str() {
            if name == "desk" || name == "paper" {
                return RunConfig::profile(name);
            }
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| AhanError::io(path, e))?;
    RunConfig::from_json(&text)
}

impl AhanConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Width of the fused embedding: global + four regions + asymmetry.
    pub fn embedding_dim(&self) -> usize {
        6 * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// SHA-256 over the canonical JSON of this config.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    /// Resolved region specs in the fixed order eyes, nose, mouth, jaw.
    pub fn region_specs(&self) -> Result<[RegionSpec; 4]> {
        let (rows, cols) = (self.grid(), self.grid());
        let masks = [
            (Region::Eyes, &self.regions.eyes),
            (Region::Nose, &self.regions.nose),
            (Region::Mouth, &self.regions.mouth),
            (Region::Jaw, &self.regions.jaw),
        ];
        let mut specs = Vec::with_capacity(4);
        for (region, mask) in masks {
            specs.push(mask.resolve(region, rows, cols)?);
        }
        Ok(specs.try_into().expect("four regions"))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.channels", self.channels),
            ("model.patch", self.patch),
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.depth", self.depth),
            ("model.mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(AhanError::config(key, "must be positive"));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(AhanError::config(
                "model.patch",
                format!(
                    "image_size {} is not divisible by patch {}",
                    self.image_size, self.patch
                ),
            ));
        }
        if self.grid() % 2 != 0 {
            return Err(AhanError::config(
                "model.patch",
                format!(
                    "patch grid width {} is odd; the asymmetry module splits the grid into two equal halves and needs an even width",
                    self.grid()
                ),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(AhanError::config(
                "model.heads",
                format!("dim {} is not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(AhanError::config("model.layer_norm_eps", "must be > 0"));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(AhanError::config("model.init_std", "must be finite and >= 0"));
        }
        if self.scales.is_empty() {
            return Err(AhanError::config("model.scales", "must list at least one scale"));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.scales {
            if s == 0 || s > self.grid() {
                return Err(AhanError::config(
                    "model.scales",
                    format!("scale {s} must be in [1, grid {}]", self.grid()),
                ));
            }
            if !seen.insert(s) {
                return Err(AhanError::config("model.scales", format!("duplicate scale {s}")));
            }
        }
        self.region_specs()?;

        let [lo, hi] = self.tapwca.layer_range;
        if lo < 1 || lo > hi || hi > self.depth {
            return Err(AhanError::config(
                "model.tapwca.layer_range",
                format!("[{lo}, {hi}] must satisfy 1 <= lo <= hi <= depth {}", self.depth),
            ));
        }
        if !(0.0..=1.0).contains(&self.tapwca.probability) {
            return Err(AhanError::config(
                "model.tapwca.probability",
                "must lie in [0, 1]",
            ));
        }
        let l = &self.loss;
        let non_negative = [
            ("model.loss.lambda", l.lambda),
            ("model.loss.triplet_margin", l.triplet_margin),
            ("model.loss.arc_margin", l.arc_margin),
            ("model.loss.oversample_ratio", l.oversample_ratio),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AhanError::config(key, "must be finite and >= 0"));
            }
        }
        if !(l.arc_scale > 0.0) || !l.arc_scale.is_finite() {
            return Err(AhanError::config("model.loss.arc_scale", "must be finite and > 0"));
        }
        Ok(())
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("train.steps", self.steps),
            ("train.batch_size", self.batch_size),
            ("train.accum_steps", self.accum_steps),
        ] {
            if v == 0 {
                return Err(AhanError::config(key, "must be positive"));
            }
        }
        if self.batch_size < 2 {
            return Err(AhanError::config(
                "train.batch_size",
                "must hold at least one two-image identity unit",
            ));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !o.lr.is_finite() {
            return Err(AhanError::config("train.optimizer.lr", "must be finite and >= 0"));
        }
        if !(o.weight_decay >= 0.0) || !o.weight_decay.is_finite() {
            return Err(AhanError::config(
                "train.optimizer.weight_decay",
                "must be finite and >= 0",
            ));
        }
        for (key, b) in [("train.optimizer.beta1", o.beta1), ("train.optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AhanError::config(key, "must lie in [0, 1)"));
            }
        }
        if !(o.eps > 0.0) {
            return Err(AhanError::config("train.optimizer.eps", "must be > 0"));
        }
        let a = &self.augment;
        for (key, v) in [
            ("train.augment.brightness", a.brightness),
            ("train.augment.contrast", a.contrast),
            ("train.augment.saturation", a.saturation),
            ("train.augment.rotation_deg", a.rotation_deg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AhanError::config(key, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("synth.train_images_per_identity", self.train_images_per_identity),
            ("synth.test_images_per_identity", self.test_images_per_identity),
            ("synth.image_size", self.image_size),
            ("synth.channels", self.channels),
        ] {
            if v == 0 {
                return Err(AhanError::config(key, "must be positive"));
            }
        }
        if self.n_families == 0 {
            return Err(AhanError::config("synth.n_families", "must be positive"));
        }
        if self.train_images_per_identity < 2 {
            return Err(AhanError::config(
                "synth.train_images_per_identity",
                "needs at least 2 images per identity for batch units",
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(AhanError::config("synth.channels", "must be 1 or 3"));
        }
        for (key, v) in [
            ("synth.twin_divergence", self.twin_divergence),
            ("synth.noise_std", self.noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AhanError::config(key, "must be finite and >= 0"));
            }
        }
        if !(self.mark_radius > 0.0 && self.mark_radius < 1.0) {
            return Err(AhanError::config("synth.mark_radius", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

impl RegionMask {
    pub fn resolve(&self, region: Region, rows: usize, cols: usize) -> Result<RegionSpec> {
        let key = format!("model.regions.{}", region.name());
        let n = rows * cols;
        let mut set = BTreeSet::new();
        for r in &self.rects {
            if r.row0 >= r.row1 || r.col0 >= r.col1 || r.row1 > rows || r.col1 > cols {
                return Err(AhanError::config(
                    &key,
                    format!("rect {r:?} is empty or exceeds the {rows}x{cols} patch grid"),
                ));
            }
            for row in r.row0..r.row1 {
                for col in r.col0..r.col1 {
                    set.insert(row * cols + col);
                }
            }
        }
        for &i in &self.indices {
            if i >= n {
                return Err(AhanError::config(
                    &key,
                    format!("patch index {i} out of range [0, {n})"),
                ));
            }
            set.insert(i);
        }
        RegionSpec::new(region, set.into_iter().collect(), n)
            .map_err(|e| AhanError::config(&key, e.to_string()))
    }
}

/// Rectangular stand-ins for landmark-derived regions on a `rows × cols`
/// grid: upper third (eyes), center (nose), lower center (mouth), bottom
/// band plus lower sides (jaw).
pub fn default_region_masks(rows: usize, cols: usize) -> RegionMasks {
    let third = (rows / 3).max(1);
    let two_thirds = (2 * rows / 3).max(third + 1).min(rows - 1);
    let jaw_top = (5 * rows / 6).max(two_thirds + 1).min(rows - 1);
    let inset = (cols / 4).max(1);
    let side = (cols / 6).max(1);
    let rect = |row0, row1, col0, col1| PatchRect { row0, row1, col0, col1 };
    RegionMasks {
        eyes: RegionMask {
            rects: vec![rect(0, third, 0, cols)],
            indices: vec![],
        },
        nose: RegionMask {
            rects: vec![rect(third, two_thirds, inset, cols - inset)],
            indices: vec![],
        },
        mouth: RegionMask {
            rects: vec![rect(two_thirds, jaw_top, inset, cols - inset)],
            indices: vec![],
        },
        jaw: RegionMask {
            rects: vec![
                rect(jaw_top, rows, 0, cols),
                rect(rows / 2, jaw_top, 0, side),
                rect(rows / 2, jaw_top, cols - side, cols),
            ],
            indices: vec![],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_profiles_load() {
        let desk = RunConfig::desk();
        assert_eq!(desk.model.image_size, 32);
        assert_eq!(desk.model.channels, 1);
        assert_eq!(desk.model.patch, 8);
        assert_eq!(desk.model.dim, 32);
        assert_eq!(desk.model.heads, 4);
        assert_eq!(desk.model.depth, 6);
        assert_eq!(desk.model.scales, vec![1, 2]);
        assert_eq!(desk.model.tapwca.layer_range, [3, 5]);
        assert_eq!(desk.train.batch_size, 8);

        let paper = RunConfig::paper();
        assert_eq!(paper.model.dim, 768);
        assert_eq!(paper.model.heads, 12);
        assert_eq!(paper.model.patch, 16);
        assert_eq!(paper.model.depth, 12);
        assert_eq!(paper.model.scales, vec![1, 2, 4]);
        assert_eq!(paper.model.tapwca.probability, 0.5);
        assert_eq!(paper.model.tapwca.layer_range, [6, 9]);
        assert_eq!(paper.model.loss.lambda, 0.1);
        assert_eq!(paper.model.loss.triplet_margin, 0.5);
        assert_eq!(paper.train.optimizer.lr, 1e-4);
        assert_eq!(paper.train.optimizer.weight_decay, 5e-4);
        assert_eq!(paper.train.batch_size, 64);
        assert_eq!(paper.train.accum_steps, 4);
        assert_eq!(paper.model.embedding_dim(), 4608);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DESK_PROFILE_JSON).unwrap();
        v["model"]["dropout"] = serde_json::json!(0.1);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("dropout"), "{err}");
    }

    #[test]
    fn odd_grid_width_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.model.image_size = 24;
        cfg.synth.image_size = 24;
        cfg.model.regions = default_region_masks(3, 3);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("odd") && err.contains("even width"), "{err}");
    }

    #[test]
    fn invariant_violations_name_keys() {
        let mut cfg = RunConfig::desk();
        cfg.model.heads = 5;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.heads"));

        let mut cfg = RunConfig::desk();
        cfg.model.tapwca.layer_range = [3, 7];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model.tapwca.layer_range"));

        let mut cfg = RunConfig::desk();
        cfg.model.tapwca.probability = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.model.regions.nose.rects[0].col1 = 99;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model.regions.nose"));
    }

    #[test]
    fn default_masks_are_nonempty_on_both_profiles() {
        for n in [4usize, 14] {
            let masks = default_region_masks(n, n);
            for mask in [&masks.eyes, &masks.nose, &masks.mouth, &masks.jaw] {
                let spec = mask.resolve(Region::Eyes, n, n).unwrap();
                assert!(!spec.indices().is_empty());
            }
        }
    }

    #[test]
    fn shipped_masks_match_default_layout() {
        assert_eq!(RunConfig::desk().model.regions, default_region_masks(4, 4));
        assert_eq!(RunConfig::paper().model.regions, default_region_masks(14, 14));
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::desk().model;
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.dim = 64;
        assert_ne!(a.digest(), b.digest());
    }
}
