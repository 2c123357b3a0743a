//! End-to-end steps shared by the CLI, the examples and the acceptance
//! suite. Each returns a serializable summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{AhanConfig, EvalOptions, RunConfig};
use crate::error::{AhanError, Result};
use crate::gradcheck::check_gradients_at;
use crate::heatmap::{export_attention_map, MapSelector};
use crate::image_io::read_image;
use crate::losses::BatchSampler;
use crate::manifest::{Split, TwinManifest};
use crate::metrics::{build_pairs, LabeledPair, MetricReport, Scenario, ScoreSet};
use crate::model::{batch_loss, embed_images, verify, AhanWeights, Sample};
use crate::synth::gen_twin_dataset;
use crate::tensor::Tensor;
use crate::train::{StepRecord, Trainer};

/// Reads a manifest CSV and decodes every image it lists. Relative image
/// paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(TwinManifest, Vec<Tensor>)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = TwinManifest::read_csv(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = manifest
        .entries()
        .iter()
        .map(|e| read_image(base.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, images))
}

/// Entries of `manifest` whose split matches, with their images.
pub fn select_split(
    manifest: &TwinManifest,
    images: &[Tensor],
    split: Split,
) -> Result<(TwinManifest, Vec<Tensor>)> {
    let sub = manifest.split(split)?;
    let index: BTreeMap<&str, usize> = manifest
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    let imgs = sub
        .entries()
        .iter()
        .map(|e| images[index[e.image_id.as_str()]].clone())
        .collect();
    Ok((sub, imgs))
}

/// Pairs, their cosine scores and the metric report of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pairs: Vec<LabeledPair>,
    pub scores: ScoreSet,
    pub report: MetricReport,
}

/// Embeds each image that appears in a pair once, then scores every pair by
/// cosine similarity. Pair sampling is seeded by `opts.seed`.
pub fn evaluate(
    weights: &AhanWeights<Tensor>,
    cfg: &AhanConfig,
    manifest: &TwinManifest,
    images: &[Tensor],
    scenario: Scenario,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pairs = build_pairs(manifest, scenario, &mut rng, opts.max_pairs)?;
    let mut used: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    used.sort_unstable();
    used.dedup();
    let refs: Vec<&Tensor> = used.iter().map(|&i| &images[i]).collect();
    let embedded = embed_images(weights, cfg, &refs)?;
    let row: BTreeMap<usize, &Vec<f64>> = used.iter().copied().zip(&embedded).collect();
    let scored = pairs
        .iter()
        .map(|p| Ok((verify(row[&p.a], row[&p.b])?, p.same)))
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreSet::new(scored)?;
    let report = MetricReport::compute(scenario, &scores)?;
    Ok(Evaluation {
        pairs,
        scores,
        report,
    })
}

/// Uses `seed` for data generation, training and pair sampling.
pub fn reseed(cfg: &mut RunConfig, seed: u64) {
    cfg.synth.seed = seed;
    cfg.train.seed = seed;
    cfg.eval.seed = seed;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub images: usize,
    pub identities: usize,
    pub twin_families: usize,
    pub train_images: usize,
    pub test_images: usize,
}

/// Writes a synthetic dataset under `out`.
pub fn gen_data(cfg: &RunConfig, out: impl AsRef<Path>) -> Result<GenSummary> {
    let out = out.as_ref();
    let data = gen_twin_dataset(&cfg.synth, out)?;
    let m = &data.manifest;
    let count = |s| m.entries().iter().filter(|e| e.split == s).count();
    Ok(GenSummary {
        manifest: out.join("manifest.csv"),
        images: m.len(),
        identities: m.identities().len(),
        twin_families: m.twin_classes().iter().flatten().count() / 2,
        train_images: count(Split::Train),
        test_images: count(Split::Test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub updates: usize,
    pub parameters: usize,
    pub classes: usize,
    pub first_total: f64,
    pub final_total: f64,
    pub checkpoint: PathBuf,
    pub losses: Vec<StepRecord>,
}

/// Trains on the train split of the manifest and saves `model.ckpt` under
/// `out`.
pub fn train_model(
    cfg: &RunConfig,
    manifest: impl AsRef<Path>,
    out: impl AsRef<Path>,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    let out = out.as_ref();
    let (m, images) = load_dataset(manifest)?;
    let (train, train_images) = select_split(&m, &images, Split::Train)?;
    let mut trainer = Trainer::new(cfg, &train, train_images)?;
    let losses = trainer.run(on_step)?;
    let updates = trainer.total_updates();
    let weights = trainer.into_weights();
    std::fs::create_dir_all(out).map_err(|e| AhanError::io(out, e))?;
    let checkpoint = out.join("model.ckpt");
    save_checkpoint(&checkpoint, &weights, &cfg.model)?;
    Ok(TrainSummary {
        steps: losses.len(),
        updates,
        parameters: weights.num_parameters(),
        classes: weights.num_classes(),
        first_total: losses.first().map_or(f64::NAN, |r| r.total),
        final_total: losses.last().map_or(f64::NAN, |r| r.total),
        checkpoint,
        losses,
    })
}

/// Evaluates a checkpoint on the test split of the manifest.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    manifest: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    scenario: Scenario,
) -> Result<Evaluation> {
    let weights = load_checkpoint(checkpoint, &cfg.model)?;
    let (m, images) = load_dataset(manifest)?;
    let (test, test_images) = select_split(&m, &images, Split::Test)?;
    evaluate(&weights, &cfg.model, &test, &test_images, scenario, &cfg.eval)
}

/// Renders one attention map of `image` under a checkpoint.
pub fn visualize(
    cfg: &RunConfig,
    checkpoint: impl AsRef<Path>,
    image: impl AsRef<Path>,
    selector: &str,
    out: impl AsRef<Path>,
) -> Result<Tensor> {
    let weights = load_checkpoint(checkpoint, &cfg.model)?;
    let selector = MapSelector::parse(selector, &cfg.model)?;
    let img = read_image(image)?;
    export_attention_map(&weights, &cfg.model, &img, selector, out)
}

/// Result of one end-to-end finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndCheck {
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks the gradient of the total training loss with respect to
/// `n_params` randomly chosen weight elements. Data, weights, the batch and
/// the probed coordinates all derive from `seed`; the batch is twin-gated.
pub fn end_to_end_gradcheck(cfg: &RunConfig, seed: u64, n_params: usize, eps: f64) -> Result<EndToEndCheck> {
    let mut synth = cfg.synth.clone();
    synth.seed = seed;
    synth.n_families = 2;
    synth.n_singletons = 0;
    synth.image_size = cfg.model.image_size;
    synth.channels = cfg.model.channels;
    let data = crate::synth::generate(&synth)?;
    let (train, images) = data.split(Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = BatchSampler::new(&train, cfg.train.batch_size, cfg.model.loss.oversample_ratio)?;
    let batch = sampler.sample(&mut rng);
    let weights = AhanWeights::init(&cfg.model, sampler.num_classes(), &mut rng)?;
    let mut names = Vec::new();
    weights.visit("", &mut |n, _| names.push(n));
    let flat = weights.flatten();
    let coords: Vec<(usize, usize)> = (0..n_params)
        .map(|_| {
            let k = rng.random_range(0..flat.len());
            (k, rng.random_range(0..flat[k].numel()))
        })
        .collect();
    let twin_map = sampler.twin_map();
    let samples: Vec<Sample<'_>> = batch
        .items
        .iter()
        .map(|it| Sample {
            image: &images[it.image],
            label: it.label,
            twin: it.twin_image.map(|t| &images[t]),
        })
        .collect();
    let report = check_gradients_at(&flat, eps, &coords, |g: &Graph, vars| {
        let w = weights.rebuild(vars.to_vec())?;
        Ok(batch_loss(g, &w, &cfg.model, &samples, true, &twin_map)?.total)
    })?;
    Ok(EndToEndCheck {
        seed,
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        worst: format!("{}[{}]", names[report.worst.0], report.worst.1),
        analytic: report.analytic,
        numeric: report.numeric,
    })
}
