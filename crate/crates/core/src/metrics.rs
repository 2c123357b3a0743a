//! Verification pairs and threshold metrics.
//!
//! A pair is accepted when its score is `>= threshold`. Threshold sweeps
//! visit every observed score plus `±∞`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AhanError, Result};
use crate::manifest::TwinManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Random same/different pairs over every identity.
    General,
    /// Pairs inside twin families: same-person positives, sibling negatives.
    Twin,
    /// Cross-twin negatives only, scored against same-person positives from
    /// the same families, balanced one to one.
    HardTwin,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::General, Scenario::Twin, Scenario::HardTwin];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::General => "general",
            Scenario::Twin => "twin",
            Scenario::HardTwin => "hard_twin",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = AhanError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                AhanError::invalid(
                    "scenario",
                    format!("unknown scenario `{s}` (expected general, twin or hard_twin)"),
                )
            })
    }
}

/// Two entry indices of a manifest and whether they show the same person.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

fn subsample<R: Rng + ?Sized>(mut v: Vec<LabeledPair>, quota: usize, rng: &mut R) -> Vec<LabeledPair> {
    if v.len() > quota {
        v.shuffle(rng);
        v.truncate(quota);
        v.sort_by_key(|p| (p.a, p.b));
    }
    v
}

/// Labeled pairs over all entries of `manifest` (callers usually pass the
/// test split). Positives and negatives each get half of `max_pairs`;
/// pools larger than their quota are sampled without replacement.
pub fn build_pairs<R: Rng + ?Sized>(
    manifest: &TwinManifest,
    scenario: Scenario,
    rng: &mut R,
    max_pairs: usize,
) -> Result<Vec<LabeledPair>> {
    if max_pairs < 2 {
        return Err(AhanError::invalid("build_pairs", "max_pairs must be at least 2"));
    }
    let entries = manifest.entries();
    let ids = manifest.identities();
    let twin_classes = manifest.twin_classes();
    let class = manifest.labels();
    let in_family = |c: usize| twin_classes[c].is_some();

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for a in 0..entries.len() {
        for b in a + 1..entries.len() {
            let (ca, cb) = (class[a], class[b]);
            let same = ca == cb;
            let siblings = twin_classes[ca] == Some(cb);
            let keep = match scenario {
                Scenario::General => true,
                Scenario::Twin | Scenario::HardTwin => {
                    (same && in_family(ca)) || siblings
                }
            };
            if keep {
                let p = LabeledPair { a, b, same };
                if same {
                    pos.push(p);
                } else {
                    neg.push(p);
                }
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        let why = match scenario {
            Scenario::General if ids.len() < 2 => "needs at least two identities".to_string(),
            Scenario::General => "needs an identity with two images".to_string(),
            _ if neg.is_empty() => "manifest has no twin pair with images on both sides".to_string(),
            _ => "no twin-family identity has two images".to_string(),
        };
        return Err(AhanError::invalid(
            "build_pairs",
            format!("scenario {scenario} infeasible: {why}"),
        ));
    }
    let pos_quota = max_pairs / 2;
    let neg_quota = max_pairs - pos_quota;
    let (pos_quota, neg_quota) = match scenario {
        Scenario::HardTwin => {
            let n = pos.len().min(neg.len()).min(pos_quota);
            (n, n)
        }
        _ => (pos_quota, neg_quota),
    };
    let mut out = subsample(pos, pos_quota, rng);
    out.extend(subsample(neg, neg_quota, rng));
    Ok(out)
}

/// Similarity scores with same-identity labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pairs: Vec<(f64, bool)>,
}

impl ScoreSet {
    /// Nonempty, finite scores.
    pub fn new(pairs: Vec<(f64, bool)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(AhanError::invalid("scores", "empty score set"));
        }
        if let Some((s, _)) = pairs.iter().find(|(s, _)| !s.is_finite()) {
            return Err(AhanError::invalid("scores", format!("non-finite score {s}")));
        }
        Ok(ScoreSet { pairs })
    }

    pub fn pairs(&self) -> &[(f64, bool)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> Vec<f64> {
        self.pairs.iter().filter(|p| p.1).map(|p| p.0).collect()
    }

    pub fn negatives(&self) -> Vec<f64> {
        self.pairs.iter().filter(|p| !p.1).map(|p| p.0).collect()
    }

    /// Positive and negative scores, each sorted ascending; errors unless
    /// both labels occur.
    fn split_sorted(&self, op: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut p, mut n) = (self.positives(), self.negatives());
        if p.is_empty() || n.is_empty() {
            return Err(AhanError::invalid(
                op,
                format!("needs both labels ({} same, {} different)", p.len(), n.len()),
            ));
        }
        p.sort_by(f64::total_cmp);
        n.sort_by(f64::total_cmp);
        Ok((p, n))
    }

    /// Observed scores plus `±∞`, ascending and deduplicated.
    fn thresholds(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.pairs.iter().map(|p| p.0).collect();
        t.push(f64::NEG_INFINITY);
        t.push(f64::INFINITY);
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| AhanError::format(path, e.to_string()))?;
        let rows = reader
            .deserialize::<ScoreRow>()
            .map(|r| r.map(|r| (r.score, r.label == 1)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| AhanError::format(path, e.to_string()))?;
        Self::new(rows)
    }

    /// `score,label` rows; label 1 marks a same-identity pair.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| AhanError::format(path, e.to_string()))?;
        for &(score, same) in &self.pairs {
            w.serialize(ScoreRow {
                score,
                label: u8::from(same),
            })
            .map_err(|e| AhanError::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| AhanError::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    score: f64,
    label: u8,
}

/// Count of values in ascending `sorted` that are `>= t`.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    let (p, n) = scores.split_sorted("roc_auc")?;
    let mut wins = 0.0;
    for &s in &p {
        let below = n.partition_point(|&v| v < s);
        let tied = n.partition_point(|&v| v <= s) - below;
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (p.len() as f64 * n.len() as f64))
}

/// True-accept rate at the smallest threshold whose false-accept rate does
/// not exceed `far_target`.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(AhanError::invalid(
            "tar_at_far",
            format!("far_target {far_target} outside (0, 1)"),
        ));
    }
    let mut n = scores.negatives();
    if n.is_empty() {
        return Err(AhanError::invalid("tar_at_far", "needs at least one negative"));
    }
    let mut p = scores.positives();
    n.sort_by(f64::total_cmp);
    p.sort_by(f64::total_cmp);
    let nn = n.len() as f64;
    let t = scores
        .thresholds()
        .into_iter()
        .find(|&t| count_at_least(&n, t) as f64 / nn <= far_target)
        .expect("+inf admits no negatives");
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(count_at_least(&p, t) as f64 / p.len() as f64)
}

/// Rate at which false accepts equal false rejects, interpolated linearly
/// between adjacent thresholds.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let (p, n) = scores.split_sorted("eer")?;
    let (np, nn) = (p.len() as f64, n.len() as f64);
    let rates = |t: f64| {
        let far = count_at_least(&n, t) as f64 / nn;
        let frr = 1.0 - count_at_least(&p, t) as f64 / np;
        (far, frr)
    };
    let ts = scores.thresholds();
    let mut prev = rates(ts[0]);
    for &t in &ts[1..] {
        let cur = rates(t);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d0 == 0.0 {
            return Ok(prev.0);
        }
        if d1 <= 0.0 {
            let alpha = d0 / (d0 - d1);
            return Ok(prev.0 + alpha * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR - FRR goes from 1 at -inf to -1 at +inf")
}

/// Best accuracy over all thresholds, with the smallest threshold that
/// attains it.
pub fn best_threshold(scores: &ScoreSet) -> Result<(f64, f64)> {
    let (p, n) = scores.split_sorted("accuracy")?;
    let total = (p.len() + n.len()) as f64;
    let mut best = (f64::NEG_INFINITY, -1.0);
    for t in scores.thresholds() {
        let correct = count_at_least(&p, t) + (n.len() - count_at_least(&n, t));
        let acc = correct as f64 / total;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

pub fn accuracy_best_threshold(scores: &ScoreSet) -> Result<f64> {
    best_threshold(scores).map(|(_, acc)| acc)
}

/// FAR targets reported by [`MetricReport`].
pub const FAR_TARGETS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: Scenario,
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
    pub accuracy: f64,
    pub threshold: f64,
    pub roc_auc: f64,
    pub eer: f64,
    pub tar_at_far_1e_2: f64,
    pub tar_at_far_1e_3: f64,
    pub tar_at_far_1e_4: f64,
}

impl MetricReport {
    pub fn compute(scenario: Scenario, scores: &ScoreSet) -> Result<Self> {
        let (threshold, accuracy) = best_threshold(scores)?;
        let tar = FAR_TARGETS
            .iter()
            .map(|&f| tar_at_far(scores, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport {
            scenario,
            pairs: scores.len(),
            positives: scores.positives().len(),
            negatives: scores.negatives().len(),
            accuracy,
            threshold,
            roc_auc: roc_auc(scores)?,
            eer: eer(scores)?,
            tar_at_far_1e_2: tar[0],
            tar_at_far_1e_3: tar[1],
            tar_at_far_1e_4: tar[2],
        })
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows: [(&str, String); 11] = [
            ("scenario", self.scenario.to_string()),
            ("pairs", self.pairs.to_string()),
            ("positives", self.positives.to_string()),
            ("negatives", self.negatives.to_string()),
            ("accuracy", format!("{:.4}", self.accuracy)),
            ("threshold", format!("{:.4}", self.threshold)),
            ("roc_auc", format!("{:.4}", self.roc_auc)),
            ("eer", format!("{:.4}", self.eer)),
            ("tar@far=1e-2", format!("{:.4}", self.tar_at_far_1e_2)),
            ("tar@far=1e-3", format!("{:.4}", self.tar_at_far_1e_3)),
            ("tar@far=1e-4", format!("{:.4}", self.tar_at_far_1e_4)),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>10}\n"))
            .collect()
    }
}
