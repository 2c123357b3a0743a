//! Verification metrics on a hand-made score list, then through a CSV
//! round trip.

use ahan::metrics::{eer, roc_auc, tar_at_far, MetricReport, Scenario, ScoreSet};
use ahan::Result;

fn main() -> Result<()> {
    let scores = ScoreSet::new(vec![
        (0.92, true),
        (0.85, true),
        (0.41, true),
        (0.77, true),
        (0.55, false),
        (0.30, false),
        (0.12, false),
        (0.60, false),
    ])?;
    println!("AUC {:.4}  EER {:.4}  TAR@FAR=0.25 {:.4}", roc_auc(&scores)?, eer(&scores)?, tar_at_far(&scores, 0.25)?);

    let dir = tempfile::tempdir().map_err(|e| ahan::AhanError::io("tempdir", e))?;
    let path = dir.path().join("scores.csv");
    scores.write_csv(&path)?;
    let back = ScoreSet::read_csv(&path)?;
    print!("{}", MetricReport::compute(Scenario::Twin, &back)?.to_table());
    Ok(())
}
