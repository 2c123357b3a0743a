//! Short training run on generated data, then all three evaluation
//! scenarios on the held-out images.

use ahan::config::RunConfig;
use ahan::metrics::Scenario;
use ahan::workflow::{evaluate_checkpoint, gen_data, train_model};
use ahan::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.steps = 60;
    let dir = std::env::temp_dir().join("ahan-train-example");
    let data = gen_data(&cfg, dir.join("data"))?;
    let summary = train_model(&cfg, &data.manifest, dir.join("model"), |r| {
        if r.step % 20 == 0 {
            println!("step {:>3}  total {:.3}", r.step, r.total);
        }
    })?;
    println!("{} parameters, checkpoint {}", summary.parameters, summary.checkpoint.display());
    for scenario in Scenario::ALL {
        let ev = evaluate_checkpoint(&cfg, &data.manifest, &summary.checkpoint, scenario)?;
        println!(
            "{:<9} pairs {:>4}  AUC {:.3}  EER {:.3}",
            scenario.name(),
            ev.report.pairs,
            ev.report.roc_auc, ev.report.eer
        );
    }
    Ok(())
}
