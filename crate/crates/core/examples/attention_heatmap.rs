//! Lists every selectable attention map and renders a few of them for one
//! synthetic face as PGM heatmaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::config::RunConfig;
use ahan::heatmap::{attention_grid, export_attention_map, MapSelector};
use ahan::model::AhanWeights;
use ahan::synth::generate;
use ahan::Result;

fn main() -> Result<()> {
    let run = RunConfig::desk();
    let data = generate(&run.synth)?;
    let weights = AhanWeights::init(&run.model, 2, &mut ChaCha8Rng::seed_from_u64(9))?;
    let image = &data.images[0];
    let out = std::env::temp_dir().join("ahan-heatmaps");
    std::fs::create_dir_all(&out).map_err(|e| ahan::AhanError::io(&out, e))?;

    let options = MapSelector::options(&run.model);
    println!("{} maps: {}", options.len(), options.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
    for text in ["backbone:1", "hca:eyes:2", "faam:lr"] {
        let sel = MapSelector::parse(text, &run.model)?;
        let grid = attention_grid(&weights, &run.model, image, sel.clone())?;
        let total: f64 = grid.data().iter().sum();
        let file = out.join(format!("{}.pgm", text.replace(':', "_")));
        export_attention_map(&weights, &run.model, image, sel, &file)?;
        println!("{text:<11} grid {}x{} mass {total:.3} -> {}", grid.rows(), grid.cols(), file.display());
    }
    Ok(())
}
