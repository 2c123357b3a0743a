//! Saves weights, reloads them and shows that a config change is refused.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::checkpoint::{load_checkpoint, save_checkpoint};
use ahan::config::RunConfig;
use ahan::model::AhanWeights;
use ahan::Result;

fn main() -> Result<()> {
    let cfg = RunConfig::desk().model;
    let weights = AhanWeights::init(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(8))?;
    let path = std::env::temp_dir().join("ahan-example.ckpt");
    save_checkpoint(&path, &weights, &cfg)?;
    let back = load_checkpoint(&path, &cfg)?;
    let same = weights.flatten().iter().zip(back.flatten()).all(|(a, b)| a == &b);
    println!("{} parameters reloaded, identical: {same}", back.num_parameters());

    let mut other = cfg.clone();
    other.depth += 1;
    match load_checkpoint(&path, &other) {
        Ok(_) => println!("unexpectedly loaded"),
        Err(e) => println!("deeper config rejected: {e}"),
    }
    Ok(())
}
