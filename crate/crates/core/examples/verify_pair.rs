//! Embeds two synthetic twins and a second image of the first twin, then
//! scores both pairs by cosine similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::config::RunConfig;
use ahan::model::{embed_images, verify, AhanWeights};
use ahan::synth::generate;
use ahan::Result;

fn main() -> Result<()> {
    let mut run = RunConfig::desk();
    run.synth.n_families = 1;
    run.synth.n_singletons = 0;
    let data = generate(&run.synth)?;
    let entries = data.manifest.entries();
    let pick = |id: &str, k: usize| entries.iter().position(|e| e.identity_id == id).map(|i| i + k).unwrap();
    let (a0, a1, b0) = (pick("f000a", 0), pick("f000a", 1), pick("f000b", 0));

    let weights = AhanWeights::init(&run.model, 2, &mut ChaCha8Rng::seed_from_u64(7))?;
    let e = embed_images(&weights, &run.model, &[&data.images[a0], &data.images[a1], &data.images[b0]])?;
    println!("embedding width {}", e[0].len());
    println!("same person : {:.4}", verify(&e[0], &e[1])?);
    println!("twin sibling: {:.4}", verify(&e[0], &e[2])?);
    Ok(())
}
