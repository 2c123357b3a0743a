//! One pre-norm transformer block over an embedded image, with the
//! per-head attention matrices read back from the trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::attention::{block_forward, BlockParams};
use ahan::embed::{embed_image, EmbedParams};
use ahan::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (patch, dim, heads) = (8, 16, 4);
    let image = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut rng);
    let embed = EmbedParams::init(patch * patch, 16, dim, 0.2, &mut rng);
    let block = BlockParams::init(dim, heads, 2, 0.2, &mut rng);

    let g = Graph::with_trace();
    let tokens = embed_image(&g, &image, patch, &embed.map(&mut |t| g.leaf(t.clone())))?;
    let out = block_forward(tokens, &block.map(&mut |t| g.leaf(t.clone())), 1e-6, 1, None)?;
    println!("tokens: {:?} -> {:?}", tokens.tokens.shape(), out.tokens.shape());
    for (site, a) in g.attention_trace() {
        let row0: f64 = a.row(0).iter().sum();
        println!("{site:?}: {}x{} weights, first row sums to {row0:.12}", a.rows(), a.cols());
    }
    Ok(())
}
