//! Region-to-grid cross-attention at several pooling scales on the desk
//! profile's patch grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::config::RunConfig;
use ahan::embed::{Grid, TokenSeq};
use ahan::hca::{hca_forward, HcaParams};
use ahan::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let cfg = RunConfig::desk().model;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Grid::new(cfg.grid(), cfg.grid());
    let regions = cfg.region_specs()?;
    for spec in &regions {
        println!("{:<6} {:>2} patches {:?}", spec.region().to_string(), spec.len(), spec.indices());
    }

    let g = Graph::with_trace();
    let x = g.leaf(Tensor::randn(&[1 + grid.len(), cfg.dim], 1.0, &mut rng));
    let params = HcaParams::init(cfg.dim, cfg.scales.len(), 0.2, &mut rng).map(&mut |t| g.leaf(t.clone()));
    let f = hca_forward(TokenSeq::new(x, grid, true)?, &regions, &cfg.scales, &params)?;
    println!("f_hca: {:?} (4 regions x d = {})", f.shape(), cfg.dim);
    for (site, a) in g.attention_trace() {
        println!("{site:?}: {} queries over {} pooled keys", a.rows(), a.cols());
    }
    Ok(())
}
