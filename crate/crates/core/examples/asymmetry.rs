//! The asymmetry feature vanishes on a mirror-symmetric token grid and
//! grows once one side is perturbed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::attention::QkvParams;
use ahan::embed::{Grid, TokenSeq};
use ahan::faam::faam_forward;
use ahan::{Graph, Result, Tensor};

fn symmetric_tokens(grid: Grid, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut t = Tensor::randn(&[1 + grid.len(), dim], 1.0, rng);
    for r in 0..grid.rows {
        for c in 0..grid.cols / 2 {
            let src = t.row(1 + r * grid.cols + c).to_vec();
            let dst = 1 + r * grid.cols + grid.cols - 1 - c;
            t.data_mut()[dst * dim..(dst + 1) * dim].copy_from_slice(&src);
        }
    }
    Ok(t)
}

fn norm(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (grid, dim) = (Grid::new(4, 4), 8);
    let params = QkvParams::init(dim, 0.5, &mut rng);
    let sym = symmetric_tokens(grid, dim, &mut rng)?;
    let mut skewed = sym.clone();
    skewed.data_mut()[dim..2 * dim].iter_mut().for_each(|v| *v += 1.0);

    for (name, x) in [("symmetric", sym), ("one patch shifted", skewed)] {
        let g = Graph::new();
        let p = params.map(&mut |t| g.leaf(t.clone()));
        let f = faam_forward(TokenSeq::new(g.leaf(x), grid, true)?, &p)?;
        println!("{name:<18} |f_asym| = {:.3e}", norm(&f.value()));
    }
    Ok(())
}
