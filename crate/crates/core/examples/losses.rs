//! Angular-margin classification loss and twin-mined triplet loss on a
//! toy batch where identities 0 and 1 are twins.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::losses::{arcface_loss, mine_triplets, total_loss, twin_triplet_loss, ArcHead, IdentityBatch};
use ahan::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let labels = vec![0, 0, 1, 1, 2, 2];
    let twins: BTreeMap<usize, usize> = [(0, 1), (1, 0)].into();
    let emb = g.leaf(Tensor::randn(&[6, 8], 1.0, &mut rng));
    let batch = IdentityBatch::new(emb, labels.clone(), twins.clone())?;

    let sim = emb.l2_normalize_rows()?.matmul(emb.l2_normalize_rows()?.transpose()?)?.value();
    for t in mine_triplets(&sim, &labels, &twins) {
        println!("{t:?}");
    }

    for margin in [0.0, 0.5] {
        let head = ArcHead {
            weight: g.leaf(Tensor::randn(&[8, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(6))),
            margin,
            scale: 30.0,
        };
        println!("arcface (m = {margin}) = {:.4}", arcface_loss(&batch, &head)?.value().item()?);
    }
    let head = ArcHead {
        weight: g.leaf(Tensor::randn(&[8, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(6))),
        margin: 0.5,
        scale: 30.0,
    };
    let arc = arcface_loss(&batch, &head)?;
    let trip = twin_triplet_loss(&batch, 0.5)?;
    let total = total_loss(arc, trip, 0.1)?;
    println!("triplet = {:.4}, total = {:.4}", trip.value().item()?, total.value().item()?);
    Ok(())
}
