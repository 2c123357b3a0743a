//! Twin-aware attention: keys and values of a twin image join the anchor's
//! context in training mode; inference ignores the twin entirely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ahan::attention::scaled_attention;
use ahan::config::RunConfig;
use ahan::model::{ahan_forward, AhanWeights};
use ahan::tapwca::{combine_kv, ta_attention, Mode};
use ahan::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let q = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));
    let k = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));
    let v = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));
    let k_twin = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));
    let v_twin = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));

    let (kc, vc) = combine_kv(k, Some(k_twin), v, Some(v_twin))?;
    let twin_aware = ta_attention(q, kc, vc)?;
    let plain = scaled_attention(q, k, v)?;
    let on_twin: f64 = twin_aware.weights.value().row(0)[5..].iter().sum();
    println!("weights {:?}; query 0 puts {on_twin:.3} of its mass on twin keys", twin_aware.weights.shape());
    println!(
        "output moved by {:.3e} relative to self-attention",
        twin_aware.output.value().max_abs_diff(&plain.output.value()).unwrap_or(f64::NAN)
    );

    let cfg = RunConfig::desk().model;
    let weights = AhanWeights::init(&cfg, 2, &mut rng)?;
    let anchor = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut rng);
    let twin = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut rng);
    let run = |mode, twin: Option<&Tensor>| -> Result<Tensor> {
        let g = Graph::new();
        let f = ahan_forward(&g, &anchor, &weights.bind(&g), &cfg, mode, twin, true)?;
        Ok(f.value().as_ref().clone())
    };
    let solo = run(Mode::Infer, None)?;
    println!("infer, twin supplied: max change {:.1e}", run(Mode::Infer, Some(&twin))?.max_abs_diff(&solo).unwrap_or(f64::NAN));
    println!("train, gated with twin: max change {:.3e}", run(Mode::Train, Some(&twin))?.max_abs_diff(&solo).unwrap_or(f64::NAN));
    Ok(())
}
