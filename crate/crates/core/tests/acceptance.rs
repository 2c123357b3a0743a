//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ahan::attention::{
    block_forward, cross_attention, multi_head, scaled_attention, AttnParams, BlockParams, QkvParams,
};
use ahan::autograd::concat;
use ahan::config::{AhanConfig, RunConfig};
use ahan::embed::{embed, EmbedParams, Grid, TokenSeq};
use ahan::faam::faam_forward;
use ahan::gradcheck::{check_gradients, DEFAULT_EPS};
use ahan::hca::{hca_forward, HcaParams, Region, RegionSpec};
use ahan::losses::{arcface_loss, twin_triplet_loss, ArcHead, IdentityBatch};
use ahan::manifest::Split;
use ahan::metrics::{accuracy_best_threshold, eer, roc_auc, tar_at_far, Scenario, ScoreSet};
use ahan::model::{ahan_forward, AhanWeights};
use ahan::synth::generate;
use ahan::tapwca::{combine_kv, ta_attention, Mode};
use ahan::trace::AttnSite;
use ahan::train::Trainer;
use ahan::workflow::{end_to_end_gradcheck, evaluate, evaluate_checkpoint, gen_data, select_split, train_model};
use ahan::{Graph, Result, Tensor, Var};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries with magnitude in [0.1, 1] and random sign, away from the kinks
/// of `abs` and `relu`.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random linear functional of `out`, so every output element matters.
fn probe<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng(seed));
    Ok(out.mul(g.leaf(w))?.sum())
}

fn rebind<'g, P, Q>(template: &P, vars: &[Var<'g>], map: impl Fn(&P, &mut dyn FnMut(&Tensor) -> Var<'g>) -> Q) -> Q {
    let mut it = vars.iter().copied();
    map(template, &mut |_| it.next().expect("enough vars"))
}

// ---------------------------------------------------------------- 1

type Build = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;

fn unit_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(100);
    let mut m = |s: &[usize]| away_from_zero(s, &mut r);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr),*], $seed:expr, |$g:ident, $v:ident| $body:expr) => {
            cases.push((
                $name,
                vec![$(m(&$shape)),*],
                Box::new(move |$g: &Graph, $v: &[Var]| {
                    let out = $body?;
                    probe($g, out, $seed)
                }),
            ));
        };
    }
    case!("add", [[3, 4], [3, 4]], 1, |_g, v| v[0].add(v[1]));
    case!("sub", [[3, 4], [3, 4]], 2, |_g, v| v[0].sub(v[1]));
    case!("mul", [[3, 4], [3, 4]], 3, |_g, v| v[0].mul(v[1]));
    case!("scale", [[3, 4]], 4, |_g, v| Ok::<_, ahan::AhanError>(v[0].scale(-1.7)));
    case!("add_scalar", [[3, 4]], 5, |_g, v| Ok::<_, ahan::AhanError>(v[0].add_scalar(0.3)));
    case!("abs", [[3, 4]], 6, |_g, v| Ok::<_, ahan::AhanError>(v[0].abs()));
    case!("relu", [[3, 4]], 7, |_g, v| Ok::<_, ahan::AhanError>(v[0].relu()));
    case!("gelu", [[3, 4]], 8, |_g, v| Ok::<_, ahan::AhanError>(v[0].gelu()));
    case!("add_row", [[3, 4], [1, 4]], 9, |_g, v| v[0].add_row(v[1]));
    case!("mul_row", [[3, 4], [1, 4]], 10, |_g, v| v[0].mul_row(v[1]));
    case!("matmul", [[3, 4], [4, 2]], 11, |_g, v| v[0].matmul(v[1]));
    case!("transpose", [[3, 4]], 12, |_g, v| v[0].transpose());
    case!("reshape", [[3, 4]], 13, |_g, v| v[0].reshape(&[2, 6]));
    case!("softmax rows", [[3, 4]], 14, |_g, v| v[0].softmax(1));
    case!("softmax cols", [[3, 4]], 15, |_g, v| v[0].softmax(0));
    case!("mean_pool rows", [[3, 4]], 16, |_g, v| v[0].mean_pool(0));
    case!("mean_pool cols", [[3, 4]], 17, |_g, v| v[0].mean_pool(1));
    case!("sum", [[3, 4]], 18, |_g, v| Ok::<_, ahan::AhanError>(v[0].sum()));
    case!("mean", [[3, 4]], 19, |_g, v| Ok::<_, ahan::AhanError>(v[0].mean()));
    case!("gather_rows", [[3, 4]], 20, |_g, v| v[0].gather_rows(&[2, 0, 2]));
    case!("pick", [[3, 4]], 21, |_g, v| v[0].pick(&[0, 5, 11, 5]));
    case!("layer_norm", [[3, 4]], 22, |_g, v| v[0].layer_norm(1e-6));
    case!("l2_normalize_rows", [[3, 4]], 23, |_g, v| v[0].l2_normalize_rows());
    case!("concat rows", [[2, 4], [3, 4]], 24, |_g, v| concat(&[v[0], v[1]], 0));
    case!("concat cols", [[3, 2], [3, 4]], 25, |_g, v| concat(&[v[0], v[1]], 1));
    case!("arc_margin", [[3, 4]], 26, |_g, v| v[0].scale(0.9).arc_margin(&[1, 3, 0], 0.5));
    cases.push((
        "cross_entropy",
        vec![m(&[3, 4])],
        Box::new(|_g: &Graph, v: &[Var]| v[0].scale(3.0).cross_entropy(&[2, 0, 3])),
    ));
    cases
}

fn module_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(200);
    let d = 8;
    let grid = Grid::new(2, 4);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();

    let q = Tensor::randn(&[3, 4], 1.0, &mut r);
    let k = Tensor::randn(&[5, 4], 1.0, &mut r);
    let v = Tensor::randn(&[5, 3], 1.0, &mut r);
    cases.push((
        "scaled_attention",
        vec![q, k, v],
        Box::new(|g: &Graph, v: &[Var]| probe(g, scaled_attention(v[0], v[1], v[2])?.output, 31)),
    ));

    let attn = AttnParams::init(d, 2, 0.5, &mut r);
    let x = Tensor::randn(&[9, d], 1.0, &mut r);
    let twin = Tensor::randn(&[9, d], 1.0, &mut r);
    let mut inputs = vec![x.clone(), twin.clone()];
    attn.visit("", &mut |_, t| inputs.push(t.clone()));
    let a2 = attn.clone();
    cases.push((
        "multi_head with twin keys",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&a2, &v[2..], |p, f| p.map(f));
            probe(g, multi_head(v[0], &p, Some(v[1]), 1)?, 32)
        }),
    ));

    let mut block = BlockParams::init(d, 2, 2, 0.5, &mut r);
    block.visit_mut("", &mut |_, t| *t = t.map(|x| x + 0.05));
    let mut inputs = vec![x.clone()];
    block.visit("", &mut |_, t| inputs.push(t.clone()));
    cases.push((
        "transformer block",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&block, &v[1..], |p, f| p.map(f));
            let seq = TokenSeq::new(v[0], grid, true)?;
            probe(g, block_forward(seq, &p, 1e-6, 1, None)?.tokens, 33)
        }),
    ));

    let qkv = QkvParams::init(d, 0.5, &mut r);
    let mut inputs = vec![Tensor::randn(&[3, d], 1.0, &mut r), Tensor::randn(&[4, d], 1.0, &mut r)];
    qkv.visit("", &mut |_, t| inputs.push(t.clone()));
    let q2 = qkv.clone();
    cases.push((
        "cross_attention",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&q2, &v[2..], |p, f| p.map(f));
            probe(g, cross_attention(v[0], v[1], &p)?.output, 34)
        }),
    ));

    let mut hca = HcaParams::init(d, 2, 0.5, &mut r);
    hca.scale_logits = Tensor::randn(&[4, 2], 1.0, &mut r);
    let regions = [
        RegionSpec::new(Region::Eyes, vec![0, 1, 2, 3], 8).unwrap(),
        RegionSpec::new(Region::Nose, vec![1, 5], 8).unwrap(),
        RegionSpec::new(Region::Mouth, vec![5, 6], 8).unwrap(),
        RegionSpec::new(Region::Jaw, vec![4, 7], 8).unwrap(),
    ];
    let mut inputs = vec![x.clone()];
    hca.visit("", &mut |_, t| inputs.push(t.clone()));
    cases.push((
        "hierarchical cross-attention",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&hca, &v[1..], |p, f| p.map(f));
            let seq = TokenSeq::new(v[0], grid, true)?;
            probe(g, hca_forward(seq, &regions, &[1, 2], &p)?, 35)
        }),
    ));

    let mut inputs = vec![x.clone()];
    qkv.visit("", &mut |_, t| inputs.push(t.clone()));
    cases.push((
        "facial asymmetry attention",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&qkv, &v[1..], |p, f| p.map(f));
            let seq = TokenSeq::new(v[0], grid, true)?;
            probe(g, faam_forward(seq, &p)?, 36)
        }),
    ));

    let emb = EmbedParams::init(12, 8, d, 0.5, &mut r);
    let mut inputs = vec![Tensor::randn(&[8, 12], 1.0, &mut r)];
    emb.visit("", &mut |_, t| inputs.push(t.clone()));
    cases.push((
        "patch embedding",
        inputs,
        Box::new(move |g: &Graph, v: &[Var]| {
            let p = rebind(&emb, &v[1..], |p, f| p.map(f));
            probe(g, embed(v[0], &p, grid)?.tokens, 37)
        }),
    ));

    let e = Tensor::randn(&[6, 5], 1.0, &mut r);
    let w = Tensor::randn(&[5, 4], 1.0, &mut r);
    cases.push((
        "arcface loss",
        vec![e.clone(), w],
        Box::new(|g: &Graph, v: &[Var]| {
            let b = IdentityBatch::new(v[0], vec![0, 0, 1, 1, 2, 3], [(0, 1), (1, 0)].into())?;
            let head = ArcHead {
                weight: v[1],
                margin: 0.5,
                scale: 8.0,
            };
            let _ = g;
            arcface_loss(&b, &head)
        }),
    ));
    cases.push((
        "twin triplet loss",
        vec![e],
        Box::new(|_g: &Graph, v: &[Var]| {
            let b = IdentityBatch::new(v[0], vec![0, 0, 1, 1, 2, 2], [(0, 1), (1, 0)].into())?;
            twin_triplet_loss(&b, 1.5)
        }),
    ));
    cases
}

fn criterion_gradients() -> Outcome {
    let mut worst_unit: (f64, &str) = (0.0, "");
    for (name, inputs, build) in unit_cases().into_iter().chain(module_cases()) {
        let rep = check_gradients(&inputs, DEFAULT_EPS, |g, v| build(g, v)).map_err(|e| format!("{name}: {e}"))?;
        ensure(rep.max_rel_err <= 1e-4, format!("{name}: relative error {:.2e}", rep.max_rel_err))?;
        if rep.max_rel_err >= worst_unit.0 {
            worst_unit = (rep.max_rel_err, name);
        }
    }
    let cfg = RunConfig::desk();
    let mut worst_e2e = 0.0f64;
    for seed in 0..3 {
        let c = end_to_end_gradcheck(&cfg, seed, 20, DEFAULT_EPS).map_err(err)?;
        ensure(c.checked == 20, "20 parameters per seed")?;
        ensure(
            c.max_rel_err <= 1e-3,
            format!("end-to-end seed {seed}: {:.2e} at {}", c.max_rel_err, c.worst),
        )?;
        worst_e2e = worst_e2e.max(c.max_rel_err);
    }
    Ok(format!(
        "{} ops/modules ≤ 1e-4 (worst {:.1e}, {}), end-to-end 3 seeds × 20 params ≤ 1e-3 (worst {:.1e})",
        unit_cases().len() + module_cases().len(),
        worst_unit.0,
        worst_unit.1,
        worst_e2e
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_row_sums() -> Outcome {
    let cfg = RunConfig::desk().model;
    let weights = AhanWeights::init(&cfg, 4, &mut rng(2)).map_err(err)?;
    let mut counts = [0usize; 4];
    let mut worst = 0.0f64;
    for i in 0..10 {
        let mut r = rng(1000 + i);
        let img = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
        let twin = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
        let g = Graph::with_trace();
        let w = weights.bind(&g);
        ahan_forward(&g, &img, &w, &cfg, Mode::Train, Some(&twin), true).map_err(err)?;
        for (site, a) in g.attention_trace() {
            let kind = match site {
                AttnSite::Backbone { .. } => 0,
                AttnSite::TwinDistraction { .. } => 1,
                AttnSite::Hca { .. } => 2,
                AttnSite::Faam { .. } => 3,
            };
            counts[kind] += 1;
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure(counts.iter().all(|&c| c >= 10), format!("site counts {counts:?}"))?;
    ensure(worst <= 1e-9, format!("row sum off by {worst:.2e}"))?;
    Ok(format!(
        "self {}, twin-combined {}, HCA {}, FAAM {} matrices; max |Σrow − 1| = {worst:.1e}",
        counts[0], counts[1], counts[2], counts[3]
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_faam_zero() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let (rows, cols, d) = (4, 6, 8);
        let mut data = Tensor::randn(&[1 + rows * cols, d], 1.0, &mut r).into_data();
        for row in 0..rows {
            for c in 0..cols / 2 {
                for k in 0..d {
                    let src = (1 + row * cols + c) * d + k;
                    data[(1 + row * cols + cols - 1 - c) * d + k] = data[src];
                }
            }
        }
        let x = Tensor::new(vec![1 + rows * cols, d], data).map_err(err)?;
        let g = Graph::new();
        let p = QkvParams::init(d, 0.5, &mut r).map(&mut |t| g.leaf(t.clone()));
        let seq = TokenSeq::new(g.leaf(x), Grid::new(rows, cols), true).map_err(err)?;
        let f = faam_forward(seq, &p).map_err(err)?.value();
        worst = f.data().iter().fold(worst, |m, v| m.max(v.abs()));
    }
    ensure(worst <= 1e-9, format!("‖f_asym‖∞ = {worst:.2e}"))?;
    Ok(format!("10 mirror-symmetric inputs, max ‖f_asym‖∞ = {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_infer_equivalence() -> Outcome {
    let on = RunConfig::desk().model;
    let mut off = on.clone();
    off.tapwca.enabled = false;
    let weights = AhanWeights::init(&on, 4, &mut rng(4)).map_err(err)?;
    for i in 0..5 {
        let mut r = rng(400 + i);
        let img = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
        let twin = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
        let run = |cfg: &AhanConfig, twin: Option<&Tensor>, gate: bool| -> Result<Vec<u64>> {
            let g = Graph::new();
            let w = weights.bind(&g);
            let f = ahan_forward(&g, &img, &w, cfg, Mode::Infer, twin, gate)?;
            let bits = f.value().data().iter().map(|v| v.to_bits()).collect();
            Ok(bits)
        };
        let base = run(&off, None, false).map_err(err)?;
        for (cfg, t, gate) in [(&on, None, false), (&on, Some(&twin), true), (&off, Some(&twin), true)] {
            ensure(run(cfg, t, gate).map_err(err)? == base, "infer output changed")?;
        }
    }
    Ok("5 images: on/off, with/without twin, gate on/off give bit-identical embeddings".into())
}

// ---------------------------------------------------------------- 5

fn criterion_duplicated_twin() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let g = Graph::new();
        let q = g.leaf(Tensor::randn(&[7, 4], 1.0, &mut r));
        let k = g.leaf(Tensor::randn(&[7, 4], 1.0, &mut r));
        let v = g.leaf(Tensor::randn(&[7, 4], 1.0, &mut r));
        let (kc, vc) = combine_kv(k, Some(k), v, Some(v)).map_err(err)?;
        let ta = ta_attention(q, kc, vc).map_err(err)?.output.value();
        let plain = scaled_attention(q, k, v).map_err(err)?.output.value();
        worst = worst.max(ta.max_abs_diff(&plain).unwrap());

        let params = AttnParams::init(8, 2, 0.5, &mut r).map(&mut |t| g.leaf(t.clone()));
        let x = g.leaf(Tensor::randn(&[5, 8], 1.0, &mut r));
        let with = multi_head(x, &params, Some(x), 1).map_err(err)?.value();
        let without = multi_head(x, &params, None, 1).map_err(err)?.value();
        worst = worst.max(with.max_abs_diff(&without).unwrap());
    }
    ensure(worst <= 1e-12, format!("difference {worst:.2e}"))?;
    Ok(format!("10 inputs, single- and multi-head, max difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn softmax_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn criterion_reductions() -> Outcome {
    let mut worst_hca = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(600 + seed);
        let (n, d) = (16, 8);
        let x = Tensor::randn(&[1 + n, d], 1.0, &mut r);
        // oracle: mean over rows of softmax(X Xᵀ / √d) X on patch tokens
        let p: Vec<Vec<f64>> = (1..=n).map(|i| x.row(i).to_vec()).collect();
        let logits: Vec<Vec<f64>> = p
            .iter()
            .map(|a| p.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / (d as f64).sqrt()).collect())
            .collect();
        let att = softmax_rows(&logits);
        let mut pooled = vec![0.0; d];
        for row in &att {
            for (j, w) in row.iter().enumerate() {
                for k in 0..d {
                    pooled[k] += w * p[j][k] / n as f64;
                }
            }
        }
        let g = Graph::new();
        let params = HcaParams::identity(d, 1).map(&mut |t| g.leaf(t.clone()));
        let regions = Region::ALL.map(|reg| RegionSpec::full(reg, n).unwrap());
        let seq = TokenSeq::new(g.leaf(x), Grid::new(4, 4), true).map_err(err)?;
        let out = hca_forward(seq, &regions, &[1], &params).map_err(err)?.value();
        for reg in 0..4 {
            for k in 0..d {
                worst_hca = worst_hca.max((out.data()[reg * d + k] - pooled[k]).abs());
            }
        }
    }
    ensure(worst_hca <= 1e-10, format!("HCA reduction off by {worst_hca:.2e}"))?;

    let mut worst_arc = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(650 + seed);
        let (b, dim, classes, s) = (6, 5, 4, 30.0);
        let e = Tensor::randn(&[b, dim], 1.0, &mut r);
        let w = Tensor::randn(&[dim, classes], 1.0, &mut r);
        let labels = vec![0, 1, 2, 3, 1, 0];
        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let rows: Vec<Vec<f64>> = (0..b).map(|i| norm(e.row(i).to_vec())).collect();
        let cols: Vec<Vec<f64>> = (0..classes).map(|c| norm((0..dim).map(|k| w.at(k, c)).collect())).collect();
        let logits: Vec<Vec<f64>> = rows
            .iter()
            .map(|x| cols.iter().map(|c| s * x.iter().zip(c).map(|(u, v)| u * v).sum::<f64>()).collect())
            .collect();
        let probs = softmax_rows(&logits);
        let ce = -labels.iter().enumerate().map(|(i, &l)| probs[i][l].ln()).sum::<f64>() / b as f64;
        let g = Graph::new();
        let batch = IdentityBatch::new(g.leaf(e), labels, Default::default()).map_err(err)?;
        let head = ArcHead {
            weight: g.leaf(w),
            margin: 0.0,
            scale: s,
        };
        let got = arcface_loss(&batch, &head).map_err(err)?.value().item().map_err(err)?;
        worst_arc = worst_arc.max((got - ce).abs());
    }
    ensure(worst_arc <= 1e-10, format!("ArcFace reduction off by {worst_arc:.2e}"))?;
    Ok(format!("HCA vs pooled self-attention {worst_hca:.1e}; zero-margin ArcFace vs cross-entropy {worst_arc:.1e}"))
}

// ---------------------------------------------------------------- 7

fn sweep(s: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.pairs().iter().map(|p| p.0).collect();
    t.extend([f64::NEG_INFINITY, f64::INFINITY]);
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

fn rates(s: &ScoreSet, t: f64) -> (f64, f64) {
    let (p, n) = (s.positives(), s.negatives());
    let far = n.iter().filter(|&&v| v >= t).count() as f64 / n.len() as f64;
    let tar = p.iter().filter(|&&v| v >= t).count() as f64 / p.len() as f64;
    (far, tar)
}

fn criterion_metric_oracles() -> Outcome {
    let mut r = rng(7);
    for i in 0..50 {
        let n = r.random_range(2..=100);
        let levels = if i % 2 == 0 { 8 } else { 1_000_000 };
        let mut v: Vec<(f64, bool)> = (0..n)
            .map(|_| (f64::from(r.random_range(0..levels)) / f64::from(levels), r.random::<bool>()))
            .collect();
        v[0].1 = true;
        v[1].1 = false;
        let s = ScoreSet::new(v).map_err(err)?;
        let (p, ng) = (s.positives(), s.negatives());

        let mut wins = 0.0;
        for a in &p {
            for b in &ng {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        let auc = wins / (p.len() * ng.len()) as f64;
        ensure(roc_auc(&s).map_err(err)? == auc, format!("set {i}: AUC"))?;

        let acc = sweep(&s)
            .into_iter()
            .map(|t| s.pairs().iter().filter(|&&(x, l)| (x >= t) == l).count() as f64 / s.len() as f64)
            .fold(0.0, f64::max);
        ensure(accuracy_best_threshold(&s).map_err(err)? == acc, format!("set {i}: accuracy"))?;

        for target in [0.01, 0.05, 0.1, 0.3, 0.5] {
            let t = sweep(&s)
                .into_iter()
                .filter(|&t| rates(&s, t).0 <= target)
                .fold(f64::INFINITY, f64::min);
            ensure(tar_at_far(&s, target).map_err(err)? == rates(&s, t).1, format!("set {i}: TAR@{target}"))?;
        }

        let pts: Vec<(f64, f64)> = sweep(&s).into_iter().map(|t| {
            let (far, tar) = rates(&s, t);
            (far, 1.0 - tar)
        }).collect();
        let mut oracle = None;
        for w in pts.windows(2) {
            let ((f0, r0), (f1, r1)) = (w[0], w[1]);
            if f0 == r0 {
                oracle = Some(f0);
                break;
            }
            if (f0 - r0) * (f1 - r1) <= 0.0 {
                oracle = Some(f0 + (f0 - r0) / ((f0 - r0) - (f1 - r1)) * (f1 - f0));
                break;
            }
        }
        let got = eer(&s).map_err(err)?;
        ensure((got - oracle.unwrap()).abs() <= 1e-15, format!("set {i}: EER {got} vs {oracle:?}"))?;
    }
    let sep = ScoreSet::new(vec![(0.9, true), (0.8, true), (0.3, false), (0.1, false)]).map_err(err)?;
    ensure(roc_auc(&sep).map_err(err)? == 1.0, "AUC on separated scores")?;
    Ok("50 random score sets: AUC, accuracy, TAR@FAR exact; EER within 1e-15; separated AUC = 1".into())
}

// ---------------------------------------------------------------- 8

fn criterion_profile() -> Outcome {
    let p = RunConfig::paper().model;
    ensure(p.loss.lambda == 0.1, "λ")?;
    ensure(p.loss.triplet_margin == 0.5, "triplet margin")?;
    ensure(p.tapwca.probability == 0.5, "p")?;
    ensure(p.scales == [1, 2, 4], "scales")?;
    ensure(p.region_specs().map_err(err)?.len() == 4, "regions")?;
    ensure((p.dim, p.heads, p.patch) == (768, 12, 16), "d, h, P")?;
    ensure(p.embedding_dim() == 6 * 768, "paper D")?;
    let desk = RunConfig::desk().model;
    let w = AhanWeights::init(&desk, 3, &mut rng(8)).map_err(err)?;
    let g = Graph::new();
    let img = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut rng(9));
    let f = ahan_forward(&g, &img, &w.bind(&g), &desk, Mode::Infer, None, false).map_err(err)?;
    ensure(f.shape() == [1, 6 * desk.dim], format!("desk f_final {:?}", f.shape()))?;
    Ok(format!(
        "paper: λ=0.1 margin=0.5 p=0.5 scales {{1,2,4}} 4 regions d=768 h=12 P=16 D=4608; desk f_final 1×{}",
        6 * desk.dim
    ))
}

// ---------------------------------------------------------------- 9

/// High divergence used for the learnability check.
const HIGH_DIVERGENCE: f64 = 3.0;

fn learn(divergence: f64) -> std::result::Result<(f64, f64, f64), String> {
    let mut cfg = RunConfig::desk();
    cfg.synth.twin_divergence = divergence;
    let data = generate(&cfg.synth).map_err(err)?;
    let (train, train_imgs) = select_split(&data.manifest, &data.images, Split::Train).map_err(err)?;
    let (test, test_imgs) = select_split(&data.manifest, &data.images, Split::Test).map_err(err)?;
    let mut trainer = Trainer::new(&cfg, &train, train_imgs).map_err(err)?;
    let recs = trainer.run(|_| {}).map_err(err)?;
    let first = recs[0].total;
    let tail = recs[recs.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let ev = evaluate(trainer.weights(), &cfg.model, &test, &test_imgs, Scenario::HardTwin, &cfg.eval).map_err(err)?;
    Ok((first, tail, ev.report.roc_auc))
}

fn criterion_learnability() -> Outcome {
    let start = Instant::now();
    let (first, tail, auc_hi) = learn(HIGH_DIVERGENCE)?;
    let (_, _, auc_zero) = learn(0.0)?;
    let elapsed = start.elapsed();
    let drop = 1.0 - tail / first;
    let detail = format!(
        "loss {first:.2} → {tail:.2} (mean of last 10, −{:.0}%), hard-twin AUC {auc_hi:.3} at divergence {HIGH_DIVERGENCE}, {auc_zero:.3} at 0, {:.0}s",
        100.0 * drop,
        elapsed.as_secs_f64()
    );
    ensure(drop >= 0.3, format!("loss reduction too small: {detail}"))?;
    ensure(auc_hi > 0.9, format!("high-divergence AUC: {detail}"))?;
    ensure((0.4..=0.6).contains(&auc_zero), format!("zero-divergence AUC: {detail}"))?;
    ensure(elapsed <= Duration::from_secs(300), format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn pipeline(dir: &std::path::Path) -> std::result::Result<(Vec<f64>, Vec<String>), String> {
    let mut cfg = RunConfig::desk();
    cfg.train.steps = 50;
    gen_data(&cfg, dir.join("data")).map_err(err)?;
    let manifest = dir.join("data/manifest.csv");
    let summary = train_model(&cfg, &manifest, dir.join("model"), |_| {}).map_err(err)?;
    let mut reports = Vec::new();
    for sc in Scenario::ALL {
        let ev = evaluate_checkpoint(&cfg, &manifest, &summary.checkpoint, sc).map_err(err)?;
        reports.push(serde_json::to_string(&ev.report).map_err(err)?);
    }
    Ok((summary.losses.iter().map(|r| r.total).collect(), reports))
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let (la, ra) = pipeline(a.path())?;
    let (lb, rb) = pipeline(b.path())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&la) == bits(&lb), "loss trajectories differ")?;
    ensure(ra == rb, "metric reports differ")?;
    Ok(format!("{} losses and {} reports identical across two runs", la.len(), ra.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", criterion_gradients),
        ("attention normalization", criterion_row_sums),
        ("asymmetry zero-signature", criterion_faam_zero),
        ("distraction inference-equivalence", criterion_infer_equivalence),
        ("duplicated-twin identity", criterion_duplicated_twin),
        ("reduction identities", criterion_reductions),
        ("metric oracles", criterion_metric_oracles),
        ("hyperparameter fidelity", criterion_profile),
        ("end-to-end learnability", criterion_learnability),
        ("determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
