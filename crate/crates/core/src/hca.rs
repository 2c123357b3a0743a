//! Hierarchical cross-attention: region-restricted queries attend to the
//! patch grid at several pooling scales, and the per-scale results are mixed
//! with learned per-region softmax weights.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, Attended, QkvParams};
use crate::autograd::{concat, Var};
use crate::embed::{Grid, TokenSeq};
use crate::error::{AhanError, Result};
use crate::tensor::Tensor;
use crate::trace::AttnSite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Eyes,
    Nose,
    Mouth,
    Jaw,
}

impl Region {
    /// Concatenation order of the region features.
    pub const ALL: [Region; 4] = [Region::Eyes, Region::Nose, Region::Mouth, Region::Jaw];

    pub fn name(self) -> &'static str {
        match self {
            Region::Eyes => "eyes",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Jaw => "jaw",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A nonempty, sorted, duplicate-free set of patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSpec {
    region: Region,
    indices: Vec<usize>,
}

impl RegionSpec {
    pub fn new(region: Region, mut indices: Vec<usize>, num_patches: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(AhanError::invalid(
                "region_spec",
                format!("region {region} selects no patches"),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_patches) {
            return Err(AhanError::invalid(
                "region_spec",
                format!("region {region} index {bad} out of range [0, {num_patches})"),
            ));
        }
        Ok(RegionSpec { region, indices })
    }

    /// Every patch of an `n`-patch grid.
    pub fn full(region: Region, num_patches: usize) -> Result<Self> {
        Self::new(region, (0..num_patches).collect(), num_patches)
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Projections indexed `[region][scale]` plus `4×S` scale logits.
#[derive(Debug, Clone)]
pub struct HcaParams<T> {
    pub proj: Vec<Vec<QkvParams<T>>>,
    pub scale_logits: T,
}

impl HcaParams<Tensor> {
    /// Random projections; zero logits give uniform scale weights.
    pub fn init<R: Rng + ?Sized>(dim: usize, num_scales: usize, std: f64, rng: &mut R) -> Self {
        let proj = (0..4)
            .map(|_| (0..num_scales).map(|_| QkvParams::init(dim, std, rng)).collect())
            .collect();
        HcaParams {
            proj,
            scale_logits: Tensor::zeros(&[4, num_scales]),
        }
    }

    pub fn identity(dim: usize, num_scales: usize) -> Self {
        HcaParams {
            proj: vec![vec![QkvParams::identity(dim); num_scales]; 4],
            scale_logits: Tensor::zeros(&[4, num_scales]),
        }
    }
}

impl<T> HcaParams<T> {
    pub fn num_scales(&self) -> usize {
        self.proj.first().map_or(0, Vec::len)
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HcaParams<U> {
        HcaParams {
            proj: self
                .proj
                .iter()
                .map(|per_scale| per_scale.iter().map(|p| p.map(f)).collect())
                .collect(),
            scale_logits: f(&self.scale_logits),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (r, per_scale) in self.proj.iter().enumerate() {
            for (s, p) in per_scale.iter().enumerate() {
                p.visit(&format!("{prefix}.r{r}.s{s}"), f);
            }
        }
        f(format!("{prefix}.scale_logits"), &self.scale_logits);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (r, per_scale) in self.proj.iter_mut().enumerate() {
            for (s, p) in per_scale.iter_mut().enumerate() {
                p.visit_mut(&format!("{prefix}.r{r}.s{s}"), f);
            }
        }
        f(format!("{prefix}.scale_logits"), &mut self.scale_logits);
    }
}

/// Row-stochastic `M×N` pooling matrix averaging `s×s` blocks of a grid.
/// Blocks at the far edges are truncated when `s` does not divide the grid.
fn pooling_matrix(grid: Grid, s: usize) -> (Tensor, Grid) {
    let out = Grid::new(grid.rows.div_ceil(s), grid.cols.div_ceil(s));
    let mut m = Tensor::zeros(&[out.len(), grid.len()]);
    let n = grid.len();
    for br in 0..out.rows {
        for bc in 0..out.cols {
            let rows = br * s..((br + 1) * s).min(grid.rows);
            let cols = bc * s..((bc + 1) * s).min(grid.cols);
            let w = 1.0 / (rows.len() * cols.len()) as f64;
            let o = br * out.cols + bc;
            for r in rows {
                for c in cols.clone() {
                    m.data_mut()[o * n + r * grid.cols + c] = w;
                }
            }
        }
    }
    (m, out)
}

fn pool_with<'g>(
    x: TokenSeq<'g>,
    s: usize,
    op: &'static str,
    exact: bool,
) -> Result<TokenSeq<'g>> {
    if s == 0 {
        return Err(AhanError::invalid(op, "scale must be positive"));
    }
    let grid = x.grid;
    if exact && (grid.rows % s != 0 || grid.cols % s != 0) {
        return Err(AhanError::invalid(
            op,
            format!("{}x{} grid is not divisible by scale {s}", grid.rows, grid.cols),
        ));
    }
    let patches = x.patch_tokens()?;
    if s == 1 {
        return TokenSeq::new(patches, grid, false);
    }
    let (m, out) = pooling_matrix(grid, s);
    let pooled = x.tokens.graph().leaf(m).matmul(patches)?;
    TokenSeq::new(pooled, out, false)
}

/// Averages non-overlapping `s×s` blocks of patch tokens; the class token is
/// dropped. Errors unless `s` divides both grid sides.
pub fn downsample_tokens(x: TokenSeq<'_>, s: usize) -> Result<TokenSeq<'_>> {
    pool_with(x, s, "downsample_tokens", true)
}

/// Like [`downsample_tokens`], but a grid side not divisible by `s` ends in
/// a smaller block that averages only the tokens it covers.
pub fn downsample_tokens_ceil(x: TokenSeq<'_>, s: usize) -> Result<TokenSeq<'_>> {
    pool_with(x, s, "downsample_tokens", false)
}

fn region_queries<'g>(x: TokenSeq<'g>, region: &RegionSpec) -> Result<Var<'g>> {
    if let Some(&bad) = region.indices().iter().find(|&&i| i >= x.grid.len()) {
        return Err(AhanError::invalid(
            "region_cross_attention",
            format!(
                "{} index {bad} outside the {}x{} grid",
                region.region(),
                x.grid.rows,
                x.grid.cols
            ),
        ));
    }
    x.patch_tokens()?.gather_rows(region.indices())
}

/// Region tokens at base resolution attend to the grid pooled at scale `s`.
/// Returns `|R|×d` outputs and `|R|×M` weights.
pub fn region_cross_attention<'g>(
    x: TokenSeq<'g>,
    region: &RegionSpec,
    s: usize,
    proj: &QkvParams<Var<'g>>,
) -> Result<Attended<'g>> {
    let queries = region_queries(x, region)?;
    let context = downsample_tokens_ceil(x, s)?;
    cross_attention(queries, context.tokens, proj)
}

/// `Σ_s softmax(logits)_s · mean_rows(A^{(s)})` as a `1×d` row.
pub fn aggregate_scales<'g>(per_scale: &[Var<'g>], logits: Var<'g>) -> Result<Var<'g>> {
    if per_scale.is_empty() {
        return Err(AhanError::invalid("aggregate_scales", "empty scale list"));
    }
    if logits.shape() != [1, per_scale.len()] {
        return Err(AhanError::shape(
            "aggregate_scales",
            format!("logits {:?} for {} scales", logits.shape(), per_scale.len()),
        ));
    }
    let pooled = per_scale
        .iter()
        .map(|a| a.mean_pool(0))
        .collect::<Result<Vec<_>>>()?;
    let stacked = concat(&pooled, 0)?;
    logits.softmax(1)?.matmul(stacked)
}

/// Softmax-normalized scale weights, one row per region.
pub fn scale_weights(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
    }
    out
}

/// Region features in order eyes, nose, mouth, jaw, as a `1×4d` row.
pub fn hca_forward<'g>(
    x: TokenSeq<'g>,
    regions: &[RegionSpec; 4],
    scales: &[usize],
    params: &HcaParams<Var<'g>>,
) -> Result<Var<'g>> {
    if scales.is_empty() {
        return Err(AhanError::invalid("hca_forward", "empty scale list"));
    }
    if params.proj.len() != 4 || params.proj.iter().any(|p| p.len() != scales.len()) {
        return Err(AhanError::shape(
            "hca_forward",
            format!("parameters do not cover 4 regions x {} scales", scales.len()),
        ));
    }
    let g = x.tokens.graph();
    let contexts = scales
        .iter()
        .map(|&s| downsample_tokens_ceil(x, s))
        .collect::<Result<Vec<_>>>()?;
    let mut features = Vec::with_capacity(4);
    for (k, region) in regions.iter().enumerate() {
        let queries = region_queries(x, region)?;
        let mut per_scale = Vec::with_capacity(scales.len());
        for (si, ctx) in contexts.iter().enumerate() {
            let att = cross_attention(queries, ctx.tokens, &params.proj[k][si])?;
            g.record_attention(
                AttnSite::Hca {
                    region: k,
                    scale: scales[si],
                },
                att.weights,
            );
            per_scale.push(att.output);
        }
        let logits = params.scale_logits.gather_rows(&[k])?;
        features.push(aggregate_scales(&per_scale, logits)?);
    }
    concat(&features, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::scaled_attention;
    use crate::autograd::Graph;
    use crate::gradcheck::{check_gradients, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq<'g>(g: &'g Graph, rows: usize, cols: usize, d: usize, seed: u64) -> TokenSeq<'g> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = g.leaf(Tensor::randn(&[rows * cols + 1, d], 1.0, &mut r));
        TokenSeq::new(t, Grid::new(rows, cols), true).unwrap()
    }

    fn bind<'g>(g: &'g Graph, p: &HcaParams<Tensor>) -> HcaParams<Var<'g>> {
        p.map(&mut |t| g.leaf(t.clone()))
    }

    #[test]
    fn scale_one_is_identity_on_patches() {
        let g = Graph::new();
        let x = seq(&g, 4, 4, 3, 1);
        let y = downsample_tokens(x, 1).unwrap();
        assert_eq!(*y.tokens.value(), *x.patch_tokens().unwrap().value());
        assert!(!y.has_cls);
    }

    #[test]
    fn single_block_averages_four_tokens() {
        let g = Graph::new();
        let t = Tensor::from_rows(&[
            vec![9.0, 9.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        let x = TokenSeq::new(g.leaf(t), Grid::new(2, 2), true).unwrap();
        let y = downsample_tokens(x, 2).unwrap();
        assert_eq!(y.tokens.value().data(), &[4.0, 5.0]);
        assert_eq!(y.grid, Grid::new(1, 1));
    }

    #[test]
    fn matches_block_loop_oracle() {
        let g = Graph::new();
        let x = seq(&g, 4, 4, 3, 2);
        let p = x.patch_tokens().unwrap().value().clone();
        let y = downsample_tokens(x, 2).unwrap().tokens.value().clone();
        for br in 0..2 {
            for bc in 0..2 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            acc += p.at((br * 2 + dr) * 4 + bc * 2 + dc, c);
                        }
                    }
                    assert!((y.at(br * 2 + bc, c) - acc / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_divisible_grid_is_rejected_by_exact_pooling() {
        let g = Graph::new();
        let x = seq(&g, 6, 6, 2, 3);
        assert!(downsample_tokens(x, 4).is_err());
        let y = downsample_tokens_ceil(x, 4).unwrap();
        assert_eq!(y.grid, Grid::new(2, 2));
        // bottom-right block covers rows 4..6, cols 4..6
        let p = x.patch_tokens().unwrap().value().clone();
        let expected = [28, 29, 34, 35].iter().map(|&i| p.at(i, 0)).sum::<f64>() / 4.0;
        assert!((y.tokens.value().at(3, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn ceil_pooling_matches_exact_when_divisible() {
        let g = Graph::new();
        let x = seq(&g, 4, 4, 3, 4);
        let a = downsample_tokens(x, 2).unwrap().tokens.value().clone();
        let b = downsample_tokens_ceil(x, 2).unwrap().tokens.value().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn full_region_identity_scale_one_is_self_attention() {
        let g = Graph::new();
        let x = seq(&g, 3, 4, 4, 5);
        let region = RegionSpec::full(Region::Eyes, 12).unwrap();
        let p = QkvParams::identity(4).map(&mut |t| g.leaf(t.clone()));
        let out = region_cross_attention(x, &region, 1, &p).unwrap().output;
        let patches = x.patch_tokens().unwrap();
        let direct = scaled_attention(patches, patches, patches).unwrap().output;
        assert!(out.value().max_abs_diff(&direct.value()).unwrap() < 1e-12);
    }

    #[test]
    fn identical_tokens_give_the_common_value() {
        let g = Graph::new();
        let t = Tensor::new(vec![17, 3], [0.5, -1.0, 2.0].repeat(17)).unwrap();
        let x = TokenSeq::new(g.leaf(t), Grid::new(4, 4), true).unwrap();
        let region = RegionSpec::new(Region::Nose, vec![1, 5, 6], 16).unwrap();
        let p = QkvParams::identity(3).map(&mut |t| g.leaf(t.clone()));
        let out = region_cross_attention(x, &region, 2, &p).unwrap().output.value().clone();
        for i in 0..3 {
            assert!((out.at(i, 0) - 0.5).abs() < 1e-12);
            assert!((out.at(i, 1) + 1.0).abs() < 1e-12);
            assert!((out.at(i, 2) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn region_attention_matches_composition_oracle() {
        let g = Graph::new();
        let x = seq(&g, 4, 4, 4, 6);
        let mut r = ChaCha8Rng::seed_from_u64(60);
        let p = QkvParams::init(4, 0.7, &mut r).map(&mut |t| g.leaf(t.clone()));
        let region = RegionSpec::new(Region::Mouth, vec![9, 2, 14], 16).unwrap();
        let out = region_cross_attention(x, &region, 2, &p).unwrap().output;

        let patches = x.patch_tokens().unwrap().value().clone();
        let mut pooled = vec![vec![0.0; 4]; 4];
        for (i, row) in pooled.iter_mut().enumerate() {
            let (br, bc) = (i / 2, i % 2);
            for dr in 0..2 {
                for dc in 0..2 {
                    let src = patches.row((br * 2 + dr) * 4 + bc * 2 + dc);
                    for c in 0..4 {
                        row[c] += src[c] / 4.0;
                    }
                }
            }
        }
        let queries: Vec<Vec<f64>> = [2, 9, 14].iter().map(|&i| patches.row(i).to_vec()).collect();
        let q = g.leaf(Tensor::from_rows(&queries).unwrap()).matmul(p.q).unwrap();
        let ctx = g.leaf(Tensor::from_rows(&pooled).unwrap());
        let expected = scaled_attention(q, ctx.matmul(p.k).unwrap(), ctx.matmul(p.v).unwrap())
            .unwrap()
            .output;
        assert!(out.value().max_abs_diff(&expected.value()).unwrap() < 1e-12);
    }

    #[test]
    fn out_of_grid_region_is_rejected() {
        let g = Graph::new();
        let x = seq(&g, 2, 2, 2, 7);
        let region = RegionSpec::new(Region::Jaw, vec![7], 16).unwrap();
        let p = QkvParams::identity(2).map(&mut |t| g.leaf(t.clone()));
        assert!(region_cross_attention(x, &region, 1, &p).is_err());
        assert!(RegionSpec::new(Region::Jaw, vec![], 4).is_err());
        assert!(RegionSpec::new(Region::Jaw, vec![4], 4).is_err());
    }

    #[test]
    fn single_scale_aggregate_is_mean_pool() {
        let g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r));
        let f = aggregate_scales(&[a], g.leaf(Tensor::from_rows(&[vec![2.3]]).unwrap())).unwrap();
        assert!(f.value().max_abs_diff(&a.mean_pool(0).unwrap().value()).unwrap() < 1e-15);
    }

    #[test]
    fn identical_scales_are_weight_independent() {
        let g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r));
        let logits = g.leaf(Tensor::from_rows(&[vec![-1.0, 4.0]]).unwrap());
        let f = aggregate_scales(&[a, a], logits).unwrap();
        assert!(f.value().max_abs_diff(&a.mean_pool(0).unwrap().value()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_logits_average_three_scales() {
        let g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let parts: Vec<Tensor> = [2, 5, 1]
            .iter()
            .map(|&n| Tensor::randn(&[n, 3], 1.0, &mut r))
            .collect();
        let vars: Vec<Var> = parts.iter().map(|t| g.leaf(t.clone())).collect();
        let f = aggregate_scales(&vars, g.leaf(Tensor::zeros(&[1, 3]))).unwrap();
        for c in 0..3 {
            let expected: f64 = parts
                .iter()
                .map(|t| (0..t.rows()).map(|i| t.at(i, c)).sum::<f64>() / t.rows() as f64)
                .sum::<f64>()
                / 3.0;
            assert!((f.value().at(0, c) - expected).abs() < 1e-12);
        }
        assert!(aggregate_scales(&[], g.leaf(Tensor::zeros(&[1, 1]))).is_err());
    }

    #[test]
    fn scale_weights_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let w = scale_weights(&Tensor::randn(&[4, 3], 5.0, &mut r));
        for k in 0..4 {
            assert!((w.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn desk_regions(n: usize) -> [RegionSpec; 4] {
        let side = (n as f64).sqrt() as usize;
        let masks = crate::config::default_region_masks(side, side);
        [
            masks.eyes.resolve(Region::Eyes, side, side).unwrap(),
            masks.nose.resolve(Region::Nose, side, side).unwrap(),
            masks.mouth.resolve(Region::Mouth, side, side).unwrap(),
            masks.jaw.resolve(Region::Jaw, side, side).unwrap(),
        ]
    }

    #[test]
    fn forward_width_and_evaluation_count() {
        let g = Graph::with_trace();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let x = seq(&g, 14, 14, 6, 13);
        let params = HcaParams::init(6, 3, 0.2, &mut r);
        let f = hca_forward(x, &desk_regions(196), &[1, 2, 4], &bind(&g, &params)).unwrap();
        assert_eq!(f.shape(), vec![1, 24]);
        let evaluations = g
            .attention_trace()
            .iter()
            .filter(|(s, _)| matches!(s, AttnSite::Hca { .. }))
            .count();
        assert_eq!(evaluations, 12);
    }

    #[test]
    fn scale_order_does_not_matter() {
        let g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let x = seq(&g, 4, 4, 4, 15);
        let mut params = HcaParams::init(4, 2, 0.5, &mut r);
        params.scale_logits = Tensor::randn(&[4, 2], 1.0, &mut r);
        let a = hca_forward(x, &desk_regions(16), &[1, 2], &bind(&g, &params)).unwrap();
        let mut swapped = params.clone();
        for per_scale in &mut swapped.proj {
            per_scale.swap(0, 1);
        }
        for k in 0..4 {
            let row = params.scale_logits.row(k).to_vec();
            swapped.scale_logits.data_mut()[k * 2] = row[1];
            swapped.scale_logits.data_mut()[k * 2 + 1] = row[0];
        }
        let b = hca_forward(x, &desk_regions(16), &[2, 1], &bind(&g, &swapped)).unwrap();
        assert!(a.value().max_abs_diff(&b.value()).unwrap() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let mut params = HcaParams::init(8, 2, 0.4, &mut r);
        params.scale_logits = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut inputs = vec![Tensor::randn(&[17, 8], 1.0, &mut r)];
        params.visit("hca", &mut |_, t| inputs.push(t.clone()));
        let regions = desk_regions(16);
        let report = check_gradients(&inputs, DEFAULT_EPS, |_, v| {
            let mut it = v[1..].iter().copied();
            let p = params.map(&mut |_| it.next().unwrap());
            let x = TokenSeq::new(v[0], Grid::new(4, 4), true)?;
            Ok(hca_forward(x, &regions, &[1, 2], &p)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
