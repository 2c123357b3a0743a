//! Attention heatmaps on the patch grid.
//!
//! A map is the selected attention averaged over heads and query rows,
//! placed on the key positions of the patch grid, min-max normalized (a
//! constant map becomes 0.5) and upsampled to image size by nearest
//! neighbour.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::Graph;
use crate::config::AhanConfig;
use crate::error::{AhanError, Result};
use crate::hca::Region;
use crate::image_io::write_image;
use crate::model::{ahan_forward, AhanWeights};
use crate::tapwca::Mode;
use crate::tensor::Tensor;
use crate::trace::{AttnSite, FaamDirection};

/// Which attention to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSelector {
    /// Class-token query row of a backbone layer (1-based).
    Backbone { layer: usize },
    /// Region queries over the pooled grid at one scale.
    Hca { region: Region, scale: usize },
    /// One half's queries over the other half's keys.
    Faam { direction: FaamDirection },
}

impl fmt::Display for MapSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSelector::Backbone { layer } => write!(f, "backbone:{layer}"),
            MapSelector::Hca { region, scale } => write!(f, "hca:{}:{scale}", region.name()),
            MapSelector::Faam {
                direction: FaamDirection::LeftToRight,
            } => f.write_str("faam:lr"),
            MapSelector::Faam {
                direction: FaamDirection::RightToLeft,
            } => f.write_str("faam:rl"),
        }
    }
}

impl MapSelector {
    /// Every selector valid for `cfg`, in display form.
    pub fn options(cfg: &AhanConfig) -> Vec<MapSelector> {
        let mut out: Vec<MapSelector> = (1..=cfg.depth).map(|layer| MapSelector::Backbone { layer }).collect();
        for region in Region::ALL {
            for &scale in &cfg.scales {
                out.push(MapSelector::Hca { region, scale });
            }
        }
        for direction in [FaamDirection::LeftToRight, FaamDirection::RightToLeft] {
            out.push(MapSelector::Faam { direction });
        }
        out
    }

    /// Parses `backbone:<layer>`, `hca:<region>:<scale>` or `faam:{lr,rl}`.
    pub fn parse(s: &str, cfg: &AhanConfig) -> Result<Self> {
        let options = Self::options(cfg);
        let parsed = Self::from_str(s).ok().filter(|sel| options.contains(sel));
        parsed.ok_or_else(|| {
            let list: Vec<String> = options.iter().map(ToString::to_string).collect();
            AhanError::invalid(
                "attention selector",
                format!("`{s}` is not valid; options: {}", list.join(", ")),
            )
        })
    }

    fn matches(&self, site: &AttnSite) -> bool {
        match (self, site) {
            (MapSelector::Backbone { layer }, AttnSite::Backbone { layer: l, .. }) => layer == l,
            (MapSelector::Hca { region, scale }, AttnSite::Hca { region: r, scale: s }) => {
                region.index() == *r && scale == s
            }
            (MapSelector::Faam { direction }, AttnSite::Faam { direction: d }) => direction == d,
            _ => false,
        }
    }
}

impl FromStr for MapSelector {
    type Err = AhanError;

    /// Syntax only; [`MapSelector::parse`] also checks against a config.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || AhanError::invalid("attention selector", format!("cannot parse `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["backbone", l] => Ok(MapSelector::Backbone {
                layer: l.parse().map_err(|_| bad())?,
            }),
            ["hca", r, sc] => Ok(MapSelector::Hca {
                region: Region::ALL.into_iter().find(|x| x.name() == *r).ok_or_else(bad)?,
                scale: sc.parse().map_err(|_| bad())?,
            }),
            ["faam", "lr"] => Ok(MapSelector::Faam {
                direction: FaamDirection::LeftToRight,
            }),
            ["faam", "rl"] => Ok(MapSelector::Faam {
                direction: FaamDirection::RightToLeft,
            }),
            _ => Err(bad()),
        }
    }
}

/// Mean of the rows of each matrix, then the mean over matrices.
fn mean_row(mats: &[&Tensor]) -> Vec<f64> {
    let cols = mats[0].cols();
    let mut acc = vec![0.0; cols];
    let mut n = 0.0;
    for m in mats {
        for r in 0..m.rows() {
            for (a, v) in acc.iter_mut().zip(m.row(r)) {
                *a += v;
            }
            n += 1.0;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

/// Attention mass on each patch-grid cell (`rows × cols`) for one image.
/// Cells the selected attention cannot reach hold zero.
pub fn attention_grid(
    weights: &AhanWeights<Tensor>,
    cfg: &AhanConfig,
    image: &Tensor,
    selector: MapSelector,
) -> Result<Tensor> {
    let selector = MapSelector::parse(&selector.to_string(), cfg)?;
    let g = Graph::with_trace();
    let w = weights.bind(&g);
    ahan_forward(&g, image, &w, cfg, Mode::Infer, None, false)?;
    let trace = g.attention_trace();
    let mats: Vec<&Tensor> = trace
        .iter()
        .filter(|(site, _)| selector.matches(site))
        .map(|(_, t)| t)
        .collect();
    if mats.is_empty() {
        return Err(AhanError::invalid(
            "attention_grid",
            format!("forward pass recorded no `{selector}` attention"),
        ));
    }
    let n = cfg.grid();
    let mut grid = Tensor::zeros(&[n, n]);
    let cells = grid.data_mut();
    match selector {
        MapSelector::Backbone { .. } => {
            // class-token query row, patch keys only
            let cls_rows: Vec<Tensor> = mats
                .iter()
                .map(|m| Tensor::row_vector(&m.row(0)[1..]))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = cls_rows.iter().collect();
            cells.copy_from_slice(&mean_row(&refs));
        }
        MapSelector::Hca { scale, .. } => {
            let pooled = n.div_ceil(scale);
            let mass = mean_row(&mats);
            for (r, row) in cells.chunks_mut(n).enumerate() {
                for (c, cell) in row.iter_mut().enumerate() {
                    *cell = mass[(r / scale) * pooled + c / scale];
                }
            }
        }
        MapSelector::Faam { direction } => {
            let half = n / 2;
            let mass = mean_row(&mats);
            for r in 0..n {
                for k in 0..half {
                    let col = match direction {
                        // keys are the mirrored right half
                        FaamDirection::LeftToRight => n - 1 - k,
                        FaamDirection::RightToLeft => k,
                    };
                    cells[r * n + col] = mass[r * half + k];
                }
            }
        }
    }
    Ok(grid)
}

/// Min-max normalized, nearest-neighbour upsampled `H×W×1` image of a
/// `rows × cols` grid; `H` and `W` must be multiples of the grid sides.
pub fn render_heatmap(grid: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (rows, cols) = (grid.rows(), grid.cols());
    if rows == 0 || cols == 0 || height % rows != 0 || width % cols != 0 {
        return Err(AhanError::shape(
            "render_heatmap",
            format!("{rows}x{cols} grid does not tile a {height}x{width} image"),
        ));
    }
    let lo = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let (ph, pw) = (height / rows, width / cols);
    let data = (0..height * width)
        .map(|i| norm(grid.at(i / width / ph, (i % width) / pw)))
        .collect();
    Tensor::new(vec![height, width, 1], data)
}

/// Renders the selected attention for `image` and writes it as a PGM.
/// Returns the rendered image.
pub fn export_attention_map(
    weights: &AhanWeights<Tensor>,
    cfg: &AhanConfig,
    image: &Tensor,
    selector: MapSelector,
    out: impl AsRef<Path>,
) -> Result<Tensor> {
    let grid = attention_grid(weights, cfg, image, selector)?;
    let map = render_heatmap(&grid, cfg.image_size, cfg.image_size)?;
    write_image(out, &map)?;
    Ok(map)
}
