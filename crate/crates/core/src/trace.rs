//! Labels for attention matrices captured during a traced forward pass.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Where an attention matrix was produced. Layers are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnSite {
    /// Plain self-attention of a backbone block.
    Backbone { layer: usize, head: usize },
    /// Anchor queries over concatenated anchor+twin keys.
    TwinDistraction { layer: usize, head: usize },
    /// Region-query cross-attention at one downsampling scale.
    Hca { region: usize, scale: usize },
    /// Left/right asymmetry cross-attention.
    Faam { direction: FaamDirection },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaamDirection {
    LeftToRight,
    RightToLeft,
}

impl fmt::Display for AttnSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnSite::Backbone { layer, head } => write!(f, "backbone/layer{layer}/head{head}"),
            AttnSite::TwinDistraction { layer, head } => {
                write!(f, "ta-pwca/layer{layer}/head{head}")
            }
            AttnSite::Hca { region, scale } => write!(f, "hca/region{region}/scale{scale}"),
            AttnSite::Faam { direction } => write!(f, "faam/{direction:?}"),
        }
    }
}
