//! Twin-aware distraction for training: inside a configured layer range, the
//! anchor's queries attend over its own keys/values concatenated with those
//! of its twin. Inference never takes this path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_input, block_forward, scaled_attention, Attended, BlockParams};
use crate::autograd::{concat, Var};
use crate::config::TapwcaConfig;
use crate::embed::TokenSeq;
use crate::error::{AhanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Row-wise `[K_a; K_t]`, `[V_a; V_t]`; absent twin tensors leave the anchor
/// tensors unchanged.
pub fn combine_kv<'g>(
    k_a: Var<'g>,
    k_t: Option<Var<'g>>,
    v_a: Var<'g>,
    v_t: Option<Var<'g>>,
) -> Result<(Var<'g>, Var<'g>)> {
    if k_a.rows() != v_a.rows() {
        return Err(AhanError::shape(
            "combine_kv",
            format!("anchor K has {} rows, V has {}", k_a.rows(), v_a.rows()),
        ));
    }
    match (k_t, v_t) {
        (None, None) => Ok((k_a, v_a)),
        (Some(k_t), Some(v_t)) => {
            if k_t.cols() != k_a.cols() || v_t.cols() != v_a.cols() {
                return Err(AhanError::shape(
                    "combine_kv",
                    format!(
                        "twin widths K {} / V {} vs anchor K {} / V {}",
                        k_t.cols(),
                        v_t.cols(),
                        k_a.cols(),
                        v_a.cols()
                    ),
                ));
            }
            if k_t.rows() != v_t.rows() {
                return Err(AhanError::shape(
                    "combine_kv",
                    format!("twin K has {} rows, V has {}", k_t.rows(), v_t.rows()),
                ));
            }
            Ok((concat(&[k_a, k_t], 0)?, concat(&[v_a, v_t], 0)?))
        }
        _ => Err(AhanError::invalid(
            "combine_kv",
            "twin keys and values must be given together",
        )),
    }
}

/// Anchor queries over the combined key set; output rows match the queries.
pub fn ta_attention<'g>(q_a: Var<'g>, k_c: Var<'g>, v_c: Var<'g>) -> Result<Attended<'g>> {
    scaled_attention(q_a, k_c, v_c)
}

/// Whether distraction applies to 1-based `layer` under `mode` and `gate`.
pub fn layer_is_gated(layer: usize, cfg: &TapwcaConfig, mode: Mode, gate: bool) -> bool {
    let [lo, hi] = cfg.layer_range;
    mode == Mode::Train && cfg.enabled && gate && (lo..=hi).contains(&layer)
}

/// One backbone block for the anchor sequence, with twin distraction when
/// [`layer_is_gated`] holds. The twin sequence is the twin's input to the
/// same block; its own forward is the caller's business.
#[allow(clippy::too_many_arguments)]
pub fn gated_layer_forward<'g>(
    layer: usize,
    anchor: TokenSeq<'g>,
    twin: Option<TokenSeq<'g>>,
    params: &BlockParams<Var<'g>>,
    eps: f64,
    cfg: &TapwcaConfig,
    mode: Mode,
    gate: bool,
) -> Result<TokenSeq<'g>> {
    if !layer_is_gated(layer, cfg, mode, gate) {
        return block_forward(anchor, params, eps, layer, None);
    }
    let twin = twin.ok_or_else(|| {
        AhanError::invalid(
            "gated_layer_forward",
            format!("layer {layer} is gated for twin distraction but no twin was supplied"),
        )
    })?;
    let distractor = attention_input(twin.tokens, params, eps)?;
    block_forward(anchor, params, eps, layer, Some(distractor))
}

/// Per-batch gate decisions from a dedicated seeded stream.
#[derive(Debug, Clone)]
pub struct GateSampler {
    rng: ChaCha8Rng,
}

impl GateSampler {
    pub fn new(seed: u64) -> Self {
        GateSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws the next decision. Inference and disabled configs never consume
    /// randomness.
    pub fn draw(&mut self, cfg: &TapwcaConfig, mode: Mode) -> bool {
        if mode == Mode::Infer || !cfg.enabled {
            return false;
        }
        self.rng.random::<f64>() < cfg.probability
    }
}
