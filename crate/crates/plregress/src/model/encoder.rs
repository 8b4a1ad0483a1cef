//! Line transformer encoder: collapses the C point descriptors sampled along
//! a 2D segment into a single line descriptor.
//!
//! One simplified transformer-encoder block without positional encoding
//! (pre-residual layer norm, attention message, then a feed-forward with
//! expansion factor 2), mean-pooled over the tokens. Dropping position
//! information plus mean pooling makes the output invariant to token order.

use rand::Rng;

use super::attention::SelfAttentionLayer;
use super::params::{Graph, LayerNorm, Mlp, ParamStore};
use crate::tensor::Tensor;

pub struct LineTokenEncoder {
    ln1: LayerNorm,
    attn: SelfAttentionLayer,
    ln2: LayerNorm,
    ff: Mlp,
}

impl LineTokenEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        ln_eps: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width, ln_eps),
            attn: SelfAttentionLayer::new(ps, rng, &format!("{name}.attn"), width, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width, ln_eps),
            ff: Mlp::new(ps, rng, &format!("{name}.ff"), &[width, 2 * width, width]),
        }
    }

    /// Encodes a C×width token matrix into a 1×width line descriptor.
    pub fn forward(&self, g: &Graph, tokens: &Tensor) -> Tensor {
        // Canonical token order keeps the mean pool's summation order fixed,
        // so the pooled descriptor is bit-invariant to token permutations.
        let order = tokens.with_value(super::canonical_row_order);
        let tokens = tokens.gather_rows(&order);
        let h = tokens.add(&self.attn.message(g, &self.ln1.forward(g, &tokens)));
        let z = h.add(&self.ff.forward(g, &self.ln2.forward(g, &h)));
        z.mean_rows()
    }
}
