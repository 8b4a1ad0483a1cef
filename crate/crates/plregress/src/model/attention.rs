//! Residual multi-head self-attention over an unordered descriptor set.
//!
//! Each descriptor is updated as `d_j + φ([d_j ‖ a(d_j, E)])` where `a` is
//! scaled dot-product attention over the full set `E` and `φ` is a small
//! message MLP. There is no positional information anywhere, so the layer is
//! equivariant under permutations of the set.

use rand::Rng;

use super::params::{Graph, Linear, Mlp, ParamStore};
use crate::tensor::{concat_cols, Tensor};

pub struct SelfAttentionLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    msg: Mlp,
    pub width: usize,
    pub heads: usize,
}

impl SelfAttentionLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && width % heads == 0,
            "attention width {width} not divisible by {heads} heads"
        );
        Self {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), width, width),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), width, width),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), width, width),
            msg: Mlp::new(
                ps,
                rng,
                &format!("{name}.msg"),
                &[2 * width, 2 * width, width],
            ),
            width,
            heads,
        }
    }

    /// Scaled dot-product attention of every element against the full set:
    /// `softmax(q_j k_iᵀ / sqrt(D)) v_i` per head, heads concatenated.
    ///
    /// The set is brought into canonical row order before the reductions and
    /// restored afterwards, making the result bit-exactly equivariant under
    /// input permutations. Panics on an empty set.
    pub fn attend(&self, g: &Graph, x: &Tensor) -> Tensor {
        assert!(x.shape().0 > 0, "attention over an empty descriptor set");
        let order = x.with_value(super::canonical_row_order);
        let xs = x.gather_rows(&order);
        let q = self.wq.forward(g, &xs);
        let k = self.wk.forward(g, &xs);
        let v = self.wv.forward(g, &xs);
        let d = self.width / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d, (h + 1) * d);
            // scaling q (n×D) instead of the score matrix (n×n) saves a full
            // pass over the biggest tensor in the layer
            let qh = q.slice_cols(lo, hi).scale(scale);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let weights = qh.matmul_nt(&kh).softmax_rows();
            heads.push(weights.matmul(&vh));
        }
        let attended = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            concat_cols(&heads)
        };
        attended.gather_rows(&super::inverse_permutation(&order))
    }

    /// The residual message `φ([x ‖ attend(x)])`.
    pub fn message(&self, g: &Graph, x: &Tensor) -> Tensor {
        let attended = self.attend(g, x);
        self.msg.forward(g, &concat_cols(&[x.clone(), attended]))
    }

    /// Full layer update `x + message(x)`.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        x.add(&self.message(g, x))
    }
}
