//! Differentiable primitives with reverse-mode gradients.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use graph::{ConvGeom, Grads, Graph, Var};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};

use crate::error::Result;

/// Multi-head scaled dot-product attention on plain tensors.
///
/// `q: [B, Nq, D]`, `k, v: [B, Nk, D]`; `mask: [Nq, Nk]` holds `0` for kept
/// and `-inf` for dropped keys.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (q, k, v) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let out = g.attention(q, k, v, heads, mask)?;
    Ok(g.value(out).clone())
}
