//! Minimal deterministic differentiable-computation substrate.
//!
//! Dense `f64` matrices, masked attention, softmax / log-softmax, embedding
//! lookup and summation, with reverse-mode gradients recorded on a
//! [`Tape`]. Rich enough to express the toy denoiser and per-sample policy
//! gradients; nothing more. No broadcasting beyond matrix shapes, no GPU, no
//! fusion.

mod mask;
mod tape;
mod tensor;

pub use mask::AttentionMask;
pub use tape::{Tape, VarId};
pub use tensor::Tensor;

use crate::error::Result;

/// One-shot masked attention on plain tensors (no gradient tracking).
///
/// Positions whose mask row is all-zero receive an all-zero output row;
/// masked-out logits contribute exactly zero attention weight.
pub fn forward_masked_attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let v = tape.constant(value.clone());
    let out = tape.masked_attention(q, k, v, mask)?;
    Ok(tape.value(out).clone())
}
