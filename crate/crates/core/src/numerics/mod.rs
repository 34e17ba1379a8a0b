//! Dense tensors, reverse-mode differentiation, optimization and spectra.

mod attention;
pub mod dft;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod rng;
mod tensor;

pub use attention::{attention_probs, AttnSpec};
pub use dft::{dft_magnitude, Window};
pub use ops::MASK_SENTINEL;
pub use optim::{clip_global_norm, global_grad_norm, AdamWConfig, AdamWState, LinearTailDecay};
pub use rng::CounterRng;
pub use tensor::{no_grad, numel, Real, Result, Tensor, TensorError};
pub(crate) use tensor::invalid;

/// Attention-logit softcap threshold.
pub const ATTN_SOFTCAP: f64 = 70.0;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
