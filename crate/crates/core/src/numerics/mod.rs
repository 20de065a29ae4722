//! Dense f32 tensors with f64 accumulation, stable softmax, moment
//! statistics, PCA by power iteration, the fused online-softmax attention
//! kernel and the splitmix64 random stack.

mod online;
mod pca;
mod rng;
mod tensor;

pub use online::{materialized_mixed_attention, online_mixed_attention, AttentionBlock};
pub use pca::{pca_top3, pca_top3_with_basis, PcaBasis};
pub use rng::{gaussian, stream, Rng};
pub(crate) use tensor::exp_nonpositive;
pub use tensor::{matmul, matmul_transposed, moments, softmax_rows, Tensor, SIGMA_FLOOR};
