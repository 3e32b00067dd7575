//! Small differentiable numerics over a fixed graph: every layer exposes a
//! `forward` that returns a cache and a `backward` that consumes it.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::{attend, AttentionCache, AttentionConfig, MultiHeadAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use linear::Linear;
pub use loss::{cosine_backward, cosine_similarity, kl_divergence, softmax_cross_entropy, Cosine};
pub use norm::{relu, relu_backward, sigmoid, LayerNorm};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{dot, log_sum_exp, norm as l2_norm, softmax, Tensor2};
