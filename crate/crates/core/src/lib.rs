//! Complex-valued transformer with weights quantized onto the fourth roots
//! of unity `{+1, +i, -1, -i}` (2 bits per weight), per-token INT8
//! activations, quantization-aware training and integer inference kernels.
//!
//! Module map:
//!
//! * [`tensor`]: split-plane complex tensors and primitive complex ops.
//! * [`quantize`]: phase projection, component scales, 2-bit packing, INT8 activations.
//! * [`model`]: the decoder (embedding, RoPE, attention, gated FFN, LM head).
//! * [`autograd`]: the reverse-mode tape used by training.
//! * [`training`]: loss, AdamW, the two-stage schedule and the training loop.
//! * [`kernel`]: multiplication-free and LUT GEMM plus the benchmark harness.
//! * [`checkpoint`]: the single-file checkpoint container.
//! * [`corpus`] and [`analysis`]: tokenization, batching and weight statistics.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod kernel;
pub mod model;
pub mod quantize;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use quantize::{Codeword, PackedQuantTensor, QuantActivation};
pub use tensor::{ComplexTensor, Tensor};
