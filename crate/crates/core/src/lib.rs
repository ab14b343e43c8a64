//! Integer-only BERT encoder inference with a cycle-level accelerator model.
//!
//! The crate is split along the hardware boundary:
//!
//! * [`qnum`] — symmetric linear quantization numerics: clip/scale/round,
//!   EMA calibration, 8-bit scale factors, bias quantization and the
//!   integer requantization multiplier.
//! * [`bim`] — the bit-split inner-product module: sign-configurable
//!   8x4 multipliers fused pairwise for 8x8 products, adder trees with
//!   shift placement variants, and the tiled matrix-vector kernel.
//! * [`specfn`] — special-function cores: LUT softmax with max
//!   subtraction, fixed-point layer normalization, LUT GELU.
//! * [`model`] — the encoder graph: integer datapath, fake-quant
//!   reference, float oracle, ablation and bitwidth sweeps.
//! * [`sched`] — dataflow planning and the cycle-level latency model.
//! * [`store`] — the FQBT container format, float checkpoint import,
//!   calibration and model quantization.
//!
//! Real-valued arithmetic (calibration, oracle paths, fake quantization)
//! is generic over the scalar type via [`real::Real`]; the integer and
//! fixed-point kernels are width-pinned on purpose. `f64` is the default
//! scalar and the one under which the integer path and the fake-quant
//! path agree bit-exactly.

pub mod bim;
pub mod error;
pub mod model;
pub mod qnum;
pub mod real;
pub mod sched;
pub mod specfn;
pub mod store;

pub use error::{Error, Result};
pub use real::Real;

/// Default real scalar used by the CLI and the acceptance suite.
pub type DefaultReal = f64;

/// Float weight set at the default scalar.
pub type FloatWeights64 = model::FloatWeights<f64>;

/// Logit vector at the default scalar.
pub type Logits64 = Vec<f64>;
