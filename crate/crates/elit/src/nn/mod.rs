//! Minimal neural-network toolkit: parameters, counted matmuls, and
//! hand-written forward/backward passes for the layers the backbone needs.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in f32
//! (training) and f64 (gradient checking, high-precision equivalence tests).

pub mod activation;
pub mod attention;
pub mod count;
pub mod linear;
pub mod norm;
pub mod param;

pub use activation::{gelu, gelu_backward, silu, silu_backward};
pub use attention::{AttnCore, AttnCache, Rope};
pub use count::{Bucket, Ctx, MacCounter, MatKind};
pub use linear::{Init, Linear};
pub use norm::{LayerNorm, LnCache, RmsNorm};
pub use param::{Param, ParamVisitor, Scalar};
