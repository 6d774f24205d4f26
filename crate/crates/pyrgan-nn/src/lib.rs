//! Minimal eager-tape reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! Everything is a rank-4 tensor `[batch, channels, height, width]`; scalars
//! live in `[1, 1, 1, 1]`. Ops evaluate eagerly when pushed onto a [`Graph`];
//! [`Graph::backward`] walks the tape in reverse. The op set is exactly what
//! an image-to-image GAN stack needs: strided conv / transposed conv,
//! instance norm, dropout, pooling, pointwise math and a few fused losses.
//!
//! Data-parallel inner loops (the batch dimension of the conv kernels) run on
//! rayon when the `parallel` feature is enabled (default) and fall back to
//! plain sequential loops when it is not. Reductions are always sequential so
//! results are bitwise identical across thread counts.

pub mod adam;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod parallel;

pub use adam::{adam_step, AdamConfig};
pub use graph::{Graph, NodeId};
pub use params::{ParamRef, ParamSet};

/// Tensor type shared by the whole engine: `[batch, channels, height, width]`.
pub type Arr4 = ndarray::Array4<f64>;

/// Wrap a scalar as a `[1,1,1,1]` tensor.
pub fn scalar(v: f64) -> Arr4 {
    Arr4::from_elem((1, 1, 1, 1), v)
}
