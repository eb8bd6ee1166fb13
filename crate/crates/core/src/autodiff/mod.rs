//! Reverse-mode differentiation kernels: dense tensors, a recording tape,
//! linear algebra with hand-derived adjoints (smallest-singular-vector SVD,
//! packed 3×3 SVD, LU-backed linear solve) and finite-difference checking.

mod gradcheck;
mod lu;
mod svd;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_at, DEFAULT_STEP};
pub use lu::LuFactors;
pub use svd::SPECTRUM_TOL;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("degenerate singular spectrum: gap {gap:.3e} below tolerance {tol:.3e}")]
    DegenerateSpectrum { gap: f64, tol: f64 },
    #[error("singular system: pivot {pivot:.3e} at elimination index {index}")]
    SingularSystem { index: usize, pivot: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}
