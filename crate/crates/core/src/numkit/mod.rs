//! Deterministic numerical substrate.

pub mod dual;
pub mod linalg;
pub mod mlp;
pub mod rng;

pub use linalg::{axpy, dot, gaussian_matrix, norm, norm_sq, Mat64};
pub use mlp::{mlp_backward, mlp_forward, Activation, GradTape, Network};
pub use rng::Rng;
