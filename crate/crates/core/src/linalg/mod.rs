//! Sparse Cholesky, its reverse-mode derivative, preconditioned CG and
//! block log-determinants.

pub mod backward;
pub mod cholesky;
pub mod logdet;
pub mod pcg;

pub use backward::{cholesky_backward, cholesky_backward_dense, ltu};
pub use cholesky::{sparse_cholesky, sparse_cholesky_permuted, CholeskyFactor};
pub use logdet::{log_det_block, log_det_full};
pub use pcg::{pcg_solve, BlockJacobi, IdentityPreconditioner, Jacobi, PcgOutcome, Preconditioner};
