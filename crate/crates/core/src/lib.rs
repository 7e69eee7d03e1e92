//! Approximate rank-k SVD of sparse tall-and-fat matrices.
//!
//! A sparse `A` is projected onto `k` Gaussian directions, the projection is
//! orthonormalized by Cholesky QR, and `Bᵀ = AᵀQ` is factored the same way,
//! so the only dense factorizations ever run on k×k matrices. Every pass
//! over the data is a job on the in-process map/reduce [`engine`].

pub mod dense;
pub mod engine;
pub mod io;
pub mod jobs;
pub mod oracle;
pub mod rng;
