//! Dense matrices, seeded random streams and the SVD routine the rest of the
//! crate is built on.

mod matrix;
mod rng;
mod svd;

pub use matrix::Matrix;
pub(crate) use matrix::{gemm_nn, gemm_nt, gemm_tn};
pub use rng::{SeededRng, StreamId};
pub(crate) use svd::scaled_product;
pub use svd::{rank1_contraction, reconstruct, svd, SvdFactors};
