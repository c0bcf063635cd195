//! Dense linear algebra and random streams.

pub mod decomp;
pub mod matrix;
pub mod rng;

pub use decomp::{
    haar_orthogonal, householder_qr, polar_factor, polar_fixed_schedule, spectral_norm, suo_sample, svd_jacobi, SvdResult,
    POLAR_MAX_ITER, POLAR_TOL,
};
pub use matrix::{gemm, gemm_block, Block, gram_rows, matmul, matmul_nt, matmul_tn, product, Matrix, Op};
pub use rng::RngStream;
