//! Dense linear algebra, random streams, quadrature and special functions.

pub mod linalg;
pub mod matrix;
pub mod quad;
pub mod rng;
pub mod special;

pub use linalg::{
    gram_spectral_norm, min_eig_hermitian, solve_general, solve_spd, spectral_norm, spectral_norm_sym,
    Cholesky, ComplexMatrix,
};
pub use matrix::{dot, norm2, norm_inf, Matrix};
pub use quad::adaptive_simpson;
pub use rng::{sample, Distribution, RngStream};
pub use special::{gaussian_cdf, gaussian_pdf, logistic, polylog, softplus};
