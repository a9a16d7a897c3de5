//! Derivatives of fixed points of nonsmooth and stochastic maps.

pub mod bilevel;
pub mod deriv_det;
pub mod deriv_stoch;
pub mod error;
pub mod linalg;
pub mod maps;
pub mod problems;
pub mod reference;
pub mod rng;
pub mod setvalued;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use rng::Rng;
