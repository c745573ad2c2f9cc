pub mod ctf;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod geometry;
pub mod imaging;
pub mod importance;
pub mod io;
pub mod likelihood;
pub mod math;
pub mod priors;
pub mod quadrature;
pub mod reconstruct;
pub mod sagd;
pub mod simulator;
pub mod volume;

pub use error::{Error, Result};
