pub mod autograd;
pub mod block;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sfeb;
pub mod shift;
pub mod suite;
pub mod tensor;
pub mod timing;
pub mod train;
pub mod wavelet;
pub mod wkv;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
