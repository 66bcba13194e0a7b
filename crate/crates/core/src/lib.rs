pub mod error;
pub mod eval;
pub mod hsic;
pub mod model;
pub mod nn;
pub mod ode;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;
