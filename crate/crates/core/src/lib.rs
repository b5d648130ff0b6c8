pub mod diffsim;
pub mod error;
pub mod evalbench;
pub mod exec;
pub mod gmp;
pub mod mppi;
pub mod nnet;
pub mod optim;
pub mod policy;
pub mod provenance;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
