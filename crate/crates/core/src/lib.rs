pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod ema;
pub mod error;
pub mod float;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod plot;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
