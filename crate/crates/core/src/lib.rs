pub mod density;
pub mod error;
pub mod exec;
pub mod functional;
pub mod kernel;
pub mod malliavin;
pub mod paths;
pub mod quad;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Exec;
