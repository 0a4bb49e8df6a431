pub mod data;
pub mod error;
pub mod experiments;
pub mod family;
pub mod gaussian;
pub mod gp;
pub mod hierarchical;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod quadrature;
pub mod rng;
pub mod selection;
pub mod simulate;

pub use error::{PviError, Result};
