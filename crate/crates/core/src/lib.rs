//! Active appearance model fitting with compositional gradient descent.

pub mod appearance;
pub mod bundle_io;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fitting;
pub mod jacobians;
pub mod linalg;
pub mod model;
pub mod raster;
pub mod shape;
pub mod synthesis;
pub mod training;
pub mod warp;

pub use error::{AamError, ErrorKind, Result};
