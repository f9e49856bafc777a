//! Compositional gradient-descent fitting.

mod complexity;
mod config;
mod driver;
mod sampling;
mod steps;

pub use complexity::{step_complexity, StepComplexity};
pub use config::{AltVariant, Algorithm, Composition, CostFunction, FitConfig, MapPrior, Method, Strategy};
pub use driver::{fit, update_warp, FitResult, Fitter};
pub use sampling::sampling_mask;
pub use steps::*;
