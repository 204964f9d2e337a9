pub mod affordance;
pub mod annotation;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod guidance;
pub mod harness;
pub mod io;
pub mod lbfgs;
pub mod metrics;
pub mod motion;
pub mod skeleton;
pub mod stage1;
pub mod stage2;
pub mod text;

pub use error::{CoreError, Result};
