//! Meta-trained task-embedding dynamics models, online adaptation, and
//! sampling-based planners that transfer a reference behavior to new tasks.

pub mod adapt;
pub mod enn;
pub mod envworld;
pub mod error;
pub mod harness;
pub mod metatrain;
pub mod ndmath;
pub mod planner;

pub use error::{Error, Result};
