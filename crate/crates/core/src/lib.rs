pub mod autodiff;
pub mod continual;
pub mod controller;
pub mod depth_net;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod keyframe;
pub mod losses;
pub mod map_refinement;
pub mod pipeline;
pub mod synthetic;
pub mod tum;

pub use error::{Error, Result};
