//! From raw photographs and operator annotations to a calibrated slice stack.

mod calibrate;
mod mask;
mod stack;

pub use calibrate::{calibrate_photo, CalibratedPhoto, LandmarkFit, LandmarkSet, RulerSpec};
pub use mask::{extract_mask, MaskConfig, SeedClick};
pub use stack::{build_stack, SliceStack, StackDirection};
