//! Reconstruction of 3D brain volumes from serial dissection photographs and
//! Bayesian segmentation of the result.
//!
//! Rasters are generic over their storage scalar ([`Real`]); the aliases
//! below fix `f64`, which is what the optimisers work with.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod error;
pub mod eval;
pub mod gauss;
pub mod image;
pub mod interp;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod preprocess;
pub mod reconstruct;
pub mod reduce;
pub mod resample;
pub mod scalar;
pub mod segment;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use image::{Grid2, Image, Mask};
pub use scalar::Real;
pub use transform::{Affine2D, Rigid3DScale};
pub use volume::{Grid3, Volume};

pub type Image2D = Image<f64>;
pub type Mask2D = Mask<f64>;
pub type Volume3D = Volume<f64>;
pub type Image2DF32 = Image<f32>;
pub type Mask2DF32 = Mask<f32>;
pub type Volume3DF32 = Volume<f32>;
