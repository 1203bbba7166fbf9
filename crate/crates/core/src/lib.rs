//! Feature-based registration of retinal fundus image pairs.
//!
//! The pipeline enhances vessels with a bank of oriented matched filters,
//! segments them with a co-occurrence entropy threshold, thins the vessel
//! mask, validates vessel bifurcations (y-features) by a ring-profile test,
//! matches bifurcations between images either by mutual information of
//! their neighbourhoods or by a four-component geometric invariant, keeps
//! the RANSAC homography consensus, and finally fits an affine or quadratic
//! transform used to resample the sensed image onto the reference frame.
//!
//! All raster indexing is 0-based and row-major. Angles are degrees,
//! counter-clockwise from the +column axis with the row axis flipped so
//! that "up" on screen is +90°.

pub mod descriptors;
pub mod enhancement;
pub mod error;
pub mod features;
pub mod io;
pub mod matching;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod segmentation;
pub mod transform;

pub use error::{Error, Result};
pub use raster::{BinaryMask, Dims, GrayImage, Pixel, RgbImage};
