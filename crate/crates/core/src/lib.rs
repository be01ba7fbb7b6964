//! Radiance-field scene editing restricted to a 3D region of interest.
//!
//! A generator field is optimized inside an axis-aligned box against an
//! image-text scorer, then blended with the original field at render time.

pub mod fields;
pub mod geometry;
pub mod math;
pub mod raster;
pub mod renderer;
pub mod blending;
pub mod guidance;
pub mod trainer;
pub mod metrics;
