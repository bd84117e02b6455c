//! Semi-pseudo-label dataset tooling for monocular 3D detection: virtual
//! camera zoom/shift augmentation, 2D/3D label fusion, a masked multitask
//! loss, BEV and heatmap evaluation, and a synthetic scene generator.

pub mod augment;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod pipeline;
pub mod spl;

pub use augment::{augment_frame, ZoomShiftParams};
pub use geometry::{CameraIntrinsics, Cuboid3D, Dimensions3, Pixel, Point3, Quaternion};
pub use spl::{Annotation, Box2D, CategoryId, Detection2D, Frame};
