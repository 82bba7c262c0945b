//! Depth prediction from RGB plus a single-line 2D LiDAR.
//!
//! The crate covers the whole pipeline: scan-to-image projection
//! ([`geometry`]), the proj-d / ref-d input encodings ([`encoding`]), a
//! reverse-mode autodiff tensor core ([`autodiff`]), the multi-stage
//! encoder-decoder network ([`nn`]), masked-L1 training ([`train`]),
//! evaluation metrics ([`metrics`]), and a synthetic scene generator with
//! ray-cast ground truth ([`datagen`]).
//!
//! Numeric code is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the concrete precisions used by the shipped tools:
//! f32 tensors (matching the on-disk formats) and f64 rig geometry.

pub mod autodiff;
pub mod encoding;
pub mod geometry;
pub mod la;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

/// Network/storage scalar.
pub type Real = f32;
/// Geometry scalar.
pub type GeomReal = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Graph = autodiff::Graph<Real>;
pub type Model = nn::Model<Real>;
pub type DepthImage = encoding::DepthImage<Real>;
pub type InputTensor = encoding::InputTensor<Real>;
pub type RigidTransform = geometry::RigidTransform<GeomReal>;
pub type Intrinsics = geometry::Intrinsics<GeomReal>;
pub type CameraRig = geometry::CameraRig<GeomReal>;
pub type LaserScan = geometry::LaserScan<GeomReal>;
pub type PixelHit = geometry::PixelHit<GeomReal>;
