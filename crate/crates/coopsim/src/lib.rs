//! Desk-scale cooperative perception simulator over impaired V2V links.
//!
//! Connected vehicles share LiDAR-derived data with an ego vehicle across a
//! SISO link with path loss, Rician fading, AWGN and zero-forcing recovery.
//! Four fusion schemes (early / intermediate / late / convolution-feature
//! late fusion, with an optional autoencoder codec) are scored by average
//! precision under SNR and path-loss sweeps.
//!
//! Module map:
//! - [`channel`]: complex-baseband link model and payload normalization
//! - [`scene`]: synthetic multi-vehicle scenarios and ray-cast LiDAR
//! - [`perception`]: voxel features, BEV maps, detection head, IoU, NMS
//! - [`fusion`]: the fusion schemes and the end-to-end frame pipeline
//! - [`codec`]: convolutional autoencoder (64x compression) with training
//! - [`eval`]: detection matching, average precision, experiment sweeps
//!
//! All randomness flows from explicit seeds through [`rng::derive_rng`];
//! identical seeds reproduce results bit for bit.

pub mod channel;
pub mod codec;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod perception;
pub mod presets;
pub mod rng;
pub mod scene;
