//! Differentiable multi-spectral Gaussian splatting.
//!
//! The crate renders scenes of anisotropic 3D Gaussians whose colors are
//! spherical-harmonic expansions over one or more spectral bands, computes
//! exact gradients of an image loss with respect to every scene parameter,
//! and trains scenes with three strategies: one model per band, an RGB model
//! whose geometry is copied into per-band models, or one shared model.

pub mod band;
pub mod camera;
pub mod checkpoint;
pub mod cloud;
pub mod densify;
pub mod error;
pub mod events;
pub mod grad;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod plan;
pub mod raster;
pub mod scenegen;
pub mod sh;
pub mod train;

pub use band::{canonicalize_bands, Band, BandSet};
pub use camera::Camera;
pub use cloud::{GaussianCloud, Primitive};
pub use densify::{DensifyConfig, DensifyMode, DensifyReport, DensifyState};
pub use error::{Error, Result};
pub use grad::{backward, ParamGrads};
pub use image::SpectralImage;
pub use metrics::{loss, psnr, ssim, LossConfig};
pub use optim::{AdamConfig, AdamState, FreezeMask, Group};
pub use plan::{adc_window, freeze_mask, sample_step, AdcVariant, Flags, Strategy, TrainPlan};
pub use raster::{render, ProjectedGaussian};
pub use events::Event;
pub use manifest::{load_manifest, SceneManifest, Split, View};
pub use scenegen::{generate, ColorMode, Scene, SceneSpec};
pub use train::{run, run_band_subset_study, run_joint, run_separate, run_split, Metrics, RunOutcome, TrainConfig};
