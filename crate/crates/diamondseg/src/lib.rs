//! Segmentation toolkit for in-situ monitoring of single-crystal diamond
//! growth reactors.
//!
//! The crate covers the full loop used to build a working segmentation model
//! for pocket-holder/diamond imagery without any external ML framework:
//!
//! - [`imaging`]: image/mask containers, indexed-PNG mask I/O, manifests
//! - [`synthgen`]: synthetic growth-run rendering and simulated annotators
//! - [`preprocess`]: resampling, sanity filtering, crop/resize/denoise/normalize, splits
//! - [`augment`]: affine + photometric augmentation and compression simulation
//! - [`nn`]: tensors, conv/batchnorm/upsample kernels, losses, Adam, gradient checks
//! - [`arch`]: three compact encoder-decoder segmentation families and training
//! - [`metrics`]: confusion-matrix accuracy and IoU reporting
//! - [`geometry`]: connected components, contours, shape and gap features
//! - [`pipeline`]: model-assisted labeling loop with effort accounting
//! - [`cli`]: command-line entry points over all of the above

pub mod arch;
pub mod augment;
pub mod cli;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod synthgen;
// Modules below are restored as they land:
