//! Synthetic polyp generation on clean colon images.
//!
//! The pipeline trains a progressive-growing GAN on polyp masks, pretrains a
//! two-stage edge-conditioned inpainting model on unlabeled GI images with
//! those masks, fine-tunes it on annotated polyps, splices polyp edges into
//! clean-colon edge maps and inpaints polyps there. The synthetic images are
//! then mixed into U-Net segmentation training.

pub mod checkpoint;
pub mod dataset;
pub mod edges;
pub mod error;
pub mod inpaint;
pub mod mask_gan;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod seeding;
pub mod seg;

pub use dataset::{load_dataset, pair_random_mask, split_dataset, DatasetManifest, Layout, Origin, Record, Split};
pub use edges::{extract_edges, extract_polyp_edges, merge_edges, CannyParams};
pub use error::{Error, Result};
pub use raster::{BinaryMask, EdgeMap, MaskedSample, RasterImage};
