//! Joint hematoma segmentation and sign classification for head CT slices.
//!
//! The crate covers the whole path from raw Hounsfield-unit slices to
//! evaluation tables: windowing and cleanup ([`preprocess`]), a synthetic
//! phantom generator ([`phantom`]), the Haar transform ([`wavelet`]), a small
//! layer library with manual gradients ([`nn`]), the segmenter and wavelet
//! classifier ([`models`]), losses and metrics ([`metrics`]), training and
//! experiment orchestration ([`pipeline`]) and Grad-CAM ([`explain`]).

pub mod error;
pub mod explain;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod wavelet;

pub use error::{Error, Result};
pub use metrics::{EvalReport, LabelBatch, WeightVector};
pub use models::{Checkpoint, ClsModelConfig, PoolingMode, SegModelConfig, UNet, WaveletCnn};
pub use phantom::{Location, PhantomCase, PhantomSpec, SignLabels};
pub use pipeline::{Config, Dataset, RunRecord, Split, SplitSpec, TrainConfig};
pub use preprocess::{HuSlice, IntensityImage, PreprocessConfig, WindowParams};
pub use wavelet::{FeatureMap, Subbands};
