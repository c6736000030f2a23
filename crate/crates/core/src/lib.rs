//! Unsupervised semantic segmentation of a single remote-sensing scene.
//!
//! A small fully convolutional network with channel attention is trained on
//! patches of one unlabeled image. The training signal is the network's own
//! per-pixel argmax (a deep-clustering cross-entropy) plus a contrastive term
//! that pushes features of mismatched patches apart. The trained model
//! segments the scene, or any similar scene, into K clusters, which can then
//! be scored against a reference map.
//!
//! Everything numerical is implemented here by hand: the conv/batch-norm/
//! attention kernels with their backward passes, the losses and the SGD loop.

pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod ops;
pub mod segnet;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{average_runs, confusion, majority_map, metrics, pixel_accuracy, ConfusionMatrix, MetricsReport};
pub use io::{load_model, load_scene, save_model, LabelMap, Palette, Scene, SegmentationMap};
pub use losses::LossReport;
pub use segnet::{segment_scene, ModelParams};
pub use tensor::{Real, Tensor};
pub use trainer::{train, TrainConfig, TrainLog};
