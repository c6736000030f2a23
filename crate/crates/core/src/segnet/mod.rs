//! The segmentation network: five size-preserving 3x3 conv blocks, channel
//! attention and a 1x1 projection to K per-pixel features.

mod attention;
mod inference;
mod network;
mod params;

pub use attention::{channel_attention, AttentionBackward, AttentionGrads};
pub use inference::{segment_scene, segment_scene_tiled, tile_offsets};
pub use network::{apply_running_stats, forward, FeatureBatch, ForwardPass, ForwardTrace};
pub use params::{
    trainable_names, AttentionParams, ConvBlockParams, DenseParams, ModelGrads, ModelMeta, ModelParams,
    ALLOWED_RATIOS, FEATURE_CHANNELS, NUM_BLOCKS,
};
