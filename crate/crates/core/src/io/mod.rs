//! Scene rasters, segmentation/reference PNGs, palettes and model files.

mod model_file;
mod scene;
mod segmap;

pub use model_file::{decode_model, encode_model, load_model, save_model, MAGIC, VERSION};
pub use scene::{load_scene, BandStats, Scene};
pub use segmap::{
    cluster_color, read_cluster_map, read_reference, write_segmentation, LabelMap, Palette, PaletteEntry,
    ReferenceRead, SegmentationMap,
};
