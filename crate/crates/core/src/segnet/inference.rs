use super::network::forward;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::io::{Scene, SegmentationMap};
use crate::losses::assign_pseudo_labels;
use crate::ops::Mode;

/// Tiles evaluated per forward call.
const TILE_BATCH: usize = 4;

/// Non-overlapping tile starts along one axis; the last tile is shifted
/// inward so it ends exactly at `len`.
pub fn tile_offsets(len: usize, tile: usize) -> Vec<usize> {
    if tile == 0 || tile > len {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..len / tile).map(|i| i * tile).collect();
    if len % tile != 0 {
        out.push(len - tile);
    }
    out
}

/// Segments a whole scene with tiles of the size the model was trained on.
pub fn segment_scene(scene: &Scene, params: &ModelParams) -> Result<SegmentationMap> {
    let tile = params.meta.patch;
    if tile.0 == 0 || tile.1 == 0 {
        return Err(Error::State("model carries no training patch size".into()));
    }
    segment_scene_tiled(scene, params, tile)
}

/// Runs eval-mode inference on row-major tiles and stitches the per-pixel
/// argmax. Where edge-shifted tiles overlap, the later tile wins.
pub fn segment_scene_tiled(scene: &Scene, params: &ModelParams, tile: (usize, usize)) -> Result<SegmentationMap> {
    if scene.bands() != params.bands() {
        return Err(Error::shape("segment_scene", "scene bands", params.bands(), scene.bands()));
    }
    if !params.has_running_stats() {
        return Err(Error::State("segmenting needs a trained model (no running statistics)".into()));
    }
    let (th, tw) = tile;
    if scene.height() < th || scene.width() < tw {
        return Err(Error::Input(format!(
            "scene {}x{} is smaller than one {th}x{tw} tile",
            scene.height(),
            scene.width()
        )));
    }
    let rows = tile_offsets(scene.height(), th);
    let cols = tile_offsets(scene.width(), tw);
    let tiles: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();

    let width = scene.width();
    let mut labels = vec![0u16; scene.height() * width];
    for chunk in tiles.chunks(TILE_BATCH) {
        let batch = scene.gather(chunk, tile)?;
        let features = forward(params, &batch, Mode::Eval)?.features;
        let assigned = assign_pseudo_labels(&features);
        for (i, &(r, c)) in chunk.iter().enumerate() {
            let src = assigned.sample(i);
            for row in 0..th {
                let dst = (r + row) * width + c;
                labels[dst..dst + tw].copy_from_slice(&src[row * tw..(row + 1) * tw]);
            }
        }
    }
    SegmentationMap::new(scene.height(), width, params.k, labels)
}
