//! Seeded synthetic scenes with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{LabelMap, Scene};

/// Per-band means of the three regions, on a unit dynamic range.
pub const REGION_MEANS: [[f32; 3]; 3] = [[0.2, 0.5, 0.8], [0.8, 0.2, 0.5], [0.5, 0.8, 0.2]];

/// A `size x size`, 3-band scene split into three axis-aligned regions: the
/// left half, the top right quarter and the bottom right quarter.
///
/// Every pixel gets its region's mean plus Gaussian noise of std `noise`.
/// Returns the raw (unnormalized) scene and the region labels.
pub fn three_regions(size: usize, noise: f32, seed: u64) -> Result<(Scene, LabelMap)> {
    if size < 2 {
        return Err(Error::Config(format!("synthetic scene needs size >= 2, got {size}")));
    }
    let dist = Normal::new(0.0f32, noise)
        .map_err(|e| Error::Config(format!("invalid noise std {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size / 2;
    let labels: Vec<u16> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            match (x < half, y < half) {
                (true, _) => 0,
                (false, true) => 1,
                (false, false) => 2,
            }
        })
        .collect();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, &region) in labels.iter().enumerate() {
        for band in 0..3 {
            data[band * plane + i] = REGION_MEANS[region as usize][band] + dist.sample(&mut rng);
        }
    }
    let scene = Scene::from_raw(3, size, size, data)?;
    let truth = LabelMap {
        height: size,
        width: size,
        labels,
    };
    Ok((scene, truth))
}
