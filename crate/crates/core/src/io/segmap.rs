//! Label maps, palettes and their RGB PNG encoding.

use std::collections::HashMap;
use std::path::Path;

use image::{ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel cluster ids produced by the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub labels: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, k: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("segmentation map", "pixel count", height * width, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
        }
        Ok(Self {
            height,
            width,
            k,
            labels,
        })
    }
}

/// Reference class per pixel; [`LabelMap::IGNORE`] marks pixels excluded
/// from scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub const IGNORE: u16 = u16::MAX;

    pub fn ignored(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Self::IGNORE).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Ordered class names and their colors. Colors are unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("palette has no entries".into()));
        }
        for (i, a) in entries.iter().enumerate() {
            if let Some(b) = entries[..i].iter().find(|b| b.rgb == a.rgb) {
                return Err(Error::Input(format!(
                    "palette colors must be unique: {:?} used by {} and {}",
                    a.rgb, b.name, a.name
                )));
            }
        }
        Ok(Self { entries })
    }

    /// ISPRS 2D labeling colors.
    pub fn isprs() -> Self {
        let e = |name: &str, rgb| PaletteEntry {
            name: name.into(),
            rgb,
        };
        Self {
            entries: vec![
                e("impervious_surfaces", [255, 255, 255]),
                e("building", [0, 0, 255]),
                e("low_vegetation", [0, 255, 255]),
                e("tree", [0, 255, 0]),
                e("car", [255, 255, 0]),
                e("clutter", [255, 0, 0]),
            ],
        }
    }

    /// Black for class 0 ("other"), white for class 1 ("building").
    pub fn binary() -> Self {
        Self {
            entries: vec![
                PaletteEntry {
                    name: "other".into(),
                    rgb: [0, 0, 0],
                },
                PaletteEntry {
                    name: "building".into(),
                    rgb: [255, 255, 255],
                },
            ],
        }
    }

    /// Colors used for raw cluster ids when no class mapping is available.
    pub fn clusters(k: usize) -> Self {
        Self {
            entries: (0..k)
                .map(|i| PaletteEntry {
                    name: format!("cluster{i}"),
                    rgb: cluster_color(i),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    fn lookup(&self) -> HashMap<[u8; 3], u16> {
        self.entries.iter().enumerate().map(|(i, e)| (e.rgb, i as u16)).collect()
    }
}

const CLUSTER_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Fixed colors for the first eight clusters; higher ids are encoded in the
/// red/green channels with blue fixed at 1, which no fixed color uses.
pub fn cluster_color(id: usize) -> [u8; 3] {
    match CLUSTER_COLORS.get(id) {
        Some(&c) => c,
        None => [(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, 1],
    }
}

fn cluster_from_color(rgb: [u8; 3]) -> Option<u16> {
    if let Some(i) = CLUSTER_COLORS.iter().position(|&c| c == rgb) {
        return Some(i as u16);
    }
    let id = rgb[0] as usize | (rgb[1] as usize) << 8;
    (rgb[2] == 1 && id >= CLUSTER_COLORS.len()).then_some(id as u16)
}

/// Writes an 8-bit RGB PNG. With `mapping`, each cluster is drawn in its
/// class's palette color; without, in [`cluster_color`].
pub fn write_segmentation(
    map: &SegmentationMap,
    palette: &Palette,
    mapping: Option<&[Option<usize>]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let colors: Vec<[u8; 3]> = match mapping {
        None => (0..map.k).map(cluster_color).collect(),
        Some(m) => {
            let mut present = vec![false; map.k];
            for &l in &map.labels {
                present[l as usize] = true;
            }
            let mut colors = vec![[0, 0, 0]; map.k];
            for (cluster, used) in present.into_iter().enumerate() {
                if !used {
                    continue;
                }
                let class = m.get(cluster).copied().flatten().ok_or_else(|| {
                    Error::Contract(format!("cluster {cluster} has no class in the supplied mapping"))
                })?;
                let entry = palette.entries().get(class).ok_or_else(|| {
                    Error::Contract(format!("cluster {cluster} maps to class {class} outside the palette"))
                })?;
                colors[cluster] = entry.rgb;
            }
            colors
        }
    };
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for (px, &l) in img.pixels_mut().zip(&map.labels) {
        *px = Rgb(colors[l as usize]);
    }
    let path = path.as_ref();
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

/// Result of decoding a reference raster.
#[derive(Clone, Debug)]
pub struct ReferenceRead {
    pub map: LabelMap,
    /// Set when more than half the pixels matched no palette color.
    pub warning: Option<String>,
}

/// Decodes an RGB reference mask by exact color match. Unknown colors become
/// [`LabelMap::IGNORE`].
pub fn read_reference(path: impl AsRef<Path>, palette: &Palette) -> Result<ReferenceRead> {
    let path = path.as_ref();
    let img = read_rgb(path)?;
    let lookup = palette.lookup();
    let labels: Vec<u16> = img
        .pixels()
        .map(|p| lookup.get(&p.0).copied().unwrap_or(LabelMap::IGNORE))
        .collect();
    let map = LabelMap {
        height: img.height() as usize,
        width: img.width() as usize,
        labels,
    };
    let ignored = map.ignored();
    let warning = (ignored * 2 > map.labels.len()).then(|| {
        format!(
            "{}: {ignored} of {} pixels match no palette color; wrong palette?",
            path.display(),
            map.labels.len()
        )
    });
    Ok(ReferenceRead { map, warning })
}

/// Decodes a cluster-id PNG written by [`write_segmentation`] without a
/// mapping. `k` is one more than the largest id present.
pub fn read_cluster_map(path: impl AsRef<Path>) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let img = read_rgb(path)?;
    let mut labels = Vec::with_capacity(img.len() / 3);
    for (i, p) in img.pixels().enumerate() {
        let id = cluster_from_color(p.0).ok_or_else(|| {
            Error::Input(format!(
                "{}: pixel {i} has color {:?}, which is not a cluster color",
                path.display(),
                p.0
            ))
        })?;
        labels.push(id);
    }
    let k = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    SegmentationMap::new(img.height() as usize, img.width() as usize, k, labels)
}
