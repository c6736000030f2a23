use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use sceneseg_core::eval::{binary_segmentation, mapping_from_json};
use sceneseg_core::io::{load_model, load_scene, write_segmentation, Palette};
use sceneseg_core::segment_scene;

use crate::Usage;

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,

    /// Scene to segment; any scene with the model's band count works
    #[arg(long)]
    image: PathBuf,

    /// Cluster-id PNG to write
    #[arg(long)]
    out: PathBuf,

    /// Cluster-to-class mapping (JSON object, or an eval report)
    #[arg(long)]
    mapping: Option<PathBuf>,

    /// Class-colored PNG; defaults to `<out>_classes.png` when --mapping is given
    #[arg(long)]
    class_out: Option<PathBuf>,

    /// Building/other PNG (needs --mapping)
    #[arg(long)]
    binary: Option<PathBuf>,

    /// Class palette JSON; defaults to the ISPRS six-class palette
    #[arg(long)]
    palette: Option<PathBuf>,

    /// Class that --binary treats as foreground
    #[arg(long, default_value = "building")]
    building_class: String,
}

pub fn run(args: SegmentArgs) -> anyhow::Result<()> {
    if args.binary.is_some() && args.mapping.is_none() {
        return Err(Usage("--binary needs --mapping to know which clusters are buildings".into()).into());
    }
    if args.class_out.is_some() && args.mapping.is_none() {
        return Err(Usage("--class-out needs --mapping".into()).into());
    }
    let palette = match &args.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::isprs(),
    };

    let model = load_model(&args.model)?;
    let scene = load_scene(&args.image, true)?;
    let map = segment_scene(&scene, &model)?;
    write_segmentation(&map, &Palette::clusters(map.k), None, &args.out)?;
    eprintln!("wrote {} ({}x{}, K={})", args.out.display(), map.width, map.height, map.k);

    let Some(mapping_path) = &args.mapping else {
        return Ok(());
    };
    let text = std::fs::read_to_string(mapping_path).with_context(|| format!("reading {}", mapping_path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", mapping_path.display()))?;
    let mapping = mapping_from_json(&value, &palette.names())?;

    let class_out = args.class_out.clone().unwrap_or_else(|| {
        let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        args.out.with_file_name(format!("{stem}_classes.png"))
    });
    write_segmentation(&map, &palette, Some(&mapping), &class_out)?;
    eprintln!("wrote {}", class_out.display());

    if let Some(binary_path) = &args.binary {
        let building = palette
            .index_of(&args.building_class)
            .ok_or_else(|| Usage(format!("palette has no class named {:?}", args.building_class)))?;
        let binary = binary_segmentation(&map, &mapping, building)?;
        write_segmentation(&binary, &Palette::binary(), Some(&[Some(0), Some(1)]), binary_path)?;
        eprintln!("wrote {}", binary_path.display());
    }
    Ok(())
}
