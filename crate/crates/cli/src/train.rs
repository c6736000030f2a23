use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use sceneseg_core::io::{load_scene, save_model};
use sceneseg_core::trainer::train_with;
use sceneseg_core::TrainConfig;

use crate::Usage;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Scene to train on (8/16-bit PNG or TIFF)
    #[arg(long)]
    image: PathBuf,

    /// Model file to write
    #[arg(long)]
    out: PathBuf,

    /// Training log (TSV); defaults to the model path with a .log extension
    #[arg(long)]
    log: Option<PathBuf>,

    /// Number of clusters in the final layer
    #[arg(long = "K", default_value_t = 8)]
    k: usize,

    #[arg(long, default_value_t = 2)]
    epochs: usize,

    /// Optimizer steps per chunk of patches
    #[arg(long, default_value_t = 50)]
    inner_iters: usize,

    /// Patches per chunk
    #[arg(long, default_value_t = 10)]
    batch: usize,

    /// Patch size, `N` or `HxW`
    #[arg(long, default_value = "128", value_parser = parse_patch)]
    patch: (usize, usize),

    #[arg(long, default_value_t = 64)]
    stride: usize,

    #[arg(long, default_value_t = 0.1)]
    lr: f64,

    #[arg(long, default_value_t = 0.9)]
    momentum: f64,

    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    seed: u64,

    /// Train one model per seed; `_seed{n}` is appended to output names
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Attention bottleneck ratio (4, 8 or 16)
    #[arg(long, default_value_t = 8)]
    ratio: usize,
}

fn parse_patch(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad patch size {s:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let base = TrainConfig {
        epochs: args.epochs,
        inner_iters: args.inner_iters,
        batch_size: args.batch,
        k: args.k,
        patch: args.patch,
        stride: args.stride,
        learning_rate: args.lr,
        momentum: args.momentum,
        seed: args.seed,
        ratio: args.ratio,
    };
    base.validate()?;
    if matches!(&args.seeds, Some(s) if s.is_empty()) {
        return Err(Usage("--seeds needs at least one seed".into()).into());
    }

    let scene = load_scene(&args.image, true)?;
    if scene.height() < base.patch.0 || scene.width() < base.patch.1 {
        return Err(Usage(format!(
            "scene {}x{} is smaller than the {}x{} patch",
            scene.height(),
            scene.width(),
            base.patch.0,
            base.patch.1
        ))
        .into());
    }
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log"));

    let runs: Vec<(u64, PathBuf, PathBuf)> = match &args.seeds {
        None => vec![(base.seed, args.out.clone(), log_path)],
        Some(seeds) => seeds
            .iter()
            .map(|&s| {
                let suffix = format!("_seed{s}");
                (s, with_suffix(&args.out, &suffix), with_suffix(&log_path, &suffix))
            })
            .collect(),
    };

    for (seed, model_path, log_path) in runs {
        let cfg = TrainConfig { seed, ..base.clone() };
        eprintln!("training seed {seed} on {}", args.image.display());
        let outcome = train_with(&scene, &cfg, |r| {
            if r.inner + 1 == cfg.inner_iters {
                eprintln!(
                    "epoch {} chunk {} loss {:.6} (clustering {:.6}, contrastive {:.6})",
                    r.epoch, r.chunk, r.loss.total, r.loss.clustering, r.loss.contrastive
                );
            }
        })?;
        save_model(&outcome.params, &model_path)?;
        let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        outcome
            .log
            .write_tsv(BufWriter::new(file))
            .with_context(|| format!("writing {}", log_path.display()))?;
        eprintln!("wrote {} and {}", model_path.display(), log_path.display());
    }
    Ok(())
}
