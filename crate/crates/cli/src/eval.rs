use std::path::PathBuf;

use clap::Args;
use sceneseg_core::eval::{average_runs, confusion, majority_map, metrics, ConfusionMatrix, MetricsReport};
use sceneseg_core::io::{read_cluster_map, read_reference, Palette};
use serde_json::json;

use crate::Usage;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Cluster-id PNGs; with --runs R, R consecutive groups of one per --ref
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,

    /// Reference masks, colored with --palette
    #[arg(long = "ref", required = true, num_args = 1..)]
    reference: Vec<PathBuf>,

    /// Class palette JSON; defaults to the ISPRS six-class palette
    #[arg(long)]
    palette: Option<PathBuf>,

    /// Number of independent runs the predictions come from
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    if args.runs == 0 {
        return Err(Usage("--runs must be at least 1".into()).into());
    }
    let tiles = args.reference.len();
    if args.pred.len() != args.runs * tiles {
        return Err(Usage(format!(
            "expected {} predictions ({} runs x {tiles} references), got {}",
            args.runs * tiles,
            args.runs,
            args.pred.len()
        ))
        .into());
    }
    let palette = match &args.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::isprs(),
    };
    let names = palette.names();

    let mut references = Vec::with_capacity(tiles);
    for path in &args.reference {
        let read = read_reference(path, &palette)?;
        if let Some(w) = &read.warning {
            eprintln!("warning: {w}");
        }
        references.push(read.map);
    }

    let mut reports: Vec<MetricsReport> = Vec::with_capacity(args.runs);
    for preds in args.pred.chunks(tiles) {
        let mut cms = Vec::with_capacity(tiles);
        for (pred_path, reference) in preds.iter().zip(&references) {
            let pred = read_cluster_map(pred_path)?;
            if (pred.height, pred.width) != (reference.height, reference.width) {
                return Err(Usage(format!(
                    "{} is {}x{} but its reference is {}x{}",
                    pred_path.display(),
                    pred.width,
                    pred.height,
                    reference.width,
                    reference.height
                ))
                .into());
            }
            cms.push(confusion(&pred, reference, palette.len())?);
        }
        let pooled = ConfusionMatrix::pool(&cms)?;
        reports.push(metrics(&pooled, &majority_map(&pooled)?, &names)?);
    }

    let out = if reports.len() == 1 {
        reports[0].to_json()
    } else {
        let mut avg = average_runs(&reports)?.to_json();
        avg["runs"] = json!(reports.iter().map(MetricsReport::to_json).collect::<Vec<_>>());
        avg
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
