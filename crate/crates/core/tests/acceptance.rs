//! End-to-end acceptance criteria. Prints one PASS/FAIL/SKIP line per
//! criterion and fails if any gating criterion failed.
//!
//! Run with `cargo test -p sceneseg-core --test acceptance -- --nocapture`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceneseg_core::eval::{average_runs, confusion, majority_map, metrics, pixel_accuracy, ClassCounts, ConfusionMatrix};
use sceneseg_core::io::{encode_model, load_model, load_scene, read_reference, save_model, Palette};
use sceneseg_core::losses::{assign_pseudo_labels, clustering_loss, contrastive_loss};
use sceneseg_core::ops::conv2d;
use sceneseg_core::ops::gradcheck::{finite_difference_check, OpId, SamplePoint};
use sceneseg_core::ops::RunningStats;
use sceneseg_core::segnet::ALLOWED_RATIOS;
use sceneseg_core::synthetic::three_regions;
use sceneseg_core::trainer::TrainOutcome;
use sceneseg_core::{segment_scene, train, ModelParams, Tensor, TrainConfig};

const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_NETWORK: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const CONV_CASES: u64 = 100;
const CONV_TOL: f64 = 1e-5;

const LOSS_TOL: f64 = 1e-6;

const SYNTH_SIZE: usize = 192;
const SYNTH_NOISE: f32 = 0.05;
const SYNTH_SCENE_SEED: u64 = 7;
const SYNTH_SEEDS: [u64; 3] = [1, 2, 3];
const SYNTH_MEAN_ACC: f64 = 0.85;
const SYNTH_MIN_ACC: f64 = 0.75;
const SYNTH_BUDGET: Duration = Duration::from_secs(600);
const CHUNK_DESCENT_SHARE: f64 = 0.8;

const SERIAL_CASES: u64 = 20;
const METRIC_CASES: usize = 1000;

const VAIHINGEN_ENV: &str = "SCENESEG_VAIHINGEN";
const VAIHINGEN_TRAIN: u32 = 1;
const VAIHINGEN_TEST: [u32; 5] = [11, 15, 28, 30, 34];
const VAIHINGEN_F1: (f64, f64) = (0.43, 0.10);
const VAIHINGEN_IOU: (f64, f64) = (0.30, 0.08);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Suite {
    failures: Vec<usize>,
}

impl Suite {
    fn report(&mut self, id: usize, name: &str, verdict: Verdict) {
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.failures.push(id);
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id}. {name}: {detail}");
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<String> = Vec::new();
    let mut ok = true;
    for op in OpId::ALL {
        let tol = if op == OpId::Network { GRAD_TOL_NETWORK } else { GRAD_TOL };
        let mut op_worst = 0.0f64;
        for seed in GRAD_SEEDS {
            match finite_difference_check(&SamplePoint::random(op, seed), GRAD_STEP) {
                Ok(e) => op_worst = op_worst.max(e),
                Err(e) => return Verdict::Fail(format!("{op:?} seed {seed}: {e}")),
            }
        }
        ok &= op_worst < tol;
        worst.push(format!("{op:?}={op_worst:.1e}"));
    }
    let took = start.elapsed();
    ok &= took < GRAD_BUDGET;
    verdict(ok, format!("max rel err {} in {:.1}s", worst.join(" "), took.as_secs_f64()))
}

fn conv_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..CONV_CASES {
        let mut r = common::rng(1000 + seed);
        let n = r.random_range(1..=3);
        let c_in = r.random_range(1..=6);
        let c_out = r.random_range(1..=6);
        let k = [1, 3][r.random_range(0..2)];
        let h = r.random_range(3..=8);
        let w = r.random_range(3..=8);
        let x = common::random_tensor(&mut r, [n, c_in, h, w]);
        let wt = common::random_tensor(&mut r, [c_out, c_in, k, k]);
        let bias: Vec<f64> = (0..c_out).map(|_| r.random_range(-1.0..1.0)).collect();
        let pad = k / 2;
        let oracle = common::naive_conv(&x, &wt, &bias, pad);
        let bias32: Vec<f32> = bias.iter().map(|&b| b as f32).collect();
        let fast = match conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), &bias32, pad) {
            Ok(p) => p.value.cast::<f64>(),
            Err(e) => return Verdict::Fail(format!("case {seed}: {e}")),
        };
        worst = worst.max(fast.max_abs_diff(&oracle));
    }
    verdict(worst < CONV_TOL, format!("{CONV_CASES} cases, max abs diff {worst:.2e}"))
}

fn analytic_losses() -> Verdict {
    let y = Tensor::<f64>::zeros([1, 2, 1, 1]);
    let ce = clustering_loss(&y, &assign_pseudo_labels(&y)).unwrap().value;
    let y = Tensor::<f64>::from_vec([2, 2, 1, 1], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
    let l1_two = contrastive_loss(&y, &[1, 0]).unwrap().value;
    let y = Tensor::<f32>::full([4, 8, 3, 3], 0.7);
    let same = contrastive_loss(&y, &[1, 2, 3, 0]).unwrap().value;
    let ok = (ce - std::f64::consts::LN_2).abs() < LOSS_TOL && (l1_two - 0.135335).abs() < LOSS_TOL && same == 1.0;
    verdict(ok, format!("uniform CE {ce:.9}, exp(-2) term {l1_two:.9}, identical pairs {same}"))
}

fn hyperparameter_wiring(runs: &[(u64, TrainOutcome, f64)]) -> Verdict {
    let d = TrainConfig::default();
    let mut ok = d.epochs == 2 && d.inner_iters == 50 && d.k == 8;
    for (seed, out, _) in runs {
        let chunks = out.log.chunks();
        let epochs: std::collections::BTreeSet<usize> = out.log.records.iter().map(|r| r.epoch).collect();
        ok &= epochs.into_iter().collect::<Vec<_>>() == vec![0, 1];
        ok &= chunks.iter().all(|c| c.len() == 50 && c.iter().enumerate().all(|(j, r)| r.inner == j));
        ok &= out.params.k == 8 && out.params.head.weight.shape()[0] == 8;
        ok &= out.epoch_orders.len() == 2;
        if !ok {
            return Verdict::Fail(format!("seed {seed}: log has {} chunks, K={}", chunks.len(), out.params.k));
        }
    }
    let steps = runs.first().map_or(0, |r| r.1.log.records.len());
    verdict(ok, format!("I=2 epochs, J=50 steps per chunk, K=8 head; {steps} logged steps per run"))
}

fn synthetic_config(seed: u64) -> TrainConfig {
    TrainConfig {
        patch: (64, 64),
        stride: 32,
        seed,
        ..TrainConfig::default()
    }
}

fn synthetic_runs() -> (Vec<(u64, TrainOutcome, f64)>, Duration) {
    let (scene, truth) = three_regions(SYNTH_SIZE, SYNTH_NOISE, SYNTH_SCENE_SEED).unwrap();
    let scene = scene.normalized();
    let start = Instant::now();
    let runs = SYNTH_SEEDS
        .iter()
        .map(|&seed| {
            let out = train(&scene, &synthetic_config(seed)).unwrap();
            let map = segment_scene(&scene, &out.params).unwrap();
            let cm = confusion(&map, &truth, 3).unwrap();
            let acc = pixel_accuracy(&cm, &majority_map(&cm).unwrap()).unwrap();
            (seed, out, acc)
        })
        .collect();
    (runs, start.elapsed())
}

fn synthetic_end_to_end(runs: &[(u64, TrainOutcome, f64)], took: Duration) -> Verdict {
    let accs: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let ok = mean >= SYNTH_MEAN_ACC && min >= SYNTH_MIN_ACC && took < SYNTH_BUDGET;
    let per_seed: Vec<String> = runs.iter().map(|(s, _, a)| format!("seed {s}={a:.4}")).collect();
    verdict(
        ok,
        format!(
            "pixel accuracy {} mean {mean:.4}; {:.0}s for {} runs on {cores} core(s)",
            per_seed.join(" "),
            took.as_secs_f64(),
            runs.len()
        ),
    )
}

fn chunk_descent(runs: &[(u64, TrainOutcome, f64)]) -> Verdict {
    let mut total = 0;
    let mut down = 0;
    for (_, out, _) in runs {
        for c in out.log.chunks() {
            total += 1;
            if c.last().unwrap().loss.total <= c.first().unwrap().loss.total {
                down += 1;
            }
        }
    }
    let share = down as f64 / total as f64;
    verdict(share >= CHUNK_DESCENT_SHARE, format!("{down}/{total} chunks end at or below their first loss"))
}

fn determinism(reference: &(u64, TrainOutcome, f64)) -> Verdict {
    let (scene, _) = three_regions(SYNTH_SIZE, SYNTH_NOISE, SYNTH_SCENE_SEED).unwrap();
    let scene = scene.normalized();
    let again = train(&scene, &synthetic_config(reference.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_model(&reference.1.params, &a).unwrap();
    save_model(&again.params, &b).unwrap();
    let same_model = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let same_log = reference.1.log.to_tsv() == again.log.to_tsv();
    verdict(
        same_model && same_log,
        format!("seed {} retrained: model bytes equal {same_model}, log equal {same_log}", reference.0),
    )
}

fn random_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = rng.random_range(1..6);
    let k = rng.random_range(2..16);
    let ratio = ALLOWED_RATIOS[rng.random_range(0..ALLOWED_RATIOS.len())];
    let mut p = ModelParams::init(rng.random(), bands, k, ratio).unwrap();
    for block in &mut p.blocks {
        if rng.random_bool(0.5) {
            let c = block.gamma.len();
            block.running = Some(RunningStats {
                mean: (0..c).map(|_| rng.random_range(-2.0..2.0)).collect(),
                var: (0..c).map(|_| rng.random_range(0.01..3.0)).collect(),
            });
        }
    }
    p.meta.seed = rng.random();
    p.meta.config_digest = rng.random();
    p.meta.patch = (rng.random_range(3..512), rng.random_range(3..512));
    p
}

fn serialization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..SERIAL_CASES {
        let p = random_params(seed);
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save_model(&p, &a).unwrap();
        let loaded = load_model(&a).unwrap();
        save_model(&loaded, &b).unwrap();
        if std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap() || encode_model(&loaded) != encode_model(&p) {
            return Verdict::Fail(format!("parameter set {seed} changed across save/load/save"));
        }
    }
    Verdict::Pass(format!("{SERIAL_CASES} random parameter sets byte-identical"))
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..METRIC_CASES {
        let (k, m) = (rng.random_range(1..10), rng.random_range(1..8));
        let rows: Vec<Vec<u64>> = (0..k).map(|_| (0..m).map(|_| rng.random_range(0..200)).collect()).collect();
        let cm = ConfusionMatrix::from_rows(&rows);
        let names: Vec<String> = (0..m).map(|c| format!("c{c}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = metrics(&cm, &majority_map(&cm).unwrap(), &names).unwrap();
        if report.per_class.iter().any(|s| s.iou > s.f1) {
            return Verdict::Fail(format!("matrix {i}: IoU exceeds F1"));
        }
    }
    let c = ClassCounts { tp: 8, fp: 2, fn_: 2 };
    let ok = c.f1() == 0.8 && c.iou() == 8.0 / 12.0;
    verdict(ok, format!("{METRIC_CASES} matrices IoU <= F1; TP8/FP2/FN2 -> F1 {} IoU {:.4}", c.f1(), c.iou()))
}

fn vaihingen_file(root: &Path, dirs: &[&str], id: u32) -> Option<PathBuf> {
    dirs.iter()
        .map(|d| root.join(d).join(format!("top_mosaic_09cm_area{id}.tif")))
        .find(|p| p.exists())
}

fn vaihingen() -> Verdict {
    let Some(root) = std::env::var_os(VAIHINGEN_ENV).map(PathBuf::from) else {
        return Verdict::Skip(format!("non-gating; set {VAIHINGEN_ENV} to the ISPRS Vaihingen directory to run"));
    };
    let image = |id| vaihingen_file(&root, &["top", "."], id);
    let gts = |id| vaihingen_file(&root, &["gts_for_participants", "gts", "ground_truth"], id);
    let Some(train_path) = image(VAIHINGEN_TRAIN) else {
        return Verdict::Skip(format!("non-gating; training tile {VAIHINGEN_TRAIN} not found under {}", root.display()));
    };
    let mut tiles = Vec::new();
    for id in VAIHINGEN_TEST {
        match (image(id), gts(id)) {
            (Some(i), Some(g)) => tiles.push((id, i, g)),
            _ => return Verdict::Skip(format!("non-gating; test tile {id} or its reference is missing")),
        }
    }
    let palette = Palette::isprs();
    let names = palette.names();
    let scene = load_scene(&train_path, true).unwrap();
    let mut reports = Vec::new();
    for seed in SYNTH_SEEDS {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let model = train(&scene, &cfg).unwrap().params;
        let mut cms = Vec::new();
        for (_, img, gt) in &tiles {
            let test = load_scene(img, true).unwrap();
            let reference = read_reference(gt, &palette).unwrap().map;
            let map = segment_scene(&test, &model).unwrap();
            cms.push(confusion(&map, &reference, palette.len()).unwrap());
        }
        let pooled = ConfusionMatrix::pool(&cms).unwrap();
        reports.push(metrics(&pooled, &majority_map(&pooled).unwrap(), &names).unwrap());
    }
    let avg = average_runs(&reports).unwrap();
    let within = |v: f64, (c, tol): (f64, f64)| (v - c).abs() <= tol;
    Verdict::Pass(format!(
        "non-gating; macro F1 {:.3} (expected {}±{}, within {}), macro IoU {:.3} (expected {}±{}, within {})",
        avg.macro_f1,
        VAIHINGEN_F1.0,
        VAIHINGEN_F1.1,
        within(avg.macro_f1, VAIHINGEN_F1),
        avg.macro_iou,
        VAIHINGEN_IOU.0,
        VAIHINGEN_IOU.1,
        within(avg.macro_iou, VAIHINGEN_IOU)
    ))
}

#[test]
fn acceptance_criteria() {
    let mut suite = Suite { failures: Vec::new() };
    suite.report(1, "gradient correctness", gradient_correctness());
    suite.report(2, "conv oracle equivalence", conv_oracle());
    suite.report(3, "analytic loss values", analytic_losses());
    let (runs, took) = synthetic_runs();
    suite.report(4, "default hyperparameter wiring", hyperparameter_wiring(&runs));
    suite.report(5, "synthetic end-to-end", synthetic_end_to_end(&runs, took));
    suite.report(5, "per-chunk loss descent", chunk_descent(&runs));
    suite.report(6, "determinism", determinism(&runs[0]));
    suite.report(7, "serialization", serialization());
    suite.report(8, "metric identities", metric_identities());
    suite.report(9, "Vaihingen reference check", vaihingen());
    assert!(suite.failures.is_empty(), "failed criteria: {:?}", suite.failures);
}
