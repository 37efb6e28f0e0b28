mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossnet::association::{pipeline_single_shot, render_demo, write_demo_png, Thresholds};
use crossnet::eval::{
    ablate_tap_layer, bench_scenes, evaluate, latency_bench, memory_report, write_latency_plot, write_loss_plot,
    BenchTarget, MonotonicClock, Report, SequentialTarget, SingleShotTarget,
};
use crossnet::models::{load_checkpoint, params_digest, Sidecar, DETECTOR_PREFIX};
use crossnet::nn::ParamStore;
use crossnet::scenario::{dataset_build, Dataset};
use crossnet::training::{checkpoint_regime, train, Regime, TrainOptions};
use crossnet::{Error, Result};
use serde_json::json;

use config::{Preset, RunConfig};

/// Worker threads for data-parallel stages; defaults to all cores.
const WORKERS_ENV: &str = "CROSSNET_WORKERS";
const CHECKPOINT: &str = "checkpoint.ck";

#[derive(Parser)]
#[command(name = "crossnet", version, about = "Single-shot pedestrian crossing-intention toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when the config file names none.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one regime.
    Train {
        #[command(flatten)]
        common: Common,
        /// detector_only, auxiliary_frozen, multitask or sequential.
        #[arg(long)]
        regime: Option<String>,
        /// Dataset manifest; the planned dataset is generated on the fly when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained detector to start from (required for auxiliary_frozen).
        #[arg(long)]
        detector_checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        height_filter: Option<f64>,
    },
    /// Latency and memory of both pipelines.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint holding the trained crop-sequence baseline.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        plots: bool,
    },
    /// Sweep the tap layer with a frozen detector.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector_checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Annotated final frames of test sequences.
    Demo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
}

fn setup(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.dataset.world.seed = s;
        cfg.bench.options.seed = s;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    let ds = match data {
        Some(p) => Dataset::from_manifest(p)?,
        None => Dataset::plan(&cfg.dataset)?,
    };
    let d = &cfg.model.detector;
    if (ds.world.image_height, ds.world.image_width, ds.world.seq_len)
        != (d.image_height, d.image_width, cfg.model.auxiliary.seq_len)
    {
        return Err(Error::config("data", "dataset shapes differ from the model configuration"));
    }
    Ok(ds)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load(path: &Path) -> Result<(ParamStore<f32>, Sidecar)> {
    load_checkpoint::<f32>(path)
}

fn cmd_gen(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    cfg.validate()?;
    cfg.echo(&common.out)?;
    let mut m = dataset_build(&cfg.dataset, &common.out)?;
    m.grid = Some(cfg.model.detector.grid.clone());
    m.write(&common.out)?;
    let g = &cfg.model.detector.grid;
    println!(
        "wrote {} train / {} test sequences to {}",
        m.train.len(),
        m.test.len(),
        common.out.display()
    );
    println!(
        "image {}x{}, t={}, grid {}x{}x{}, mean pedestrians/frame {:.2} (train)",
        m.world.image_height,
        m.world.image_width,
        m.world.seq_len,
        g.h,
        g.w,
        g.n_anchors(),
        m.stats_train.mean_pedestrians_per_frame
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    regime: Option<&str>,
    data: Option<&Path>,
    detector: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(r) = regime {
        cfg.train.regime = Regime::parse(r)?;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let init = match detector {
        Some(p) => Some(load(p)?.0),
        None if cfg.train.regime == Regime::AuxiliaryFrozen => {
            return Err(Error::config(
                "detector_checkpoint",
                "auxiliary_frozen needs --detector-checkpoint",
            ))
        }
        None => None,
    };
    let ds = dataset(&cfg, data)?;
    cfg.echo(&common.out)?;
    let before = init.as_ref().map(|p| params_digest(p, &format!("{DETECTOR_PREFIX}.")));
    let log_path = common.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let run = train(
        &ds,
        &cfg.model,
        &cfg.train,
        TrainOptions {
            log: Some(&mut log),
            divergence_checkpoint: Some(common.out.join("last_good.ck")),
            init,
            max_batches: None,
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    let ck = common.out.join(CHECKPOINT);
    let sha = run.save(&ck)?;
    let after = params_digest(&run.params, &format!("{DETECTOR_PREFIX}."));
    write_json(
        &common.out.join("train_summary.json"),
        &json!({
            "regime": run.config.regime,
            "epochs": run.epochs.len(),
            "final_loss": run.epochs.last().map(|e| e.loss),
            "wall_ms": run.wall_ms,
            "checkpoint_sha256": sha,
            "detector_sha256_before": before,
            "detector_sha256_after": after,
        }),
    )?;
    println!(
        "{} done in {:.1}s, final loss {:.4}; checkpoint {}",
        run.config.regime.name(),
        run.wall_ms as f64 / 1000.0,
        run.epochs.last().map_or(f64::NAN, |e| e.loss),
        ck.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: Option<&Path>, height: Option<f64>) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(h) = height {
        cfg.eval.height_filter_px = h;
    }
    let (params, side) = load(checkpoint)?;
    cfg.model = side.model.clone();
    cfg.validate()?;
    let ds = dataset(&cfg, data)?;
    cfg.echo(&common.out)?;
    let mut opts = cfg.eval;
    opts.with_intent &= !matches!(
        checkpoint_regime(&side),
        Some(Regime::DetectorOnly) | Some(Regime::Sequential)
    );
    let metrics = evaluate(&params, &cfg.model, &ds, &ds.test, &opts)?;
    match &metrics.intent {
        Some(m) => println!(
            "intent accuracy {:.4}  F1 {:.4}  (scored {})",
            m.accuracy,
            m.f1,
            m.confusion.scored()
        ),
        None => println!("intent: absent"),
    }
    println!("detection mAP@0.5 {:.4}", metrics.detection_map);
    let mut report = Report::new();
    report.metrics = Some(metrics);
    report.write(&common.out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    common: &Common,
    checkpoint: &Path,
    baseline: Option<&Path>,
    counts: Option<Vec<usize>>,
    reps: Option<usize>,
    warmup: Option<usize>,
    plots: bool,
) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(c) = counts {
        cfg.bench.counts = c;
    }
    if let Some(r) = reps {
        cfg.bench.options.reps = r;
    }
    if let Some(w) = warmup {
        cfg.bench.options.warmup = w;
    }
    let (mut params, side) = load(checkpoint)?;
    cfg.model = side.model.clone();
    cfg.validate()?;
    if let Some(b) = baseline {
        let (base, _) = load(b)?;
        for (name, p) in base.iter().filter(|(n, _)| n.starts_with("seq.")) {
            if params.contains(name) {
                *params.get_mut(name) = p.value.clone();
            }
        }
    }
    cfg.echo(&common.out)?;
    let scenes = bench_scenes(&cfg.dataset.world, &cfg.bench.counts, cfg.bench.options.seed)?;
    let thr = Thresholds {
        conf: cfg.eval.conf,
        nms_iou: cfg.eval.nms_iou,
    };
    let mut single = SingleShotTarget {
        params: &params,
        model: &cfg.model,
        scenes: scenes.clone(),
        thresholds: thr,
    };
    let mut seq = SequentialTarget {
        params: &params,
        model: &cfg.model,
        scenes,
        thresholds: thr,
    };
    let clock = MonotonicClock::new();
    let targets: &mut [&mut dyn BenchTarget] = &mut [&mut single, &mut seq];
    let latency = latency_bench(targets, &cfg.bench.counts, &clock, &cfg.bench.options)?;
    for p in &latency.pipelines {
        let meds: Vec<String> = p
            .buckets
            .iter()
            .map(|b| format!("{}:{:.2}ms", b.count, b.median_ms))
            .collect();
        println!(
            "{:<12} {}  slope {:.3} ms/ped [{:.3}, {:.3}]",
            p.name,
            meds.join(" "),
            p.slope_ms_per_ped,
            p.slope_ci.0,
            p.slope_ci.1
        );
    }
    let memory = memory_report(&params, &cfg.model)?;
    println!(
        "parameters: single-shot {} B, sequential {} B, delta {} B (hand table {})",
        memory.single_shot_total.bytes,
        memory.sequential_total.bytes,
        memory.delta_bytes,
        if memory.hand_table_agrees { "agrees" } else { "DISAGREES" }
    );
    if plots {
        write_latency_plot(&latency, &common.out.join("plots/latency.png"))?;
    }
    let mut report = Report::new();
    report.latency = Some(latency);
    report.memory = Some(memory);
    report.write(&common.out)
}

fn cmd_ablate(
    common: &Common,
    detector: &Path,
    layers: &[usize],
    data: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.train.regime = Regime::AuxiliaryFrozen;
    cfg.validate()?;
    let (params, side) = load(detector)?;
    if side.model.detector != cfg.model.detector {
        return Err(Error::config("detector_checkpoint", "detector differs from the configured model"));
    }
    let ds = dataset(&cfg, data)?;
    cfg.echo(&common.out)?;
    let table = ablate_tap_layer(&ds, &cfg.model, &params, layers, &cfg.train, &cfg.eval)?;
    println!("{:>4} {:>14} {:>9} {:>9}", "L", "tap", "accuracy", "F1");
    for r in &table.rows {
        println!(
            "{:>4} {:>14} {:>9.4} {:>9.4}",
            r.tap_layer,
            format!("{}x{}x{}", r.tap_shape.0, r.tap_shape.1, r.tap_shape.2),
            r.accuracy,
            r.f1
        );
    }
    let mut report = Report::new();
    report.ablation = Some(table);
    report.write(&common.out)
}

fn cmd_demo(common: &Common, checkpoint: &Path, data: Option<&Path>, n: usize) -> Result<()> {
    let mut cfg = setup(common)?;
    let (params, side) = load(checkpoint)?;
    cfg.model = side.model.clone();
    cfg.validate()?;
    let ds = dataset(&cfg, data)?;
    cfg.echo(&common.out)?;
    let thr = Thresholds {
        conf: cfg.eval.conf,
        nms_iou: cfg.eval.nms_iou,
    };
    let mut curves = Vec::new();
    if let Some(epochs) = side.metadata.get("epochs").and_then(|e| e.as_array()) {
        curves.push(epochs.iter().filter_map(|e| e.get("loss")?.as_f64()).collect::<Vec<f64>>());
    }
    for entry in ds.test.iter().take(n) {
        let seq = ds.load(entry)?;
        let out = pipeline_single_shot(&seq.frames, &params, &cfg.model, thr)?;
        let truth = seq.final_annotations();
        let img = render_demo(&seq.frames[seq.len() - 1], &out.assignments, truth)?;
        write_demo_png(&common.out.join(format!("{}.png", entry.id)), &img)?;
        write_json(
            &common.out.join(format!("{}.json", entry.id)),
            &json!({
                "sequence": entry.id,
                "assignments": out.assignments,
                "ground_truth": truth,
            }),
        )?;
        println!("{}: {} pedestrian assignment(s)", entry.id, out.assignments.len());
    }
    if !curves.is_empty() && !curves[0].is_empty() {
        write_loss_plot(&curves, &common.out.join("plots/loss.png"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gen { common } => cmd_gen(common),
        Cmd::Train {
            common,
            regime,
            data,
            detector_checkpoint,
            epochs,
        } => cmd_train(common, regime.as_deref(), data.as_deref(), detector_checkpoint.as_deref(), *epochs),
        Cmd::Eval {
            common,
            checkpoint,
            data,
            height_filter,
        } => cmd_eval(common, checkpoint, data.as_deref(), *height_filter),
        Cmd::Bench {
            common,
            checkpoint,
            baseline_checkpoint,
            counts,
            reps,
            warmup,
            plots,
        } => cmd_bench(common, checkpoint, baseline_checkpoint.as_deref(), counts.clone(), *reps, *warmup, *plots),
        Cmd::Ablate {
            common,
            detector_checkpoint,
            layers,
            data,
            epochs,
        } => cmd_ablate(common, detector_checkpoint, layers, data.as_deref(), *epochs),
        Cmd::Demo {
            common,
            checkpoint,
            data,
            sequences,
        } => cmd_demo(common, checkpoint, data.as_deref(), *sequences),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
            }
            _ => {
                eprintln!("error: {WORKERS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
