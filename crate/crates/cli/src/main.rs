//! `rspk` — train, evaluate, and run the prompt-learning segmentation
//! pipelines, plus synthetic dataset generation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rspk_core::baselines::{run_any, run_sam_det, BoxSource, PipelineResult};
use rspk_core::ckpt::Checkpoint;
use rspk_core::config::RunConfig;
use rspk_core::data::{
    save_coco, write_predictions, AnnotatedSample, ImageData, PredictionRecord,
};
use rspk_core::error::Error;
use rspk_core::mask::rle_encode;
use rspk_core::metrics::{gt_from_samples, ApReport, EvalInstance};
use rspk_core::model::{Model, ModelKind};
use rspk_core::synth::{make_synthetic, SceneSpec, CATEGORY_NAMES};
use rspk_core::train::{train_model, TrainOptions};

#[derive(Parser)]
#[command(name = "rspk", version, about = "Prompt-learning instance segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model described by a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the config's validation split.
    Eval(EvalArgs),
    /// Run one image through a trained checkpoint.
    Predict(PredictArgs),
    /// Generate a synthetic-shapes dataset.
    MakeData(MakeDataArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device (this build is CPU-only).
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for checkpoints and the metrics journal.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration (JSON); must match the checkpoint's model.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Where to write the machine-readable report (JSON).
    #[arg(long, default_value = "ap_report.json")]
    out: PathBuf,
    /// Box-prompt pipeline only: replace detector boxes with ground truth.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to load (model config is stored inside).
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PNG).
    image: PathBuf,
    /// Output prediction records (newline-delimited JSON).
    #[arg(long, default_value = "predictions.jsonl")]
    out: PathBuf,
    /// Also write `<out>.overlay.png` with instance tints.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output directory (defaults under $RSPK_CACHE, or ./data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images.
    #[arg(long, default_value_t = 500)]
    images: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Instances per image.
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::MakeData(args) => cmd_make_data(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Json(_) => 2,
        Error::Runtime(_) | Error::Io(_) => 3,
    }
}

fn check_device(common: &CommonArgs) -> Result<(), Error> {
    if common.device != "cpu" {
        return Err(Error::config(format!(
            "unknown device `{}`; this build supports `cpu` only",
            common.device
        )));
    }
    Ok(())
}

fn load_config(path: &Path, common: &CommonArgs) -> Result<RunConfig, Error> {
    check_device(common)?;
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_split_samples(cfg: &RunConfig, dir: &Path) -> Result<Vec<AnnotatedSample>, Error> {
    cfg.load_split(dir)?.load_all()
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config, &args.common)?;
    let train_dir = cfg
        .train_dir
        .clone()
        .ok_or_else(|| Error::config("training requires `train_dir` in the config"))?;
    let train_index = cfg.load_split(&train_dir)?;
    let n_classes = train_index.n_categories();
    let train_samples = train_index.load_all()?;
    let val_samples = match &cfg.val_dir {
        Some(d) => load_split_samples(&cfg, d)?,
        None => Vec::new(),
    };
    log::info!(
        "training `{}` on {} images ({} validation)",
        cfg.model.kind.as_str(),
        train_samples.len(),
        val_samples.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), n_classes, &mut rng)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume: args.ckpt.clone(),
        ..Default::default()
    };
    let run = train_model(&mut model, &cfg, &train_samples, &val_samples, &opts)?;
    println!(
        "finished: {} steps, checkpoint {}",
        run.steps,
        run.last_ckpt
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "(none)".into())
    );
    if let Some((epoch, report)) = run.evals.last() {
        println!("validation at epoch {epoch}:");
        print_report(report);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config, &args.common)?;
    let ck = Checkpoint::load(&args.ckpt)?;
    if ck.model_cfg != cfg.model {
        return Err(Error::config(
            "checkpoint model does not match the config; refusing to evaluate",
        ));
    }
    if args.oracle && cfg.model.kind != ModelKind::SamDet {
        return Err(Error::config("--oracle only applies to the `sam_det` pipeline"));
    }
    let val_dir = cfg
        .val_dir
        .clone()
        .ok_or_else(|| Error::config("evaluation requires `val_dir` in the config"))?;
    let samples = load_split_samples(&cfg, &val_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), ck.n_classes, &mut rng)?;
    ck.apply_to(&mut model)?;

    let mut flat: Vec<EvalInstance> = Vec::new();
    let mut include_box = true;
    for s in &samples {
        let result: PipelineResult = if args.oracle {
            run_sam_det(&model, &s.image, BoxSource::OracleGt(s))?
        } else {
            run_any(&model, &s.image)?
        };
        include_box = result.include_box_ap();
        flat.extend(rspk_core::metrics::eval_from_predictions(
            s.image_id,
            &result.predictions,
        ));
    }
    let gts = gt_from_samples(&samples);
    let report = ApReport::compute(&flat, &gts, include_box);
    print_report(&report);
    let f = std::fs::File::create(&args.out)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    check_device(&args.common)?;
    let ck = Checkpoint::load(&args.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed.unwrap_or(0));
    let mut model = Model::new(ck.model_cfg.clone(), ck.n_classes, &mut rng)?;
    ck.apply_to(&mut model)?;
    let image = ImageData::load_png(&args.image)?;
    let result = run_any(&model, &image)?;
    let image_id = 0u64;
    let records: Vec<PredictionRecord> = result
        .predictions
        .iter()
        .map(|p| PredictionRecord {
            image_id,
            category_id: p.category_id,
            score: p.score,
            bbox: p.bbox,
            mask: rle_encode(&p.mask),
        })
        .collect();
    write_predictions(&args.out, &records)?;
    println!("{} instances written to {}", records.len(), args.out.display());
    if args.overlay {
        let overlay_path = args.out.with_extension("overlay.png");
        render_overlay(&image, &result)?.save_png(&overlay_path)?;
        println!("overlay written to {}", overlay_path.display());
    }
    Ok(())
}

fn cmd_make_data(args: MakeDataArgs) -> Result<(), Error> {
    check_device(&args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let out = match args.out {
        Some(p) => p,
        None => match std::env::var_os("RSPK_CACHE") {
            Some(cache) => PathBuf::from(cache).join(format!("synth-{seed}-{}", args.images)),
            None => PathBuf::from("data").join(format!("synth-{seed}-{}", args.images)),
        },
    };
    let spec = SceneSpec {
        n_images: args.images,
        image_size: args.size,
        instances_per_image: args.instances,
        ..Default::default()
    };
    let samples = make_synthetic(&spec, seed);
    std::fs::create_dir_all(&out)?;
    let categories: Vec<String> = CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
    save_coco(&out, &samples, &categories)?;
    println!(
        "{} images ({} instances) written to {}",
        samples.len(),
        samples.iter().map(|s| s.n_instances()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn print_report(report: &ApReport) {
    println!("  metric      AP      AP@50   AP@75");
    match (report.ap_box, report.ap_box50, report.ap_box75) {
        (Some(ap), Some(ap50), Some(ap75)) => {
            println!("  box         {ap:.4}  {ap50:.4}  {ap75:.4}");
        }
        _ => println!("  box         (omitted: boxes copied from ground truth)"),
    }
    println!(
        "  mask        {:.4}  {:.4}  {:.4}",
        report.ap_mask, report.ap_mask50, report.ap_mask75
    );
    for cat in &report.per_category {
        println!(
            "    category {}: mask {:.4}/{:.4}/{:.4}",
            cat.category_id, cat.mask.ap, cat.mask.ap50, cat.mask.ap75
        );
    }
}

/// Tint each predicted instance and outline its box (diagnostic raster).
fn render_overlay(image: &ImageData, result: &PipelineResult) -> Result<ImageData, Error> {
    const TINTS: [[f64; 3]; 6] = [
        [1.0, 0.3, 0.3],
        [0.3, 1.0, 0.3],
        [0.3, 0.3, 1.0],
        [1.0, 1.0, 0.3],
        [1.0, 0.3, 1.0],
        [0.3, 1.0, 1.0],
    ];
    let mut out = image.clone();
    for (i, p) in result.predictions.iter().enumerate() {
        let tint = TINTS[i % TINTS.len()];
        for ((y, x), &on) in p.mask.indexed_iter() {
            if on {
                let px = out.get(y, x);
                let mixed = [
                    (px[0] as f64 * 0.5 + tint[0] * 127.5) as u8,
                    (px[1] as f64 * 0.5 + tint[1] * 127.5) as u8,
                    (px[2] as f64 * 0.5 + tint[2] * 127.5) as u8,
                ];
                out.set(y, x, mixed);
            }
        }
    }
    Ok(out)
}
