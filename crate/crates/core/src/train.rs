//! Deterministic training loop. Per-image randomness is derived from the
//! run seed and the global step, so two runs with the same seed produce
//! identical loss curves and a resumed run continues the same trajectory.
//! The frozen backbone makes per-image embeddings cacheable whenever
//! augmentation is off.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ckpt::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, AnnotatedSample};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::metrics::{eval_from_predictions, gt_from_samples, ApReport, EvalInstance};
use crate::model::Model;
use crate::nn::Module;
use crate::optim::{lr_at, AdamW};
use crate::tensor::Gradients;

#[derive(Default)]
pub struct TrainOptions {
    /// Where checkpoints and the metrics journal go (none = in-memory run).
    pub out_dir: Option<PathBuf>,
    /// Resume from this checkpoint (restores parameters, optimizer
    /// moments, and the epoch/step counters).
    pub resume: Option<PathBuf>,
    /// Hard cap on optimizer steps (tests and budget-bounded runs).
    pub max_steps: Option<usize>,
    /// Stop once validation mask AP@50 reaches this value.
    pub target_mask_ap50: Option<f64>,
    /// Suppress per-epoch progress lines.
    pub quiet: bool,
}

pub struct TrainRun {
    /// Optimizer steps completed over the whole run (including resumed).
    pub steps: usize,
    pub epochs_run: usize,
    /// Batch-mean loss per optimizer step of this invocation.
    pub losses: Vec<f64>,
    /// (epoch, validation report) at each evaluation point.
    pub evals: Vec<(usize, ApReport)>,
    pub last_ckpt: Option<PathBuf>,
}

impl TrainRun {
    pub fn best_mask_ap50(&self) -> Option<f64> {
        self.evals
            .iter()
            .map(|(_, r)| r.ap_mask50)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Train `model` on `train`, evaluating on `val` at the configured cadence.
pub fn train_model(
    model: &mut Model,
    cfg: &RunConfig,
    train: &[AnnotatedSample],
    val: &[AnnotatedSample],
    opts: &TrainOptions,
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.optim.clone())?;
    let mut named = Vec::new();
    model.collect_params("", &mut named);

    let (mut step, mut start_epoch) = (0usize, 0usize);
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        ck.apply_to(model)?;
        ck.restore_optimizer(&mut opt);
        step = ck.step;
        start_epoch = ck.epoch + 1;
    }

    let n = train.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;

    // frozen backbone → embeddings are constant unless augmentation
    // changes the pixels
    let train_cache: Option<Vec<EncoderOutput>> = if cfg.augment {
        None
    } else {
        Some(train.iter().map(|s| model.embed(&s.image)).collect::<Result<_>>()?)
    };
    let val_cache: Vec<EncoderOutput> =
        val.iter().map(|s| model.embed(&s.image)).collect::<Result<_>>()?;

    let mut journal = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::runtime(format!("create {}: {e}", dir.display())))?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("journal.jsonl"))
                    .map_err(|e| Error::runtime(format!("open journal: {e}")))?,
            )
        }
        None => None,
    };

    let mut run = TrainRun {
        steps: step,
        epochs_run: 0,
        losses: Vec::new(),
        evals: Vec::new(),
        last_ckpt: None,
    };
    let mut stop = false;

    'epochs: for epoch in start_epoch..cfg.epochs {
        // deterministic per-epoch shuffle
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(0xE0 + epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch) {
            let step_seed = step as u64;
            let results: Vec<(Gradients, f64)> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| -> Result<(Gradients, f64)> {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(1 + step_seed * batch as u64 + slot as u64);
                    let report = match (&train_cache, cfg.augment) {
                        (Some(cache), _) => model.loss(&cache[idx], &train[idx], &mut rng)?,
                        (None, _) => {
                            let aug = augment(&train[idx], &mut rng, (0.5, 2.0));
                            let enc = model.embed(&aug.image)?;
                            model.loss(&enc, &aug, &mut rng)?
                        }
                    };
                    let total = report.total_value();
                    Ok((report.total.backward(), total))
                })
                .collect::<Result<_>>()?;

            let mean_loss =
                results.iter().map(|(_, l)| l).sum::<f64>() / results.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite loss at step {step}; training aborted, last checkpoint retained"
                )));
            }
            let mut grads = Gradients::empty();
            for (g, _) in results {
                grads.accumulate(g);
            }
            grads.scale_all(1.0 / chunk.len() as f64);
            let lr = lr_at(step, total_steps, cfg.optim.warmup_steps, cfg.optim.lr);
            opt.step(&named, &grads, lr);
            model.trained = true;
            step += 1;
            epoch_loss += mean_loss;
            epoch_batches += 1;
            run.losses.push(mean_loss);
            if let Some(j) = journal.as_mut() {
                let line = serde_json::json!({
                    "step": step, "epoch": epoch, "lr": lr, "loss": mean_loss,
                });
                writeln!(j, "{line}").map_err(|e| Error::runtime(format!("journal: {e}")))?;
            }
            if opts.max_steps.is_some_and(|m| step >= m) {
                stop = true;
            }
            if stop {
                break;
            }
        }
        run.epochs_run = epoch - start_epoch + 1;
        run.steps = step;

        let due_eval = !val.is_empty()
            && (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0
                || epoch + 1 == cfg.epochs
                || stop);
        let mut ap_note = String::new();
        if due_eval {
            let report = evaluate_cached(model, val, &val_cache)?;
            ap_note = format!(", mask AP@50 {:.3}", report.ap_mask50);
            if let Some(j) = journal.as_mut() {
                let line = serde_json::json!({
                    "epoch": epoch,
                    "eval": {
                        "mask_ap": report.ap_mask, "mask_ap50": report.ap_mask50,
                        "mask_ap75": report.ap_mask75,
                        "box_ap": report.ap_box, "box_ap50": report.ap_box50,
                    },
                });
                writeln!(j, "{line}").map_err(|e| Error::runtime(format!("journal: {e}")))?;
            }
            let reached = opts
                .target_mask_ap50
                .is_some_and(|t| report.ap_mask50 >= t);
            run.evals.push((epoch, report));
            if reached {
                stop = true;
            }
        }
        if !opts.quiet {
            eprintln!(
                "epoch {epoch}: mean loss {:.4}{ap_note}",
                epoch_loss / epoch_batches.max(1) as f64
            );
        }

        let due_ckpt = opts.out_dir.is_some()
            && (cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0
                || epoch + 1 == cfg.epochs
                || stop);
        if due_ckpt {
            let dir = opts.out_dir.as_ref().unwrap();
            let path = dir.join("last.ckpt");
            Checkpoint::from_model(model, Some(&opt), step, epoch).save(&path)?;
            run.last_ckpt = Some(path);
        }
        if stop {
            break 'epochs;
        }
    }
    Ok(run)
}

/// Validation AP with precomputed embeddings.
fn evaluate_cached(
    model: &Model,
    samples: &[AnnotatedSample],
    cache: &[EncoderOutput],
) -> Result<ApReport> {
    let preds: Vec<Vec<EvalInstance>> = samples
        .par_iter()
        .zip(cache)
        .map(|(s, enc)| {
            model
                .predict_from(enc, &s.image)
                .map(|p| eval_from_predictions(s.image_id, &p))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<EvalInstance> = preds.into_iter().flatten().collect();
    let gts = gt_from_samples(samples);
    Ok(ApReport::compute(&flat, &gts, true))
}

/// Evaluate a model on a dataset split (embeddings computed on the fly).
pub fn evaluate(model: &Model, samples: &[AnnotatedSample]) -> Result<ApReport> {
    let preds: Vec<Vec<EvalInstance>> = samples
        .par_iter()
        .map(|s| {
            let enc = model.embed(&s.image)?;
            model
                .predict_from(&enc, &s.image)
                .map(|p| eval_from_predictions(s.image_id, &p))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<EvalInstance> = preds.into_iter().flatten().collect();
    let gts = gt_from_samples(samples);
    Ok(ApReport::compute(&flat, &gts, true))
}

/// Evaluate predictions produced outside the standard `predict` path
/// (e.g. the box-oracle pipeline): mask metrics only.
pub fn evaluate_mask_only(
    per_image: &[(u64, Vec<crate::data::InstancePrediction>)],
    samples: &[AnnotatedSample],
) -> ApReport {
    let flat: Vec<EvalInstance> = per_image
        .iter()
        .flat_map(|(id, p)| eval_from_predictions(*id, p))
        .collect();
    let gts = gt_from_samples(samples);
    ApReport::compute(&flat, &gts, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, ModelKind};
    use crate::synth::{make_synthetic, SceneSpec};

    fn tiny_setup(kind: ModelKind) -> (Model, Vec<AnnotatedSample>, RunConfig) {
        let spec = SceneSpec {
            n_images: 4,
            image_size: 64,
            instances_per_image: 2,
            size_range: (10.0, 18.0),
            noise: 0.02,
        };
        let samples = make_synthetic(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(ModelConfig::with_kind(kind), 3, &mut rng).unwrap();
        let mut cfg = RunConfig::with_kind(kind);
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.eval_every = 0;
        (model, samples, cfg)
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let opts =
            TrainOptions { max_steps: Some(4), quiet: true, ..Default::default() };
        let (mut m1, samples, mut cfg) = tiny_setup(ModelKind::RsprompterQuery);
        cfg.epochs = 2;
        let r1 = train_model(&mut m1, &cfg, &samples, &[], &opts).unwrap();
        let (mut m2, samples2, mut cfg2) = tiny_setup(ModelKind::RsprompterQuery);
        cfg2.epochs = 2;
        let r2 = train_model(&mut m2, &cfg2, &samples2, &[], &opts).unwrap();
        assert_eq!(r1.losses.len(), r2.losses.len());
        for (a, b) in r1.losses.iter().zip(&r2.losses) {
            assert_eq!(a.to_bits(), b.to_bits(), "curves diverged: {a} vs {b}");
        }
    }

    #[test]
    fn encoder_stays_frozen_through_training() {
        let (mut model, samples, cfg) = tiny_setup(ModelKind::RsprompterQuery);
        let before: Vec<_> = model
            .encoder
            .named_params()
            .iter()
            .map(|(n, p)| (n.clone(), (*p.value()).clone()))
            .collect();
        let opts =
            TrainOptions { max_steps: Some(2), quiet: true, ..Default::default() };
        train_model(&mut model, &cfg, &samples, &[], &opts).unwrap();
        for (name, old) in before {
            let now = model
                .encoder
                .named_params()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1;
            assert!(
                old.iter().zip(now.value().iter()).all(|(a, b)| a == b),
                "encoder tensor `{name}` moved"
            );
        }
    }

    #[test]
    fn training_reduces_loss_on_a_tiny_set() {
        let (mut model, samples, mut cfg) = tiny_setup(ModelKind::RsprompterQuery);
        cfg.epochs = 6;
        cfg.optim.warmup_steps = 4;
        cfg.optim.lr = 3e-4;
        let opts = TrainOptions { quiet: true, ..Default::default() };
        let run = train_model(&mut model, &cfg, &samples, &[], &opts).unwrap();
        let head: f64 =
            run.losses.iter().take(2).sum::<f64>() / 2.0;
        let tail: f64 =
            run.losses.iter().rev().take(2).sum::<f64>() / 2.0;
        assert!(
            tail < head,
            "loss did not go down: first {head:.4}, last {tail:.4}"
        );
        assert!(model.trained);
    }

    #[test]
    fn nan_loss_aborts_and_keeps_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, samples, cfg) = tiny_setup(ModelKind::RsprompterQuery);
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(1),
            quiet: true,
            ..Default::default()
        };
        train_model(&mut model, &cfg, &samples, &[], &opts).unwrap();
        let ckpt = dir.path().join("last.ckpt");
        assert!(ckpt.is_file());
        let saved = std::fs::read(&ckpt).unwrap();

        // poison one parameter; the next run must abort without touching
        // the checkpoint on disk
        let mut named = Vec::new();
        model.collect_params("", &mut named);
        let victim = &named.iter().find(|(n, _)| n.starts_with("prompter")).unwrap().1;
        let mut bad = (*victim.value()).clone();
        *bad.iter_mut().next().unwrap() = f64::NAN;
        victim.set(bad);
        let err = train_model(&mut model, &cfg, &samples, &[], &opts);
        assert!(err.is_err());
        assert_eq!(saved, std::fs::read(&ckpt).unwrap(), "checkpoint was clobbered");
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, samples, mut cfg) = tiny_setup(ModelKind::RsprompterQuery);
        cfg.epochs = 2;
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(2),
            quiet: true,
            ..Default::default()
        };
        let first = train_model(&mut model, &cfg, &samples, &[], &opts).unwrap();
        assert_eq!(first.steps, 2);
        let (mut fresh, _, _) = tiny_setup(ModelKind::RsprompterQuery);
        let resume_opts = TrainOptions {
            resume: Some(dir.path().join("last.ckpt")),
            max_steps: Some(4),
            quiet: true,
            ..Default::default()
        };
        let second = train_model(&mut fresh, &cfg, &samples, &[], &resume_opts).unwrap();
        assert!(second.steps > first.steps);
        assert!(fresh.trained);
    }

    #[test]
    fn journal_lines_parse_as_json() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, samples, cfg) = tiny_setup(ModelKind::RsprompterQuery);
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(2),
            quiet: true,
            ..Default::default()
        };
        train_model(&mut model, &cfg, &samples, &[], &opts).unwrap();
        let text = std::fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(!lines.is_empty());
        for l in lines {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v.get("step").is_some() || v.get("eval").is_some());
        }
    }
}
