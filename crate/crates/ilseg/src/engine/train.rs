//! Per-stage training: teacher loading and freezing, classifier expansion,
//! the optimization loop, structured logging, and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::Digest;

use crate::engine::config::{config_hash, StageConfig};
use crate::engine::data::{check_labeled_classes, load_split, open_manifest, AccessLog};
use crate::error::{Error, Result};
use crate::labelspace::{LabelSpace, LogitsMap};
use crate::losses::total_loss;
use crate::metrics::{argmax_labels, dice_coefficient};
use crate::model::{
    freeze_model, load_checkpoint, save_checkpoint, sha256_hex_of_file, ArchConfig,
    CheckpointMeta, ModelGrads, SegmentationModel, Teacher, CHECKPOINT_VERSION,
};
use crate::phantom::{Split, VolumeRecord};

/// Polynomial learning-rate decay toward zero over the stage.
pub fn poly_lr(lr0: f64, iter: usize, total_iters: usize, power: f64) -> f64 {
    let frac = 1.0 - iter as f64 / total_iters.max(1) as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// Momentum SGD over named parameter blocks.
struct MomentumSgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl MomentumSgd {
    fn new(momentum: f64) -> Self {
        MomentumSgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut SegmentationModel, grads: &ModelGrads, lr: f64) {
        model.update_params(&mut |name, slot| {
            let grad = grads
                .get(name)
                .expect("backward produces a gradient for every parameter");
            let g = grad.as_slice().expect("standard layout");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; slot.len()]);
            for i in 0..slot.len() {
                v[i] = self.momentum * v[i] + g[i];
                slot[i] -= lr * v[i];
            }
        });
    }
}

/// One line of the structured training log.
#[derive(serde::Serialize)]
struct EpochRecord<'a> {
    event: &'a str,
    strategy: &'a str,
    stage: usize,
    epoch: usize,
    lr: f64,
    loss_total: f64,
    loss_seg_ce: f64,
    loss_seg_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_corr: Option<f64>,
    /// Voxels where a large corrective weight met a negative target logit.
    #[serde(skip_serializing_if = "Option::is_none")]
    corr_neg_logit_large_w: Option<usize>,
    /// Mean total loss of every batch, in batch order.
    loss_batches: Vec<f64>,
    val_dice: BTreeMap<String, f64>,
}

/// Result of one trained stage.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub checkpoint_hash: String,
    pub final_epoch_loss: f64,
    pub log_path: PathBuf,
    /// Every data file opened during this stage (annotation-access audit).
    pub accessed_paths: Vec<PathBuf>,
}

fn write_marker(stage_dir: &Path, hash: &str) -> Result<()> {
    let marker = stage_dir.join("stage.done");
    let tmp = stage_dir.join("stage.done.tmp");
    std::fs::write(&tmp, hash).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &marker).map_err(|e| Error::io(&marker, e))?;
    Ok(())
}

/// Reads the completion marker of a stage directory, if present.
pub fn read_marker(stage_dir: &Path) -> Option<String> {
    std::fs::read_to_string(stage_dir.join("stage.done")).ok()
}

/// Mean validation Dice per current-stage class.
fn validation_dice(
    model: &SegmentationModel,
    cases: &[VolumeRecord],
    classes: &[u16],
) -> Result<BTreeMap<String, f64>> {
    let per_case: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<f64>> {
            let pred = argmax_labels(&model.predict(&case.image_f64())?);
            classes
                .iter()
                .map(|&c| {
                    let pm = pred.mapv(|v| v == c);
                    let gm = case.labels.values().mapv(|v| v == c);
                    dice_coefficient(&pm, &gm)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (k, &c) in classes.iter().enumerate() {
        let mean = if per_case.is_empty() {
            f64::NAN
        } else {
            per_case.iter().map(|v| v[k]).sum::<f64>() / per_case.len() as f64
        };
        out.insert(c.to_string(), mean);
    }
    Ok(out)
}

/// Trains one stage: loads the previous checkpoint (if any) as a frozen
/// teacher, expands the classifier for the new classes, optimizes the
/// strategy's total loss with polynomial learning-rate decay, and writes the
/// checkpoint plus an atomic completion marker into `stage_dir`.
pub fn train_stage(
    arch: &ArchConfig,
    space: &LabelSpace,
    config: &StageConfig,
    prev_checkpoint: Option<&Path>,
    stage_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let stage = config.stage;
    if (stage == 0) != prev_checkpoint.is_none() {
        return Err(Error::Config(format!(
            "stage {stage} requires {} previous checkpoint",
            if stage == 0 { "no" } else { "a" }
        )));
    }
    if config.new_classes != space.stage_classes(stage) {
        return Err(Error::Config(format!(
            "stage {stage} classes {:?} do not match the plan label space {:?}",
            config.new_classes,
            space.stage_classes(stage)
        )));
    }
    std::fs::create_dir_all(stage_dir).map_err(|e| Error::io(stage_dir, e))?;

    let mut access = AccessLog::default();
    let manifest = open_manifest(&config.manifest, &mut access)?;
    check_labeled_classes(&manifest, &config.new_classes)?;
    let train_cases = load_split(&config.manifest, &manifest, Split::Train, &mut access)?;
    let val_cases = load_split(&config.manifest, &manifest, Split::Val, &mut access)?;
    if train_cases.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} has no training cases",
            manifest.dataset_id
        )));
    }

    // Build the student; freeze the teacher.
    let (mut model, teacher, parent_hash): (SegmentationModel, Option<Teacher>, Option<String>) =
        if stage == 0 {
            (
                SegmentationModel::new(arch.clone(), space.channels_at(0))?,
                None,
                None,
            )
        } else {
            let prev_path = prev_checkpoint.unwrap();
            let (prev_model, prev_meta) = load_checkpoint(prev_path)?;
            if prev_meta.stage + 1 != stage {
                return Err(Error::Config(format!(
                    "checkpoint at stage {} cannot seed stage {stage}",
                    prev_meta.stage
                )));
            }
            if prev_meta.label_space.channels_at(prev_meta.stage)
                != space.channels_at(stage - 1)
            {
                return Err(Error::Config(
                    "label space of the previous checkpoint does not match the plan".into(),
                ));
            }
            let mut student = prev_model.clone();
            student.expand_classifier(&config.new_classes)?;
            let teacher = freeze_model(prev_model);
            let hash = sha256_hex_of_file(prev_path)?;
            (student, Some(teacher), Some(hash))
        };

    // The teacher is frozen and inputs are fixed, so its logits per training
    // case are computed once. Fine-tuning ignores the teacher entirely.
    let teacher_logits: Vec<Option<LogitsMap>> = if config.strategy.use_kd() && stage > 0 {
        let teacher = teacher.as_ref().unwrap();
        train_cases
            .par_iter()
            .map(|case| teacher.predict(&case.image_f64()).map(Some))
            .collect::<Result<_>>()?
    } else {
        train_cases.iter().map(|_| None).collect()
    };

    let log_path = stage_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let n_train = train_cases.len();
    let batches_per_epoch = n_train.div_ceil(config.batch_size);
    let total_iters = config.epochs * batches_per_epoch;
    let mut optimizer = MomentumSgd::new(config.momentum);
    let mut iter = 0usize;
    let mut final_epoch_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut epoch_rng = {
            let mut hasher = sha2::Sha256::new();
            hasher.update(config.seed.to_le_bytes());
            hasher.update((stage as u64).to_le_bytes());
            hasher.update((epoch as u64).to_le_bytes());
            let mut key = [0u8; 32];
            key.copy_from_slice(&hasher.finalize());
            ChaCha8Rng::from_seed(key)
        };
        order.shuffle(&mut epoch_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut kd_seen = false;
        let mut corr_seen = false;
        let mut pathology = 0usize;
        let mut loss_batches = Vec::with_capacity(batches_per_epoch);
        let mut epoch_lr = poly_lr(config.learning_rate, iter, total_iters, config.poly_power);

        for batch in order.chunks(config.batch_size) {
            let lr = poly_lr(config.learning_rate, iter, total_iters, config.poly_power);
            epoch_lr = lr;
            let results: Vec<(crate::losses::TotalLoss, ModelGrads)> = batch
                .par_iter()
                .map(|&i| -> Result<(crate::losses::TotalLoss, ModelGrads)> {
                    let case = &train_cases[i];
                    let (logits, cache) = model.forward_train(&case.image_f64())?;
                    let out = total_loss(
                        &logits,
                        teacher_logits[i].as_ref(),
                        &case.labels,
                        space,
                        stage,
                        &config.loss_weights,
                        config.strategy,
                    )?;
                    let grads = model.backward(&cache, &out.grad);
                    Ok((out, grads))
                })
                .collect::<Result<_>>()?;

            let mut acc = ModelGrads::default();
            let mut batch_loss = 0.0;
            for (out, grads) in &results {
                if !out.total().is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at stage {stage} epoch {epoch}"
                    )));
                }
                acc.accumulate(grads);
                let b = &out.breakdown;
                batch_loss += b.total;
                sums.0 += b.total;
                sums.1 += b.seg_ce;
                sums.2 += b.seg_dice;
                if let Some(kd) = b.kd {
                    sums.3 += kd;
                    kd_seen = true;
                }
                if let Some(corr) = b.corr {
                    sums.4 += corr;
                    corr_seen = true;
                }
                pathology += b.corr_neg_logit_large_w.unwrap_or(0);
            }
            acc.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut model, &acc, lr);
            loss_batches.push(batch_loss / batch.len() as f64);
            iter += 1;
        }

        let inv_n = 1.0 / n_train as f64;
        let val_dice = validation_dice(&model, &val_cases, &config.new_classes)?;
        final_epoch_loss = sums.0 * inv_n;
        let record = EpochRecord {
            event: "epoch",
            strategy: config.strategy.name(),
            stage,
            epoch,
            lr: epoch_lr,
            loss_total: sums.0 * inv_n,
            loss_seg_ce: sums.1 * inv_n,
            loss_seg_dice: sums.2 * inv_n,
            loss_kd: kd_seen.then_some(sums.3 * inv_n),
            loss_corr: corr_seen.then_some(sums.4 * inv_n),
            corr_neg_logit_large_w: corr_seen.then_some(pathology),
            loss_batches,
            val_dice: val_dice.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let val_summary: Vec<String> = val_dice
            .iter()
            .map(|(c, d)| format!("{c}:{d:.3}"))
            .collect();
        println!(
            "[{} stage {stage}] epoch {epoch:>3} loss {:.4} val dice {}",
            config.strategy,
            sums.0 * inv_n,
            val_summary.join(" ")
        );
    }

    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        stage,
        label_space: space.clone(),
        arch: arch.clone(),
        config_hash: config_hash(arch, config),
        parent_hash,
        epochs_trained: config.epochs,
        seed: config.seed,
    };
    let checkpoint_path = stage_dir.join("checkpoint.ckpt");
    save_checkpoint(&checkpoint_path, &model, &meta)?;
    let checkpoint_hash = sha256_hex_of_file(&checkpoint_path)?;
    write_marker(stage_dir, &checkpoint_hash)?;

    Ok(TrainOutcome {
        checkpoint_path,
        checkpoint_hash,
        final_epoch_loss,
        log_path,
        accessed_paths: access.paths().to_vec(),
    })
}
