//! Curriculum execution: runs every strategy through every stage, evaluates
//! all classes seen so far on held-out data of every prior dataset, verifies
//! the checkpoint chain, and writes the stage-retention tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::engine::config::{ExperimentPlan, JointConfig};
use crate::engine::data::{load_split, open_manifest, AccessLog};
use crate::engine::train::{read_marker, train_stage, TrainOutcome};
use crate::engine::Strategy;
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::metrics::{evaluate_model, MetricRow, MetricsReport};
use crate::model::{
    load_checkpoint, read_checkpoint_meta, sha256_hex_of_file, SegmentationModel,
};
use crate::phantom::Split;

/// One strategy's pass through the curriculum.
#[derive(Debug)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<MetricsReport>,
    /// Stages actually trained in this invocation (false = resumed).
    pub trained: Vec<bool>,
    /// Per-stage data access audit for stages trained in this invocation.
    pub outcomes: Vec<Option<TrainOutcome>>,
    pub retention_path: PathBuf,
}

/// Reference run on the fully labeled joint dataset.
#[derive(Debug)]
pub struct JointRun {
    pub checkpoint: PathBuf,
    pub report: MetricsReport,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub output_dir: PathBuf,
    pub per_strategy: BTreeMap<String, StrategyRun>,
    pub joint: Option<JointRun>,
}

impl PlanOutcome {
    /// Mean Dice of `class_id` in the final-stage report of `strategy`.
    pub fn final_dice(&self, strategy: Strategy, class_id: u16) -> Option<f64> {
        self.per_strategy
            .get(strategy.name())?
            .reports
            .last()?
            .mean_dice_for_class(class_id)
    }
}

/// Looks up the mean Dice for one (dataset, class) row.
pub fn dice_of(report: &MetricsReport, dataset: &str, class_id: u16) -> Option<f64> {
    report
        .rows
        .iter()
        .find(|r| r.dataset == dataset && r.class_id == class_id)
        .map(|r| r.stats.dice_mean)
}

/// Evaluates a model on the test splits of every dataset up to `stage`.
fn evaluate_through_stage(
    model: &SegmentationModel,
    plan: &ExperimentPlan,
    stage: usize,
    strategy: Strategy,
) -> Result<MetricsReport> {
    let mut rows: Vec<MetricRow> = Vec::new();
    for s in 0..=stage {
        let mut log = AccessLog::default();
        let manifest_path = &plan.stages[s].manifest;
        let manifest = open_manifest(manifest_path, &mut log)?;
        let cases = load_split(manifest_path, &manifest, Split::Test, &mut log)?;
        let classes = plan.stages[s].new_classes.clone();
        rows.extend(evaluate_model(model, &manifest.dataset_id, &cases, &classes)?);
    }
    Ok(MetricsReport {
        strategy: strategy.name().to_string(),
        stage,
        rows,
    })
}

fn write_report_files(dir: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    let json_path = dir.join("metrics.json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let tsv_path = dir.join("metrics.tsv");
    std::fs::write(&tsv_path, report.to_tsv()).map_err(|e| Error::io(&tsv_path, e))?;
    Ok(())
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) if !x.is_nan() => format!("{x:.6}"),
        Some(_) => "nan".into(),
        None => "-".into(),
    }
}

/// Stage-by-stage Dice of every class on its own dataset (the retention
/// table layout: one row per class, one column per stage).
fn write_retention_table(
    path: &Path,
    plan: &ExperimentPlan,
    dataset_ids: &[String],
    reports: &[MetricsReport],
) -> Result<()> {
    let n_stages = plan.stages.len();
    let mut out = String::from("class\tintroduced_stage");
    for t in 0..n_stages {
        out.push_str(&format!("\tdice_stage_{t}"));
    }
    out.push('\n');
    for (s, stage) in plan.stages.iter().enumerate() {
        for &class in &stage.new_classes {
            out.push_str(&format!("{class}\t{s}"));
            for (t, report) in reports.iter().enumerate() {
                let cell = if t < s {
                    None
                } else {
                    dice_of(report, &dataset_ids[s], class)
                };
                out.push_str(&format!("\t{}", fmt_cell(cell)));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Verifies that each stage checkpoint records the hash of its parent.
pub fn verify_checkpoint_chain(checkpoints: &[PathBuf]) -> Result<()> {
    for t in 1..checkpoints.len() {
        let meta = read_checkpoint_meta(&checkpoints[t])?;
        let parent = sha256_hex_of_file(&checkpoints[t - 1])?;
        if meta.parent_hash.as_deref() != Some(parent.as_str()) {
            return Err(Error::Data(format!(
                "checkpoint chain broken at stage {t}: parent hash mismatch"
            )));
        }
    }
    Ok(())
}

fn run_strategy(
    plan: &ExperimentPlan,
    space: &LabelSpace,
    strategy: Strategy,
    force: bool,
) -> Result<StrategyRun> {
    let strategy_dir = plan.output_dir.join(strategy.name());
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut trained = Vec::new();
    let mut outcomes = Vec::new();
    let mut dataset_ids: Vec<String> = Vec::new();
    let mut prev: Option<PathBuf> = None;

    for t in 0..plan.stages.len() {
        // Datasets are resolved stage by stage so a failure leaves every
        // completed stage resumable.
        {
            let mut log = AccessLog::default();
            dataset_ids.push(open_manifest(&plan.stages[t].manifest, &mut log)?.dataset_id);
        }
        let stage_dir = strategy_dir.join(format!("stage_{t}"));
        let config = plan.stage_config(t, strategy)?;
        let checkpoint = stage_dir.join("checkpoint.ckpt");

        let resume = !force
            && checkpoint.is_file()
            && match read_marker(&stage_dir) {
                Some(hash) => {
                    if sha256_hex_of_file(&checkpoint)? == hash {
                        true
                    } else {
                        return Err(Error::Data(format!(
                            "stage {t} marker does not match its checkpoint; rerun with --force"
                        )));
                    }
                }
                None => false,
            };

        if resume {
            println!("[{strategy} stage {t}] resuming from completed checkpoint");
            trained.push(false);
            outcomes.push(None);
        } else {
            let outcome = train_stage(&plan.arch, space, &config, prev.as_deref(), &stage_dir)?;
            trained.push(true);
            outcomes.push(Some(outcome));
        }

        let (model, _) = load_checkpoint(&checkpoint)?;
        let report = evaluate_through_stage(&model, plan, t, strategy)?;
        write_report_files(&stage_dir, &report)?;
        reports.push(report);
        checkpoints.push(checkpoint.clone());
        prev = Some(checkpoint);
    }

    verify_checkpoint_chain(&checkpoints)?;
    let retention_path = strategy_dir.join("retention.tsv");
    write_retention_table(&retention_path, plan, &dataset_ids, &reports)?;

    Ok(StrategyRun {
        strategy,
        checkpoints,
        reports,
        trained,
        outcomes,
        retention_path,
    })
}

fn run_joint(plan: &ExperimentPlan, joint: &JointConfig) -> Result<JointRun> {
    let joint_dir = plan.output_dir.join("joint");
    let space = LabelSpace::new(vec![joint.classes.clone()])?;
    let config = crate::engine::config::StageConfig {
        stage: 0,
        strategy: Strategy::Ft,
        new_classes: joint.classes.clone(),
        manifest: joint.manifest.clone(),
        epochs: joint.epochs,
        batch_size: joint.batch_size,
        learning_rate: joint.learning_rate,
        poly_power: joint.poly_power,
        momentum: joint.momentum,
        seed: joint.seed,
        loss_weights: Default::default(),
    };
    let checkpoint = joint_dir.join("checkpoint.ckpt");
    let resume = checkpoint.is_file()
        && read_marker(&joint_dir)
            .map(|h| sha256_hex_of_file(&checkpoint).map(|f| f == h).unwrap_or(false))
            .unwrap_or(false);
    if !resume {
        train_stage(&plan.arch, &space, &config, None, &joint_dir)?;
    }
    let (model, _) = load_checkpoint(&checkpoint)?;

    // Evaluate the reference model on every stage dataset plus its own
    // held-out split, so rows are directly comparable to the staged runs.
    let mut rows: Vec<MetricRow> = Vec::new();
    for stage in &plan.stages {
        let mut log = AccessLog::default();
        let manifest = open_manifest(&stage.manifest, &mut log)?;
        let cases = load_split(&stage.manifest, &manifest, Split::Test, &mut log)?;
        rows.extend(evaluate_model(
            &model,
            &manifest.dataset_id,
            &cases,
            &stage.new_classes,
        )?);
    }
    let mut log = AccessLog::default();
    let manifest = open_manifest(&joint.manifest, &mut log)?;
    let cases = load_split(&joint.manifest, &manifest, Split::Test, &mut log)?;
    rows.extend(evaluate_model(
        &model,
        &manifest.dataset_id,
        &cases,
        &joint.classes,
    )?);

    let report = MetricsReport {
        strategy: "joint".into(),
        stage: plan.stages.len().saturating_sub(1),
        rows,
    };
    write_report_files(&joint_dir, &report)?;
    Ok(JointRun {
        checkpoint,
        report,
    })
}

/// Executes the full curriculum for every strategy in the plan. Completed
/// stages (atomic marker + matching checkpoint hash) are skipped unless
/// `force` is set.
pub fn run_plan(plan: &ExperimentPlan, force: bool) -> Result<PlanOutcome> {
    plan.validate()?;
    let space = plan.label_space()?;
    std::fs::create_dir_all(&plan.output_dir).map_err(|e| Error::io(&plan.output_dir, e))?;
    let plan_json = serde_json::to_vec_pretty(plan).map_err(|e| Error::Serde(e.to_string()))?;
    let plan_path = plan.output_dir.join("plan.json");
    std::fs::write(&plan_path, plan_json).map_err(|e| Error::io(&plan_path, e))?;

    let mut per_strategy = BTreeMap::new();
    for &strategy in &plan.strategies {
        let run = run_strategy(plan, &space, strategy, force)?;
        per_strategy.insert(strategy.name().to_string(), run);
    }
    let joint = match &plan.joint {
        Some(cfg) => Some(run_joint(plan, cfg)?),
        None => None,
    };
    Ok(PlanOutcome {
        output_dir: plan.output_dir.clone(),
        per_strategy,
        joint,
    })
}
