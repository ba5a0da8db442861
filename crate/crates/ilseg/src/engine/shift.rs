//! Distribution-shift study: repeats a fixed two-stage curriculum while the
//! second stage's dataset is regenerated at increasing shift levels, and
//! reports old-class retention per strategy and shift level.
//!
//! Retention is exploratory evidence for the hypothesis that distribution
//! consistency across stages is what lets distillation retain old knowledge;
//! the hard guarantees are determinism and end-to-end execution, not the
//! direction of a noisy difference.

use std::path::Path;

use crate::engine::config::{ExperimentPlan, PlanStage, ShiftStudyConfig, StudyStage};
use crate::engine::plan::{dice_of, run_plan};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::phantom::{generate_stage_dataset, write_dataset, PhantomSpec, SplitCounts};

/// One row of the retention-versus-shift table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShiftRow {
    pub delta: f64,
    pub strategy: String,
    pub class_id: u16,
    #[serde(with = "crate::metrics::nan_as_null")]
    pub dice_after_stage0: f64,
    #[serde(with = "crate::metrics::nan_as_null")]
    pub dice_after_stage1: f64,
    /// `dice_after_stage1 / dice_after_stage0`, NaN when the base is zero.
    #[serde(with = "crate::metrics::nan_as_null")]
    pub retention: f64,
}

/// Full study result.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShiftStudyTable {
    pub deltas: Vec<f64>,
    pub strategies: Vec<String>,
    pub rows: Vec<ShiftRow>,
}

impl ShiftStudyTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "delta\tstrategy\tclass\tdice_after_stage0\tdice_after_stage1\tretention\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:.4}\t{}\t{}\t{}\t{}\t{}\n",
                r.delta,
                r.strategy,
                r.class_id,
                fmt(r.dice_after_stage0),
                fmt(r.dice_after_stage1),
                fmt(r.retention)
            ));
        }
        out
    }

    /// Mean retention over stage-0 classes for one (delta, strategy) cell.
    pub fn mean_retention(&self, delta: f64, strategy: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.delta == delta && r.strategy == strategy && !r.retention.is_nan())
            .map(|r| r.retention)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

fn study_stage_to_plan_stage(
    stage: &StudyStage,
    manifest: std::path::PathBuf,
) -> PlanStage {
    PlanStage {
        new_classes: stage.new_classes.clone(),
        manifest,
        epochs: stage.epochs,
        batch_size: stage.batch_size,
        learning_rate: stage.learning_rate,
        poly_power: stage.poly_power,
        momentum: stage.momentum,
        seed: stage.seed,
        loss_weights: LossWeights::default(),
    }
}

/// Runs the study: for each shift level, stage-0 data is generated unshifted,
/// stage-1 data is generated at that level (distinct anatomy seed), the
/// two-stage plan runs for every strategy, and old-class retention is
/// tabulated. Everything is seeded, so reruns regenerate identical bytes.
pub fn run_shift_study(config: &ShiftStudyConfig, force: bool) -> Result<ShiftStudyTable> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rows = Vec::new();
    for (di, &delta) in config.deltas.iter().enumerate() {
        let delta_dir = out.join(format!("delta_{di}"));
        let data_dir = delta_dir.join("data");

        let stage0_spec = PhantomSpec {
            shift: 0.0,
            ..config.phantom.clone()
        };
        let stage1_spec = PhantomSpec {
            shift: delta,
            seed: config.phantom.seed + 1,
            ..config.phantom.clone()
        };
        let s0_counts = SplitCounts {
            train: config.stage0.train,
            val: config.stage0.val,
            test: config.stage0.test,
        };
        let s1_counts = SplitCounts {
            train: config.stage1.train,
            val: config.stage1.val,
            test: config.stage1.test,
        };
        let s0_cases =
            generate_stage_dataset(&stage0_spec, "stage0", &config.stage0.new_classes, s0_counts)?;
        write_dataset(&data_dir.join("stage0"), &stage0_spec, "stage0", &s0_cases)?;
        let s1_cases =
            generate_stage_dataset(&stage1_spec, "stage1", &config.stage1.new_classes, s1_counts)?;
        write_dataset(&data_dir.join("stage1"), &stage1_spec, "stage1", &s1_cases)?;

        let plan = ExperimentPlan {
            schema_version: 1,
            output_dir: delta_dir.join("runs"),
            strategies: config.strategies.clone(),
            arch: config.arch.clone(),
            stages: vec![
                study_stage_to_plan_stage(
                    &config.stage0,
                    data_dir.join("stage0").join("manifest.json"),
                ),
                study_stage_to_plan_stage(
                    &config.stage1,
                    data_dir.join("stage1").join("manifest.json"),
                ),
            ],
            joint: None,
        };
        let outcome = run_plan(&plan, force)?;

        for &strategy in &config.strategies {
            let run = outcome
                .per_strategy
                .get(strategy.name())
                .expect("strategy was run");
            for &class in &config.stage0.new_classes {
                let before = dice_of(&run.reports[0], "stage0", class).unwrap_or(f64::NAN);
                let after = dice_of(&run.reports[1], "stage0", class).unwrap_or(f64::NAN);
                let retention = if before > 0.0 { after / before } else { f64::NAN };
                rows.push(ShiftRow {
                    delta,
                    strategy: strategy.name().to_string(),
                    class_id: class,
                    dice_after_stage0: before,
                    dice_after_stage1: after,
                    retention,
                });
            }
        }
    }

    let table = ShiftStudyTable {
        deltas: config.deltas.clone(),
        strategies: config.strategies.iter().map(|s| s.name().to_string()).collect(),
        rows,
    };
    write_study_outputs(out, &table)?;
    Ok(table)
}

fn write_study_outputs(out: &Path, table: &ShiftStudyTable) -> Result<()> {
    let json = serde_json::to_vec_pretty(table).map_err(|e| Error::Serde(e.to_string()))?;
    let json_path = out.join("shift_retention.json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let tsv_path = out.join("shift_retention.tsv");
    std::fs::write(&tsv_path, table.to_tsv()).map_err(|e| Error::io(&tsv_path, e))?;
    Ok(())
}
