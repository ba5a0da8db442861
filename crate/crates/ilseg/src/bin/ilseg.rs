//! Thin command-line front end over the library: data generation, stage
//! training, curriculum runs, the shift study, evaluation, and reporting.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data errors,
//! 4 numerical failures, 1 anything else.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ilseg::engine::{
    render_report, run_plan, run_shift_study, train_stage, ExperimentPlan, GeneratePlan,
    ShiftStudyConfig, Strategy,
};
use ilseg::error::Result;
use ilseg::metrics::{evaluate_model, MetricsReport};
use ilseg::phantom::{generate_stage_dataset, write_dataset, PhantomSpec, Split};

#[derive(Parser)]
#[command(name = "ilseg", about = "Class-incremental multi-organ segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom datasets from a generation plan.
    GenerateData {
        /// Generation plan (TOML).
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; one subdirectory per dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single stage of a plan for one strategy.
    Train {
        /// Experiment plan (TOML).
        #[arg(long)]
        plan: PathBuf,
        /// Stage index (0-based).
        #[arg(long)]
        stage: usize,
        /// Strategy: ft, lwf, mib, or mib-corr.
        #[arg(long)]
        strategy: Strategy,
    },
    /// Run the full curriculum for every strategy in the plan.
    RunPlan {
        #[arg(long)]
        plan: PathBuf,
        /// Retrain stages even if completed markers exist.
        #[arg(long)]
        force: bool,
    },
    /// Run the distribution-shift retention study.
    ShiftStudy {
        /// Study configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for metrics.json / metrics.tsv; prints TSV when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and plots from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Output directory (defaults to <results>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { plan, out } => {
            let plan = GeneratePlan::load(&plan)?;
            for dataset in &plan.datasets {
                let spec = PhantomSpec {
                    shift: dataset.shift,
                    seed: plan.phantom.seed + dataset.seed_offset,
                    ..plan.phantom.clone()
                };
                let cases =
                    generate_stage_dataset(&spec, &dataset.id, &dataset.classes, dataset.counts())?;
                let dir = out.join(&dataset.id);
                let manifest = write_dataset(&dir, &spec, &dataset.id, &cases)?;
                println!(
                    "wrote {} cases ({} train) for dataset `{}` -> {}",
                    manifest.cases.len(),
                    dataset.train,
                    dataset.id,
                    dir.display()
                );
            }
            Ok(())
        }
        Command::Train { plan, stage, strategy } => {
            let plan = ExperimentPlan::load(&plan)?;
            let space = plan.label_space()?;
            let config = plan.stage_config(stage, strategy)?;
            let stage_dir = plan
                .output_dir
                .join(strategy.name())
                .join(format!("stage_{stage}"));
            let prev = if stage == 0 {
                None
            } else {
                Some(
                    plan.output_dir
                        .join(strategy.name())
                        .join(format!("stage_{}", stage - 1))
                        .join("checkpoint.ckpt"),
                )
            };
            let outcome = train_stage(&plan.arch, &space, &config, prev.as_deref(), &stage_dir)?;
            println!(
                "stage {stage} ({strategy}) done: checkpoint {} (loss {:.4})",
                outcome.checkpoint_path.display(),
                outcome.final_epoch_loss
            );
            Ok(())
        }
        Command::RunPlan { plan, force } => {
            let plan = ExperimentPlan::load(&plan)?;
            let outcome = run_plan(&plan, force)?;
            println!("plan complete: results under {}", outcome.output_dir.display());
            Ok(())
        }
        Command::ShiftStudy { config, force } => {
            let config = ShiftStudyConfig::load(&config)?;
            let table = run_shift_study(&config, force)?;
            print!("{}", table.to_tsv());
            println!("study written under {}", config.output_dir.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => {
                    return Err(ilseg::Error::Config(format!("unknown split `{other}`")))
                }
            };
            let (model, meta) = ilseg::model::load_checkpoint(&checkpoint)?;
            let mut log = ilseg::engine::data::AccessLog::default();
            let m = ilseg::engine::data::open_manifest(&manifest, &mut log)?;
            let cases = ilseg::engine::data::load_split(&manifest, &m, split, &mut log)?;
            let known = meta.label_space.channels_at(meta.stage);
            let classes: Vec<u16> = m
                .labeled_classes
                .iter()
                .copied()
                .filter(|c| known.contains(c))
                .collect();
            let rows = evaluate_model(&model, &m.dataset_id, &cases, &classes)?;
            let report = MetricsReport {
                strategy: format!("checkpoint-stage-{}", meta.stage),
                stage: meta.stage,
                rows,
            };
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .map_err(|e| ilseg::Error::io(&dir, e))?;
                    let json = serde_json::to_vec_pretty(&report)
                        .map_err(|e| ilseg::Error::Serde(e.to_string()))?;
                    std::fs::write(dir.join("metrics.json"), json)
                        .map_err(|e| ilseg::Error::io(&dir, e))?;
                    std::fs::write(dir.join("metrics.tsv"), report.to_tsv())
                        .map_err(|e| ilseg::Error::io(&dir, e))?;
                    println!("metrics written to {}", dir.display());
                }
                None => print!("{}", report.to_tsv()),
            }
            Ok(())
        }
        Command::Report { results, out } => {
            let report_dir = out.unwrap_or_else(|| results.join("report"));
            let outcome = render_report(&results, &report_dir)?;
            for file in &outcome.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.class().exit_code());
    }
}
