//! Configuration files: the multi-stage experiment plan, the data-generation
//! plan, and the shift-study template. All are versioned TOML documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::engine::Strategy;
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;
use crate::losses::LossWeights;
use crate::model::ArchConfig;
use crate::phantom::{PhantomSpec, SplitCounts};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

fn default_poly_power() -> f64 {
    0.9
}

fn default_momentum() -> f64 {
    0.9
}

/// One stage of the curriculum as written in the plan file (the strategy
/// axis is bound separately, so one plan covers every compared strategy).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanStage {
    /// Classes introduced at this stage.
    pub new_classes: Vec<u16>,
    /// Dataset manifest path, relative to the plan file's directory.
    pub manifest: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays polynomially to zero over the stage.
    pub learning_rate: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

/// Everything one stage run needs: a plan stage bound to a strategy.
#[derive(Debug, Clone, Serialize)]
pub struct StageConfig {
    pub stage: usize,
    pub strategy: Strategy,
    pub new_classes: Vec<u16>,
    pub manifest: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("stage {}: epochs must be >= 1", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("stage {}: batch_size must be >= 1", self.stage)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "stage {}: learning_rate must be positive",
                self.stage
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "stage {}: momentum must lie in [0, 1)",
                self.stage
            )));
        }
        self.loss_weights.validate()
    }
}

/// Optional fully labeled reference run (joint training on all classes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConfig {
    pub manifest: PathBuf,
    pub classes: Vec<u16>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

/// The full multi-stage curriculum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub strategies: Vec<Strategy>,
    pub arch: ArchConfig,
    pub stages: Vec<PlanStage>,
    #[serde(default)]
    pub joint: Option<JointConfig>,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad plan file: {e}")))?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "plan schema version {} unsupported (expected {PLAN_SCHEMA_VERSION})",
                plan.schema_version
            )));
        }
        // Resolve paths relative to the plan file.
        if let Some(base) = path.parent() {
            for stage in plan.stages.iter_mut() {
                if stage.manifest.is_relative() {
                    stage.manifest = base.join(&stage.manifest);
                }
            }
            if let Some(joint) = plan.joint.as_mut() {
                if joint.manifest.is_relative() {
                    joint.manifest = base.join(&joint.manifest);
                }
            }
            if plan.output_dir.is_relative() {
                plan.output_dir = base.join(&plan.output_dir);
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("plan has no stages".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("plan names no strategies".into()));
        }
        self.arch.validate()?;
        self.label_space()?;
        for (t, stage) in self.stages.iter().enumerate() {
            self.stage_config(t, self.strategies[0])?.validate()?;
            let _ = stage;
        }
        Ok(())
    }

    /// The label space induced by the per-stage class lists; construction
    /// rejects duplicate introductions, so the space grows consistently.
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.stages.iter().map(|s| s.new_classes.clone()).collect())
    }

    pub fn stage_config(&self, stage: usize, strategy: Strategy) -> Result<StageConfig> {
        let s = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Config(format!("plan has no stage {stage}")))?;
        Ok(StageConfig {
            stage,
            strategy,
            new_classes: s.new_classes.clone(),
            manifest: s.manifest.clone(),
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            poly_power: s.poly_power,
            momentum: s.momentum,
            seed: s.seed,
            loss_weights: s.loss_weights.clone(),
        })
    }
}

/// Hash binding a stage run to its exact configuration. Paths are excluded:
/// the digest describes the run semantics, so identical plans executed in
/// different directories produce identical checkpoints.
pub fn config_hash(arch: &ArchConfig, config: &StageConfig) -> String {
    #[derive(Serialize)]
    struct Digest<'a> {
        arch: &'a ArchConfig,
        stage: usize,
        strategy: Strategy,
        new_classes: &'a [u16],
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        poly_power: f64,
        momentum: f64,
        seed: u64,
        loss_weights: &'a LossWeights,
    }
    let digest = Digest {
        arch,
        stage: config.stage,
        strategy: config.strategy,
        new_classes: &config.new_classes,
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        poly_power: config.poly_power,
        momentum: config.momentum,
        seed: config.seed,
        loss_weights: &config.loss_weights,
    };
    let mut hasher = sha2::Sha256::new();
    hasher.update(serde_json::to_vec(&digest).expect("config serializes"));
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in bytes {
        use std::fmt::Write as _;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// One dataset in a data-generation plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateDataset {
    pub id: String,
    /// Classes this dataset annotates; everything else becomes background.
    pub classes: Vec<u16>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Distribution-shift knob applied to the whole dataset.
    #[serde(default)]
    pub shift: f64,
    /// Added to the phantom seed so datasets get distinct anatomy.
    #[serde(default)]
    pub seed_offset: u64,
}

impl GenerateDataset {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

/// Data-generation plan: one phantom family, many partially labeled
/// datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratePlan {
    pub schema_version: u32,
    pub phantom: PhantomSpec,
    pub datasets: Vec<GenerateDataset>,
}

impl GeneratePlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: GeneratePlan = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad generate plan: {e}")))?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "generate plan schema version {} unsupported",
                plan.schema_version
            )));
        }
        plan.phantom.validate()?;
        if plan.datasets.is_empty() {
            return Err(Error::Config("generate plan lists no datasets".into()));
        }
        Ok(plan)
    }
}

/// Training knobs for one stage of the shift study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyStage {
    pub new_classes: Vec<u16>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

/// Template for the two-stage distribution-shift study: the second stage's
/// dataset is regenerated at each shift level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftStudyConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub deltas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub phantom: PhantomSpec,
    pub arch: ArchConfig,
    pub stage0: StudyStage,
    pub stage1: StudyStage,
}

impl ShiftStudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ShiftStudyConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad shift study config: {e}")))?;
        if config.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "shift study schema version {} unsupported",
                config.schema_version
            )));
        }
        if let Some(base) = path.parent() {
            if config.output_dir.is_relative() {
                config.output_dir = base.join(&config.output_dir);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.arch.validate()?;
        if self.deltas.is_empty() {
            return Err(Error::Config("shift study needs at least one delta".into()));
        }
        for &d in &self.deltas {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("delta {d} outside [0, 1]")));
            }
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("shift study names no strategies".into()));
        }
        LabelSpace::new(vec![
            self.stage0.new_classes.clone(),
            self.stage1.new_classes.clone(),
        ])?;
        Ok(())
    }
}
