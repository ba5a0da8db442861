//! Incremental-learning strategy axis: which loss terms are active and
//! whether the background folds are applied.

use serde::{Deserialize, Serialize};

/// Training strategy for stages past the first.
///
/// Each variant fixes a flag combination; the flags are not independently
/// configurable:
///
/// | strategy   | remodel seg | remodel kd | kd  | corr |
/// |------------|-------------|------------|-----|------|
/// | `Ft`       | no          | no         | no  | no   |
/// | `Lwf`      | no          | no         | yes | no   |
/// | `Mib`      | yes         | yes        | yes | no   |
/// | `MibCorr`  | yes         | yes        | yes | yes  |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Plain fine-tuning on the new annotations.
    Ft,
    /// Fine-tuning plus distillation on raw softmax outputs.
    Lwf,
    /// Background remodeling on both the segmentation and distillation side.
    Mib,
    /// Remodeling plus the confidence-weighted corrective loss.
    MibCorr,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ft, Strategy::Lwf, Strategy::Mib, Strategy::MibCorr];

    /// Fold old classes into background in the segmentation loss.
    pub fn remodel_seg(self) -> bool {
        matches!(self, Strategy::Mib | Strategy::MibCorr)
    }

    /// Fold new classes into background in the distillation loss.
    pub fn remodel_kd(self) -> bool {
        matches!(self, Strategy::Mib | Strategy::MibCorr)
    }

    /// Distill from the frozen previous model at all.
    pub fn use_kd(self) -> bool {
        !matches!(self, Strategy::Ft)
    }

    /// Add the confidence-weighted corrective term.
    pub fn use_corr(self) -> bool {
        matches!(self, Strategy::MibCorr)
    }

    /// Stable lowercase name used in paths and reports.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ft => "ft",
            Strategy::Lwf => "lwf",
            Strategy::Mib => "mib",
            Strategy::MibCorr => "mib-corr",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ft" => Ok(Strategy::Ft),
            "lwf" => Ok(Strategy::Lwf),
            "mib" => Ok(Strategy::Mib),
            "mib-corr" | "mib_corr" | "mibcorr" | "miborgan" => Ok(Strategy::MibCorr),
            other => Err(crate::Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}
