//! Dataset loading for the engine, with access logging.
//!
//! Every file opened on behalf of a training stage is recorded, so the
//! annotation-access discipline — stage `t` training never opens a prior
//! stage's labels — is testable, not just intended.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{load_manifest, read_volume, DatasetManifest, Split, VolumeRecord};

/// Record of every path opened through this loader.
#[derive(Debug, Default)]
pub struct AccessLog {
    paths: Vec<PathBuf>,
}

impl AccessLog {
    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    fn record(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }
}

/// Loads a manifest, recording the access.
pub fn open_manifest(path: &Path, log: &mut AccessLog) -> Result<DatasetManifest> {
    log.record(path);
    load_manifest(path)
}

/// Loads all cases of one split, recording each volume access.
pub fn load_split(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    split: Split,
    log: &mut AccessLog,
) -> Result<Vec<VolumeRecord>> {
    let base = manifest_path
        .parent()
        .ok_or_else(|| Error::Data(format!("manifest {} has no parent dir", manifest_path.display())))?;
    let mut out = Vec::new();
    for case in manifest.case_paths(split) {
        let path = base.join(&case.path);
        log.record(&path);
        out.push(read_volume(&path)?);
    }
    Ok(out)
}

/// Checks the partial-label contract: the dataset must annotate exactly the
/// given class set.
pub fn check_labeled_classes(manifest: &DatasetManifest, expected: &[u16]) -> Result<()> {
    let mut got: Vec<u16> = manifest.labeled_classes.clone();
    let mut want: Vec<u16> = expected.to_vec();
    got.sort_unstable();
    want.sort_unstable();
    if got != want {
        return Err(Error::Data(format!(
            "dataset {} labels classes {got:?} but the stage expects exactly {want:?}",
            manifest.dataset_id
        )));
    }
    Ok(())
}
