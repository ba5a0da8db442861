//! On-disk volume container and the dataset manifest.
//!
//! Volume files (`.ilsv`) are a zero-dependency binary container:
//!
//! ```text
//! bytes 0..8    magic "ILSEGVOL"
//! bytes 8..12   format version (u32 LE, currently 1)
//! bytes 12..16  header length H (u32 LE)
//! bytes 16..16+H JSON header: dims, spacing, label set, provenance
//! image payload: prod(dims) x 4 bytes, little-endian f32
//! label payload: prod(dims) x 2 bytes, little-endian u16
//! ```
//!
//! The manifest (`manifest.json`) lists every case with its split and the
//! dataset's labeled class set.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::labelspace::PartialLabelMap;

pub const VOLUME_MAGIC: &[u8; 8] = b"ILSEGVOL";
pub const VOLUME_VERSION: u32 = 1;

/// Train/validation/test membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One synthetic volume: the rendered image, its partial annotation, and
/// provenance.
#[derive(Debug, Clone)]
pub struct VolumeRecord {
    pub image: ArrayD<f32>,
    pub labels: PartialLabelMap,
    /// Classes this dataset annotates; label values are 0 or one of these.
    pub labeled_classes: Vec<u16>,
    pub spacing: Vec<f64>,
    pub dataset_id: String,
    pub case_id: u64,
    pub seed: u64,
}

impl VolumeRecord {
    /// Image as f64 for network input.
    pub fn image_f64(&self) -> ArrayD<f64> {
        self.image.mapv(|v| v as f64)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VolumeHeader {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    label_set: Vec<u16>,
    dataset_id: String,
    case_id: u64,
    seed: u64,
}

/// Writes a volume; the byte stream is a pure function of the record.
pub fn write_volume(record: &VolumeRecord, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: record.image.shape().to_vec(),
        spacing: record.spacing.clone(),
        label_set: record.labeled_classes.clone(),
        dataset_id: record.dataset_id.clone(),
        case_id: record.case_id,
        seed: record.seed,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let n = record.image.len();
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + n * 6);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for &v in record.image.as_slice().expect("standard layout") {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in record.labels.values().as_slice().expect("standard layout") {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads a volume, failing with distinct errors for a corrupt header, an
/// unsupported version, and a truncated payload.
pub fn read_volume(path: &Path) -> Result<VolumeRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..8] != VOLUME_MAGIC {
        return Err(Error::VolumeFormat {
            path: path.to_path_buf(),
            reason: "bad magic number".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VOLUME_VERSION {
        return Err(Error::VolumeVersion {
            path: path.to_path_buf(),
            expected: VOLUME_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::VolumeFormat {
            path: path.to_path_buf(),
            reason: "header extends past end of file".into(),
        });
    }
    let header: VolumeHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::VolumeFormat {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        })?;
    let n: usize = header.dims.iter().product();
    let expected = 16 + header_len + n * 4 + n * 2;
    if bytes.len() != expected {
        return Err(Error::VolumeTruncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let img_start = 16 + header_len;
    let image: Vec<f32> = bytes[img_start..img_start + n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let lbl_start = img_start + n * 4;
    let labels: Vec<u16> = bytes[lbl_start..lbl_start + n * 2]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VolumeRecord {
        image: ArrayD::from_shape_vec(IxDyn(&header.dims), image).expect("image shape"),
        labels: PartialLabelMap::new(
            ArrayD::from_shape_vec(IxDyn(&header.dims), labels).expect("label shape"),
        ),
        labeled_classes: header.label_set,
        spacing: header.spacing,
        dataset_id: header.dataset_id,
        case_id: header.case_id,
        seed: header.seed,
    })
}

/// One case entry in a dataset manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestCase {
    pub case_id: u64,
    pub split: Split,
    /// Volume path relative to the manifest's directory.
    pub path: String,
}

/// Dataset manifest: cases, splits, and the labeled class set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub labeled_classes: Vec<u16>,
    pub grid: Vec<usize>,
    pub spacing: Vec<f64>,
    pub shift: f64,
    pub seed: u64,
    pub cases: Vec<ManifestCase>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn case_paths(&self, split: Split) -> Vec<&ManifestCase> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}

/// Loads a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!(
        "bad manifest {}: {e}",
        path.display()
    )))?;
    if manifest.schema_version != 1 {
        return Err(Error::Data(format!(
            "manifest {} has unsupported schema version {}",
            path.display(),
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> VolumeRecord {
        let image = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5f32, 1.0, -0.25, 0.0, 3.5, 2.0])
            .unwrap();
        let labels =
            PartialLabelMap::new(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0u16, 1, 0, 1, 0, 0]).unwrap());
        VolumeRecord {
            image,
            labels,
            labeled_classes: vec![1],
            spacing: vec![1.0, 0.5],
            dataset_id: "demo".into(),
            case_id: 3,
            seed: 42,
        }
    }

    #[test]
    fn volume_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ilsv");
        let p2 = dir.path().join("b.ilsv");
        write_volume(&record(), &p1).unwrap();
        let loaded = read_volume(&p1).unwrap();
        write_volume(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.image, record().image);
        assert_eq!(loaded.labels.values(), record().labels.values());
    }

    #[test]
    fn flipped_magic_fails_with_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ilsv");
        write_volume(&record(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(Error::VolumeFormat { .. })
        ));
    }

    #[test]
    fn wrong_version_fails_with_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ilsv");
        write_volume(&record(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(Error::VolumeVersion { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ilsv");
        write_volume(&record(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match read_volume(&p).unwrap_err() {
            Error::VolumeTruncated { expected, actual, .. } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
