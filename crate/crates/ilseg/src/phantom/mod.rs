//! Deterministic synthetic-anatomy generator.
//!
//! Every volume renders the *same* organ catalog (the fixed-anatomy
//! premise), but each dataset annotates only its own class subset, so the
//! organs which one dataset labels as foreground become "background" in the
//! others. A per-dataset shift knob adds a global intensity offset and a
//! global translation, modeling inter-dataset distribution differences
//! without changing class semantics.
//!
//! Randomness per case derives from `(seed, case_id)` alone: generation can
//! run in parallel over cases in any order, and two datasets generated at
//! the same seed share identical anatomy, differing only in labels and
//! shift.

mod volume;

pub use volume::{
    load_manifest, read_volume, write_volume, DatasetManifest, ManifestCase, Split,
    VolumeRecord, VOLUME_MAGIC, VOLUME_VERSION,
};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::Digest;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::labelspace::PartialLabelMap;

/// Maximum global intensity offset at shift = 1 (fraction of the unit
/// dynamic range).
pub const SHIFT_MAX_INTENSITY: f64 = 0.30;
/// Maximum global translation at shift = 1 (fraction of the grid extent).
pub const SHIFT_MAX_TRANSLATION: f64 = 0.15;

/// One organ: a superellipse (2-D) or superellipsoid (3-D) with an
/// intensity band.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OrganSpec {
    pub id: u16,
    pub name: String,
    /// Center in normalized coordinates, one entry per axis.
    pub center: Vec<f64>,
    /// Semi-axes in normalized coordinates.
    pub radii: Vec<f64>,
    /// Superellipse exponent; 2 is an ellipse.
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    /// Rendered intensity in [0, 1].
    pub intensity: f64,
}

fn default_exponent() -> f64 {
    2.0
}

impl OrganSpec {
    /// Closed-form fraction of the unit square/cube this organ covers:
    /// `2^d prod(radii) Gamma(1 + 1/e)^d / Gamma(1 + d/e)`.
    pub fn analytic_volume_fraction(&self) -> f64 {
        let d = self.center.len() as f64;
        let e = self.exponent;
        let prod: f64 = self.radii.iter().product();
        2f64.powf(d) * prod * gamma(1.0 + 1.0 / e).powf(d) / gamma(1.0 + d / e)
    }

    fn contains(&self, point: &[f64], center: &[f64], radii: &[f64]) -> bool {
        let mut acc = 0.0;
        for a in 0..point.len() {
            acc += ((point[a] - center[a]).abs() / radii[a]).powf(self.exponent);
        }
        acc <= 1.0
    }
}

/// Per-case random perturbations (all standard deviations, in normalized
/// units except `intensity_sigma` which is in intensity units).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct JitterSpec {
    pub pos_sigma: f64,
    pub radius_sigma: f64,
    pub intensity_sigma: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            pos_sigma: 0.012,
            radius_sigma: 0.006,
            intensity_sigma: 0.02,
        }
    }
}

/// Full description of a phantom-anatomy dataset family.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    /// Grid extents (2 or 3 axes).
    pub grid: Vec<usize>,
    /// Physical voxel spacing per axis.
    pub spacing: Vec<f64>,
    pub background_intensity: f64,
    /// Per-voxel additive Gaussian image noise.
    pub noise_sigma: f64,
    pub organs: Vec<OrganSpec>,
    #[serde(default)]
    pub jitter: JitterSpec,
    /// Distribution-shift knob in [0, 1] applied to the whole dataset.
    #[serde(default)]
    pub shift: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// A compact three-organ 2-D catalog used by the examples and tests.
    pub fn demo_2d(grid: usize, seed: u64) -> Self {
        PhantomSpec {
            grid: vec![grid, grid],
            spacing: vec![1.0, 1.0],
            background_intensity: 0.10,
            noise_sigma: 0.02,
            organs: vec![
                OrganSpec {
                    id: 1,
                    name: "disc".into(),
                    center: vec![0.30, 0.32],
                    radii: vec![0.17, 0.14],
                    exponent: 2.0,
                    intensity: 0.45,
                },
                OrganSpec {
                    id: 2,
                    name: "lobe".into(),
                    center: vec![0.70, 0.34],
                    radii: vec![0.14, 0.17],
                    exponent: 2.5,
                    intensity: 0.70,
                },
                OrganSpec {
                    id: 3,
                    name: "band".into(),
                    center: vec![0.50, 0.74],
                    radii: vec![0.20, 0.12],
                    exponent: 2.0,
                    intensity: 0.95,
                },
            ],
            jitter: JitterSpec::default(),
            shift: 0.0,
            seed,
        }
    }

    pub fn organ_ids(&self) -> Vec<u16> {
        self.organs.iter().map(|o| o.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.grid.len();
        if !(dims == 2 || dims == 3) {
            return Err(Error::Config(format!("grid must be 2-D or 3-D, got {dims} axes")));
        }
        if self.spacing.len() != dims || self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("spacing must be positive, one entry per axis".into()));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Config(format!("shift {} outside [0, 1]", self.shift)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for organ in &self.organs {
            if organ.id == 0 {
                return Err(Error::Config("organ id 0 is reserved for background".into()));
            }
            if !seen.insert(organ.id) {
                return Err(Error::Config(format!("duplicate organ id {}", organ.id)));
            }
            if organ.center.len() != dims || organ.radii.len() != dims {
                return Err(Error::Config(format!(
                    "organ {} center/radii must have {dims} entries",
                    organ.id
                )));
            }
            if organ.radii.iter().any(|&r| r <= 0.0) || organ.exponent < 1.0 {
                return Err(Error::Config(format!("organ {} has degenerate geometry", organ.id)));
            }
        }
        // Canonical regions must be pairwise disjoint at zero shift and
        // jitter; checked on the rendering grid.
        let masks: Vec<Vec<bool>> = self
            .organs
            .iter()
            .map(|o| {
                self.iter_points()
                    .map(|p| o.contains(&p, &o.center, &o.radii))
                    .collect()
            })
            .collect();
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                if masks[a].iter().zip(&masks[b]).any(|(&x, &y)| x && y) {
                    return Err(Error::Config(format!(
                        "canonical regions of organs {} and {} overlap",
                        self.organs[a].id, self.organs[b].id
                    )));
                }
            }
        }
        Ok(())
    }

    fn iter_points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let grid = self.grid.clone();
        let total: usize = grid.iter().product();
        (0..total).map(move |flat| {
            let mut rem = flat;
            let mut p = vec![0.0; grid.len()];
            for d in (0..grid.len()).rev() {
                p[d] = ((rem % grid[d]) as f64 + 0.5) / grid[d] as f64;
                rem /= grid[d];
            }
            p
        })
    }
}

/// Split sizes for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// A generated case together with its split assignment.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub split: Split,
    pub record: VolumeRecord,
}

fn case_rng(seed: u64, case_id: u64) -> ChaCha8Rng {
    let mut hasher = sha2::Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(case_id.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Renders one case. All catalog organs are drawn into the image; only
/// `labeled_classes` appear in the label map.
fn render_case(
    spec: &PhantomSpec,
    dataset_id: &str,
    labeled_classes: &[u16],
    case_id: u64,
) -> VolumeRecord {
    let dims = spec.grid.len();
    let mut rng = case_rng(spec.seed, case_id);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Per-organ jittered geometry; drawn for every organ regardless of the
    // labeled subset so anatomy is identical across datasets at equal seeds.
    let translation = spec.shift * SHIFT_MAX_TRANSLATION;
    let mut centers = Vec::with_capacity(spec.organs.len());
    let mut radii = Vec::with_capacity(spec.organs.len());
    let mut intensities = Vec::with_capacity(spec.organs.len());
    for organ in &spec.organs {
        let c: Vec<f64> = organ
            .center
            .iter()
            .map(|&v| v + spec.jitter.pos_sigma * normal.sample(&mut rng) + translation)
            .collect();
        let r: Vec<f64> = organ
            .radii
            .iter()
            .map(|&v| (v + spec.jitter.radius_sigma * normal.sample(&mut rng)).max(0.01))
            .collect();
        let i = (organ.intensity + spec.jitter.intensity_sigma * normal.sample(&mut rng))
            .clamp(0.0, 1.0);
        centers.push(c);
        radii.push(r);
        intensities.push(i);
    }

    let total: usize = spec.grid.iter().product();
    let mut image = vec![spec.background_intensity; total];
    let mut labels = vec![0u16; total];
    let intensity_offset = spec.shift * SHIFT_MAX_INTENSITY;

    let mut point = vec![0.0f64; dims];
    for flat in 0..total {
        let mut rem = flat;
        for d in (0..dims).rev() {
            point[d] = ((rem % spec.grid[d]) as f64 + 0.5) / spec.grid[d] as f64;
            rem /= spec.grid[d];
        }
        // The last organ in catalog order wins where jittered regions touch.
        let mut visible: Option<usize> = None;
        for (k, organ) in spec.organs.iter().enumerate() {
            if organ.contains(&point, &centers[k], &radii[k]) {
                visible = Some(k);
            }
        }
        if let Some(k) = visible {
            image[flat] = intensities[k];
            if labeled_classes.contains(&spec.organs[k].id) {
                labels[flat] = spec.organs[k].id;
            }
        }
    }
    for v in image.iter_mut() {
        *v += intensity_offset + spec.noise_sigma * normal.sample(&mut rng);
    }

    let image = ArrayD::from_shape_vec(IxDyn(&spec.grid), image)
        .expect("image shape")
        .mapv(|v| v as f32);
    let labels = PartialLabelMap::new(
        ArrayD::from_shape_vec(IxDyn(&spec.grid), labels).expect("label shape"),
    );
    VolumeRecord {
        image,
        labels,
        labeled_classes: labeled_classes.to_vec(),
        spacing: spec.spacing.clone(),
        dataset_id: dataset_id.to_string(),
        case_id,
        seed: spec.seed,
    }
}

/// Generates one partially labeled stage dataset: every volume renders all
/// organs, but only `stage_classes` are annotated; everything else is
/// background. Splits are disjoint by case id.
pub fn generate_stage_dataset(
    spec: &PhantomSpec,
    dataset_id: &str,
    stage_classes: &[u16],
    counts: SplitCounts,
) -> Result<Vec<GeneratedCase>> {
    spec.validate()?;
    let known = spec.organ_ids();
    for &c in stage_classes {
        if !known.contains(&c) {
            return Err(Error::Config(format!(
                "class {c} is not in the organ catalog {known:?}"
            )));
        }
    }
    let cases: Vec<GeneratedCase> = {
        use rayon::prelude::*;
        (0..counts.total() as u64)
            .into_par_iter()
            .map(|case_id| {
                let split = if (case_id as usize) < counts.train {
                    Split::Train
                } else if (case_id as usize) < counts.train + counts.val {
                    Split::Val
                } else {
                    Split::Test
                };
                GeneratedCase {
                    split,
                    record: render_case(spec, dataset_id, stage_classes, case_id),
                }
            })
            .collect()
    };
    Ok(cases)
}

/// Generates the fully labeled joint dataset (the joint-training reference
/// condition): identical renderer and anatomy, labels for every organ.
pub fn build_joint_dataset(
    spec: &PhantomSpec,
    dataset_id: &str,
    counts: SplitCounts,
) -> Result<Vec<GeneratedCase>> {
    let all = spec.organ_ids();
    generate_stage_dataset(spec, dataset_id, &all, counts)
}

/// Writes a generated dataset to `dir` (one volume file per case plus the
/// manifest) and returns the manifest.
pub fn write_dataset(
    dir: &std::path::Path,
    spec: &PhantomSpec,
    dataset_id: &str,
    cases: &[GeneratedCase],
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest_cases = Vec::with_capacity(cases.len());
    for case in cases {
        let file = format!("case_{:04}.ilsv", case.record.case_id);
        write_volume(&case.record, &dir.join(&file))?;
        manifest_cases.push(ManifestCase {
            case_id: case.record.case_id,
            split: case.split,
            path: file,
        });
    }
    let labeled = cases
        .first()
        .map(|c| c.record.labeled_classes.clone())
        .unwrap_or_default();
    let manifest = DatasetManifest {
        schema_version: 1,
        dataset_id: dataset_id.to_string(),
        labeled_classes: labeled,
        grid: spec.grid.clone(),
        spacing: spec.spacing.clone(),
        shift: spec.shift,
        seed: spec.seed,
        cases: manifest_cases,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
