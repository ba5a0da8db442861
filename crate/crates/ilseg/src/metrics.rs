//! Evaluation metrics: Dice coefficient and 95th-percentile Hausdorff
//! distance, with the empty-mask conventions used throughout the reports
//! (both masks empty: Dice 1; exactly one empty: Dice 0; HD95 is NaN
//! whenever either mask is empty).
//!
//! HD95 uses face adjacency for boundary extraction (4-neighborhood in 2-D,
//! 6 in 3-D; voxels outside the grid count as background), spacing-scaled
//! Euclidean distances computed with an exact separable distance transform,
//! and the 95th percentile of the *pooled* directed distance multisets with
//! linear interpolation between order statistics.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::labelspace::PartialLabelMap;
use crate::model::SegmentationModel;
use crate::phantom::VolumeRecord;

/// Stand-in for infinity inside the distance transform; large enough to
/// dominate any real squared grid distance, small enough to stay finite
/// through the parabola arithmetic.
const DT_BIG: f64 = 1e30;

/// Dice overlap `2|P intersect G| / (|P| + |G|)` between two binary masks.
pub fn dice_coefficient(pred: &ArrayD<bool>, gt: &ArrayD<bool>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "dice masks",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        p_count += p as usize;
        g_count += g as usize;
        inter += (p && g) as usize;
    }
    if p_count == 0 && g_count == 0 {
        return Ok(1.0);
    }
    if p_count == 0 || g_count == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// 95th-percentile symmetric boundary distance between two masks, scaled by
/// the per-axis voxel spacing. Returns NaN when either mask is empty (the
/// collapsed-prediction convention).
pub fn hd95(pred: &ArrayD<bool>, gt: &ArrayD<bool>, spacing: &[f64]) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "hd95 masks",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    if spacing.len() != pred.ndim() || spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "spacing {spacing:?} must be positive and match mask dimensionality {}",
            pred.ndim()
        )));
    }
    let pred_boundary = boundary(pred);
    let gt_boundary = boundary(gt);
    if pred_boundary.is_empty() || gt_boundary.is_empty() {
        return Ok(f64::NAN);
    }
    let shape = pred.shape().to_vec();
    let dist_to_gt = boundary_edt(&gt_boundary, &shape, spacing);
    let dist_to_pred = boundary_edt(&pred_boundary, &shape, spacing);

    let mut pooled = Vec::with_capacity(pred_boundary.len() + gt_boundary.len());
    for &i in &pred_boundary {
        pooled.push(dist_to_gt[i].sqrt());
    }
    for &i in &gt_boundary {
        pooled.push(dist_to_pred[i].sqrt());
    }
    Ok(percentile_linear(&mut pooled, 0.95))
}

/// Flat indices of foreground voxels with at least one face-adjacent
/// background neighbor; out-of-grid positions count as background.
fn boundary(mask: &ArrayD<bool>) -> Vec<usize> {
    let shape = mask.shape();
    let ndim = mask.ndim();
    let mut strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let flat: Vec<bool> = mask.iter().copied().collect();
    let mut out = Vec::new();
    let mut coord = vec![0usize; ndim];
    for (i, &fg) in flat.iter().enumerate() {
        if fg {
            let mut is_boundary = false;
            for d in 0..ndim {
                let c = coord[d];
                if c == 0
                    || c + 1 == shape[d]
                    || !flat[i - strides[d]]
                    || !flat[i + strides[d]]
                {
                    is_boundary = true;
                    break;
                }
            }
            if is_boundary {
                out.push(i);
            }
        }
        // Advance the coordinate counter.
        for d in (0..ndim).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    out
}

/// Exact squared Euclidean distance from every voxel to the nearest seed
/// voxel, with anisotropic spacing, via the separable lower-envelope
/// transform applied axis by axis.
fn boundary_edt(seeds: &[usize], shape: &[usize], spacing: &[f64]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let mut dist = vec![DT_BIG; total];
    for &s in seeds {
        dist[s] = 0.0;
    }
    let ndim = shape.len();
    let mut strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    for d in 0..ndim {
        let n = shape[d];
        if n == 1 {
            continue;
        }
        let stride = strides[d];
        let lines = total / n;
        line.resize(n, 0.0);
        out_line.resize(n, 0.0);
        for l in 0..lines {
            // Base flat index of this line: distribute l over the other axes.
            let mut rem = l;
            let mut base = 0usize;
            for a in 0..ndim {
                if a == d {
                    continue;
                }
                let len = shape[a];
                base += (rem % len) * strides[a];
                rem /= len;
            }
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = dist[base + j * stride];
            }
            dt_1d(&line, spacing[d] * spacing[d], &mut out_line);
            for (j, &v) in out_line.iter().enumerate() {
                dist[base + j * stride] = v;
            }
        }
    }
    dist
}

/// One-dimensional squared distance transform: lower envelope of the
/// parabolas `w (q - p)^2 + f(p)`.
fn dt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(f, w, q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(f, w, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        out[q] = w * dq * dq + f[v[k]];
    }
}

fn intersect(f: &[f64], w: f64, q: usize, p: usize) -> f64 {
    let (qf, pf) = (q as f64, p as f64);
    ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
}

/// Percentile with linear interpolation between order statistics; sorts the
/// input in place.
fn percentile_linear(values: &mut [f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = p * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < values.len() {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[lo]
    }
}

/// NaN maps to JSON null so reports with collapsed-prediction sentinels
/// round-trip losslessly.
pub(crate) mod nan_as_null {
    pub fn serialize<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let opt: Option<f64> = serde::Deserialize::deserialize(d)?;
        Ok(opt.unwrap_or(f64::NAN))
    }
}

/// Per-class summary statistics over the cases of one dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassStats {
    #[serde(with = "nan_as_null")]
    pub dice_mean: f64,
    #[serde(with = "nan_as_null")]
    pub dice_std: f64,
    pub dice_n: usize,
    /// NaN when every case was excluded.
    #[serde(with = "nan_as_null")]
    pub hd95_mean: f64,
    #[serde(with = "nan_as_null")]
    pub hd95_std: f64,
    pub hd95_n: usize,
    /// Cases whose HD95 was NaN (collapsed or empty masks).
    pub hd95_excluded: usize,
}

/// Mean and population standard deviation excluding NaN entries.
pub fn aggregate(values: &[f64]) -> (f64, f64, usize, usize) {
    let kept: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    let excluded = values.len() - kept.len();
    if kept.is_empty() {
        return (f64::NAN, f64::NAN, 0, excluded);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt(), kept.len(), excluded)
}

impl ClassStats {
    pub fn from_cases(dice: &[f64], hd: &[f64]) -> Self {
        let (dice_mean, dice_std, dice_n, _) = aggregate(dice);
        let (hd95_mean, hd95_std, hd95_n, hd95_excluded) = aggregate(hd);
        ClassStats {
            dice_mean,
            dice_std,
            dice_n,
            hd95_mean,
            hd95_std,
            hd95_n,
            hd95_excluded,
        }
    }
}

/// One evaluated (dataset, class) pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub class_id: u16,
    #[serde(flatten)]
    pub stats: ClassStats,
}

/// Evaluation results for one model on a set of datasets.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub stage: usize,
    pub rows: Vec<MetricRow>,
}

/// Per-voxel argmax class ids from a logits map (ties break toward the
/// lowest channel, matching the pseudo-label rule).
pub fn argmax_labels(logits: &crate::labelspace::LogitsMap) -> ArrayD<u16> {
    let pseudo = crate::labelspace::pseudo_labels(logits);
    pseudo.classes().clone()
}

/// Dice and HD95 of one predicted label map against ground truth for one
/// class id.
pub fn evaluate_predictions(
    pred: &ArrayD<u16>,
    gt: &PartialLabelMap,
    class_id: u16,
    spacing: &[f64],
) -> Result<(f64, f64)> {
    let pred_mask = pred.mapv(|v| v == class_id);
    let gt_mask = gt.values().mapv(|v| v == class_id);
    let dice = dice_coefficient(&pred_mask, &gt_mask)?;
    let hd = hd95(&pred_mask, &gt_mask, spacing)?;
    Ok((dice, hd))
}

/// Evaluates a model over one dataset's cases: per class, Dice and HD95 of
/// the argmax prediction against the annotation, aggregated mean and std.
pub fn evaluate_model(
    model: &SegmentationModel,
    dataset_id: &str,
    cases: &[VolumeRecord],
    classes: &[u16],
) -> Result<Vec<MetricRow>> {
    use rayon::prelude::*;
    let per_case: Vec<Vec<(f64, f64)>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<(f64, f64)>> {
            let logits = model.predict(&case.image_f64())?;
            let pred = argmax_labels(&logits);
            classes
                .iter()
                .map(|&c| evaluate_predictions(&pred, &case.labels, c, &case.spacing))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(classes.len());
    for (k, &class_id) in classes.iter().enumerate() {
        let dice: Vec<f64> = per_case.iter().map(|c| c[k].0).collect();
        let hd: Vec<f64> = per_case.iter().map(|c| c[k].1).collect();
        rows.push(MetricRow {
            dataset: dataset_id.to_string(),
            class_id,
            stats: ClassStats::from_cases(&dice, &hd),
        });
    }
    Ok(rows)
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsReport {
    /// Flat tab-delimited table, one row per dataset and class.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "strategy\tstage\tdataset\tclass\tdice_mean\tdice_std\tdice_n\thd95_mean\thd95_std\thd95_n\thd95_excluded\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                self.strategy,
                self.stage,
                row.dataset,
                row.class_id,
                fmt_metric(row.stats.dice_mean),
                fmt_metric(row.stats.dice_std),
                row.stats.dice_n,
                fmt_metric(row.stats.hd95_mean),
                fmt_metric(row.stats.hd95_std),
                row.stats.hd95_n,
                row.stats.hd95_excluded,
            ));
        }
        out
    }

    /// Mean Dice for one class across all datasets that carry it.
    pub fn mean_dice_for_class(&self, class_id: u16) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.class_id == class_id && !r.stats.dice_mean.is_nan())
            .map(|r| r.stats.dice_mean)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Dimension, IxDyn};

    fn mask(shape: &[usize], fg: &[&[usize]]) -> ArrayD<bool> {
        let mut m = ArrayD::from_elem(IxDyn(shape), false);
        for idx in fg {
            m[IxDyn(idx)] = true;
        }
        m
    }

    /// Independent brute-force HD95: all-pairs boundary distances plus a
    /// separately written percentile rule.
    fn hd95_brute(pred: &ArrayD<bool>, gt: &ArrayD<bool>, spacing: &[f64]) -> f64 {
        let coords = |m: &ArrayD<bool>| -> Vec<Vec<usize>> {
            let shape = m.shape().to_vec();
            let mut pts = Vec::new();
            'outer: for (idx, &v) in m.indexed_iter() {
                if !v {
                    continue;
                }
                let idx = idx.slice().to_vec();
                for d in 0..shape.len() {
                    for dir in [-1i64, 1] {
                        let n = idx[d] as i64 + dir;
                        if n < 0 || n >= shape[d] as i64 {
                            pts.push(idx.clone());
                            continue 'outer;
                        }
                        let mut nb = idx.clone();
                        nb[d] = n as usize;
                        if !m[IxDyn(&nb)] {
                            pts.push(idx.clone());
                            continue 'outer;
                        }
                    }
                }
            }
            pts
        };
        let a = coords(pred);
        let b = coords(gt);
        if a.is_empty() || b.is_empty() {
            return f64::NAN;
        }
        let dist = |p: &[usize], q: &[usize]| -> f64 {
            p.iter()
                .zip(q)
                .zip(spacing)
                .map(|((&x, &y), &s)| {
                    let d = (x as f64 - y as f64) * s;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut pooled = Vec::new();
        for p in &a {
            pooled.push(
                b.iter()
                    .map(|q| dist(p, q))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        for q in &b {
            pooled.push(
                a.iter()
                    .map(|p| dist(p, q))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = 0.95 * (pooled.len() - 1) as f64;
        let lo = rank.floor() as usize;
        if lo + 1 < pooled.len() {
            pooled[lo] + (rank - lo as f64) * (pooled[lo + 1] - pooled[lo])
        } else {
            pooled[lo]
        }
    }

    #[test]
    fn dice_identity_disjoint_and_shifted() {
        let a = mask(&[4, 4], &[&[0, 0], &[0, 1], &[1, 0], &[1, 1]]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);

        let b = mask(&[4, 4], &[&[2, 2], &[2, 3], &[3, 2], &[3, 3]]);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);

        // 2x2 block shifted by one row: overlap 2 of 4 -> 2*2/(4+4).
        let c = mask(&[4, 4], &[&[1, 0], &[1, 1], &[2, 0], &[2, 1]]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = ArrayD::from_elem(IxDyn(&[3, 3]), false);
        let full = mask(&[3, 3], &[&[1, 1]]);
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&empty, &full).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn hd95_identity_and_point_pair() {
        let a = mask(&[8, 8], &[&[2, 2], &[2, 3], &[3, 2], &[3, 3]]);
        assert_eq!(hd95(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);

        let p = mask(&[8, 8], &[&[1, 1]]);
        let q = mask(&[8, 8], &[&[1, 6]]);
        assert_eq!(hd95(&p, &q, &[1.0, 1.0]).unwrap(), 5.0);
    }

    #[test]
    fn hd95_empty_is_nan() {
        let empty = ArrayD::from_elem(IxDyn(&[4, 4]), false);
        let full = mask(&[4, 4], &[&[1, 1]]);
        assert!(hd95(&empty, &full, &[1.0, 1.0]).unwrap().is_nan());
        assert!(hd95(&full, &empty, &[1.0, 1.0]).unwrap().is_nan());
    }

    #[test]
    fn hd95_rejects_bad_spacing() {
        let a = mask(&[4, 4], &[&[1, 1]]);
        assert!(hd95(&a, &a, &[1.0]).is_err());
        assert!(hd95(&a, &a, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hd95_symmetry_and_scale() {
        let a = mask(&[10, 10], &[&[2, 2], &[2, 3], &[3, 2]]);
        let b = mask(&[10, 10], &[&[6, 6], &[6, 7], &[7, 7], &[5, 6]]);
        let ab = hd95(&a, &b, &[1.0, 1.0]).unwrap();
        let ba = hd95(&b, &a, &[1.0, 1.0]).unwrap();
        assert_eq!(ab, ba);

        let doubled = hd95(&a, &b, &[2.0, 2.0]).unwrap();
        assert!((doubled - 2.0 * ab).abs() < 1e-12);
    }

    #[test]
    fn hd95_matches_brute_force_on_random_3d_masks() {
        let mut state = 0xfeed5eedu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for trial in 0..25 {
            let shape = [12usize, 12, 12];
            let mut a = ArrayD::from_elem(IxDyn(&shape), false);
            let mut b = ArrayD::from_elem(IxDyn(&shape), false);
            for v in a.iter_mut() {
                *v = next() % 100 < 12;
            }
            for v in b.iter_mut() {
                *v = next() % 100 < 12;
            }
            let spacing = [1.0, 0.75, 1.25];
            let fast = hd95(&a, &b, &spacing).unwrap();
            let brute = hd95_brute(&a, &b, &spacing);
            if fast.is_nan() {
                assert!(brute.is_nan(), "trial {trial}");
            } else {
                assert!(
                    (fast - brute).abs() < 1e-9,
                    "trial {trial}: {fast} vs {brute}"
                );
            }
        }
    }

    #[test]
    fn percentile_linear_interpolates() {
        let mut values = vec![0.0, 1.0, 2.0, 3.0];
        // rank = 0.95 * 3 = 2.85 -> 2 + 0.85.
        assert!((percentile_linear(&mut values, 0.95) - 2.85).abs() < 1e-12);
    }

    #[test]
    fn aggregate_excludes_nan_with_count() {
        let (mean, std, n, excluded) = aggregate(&[1.0, f64::NAN, 3.0]);
        assert_eq!((n, excluded), (2, 1));
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);

        let (mean, _, n, excluded) = aggregate(&[f64::NAN]);
        assert!(mean.is_nan());
        assert_eq!((n, excluded), (0, 1));
    }
}
