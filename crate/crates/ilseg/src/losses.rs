//! Training objectives: remodeled cross-entropy and Dice segmentation
//! losses, soft-target knowledge distillation, and the confidence-weighted
//! corrective (CORR) loss, plus the weighted total.
//!
//! Every objective comes in two forms: a scalar evaluation on already
//! remodeled probability maps (the `*_loss` functions) and a term evaluation
//! on raw student logits that also returns the analytic gradient with
//! respect to those logits (the `*_term` functions). The term functions
//! obtain their values by building the remodeled maps and calling the scalar
//! functions, so there is a single value path; the gradients are closed-form
//! and are checked against central finite differences in the test suite.
//!
//! Teacher inputs are constants everywhere: no gradient is ever produced
//! with respect to the previous model's outputs.

use ndarray::ArrayD;

use crate::engine::Strategy;
use crate::error::{Error, Result};
use crate::labelspace::{
    pseudo_labels, remodel_kd, remodel_logits_corr, remodel_seg, softmax, LabelSpace, LogitsMap,
    PartialLabelMap, ProbabilityMap, PseudoLabelMap,
};

/// Probabilities are clamped below at this value before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Smoothing constant in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Loss-term weights and the corrective-loss shape parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the segmentation term (cross-entropy + Dice).
    pub omega_seg: f64,
    /// Weight of the distillation term.
    pub omega_kd: f64,
    /// Weight of the corrective term.
    pub omega_corr: f64,
    /// Confidence threshold: teacher confidence at exactly this value maps
    /// to a corrective weight of 1.
    pub thr: f64,
    /// Scale exponent of the corrective weight.
    pub n: u32,
    /// Lower clamp for corrective weights.
    pub w_clamp_lo: f64,
    /// Upper clamp for corrective weights. `(thr / confidence)^n` grows past
    /// 1e16 for confidences near 0.04, so the clamp keeps the rescaled
    /// logits representable.
    pub w_clamp_hi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            omega_seg: 1.0,
            omega_kd: 10.0,
            omega_corr: 1.0,
            thr: 0.95,
            n: 12,
            w_clamp_lo: 1e-3,
            w_clamp_hi: 1e4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.omega_seg < 0.0 || self.omega_kd < 0.0 || self.omega_corr < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0 < self.thr && self.thr <= 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold {} outside (0, 1]",
                self.thr
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("scale exponent n must be positive".into()));
        }
        if !(self.w_clamp_lo > 0.0 && self.w_clamp_lo <= self.w_clamp_hi) {
            return Err(Error::Config("bad corrective-weight clamp range".into()));
        }
        Ok(())
    }
}

/// Per-voxel, per-channel corrective weights over the old label set.
///
/// Entries at channels other than a voxel's pseudo-label channel are exactly
/// 1; the pseudo-label entry is `(thr / confidence)^n` clamped to the
/// configured range.
#[derive(Debug, Clone)]
pub struct CorrWeightMap {
    values: ArrayD<f64>,
    channels: Vec<u16>,
}

impl CorrWeightMap {
    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn channels(&self) -> &[u16] {
        &self.channels
    }
}

/// Loss value plus its gradient with respect to the student logits.
#[derive(Debug, Clone)]
pub struct TermGrad {
    pub value: f64,
    pub grad: ArrayD<f64>,
}

/// Per-term breakdown of a total-loss evaluation. Term values are reported
/// unweighted; `total` applies the omega weights.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub seg_ce: f64,
    pub seg_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<f64>,
    /// Voxels where a large corrective weight met a negative target logit;
    /// such voxels inflate rather than damp the corrective term, so they are
    /// surfaced for logging.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_neg_logit_large_w: Option<usize>,
    pub total: f64,
}

/// Total loss with gradient and per-term breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grad: ArrayD<f64>,
}

impl TotalLoss {
    pub fn total(&self) -> f64 {
        self.breakdown.total
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Flattened standard-layout view of a map's values.
fn flat(values: &ArrayD<f64>) -> Vec<f64> {
    values
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec()
}

/// Maps label class ids to channel indices for stage `t`, checking the
/// partial-label contract: only background and current-stage classes may
/// appear.
fn label_channels(
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
    spatial: &[usize],
) -> Result<Vec<usize>> {
    if y.shape() != spatial {
        return Err(Error::ShapeMismatch {
            context: "label map vs logits spatial grid",
            left: y.shape().to_vec(),
            right: spatial.to_vec(),
        });
    }
    let channels = space.channels_at(t);
    let old_n = space.old_channel_count(t);
    let allowed = space.stage_classes(t);
    let max_id = channels.iter().copied().max().unwrap_or(0) as usize;
    let mut lut = vec![usize::MAX; max_id + 1];
    lut[0] = 0;
    for (idx, &c) in channels.iter().enumerate().skip(old_n) {
        lut[c as usize] = idx;
    }
    let mut out = Vec::with_capacity(y.values().len());
    for (voxel, &label) in y.values().iter().enumerate() {
        let idx = if (label as usize) < lut.len() {
            lut[label as usize]
        } else {
            usize::MAX
        };
        if idx == usize::MAX {
            return Err(Error::InvalidLabel {
                label,
                voxel,
                stage: t,
                allowed: allowed.to_vec(),
            });
        }
        out.push(idx);
    }
    Ok(out)
}

/// Mean over voxels of the negative log probability at the labeled channel.
///
/// `q_tilde` is the segmentation-side remodeled map over the stage-`t`
/// layout; labels must be background or current-stage classes (old-class
/// labels are the knowledge-conflict case and are rejected).
pub fn ce_seg_loss(
    q_tilde: &ProbabilityMap,
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
) -> Result<f64> {
    let label_ch = label_channels(y, space, t, q_tilde.spatial_shape())?;
    let n_voxels = q_tilde.num_voxels();
    let c_total = q_tilde.channels().len();
    let q = flat(q_tilde.values());
    let mut sum = 0.0;
    for (i, &k) in label_ch.iter().enumerate() {
        debug_assert!(k < c_total);
        sum -= clamped_ln(q[k * n_voxels + i]);
    }
    Ok(sum / n_voxels as f64)
}

/// Soft Dice loss over the current-stage foreground channels:
/// `1 - mean_c (2 sum(q g) + eps) / (sum(q) + sum(g) + eps)`.
///
/// Background is excluded. An empty new-class set yields zero loss.
pub fn dice_loss(
    q_tilde: &ProbabilityMap,
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
) -> Result<f64> {
    let label_ch = label_channels(y, space, t, q_tilde.spatial_shape())?;
    let old_n = space.old_channel_count(t);
    let c_total = space.num_channels_at(t);
    if old_n == c_total {
        log::warn!("dice_loss: stage {t} introduces no classes; returning 0");
        return Ok(0.0);
    }
    let n_voxels = q_tilde.num_voxels();
    let q = flat(q_tilde.values());
    let mut mean_dice = 0.0;
    for c in old_n..c_total {
        let qc = &q[c * n_voxels..(c + 1) * n_voxels];
        let mut inter = 0.0;
        let mut qsum = 0.0;
        let mut gsum = 0.0;
        for (i, &qv) in qc.iter().enumerate() {
            qsum += qv;
            if label_ch[i] == c {
                inter += qv;
                gsum += 1.0;
            }
        }
        mean_dice += (2.0 * inter + DICE_EPS) / (qsum + gsum + DICE_EPS);
    }
    Ok(1.0 - mean_dice / (c_total - old_n) as f64)
}

/// Soft-target cross-entropy against the frozen teacher's softmax:
/// `-(1/|I|) sum_i sum_c teacher_{i,c} log q_hat_{i,c}`.
pub fn kd_loss(q_hat: &ProbabilityMap, teacher: &ProbabilityMap) -> Result<f64> {
    if q_hat.channels() != teacher.channels() {
        return Err(Error::ChannelMismatch {
            expected: teacher.channels().to_vec(),
            got: q_hat.channels().to_vec(),
        });
    }
    if q_hat.spatial_shape() != teacher.spatial_shape() {
        return Err(Error::ShapeMismatch {
            context: "distillation maps",
            left: q_hat.values().shape().to_vec(),
            right: teacher.values().shape().to_vec(),
        });
    }
    let n_voxels = q_hat.num_voxels() as f64;
    let mut sum = 0.0;
    for (q, t) in q_hat.values().iter().zip(teacher.values().iter()) {
        if *t > 0.0 {
            sum -= t * clamped_ln(*q);
        }
    }
    Ok(sum / n_voxels)
}

/// Builds the corrective weight map from teacher confidences.
///
/// At each voxel the pseudo-label channel gets `(thr / confidence)^n`
/// clamped to `[w_clamp_lo, w_clamp_hi]`; every other channel gets 1.
pub fn corr_weights(
    teacher_probs: &ProbabilityMap,
    y_pseu: &PseudoLabelMap,
    weights: &LossWeights,
) -> Result<CorrWeightMap> {
    if teacher_probs.channels() != y_pseu.channels() {
        return Err(Error::ChannelMismatch {
            expected: y_pseu.channels().to_vec(),
            got: teacher_probs.channels().to_vec(),
        });
    }
    weights.validate()?;
    let n_voxels = teacher_probs.num_voxels();
    let probs = flat(teacher_probs.values());
    let mut values = ArrayD::from_elem(teacher_probs.values().raw_dim(), 1.0);
    {
        let out = values.as_slice_mut().expect("freshly allocated");
        for i in 0..n_voxels {
            let k = y_pseu.channel_at_flat(i);
            let conf = probs[k * n_voxels + i];
            let w = (weights.thr / conf).powi(weights.n as i32);
            out[k * n_voxels + i] = w.clamp(weights.w_clamp_lo, weights.w_clamp_hi);
        }
    }
    Ok(CorrWeightMap {
        values,
        channels: teacher_probs.channels().to_vec(),
    })
}

/// Corrective loss value; see [`corr_term`] for the gradient-bearing form.
pub fn corr_loss(
    logits_t: &LogitsMap,
    old_logits: &LogitsMap,
    space: &LabelSpace,
    t: usize,
    weights: &LossWeights,
) -> Result<f64> {
    Ok(corr_term(logits_t, old_logits, space, t, weights)?.0.value)
}

// ---------------------------------------------------------------------------
// Gradient-bearing term evaluations.
// ---------------------------------------------------------------------------

/// Cross-entropy segmentation term on raw student logits. With `remodel` the
/// old classes are folded into background first; without it the plain
/// softmax is used (the fine-tuning and LwF segmentation path).
pub fn seg_ce_term(
    logits_t: &LogitsMap,
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
    remodel: bool,
) -> Result<TermGrad> {
    space_check(logits_t, space, t)?;
    let label_ch = label_channels(y, space, t, logits_t.spatial_shape())?;
    let probs = softmax(logits_t);
    let q_tilde = if remodel {
        remodel_seg(&probs, space, t)?
    } else {
        probs.clone()
    };
    let value = ce_seg_loss(&q_tilde, y, space, t)?;

    let n_voxels = logits_t.num_voxels();
    let c_total = logits_t.channels().len();
    let old_n = space.old_channel_count(t);
    let p = flat(probs.values());
    let inv_n = 1.0 / n_voxels as f64;
    let mut grad = ArrayD::<f64>::zeros(logits_t.values().raw_dim());
    {
        let g = grad.as_slice_mut().expect("freshly allocated");
        for (i, &ky) in label_ch.iter().enumerate() {
            if remodel && ky == 0 {
                // Background label: the target mass is the fold of all old
                // channels, so the pull toward the target spreads over them.
                let s: f64 = (0..old_n).map(|c| p[c * n_voxels + i]).sum();
                let inv_s = if s >= LOG_CLAMP { 1.0 / s } else { 0.0 };
                for c in 0..c_total {
                    let pc = p[c * n_voxels + i];
                    let fold = if c < old_n { pc * inv_s } else { 0.0 };
                    g[c * n_voxels + i] = inv_n * (pc - fold);
                }
            } else {
                let py = p[ky * n_voxels + i];
                let active = py >= LOG_CLAMP;
                for c in 0..c_total {
                    let pc = p[c * n_voxels + i];
                    let pull = if active && c == ky { 1.0 } else { 0.0 };
                    g[c * n_voxels + i] = inv_n * (pc - pull);
                }
            }
        }
    }
    Ok(TermGrad { value, grad })
}

/// Soft Dice term on raw student logits. The background fold leaves the
/// current-stage channels untouched, so remodeled and raw Dice coincide.
pub fn seg_dice_term(
    logits_t: &LogitsMap,
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
) -> Result<TermGrad> {
    space_check(logits_t, space, t)?;
    let label_ch = label_channels(y, space, t, logits_t.spatial_shape())?;
    let probs = softmax(logits_t);
    let value = dice_loss(&probs, y, space, t)?;

    let n_voxels = logits_t.num_voxels();
    let c_total = logits_t.channels().len();
    let old_n = space.old_channel_count(t);
    let n_new = c_total - old_n;
    let mut grad = ArrayD::<f64>::zeros(logits_t.values().raw_dim());
    if n_new == 0 {
        return Ok(TermGrad { value, grad });
    }
    let p = flat(probs.values());

    // dL/dq for each new channel from the Dice ratio.
    let mut dl_dq = vec![0.0; c_total * n_voxels];
    for c in old_n..c_total {
        let pc = &p[c * n_voxels..(c + 1) * n_voxels];
        let mut inter = 0.0;
        let mut qsum = 0.0;
        let mut gsum = 0.0;
        for (i, &qv) in pc.iter().enumerate() {
            qsum += qv;
            if label_ch[i] == c {
                inter += qv;
                gsum += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = qsum + gsum + DICE_EPS;
        for i in 0..n_voxels {
            let gt = if label_ch[i] == c { 1.0 } else { 0.0 };
            dl_dq[c * n_voxels + i] = -(2.0 * gt * den - num) / (den * den) / n_new as f64;
        }
    }
    // Chain through the per-voxel softmax.
    {
        let g = grad.as_slice_mut().expect("freshly allocated");
        for i in 0..n_voxels {
            let mut dot = 0.0;
            for c in old_n..c_total {
                dot += dl_dq[c * n_voxels + i] * p[c * n_voxels + i];
            }
            for c in 0..c_total {
                let a = if c >= old_n { dl_dq[c * n_voxels + i] } else { 0.0 };
                g[c * n_voxels + i] = p[c * n_voxels + i] * (a - dot);
            }
        }
    }
    Ok(TermGrad { value, grad })
}

/// Distillation term with the background fold (the remodeled route): the
/// student's new-class probabilities are folded into background before the
/// soft-target cross-entropy against the teacher.
pub fn kd_term_fold(
    logits_t: &LogitsMap,
    teacher_probs: &ProbabilityMap,
    space: &LabelSpace,
    t: usize,
) -> Result<TermGrad> {
    space_check(logits_t, space, t)?;
    if t == 0 {
        return Err(Error::NoPreviousStage("kd_term_fold"));
    }
    let probs = softmax(logits_t);
    let q_hat = remodel_kd(&probs, space, t)?;
    let value = kd_loss(&q_hat, teacher_probs)?;

    let n_voxels = logits_t.num_voxels();
    let c_total = logits_t.channels().len();
    let old_n = space.old_channel_count(t);
    let p = flat(probs.values());
    let qh = flat(q_hat.values());
    let tv = flat(teacher_probs.values());
    let inv_n = 1.0 / n_voxels as f64;
    let mut grad = ArrayD::<f64>::zeros(logits_t.values().raw_dim());
    {
        let g = grad.as_slice_mut().expect("freshly allocated");
        for i in 0..n_voxels {
            // Per-channel teacher/model ratios, zeroed where the log clamp
            // flattens the objective.
            let ratio = |c: usize| -> f64 {
                let q = qh[c * n_voxels + i];
                if q >= LOG_CLAMP {
                    tv[c * n_voxels + i] / q
                } else {
                    0.0
                }
            };
            let sum_t: f64 = (0..old_n).map(|c| tv[c * n_voxels + i]).sum();
            let bg_ratio = ratio(0);
            for c in 0..c_total {
                let pc = p[c * n_voxels + i];
                let r = if c == 0 || c >= old_n { bg_ratio } else { ratio(c) };
                g[c * n_voxels + i] = inv_n * pc * (sum_t - r);
            }
        }
    }
    Ok(TermGrad { value, grad })
}

/// Distillation term without remodeling (the LwF route): soft-target
/// cross-entropy between the teacher and the old-channel slice of the
/// student's full softmax. The slice does not renormalize, which is exactly
/// the behavior background remodeling was introduced to fix.
pub fn kd_term_raw(
    logits_t: &LogitsMap,
    teacher_probs: &ProbabilityMap,
    space: &LabelSpace,
    t: usize,
) -> Result<TermGrad> {
    space_check(logits_t, space, t)?;
    if t == 0 {
        return Err(Error::NoPreviousStage("kd_term_raw"));
    }
    let old_n = space.old_channel_count(t);
    if teacher_probs.channels() != space.channels_at(t - 1).as_slice() {
        return Err(Error::ChannelMismatch {
            expected: space.channels_at(t - 1),
            got: teacher_probs.channels().to_vec(),
        });
    }
    let probs = softmax(logits_t);
    let n_voxels = logits_t.num_voxels();
    let c_total = logits_t.channels().len();
    let p = flat(probs.values());
    let tv = flat(teacher_probs.values());
    let inv_n = 1.0 / n_voxels as f64;
    let mut value = 0.0;
    let mut grad = ArrayD::<f64>::zeros(logits_t.values().raw_dim());
    {
        let g = grad.as_slice_mut().expect("freshly allocated");
        for i in 0..n_voxels {
            let mut active_t = 0.0;
            for c in 0..old_n {
                let t_c = tv[c * n_voxels + i];
                if t_c <= 0.0 {
                    continue;
                }
                let q = p[c * n_voxels + i];
                value -= t_c * clamped_ln(q);
                if q >= LOG_CLAMP {
                    active_t += t_c;
                    g[c * n_voxels + i] -= inv_n * t_c;
                }
            }
            for c in 0..c_total {
                g[c * n_voxels + i] += inv_n * p[c * n_voxels + i] * active_t;
            }
        }
    }
    Ok(TermGrad {
        value: value * inv_n,
        grad,
    })
}

/// Corrective term: cross-entropy of the weight-rescaled, background-folded
/// student logits against the teacher's pseudo-labels, evaluated through a
/// stable log-softmax. Returns the term and the count of voxels where a
/// large weight met a negative target logit (the loss-inflating corner of
/// the rescaling).
pub fn corr_term(
    logits_t: &LogitsMap,
    old_logits: &LogitsMap,
    space: &LabelSpace,
    t: usize,
    weights: &LossWeights,
) -> Result<(TermGrad, usize)> {
    space_check(logits_t, space, t)?;
    if t == 0 {
        return Err(Error::NoPreviousStage("corr_term"));
    }
    if old_logits.channels() != space.channels_at(t - 1).as_slice() {
        return Err(Error::ChannelMismatch {
            expected: space.channels_at(t - 1),
            got: old_logits.channels().to_vec(),
        });
    }
    if old_logits.spatial_shape() != logits_t.spatial_shape() {
        return Err(Error::ShapeMismatch {
            context: "teacher vs student spatial grid",
            left: old_logits.values().shape().to_vec(),
            right: logits_t.values().shape().to_vec(),
        });
    }
    weights.validate()?;

    let teacher = softmax(old_logits);
    let y_pseu = pseudo_labels(old_logits);
    let w_map = corr_weights(&teacher, &y_pseu, weights)?;
    let q_check = remodel_logits_corr(logits_t, space, t)?;

    let n_voxels = logits_t.num_voxels();
    let old_channels = space.old_channel_count(t);
    let c_total = logits_t.channels().len();
    let qc = flat(q_check.values());
    let wv = flat(w_map.values());
    let inv_n = 1.0 / n_voxels as f64;

    let mut value = 0.0;
    let mut pathological = 0usize;
    let mut grad = ArrayD::<f64>::zeros(logits_t.values().raw_dim());
    {
        let g = grad.as_slice_mut().expect("freshly allocated");
        let mut u = vec![0.0; old_channels];
        for i in 0..n_voxels {
            let k_star = y_pseu.channel_at_flat(i);
            let mut m = f64::NEG_INFINITY;
            for (c, slot) in u.iter_mut().enumerate() {
                *slot = qc[c * n_voxels + i] * wv[c * n_voxels + i];
                m = m.max(*slot);
            }
            let lse = m + u.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            value += lse - u[k_star];

            let w_star = wv[k_star * n_voxels + i];
            if qc[k_star * n_voxels + i] < 0.0 && w_star > 1.0 {
                pathological += 1;
            }

            // dL/du_c = softmax(u)_c - delta(c, k*): route through the
            // weight rescale and the additive background fold.
            for c in 0..old_channels {
                let su = (u[c] - lse).exp();
                let du = inv_n * (su - if c == k_star { 1.0 } else { 0.0 });
                let dq = du * wv[c * n_voxels + i];
                if c == 0 {
                    g[i] += dq;
                    for new_c in old_channels..c_total {
                        g[new_c * n_voxels + i] += dq;
                    }
                } else {
                    g[c * n_voxels + i] += dq;
                }
            }
        }
    }
    Ok((
        TermGrad {
            value: value * inv_n,
            grad,
        },
        pathological,
    ))
}

fn space_check(logits: &LogitsMap, space: &LabelSpace, t: usize) -> Result<()> {
    if logits.channels() != space.channels_at(t).as_slice() {
        return Err(Error::ChannelMismatch {
            expected: space.channels_at(t),
            got: logits.channels().to_vec(),
        });
    }
    Ok(())
}

/// Assembles the strategy's active terms into the weighted total with
/// gradient and per-term breakdown.
///
/// At stage 0 every strategy reduces to the segmentation term alone; past
/// stage 0 a teacher is required unless the strategy is plain fine-tuning.
/// A zero corrective weight skips the corrective term entirely, so the
/// remodeled strategies with `omega_corr = 0` reproduce the plain remodeled
/// totals bit-exactly.
pub fn total_loss(
    logits_t: &LogitsMap,
    old_logits: Option<&LogitsMap>,
    y: &PartialLabelMap,
    space: &LabelSpace,
    t: usize,
    weights: &LossWeights,
    strategy: Strategy,
) -> Result<TotalLoss> {
    weights.validate()?;
    if t == 0 && old_logits.is_some() {
        return Err(Error::InvalidInput(
            "stage 0 has no previous model; teacher logits must be absent".into(),
        ));
    }

    let remodel = strategy.remodel_seg() && t > 0;
    let ce = seg_ce_term(logits_t, y, space, t, remodel)?;
    let dice = seg_dice_term(logits_t, y, space, t)?;

    let mut total = weights.omega_seg * (ce.value + dice.value);
    let mut grad = &ce.grad + &dice.grad;
    grad.mapv_inplace(|v| v * weights.omega_seg);

    let mut kd_value = None;
    let mut corr_value = None;
    let mut corr_pathology = None;

    if t > 0 && strategy.use_kd() {
        let teacher_logits = old_logits.ok_or_else(|| {
            Error::InvalidInput(format!(
                "strategy {strategy} at stage {t} requires teacher logits"
            ))
        })?;
        let teacher_probs = softmax(teacher_logits);
        let kd = if strategy.remodel_kd() {
            kd_term_fold(logits_t, &teacher_probs, space, t)?
        } else {
            kd_term_raw(logits_t, &teacher_probs, space, t)?
        };
        total += weights.omega_kd * kd.value;
        grad.scaled_add(weights.omega_kd, &kd.grad);
        kd_value = Some(kd.value);

        if strategy.use_corr() && weights.omega_corr != 0.0 {
            let (corr, pathological) = corr_term(logits_t, teacher_logits, space, t, weights)?;
            total += weights.omega_corr * corr.value;
            grad.scaled_add(weights.omega_corr, &corr.grad);
            corr_value = Some(corr.value);
            corr_pathology = Some(pathological);
        }
    }

    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "total loss is not finite at stage {t} (strategy {strategy})"
        )));
    }

    Ok(TotalLoss {
        breakdown: LossBreakdown {
            seg_ce: ce.value,
            seg_dice: dice.value,
            kd: kd_value,
            corr: corr_value,
            corr_neg_logit_large_w: corr_pathology,
            total,
        },
        grad,
    })
}
