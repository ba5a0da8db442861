//! Staged label universe and the probability/logit remodeling transforms.
//!
//! A [`LabelSpace`] tracks which class ids were introduced at which stage and
//! freezes the channel layout at introduction order: channel 0 is always
//! background, then stage-0 classes, then stage-1 classes, and so on. Because
//! the layout only ever grows by appending, a model head trained at stage
//! `t-1` is a prefix of the stage-`t` head and checkpoints align across
//! stages.
//!
//! The remodeling transforms fold channels into background so that losses
//! never punish a correct response on a class that the current ground truth
//! marks as background:
//!
//! * [`remodel_kd`] folds the *new* classes into background (distillation
//!   target side),
//! * [`remodel_seg`] folds the *old* classes into background (segmentation
//!   loss side),
//! * [`remodel_logits_corr`] performs the background fold additively on raw
//!   logits (corrective-loss side).
//!
//! The default fold operates on probabilities and keeps outputs normalized.
//! The literal exponential-of-summed-logits variants are available as
//! [`remodel_kd_literal`] / [`remodel_seg_literal`] for study; their outputs
//! do not sum to one in general and are returned as raw arrays.

use ndarray::{ArrayD, Axis, Slice};

use crate::error::{Error, Result};

/// Background class id (channel 0 in every layout).
pub const BACKGROUND: u16 = 0;

/// Per-voxel normalization tolerance for probability maps.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// The staged class universe.
///
/// `stages[t]` holds the class ids introduced at stage `t`, in introduction
/// order. Stage indices are 0-based: stage 0 is the first trained stage, and
/// the "old" label set at stage 0 is background alone.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelSpace {
    stages: Vec<Vec<u16>>,
}

impl LabelSpace {
    /// Builds a label space from per-stage new-class lists.
    ///
    /// Class ids must be positive and globally unique across all stages.
    /// Empty stages are allowed (a stage that introduces no classes).
    pub fn new(stages: Vec<Vec<u16>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (t, classes) in stages.iter().enumerate() {
            for &c in classes {
                if c == BACKGROUND {
                    return Err(Error::Config(format!(
                        "stage {t} contains the background id 0"
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} introduced more than once (stage {t})"
                    )));
                }
            }
        }
        Ok(LabelSpace { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Classes introduced at stage `t`.
    pub fn stage_classes(&self, t: usize) -> &[u16] {
        &self.stages[t]
    }

    /// Channel layout at stage `t`: background, then classes by introduction.
    pub fn channels_at(&self, t: usize) -> Vec<u16> {
        let mut out = vec![BACKGROUND];
        for classes in self.stages.iter().take(t + 1) {
            out.extend_from_slice(classes);
        }
        out
    }

    /// Number of channels at stage `t` (background included).
    pub fn num_channels_at(&self, t: usize) -> usize {
        1 + self.stages.iter().take(t + 1).map(Vec::len).sum::<usize>()
    }

    /// Number of channels in the old label set at stage `t`, i.e. the
    /// cumulative layout of stage `t - 1`; just background when `t == 0`.
    pub fn old_channel_count(&self, t: usize) -> usize {
        if t == 0 {
            1
        } else {
            self.num_channels_at(t - 1)
        }
    }

    /// Channel index of `class` in the stage-`t` layout.
    pub fn channel_of(&self, class: u16, t: usize) -> Option<usize> {
        self.channels_at(t).iter().position(|&c| c == class)
    }

    /// Cumulative class-id set at stage `t` (the background id included).
    pub fn cumulative(&self, t: usize) -> Vec<u16> {
        self.channels_at(t)
    }

    fn check_channels(&self, got: &[u16], t: usize, total: bool) -> Result<()> {
        let expected = if total {
            self.channels_at(t)
        } else {
            debug_assert!(t >= 1);
            self.channels_at(t - 1)
        };
        if got != expected.as_slice() {
            return Err(Error::ChannelMismatch {
                expected,
                got: got.to_vec(),
            });
        }
        Ok(())
    }
}

/// Raw per-voxel, per-channel network outputs. Axis 0 is the channel axis;
/// the remaining axes form the 2-D or 3-D spatial grid.
#[derive(Debug, Clone)]
pub struct LogitsMap {
    values: ArrayD<f64>,
    channels: Vec<u16>,
}

impl LogitsMap {
    /// Wraps raw values, checking channel count and finiteness.
    pub fn new(values: ArrayD<f64>, channels: Vec<u16>) -> Result<Self> {
        if values.ndim() < 2 {
            return Err(Error::InvalidInput(format!(
                "logits need a channel axis plus spatial axes, got shape {:?}",
                values.shape()
            )));
        }
        if values.shape()[0] != channels.len() {
            return Err(Error::InvalidInput(format!(
                "{} channels declared but axis 0 has length {}",
                channels.len(),
                values.shape()[0]
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit value".into()));
        }
        Ok(LogitsMap { values, channels })
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn channels(&self) -> &[u16] {
        &self.channels
    }

    /// Spatial shape (all axes but the channel axis).
    pub fn spatial_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    pub fn num_voxels(&self) -> usize {
        self.spatial_shape().iter().product()
    }
}

/// Per-voxel probability distribution over a channel set. Entries lie in
/// `[0, 1]` and each voxel's channel sum is 1 within [`PROB_SUM_TOL`].
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    values: ArrayD<f64>,
    channels: Vec<u16>,
}

impl ProbabilityMap {
    /// Wraps values, validating range and per-voxel normalization.
    pub fn new(values: ArrayD<f64>, channels: Vec<u16>) -> Result<Self> {
        if values.ndim() < 2 || values.shape()[0] != channels.len() {
            return Err(Error::InvalidInput(format!(
                "probability map shape {:?} does not match {} channels",
                values.shape(),
                channels.len()
            )));
        }
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        for lane in values.lanes(Axis(0)) {
            let s: f64 = lane.sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "per-voxel channel sum {s} deviates from 1 by more than {PROB_SUM_TOL}"
                )));
            }
        }
        Ok(ProbabilityMap { values, channels })
    }

    /// Internal constructor for values already normalized by construction.
    pub(crate) fn new_unchecked(values: ArrayD<f64>, channels: Vec<u16>) -> Self {
        debug_assert_eq!(values.shape()[0], channels.len());
        ProbabilityMap { values, channels }
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn channels(&self) -> &[u16] {
        &self.channels
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    pub fn num_voxels(&self) -> usize {
        self.spatial_shape().iter().product()
    }
}

/// Hard labels for the current stage: an integer grid whose values are
/// background or current-stage class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialLabelMap {
    values: ArrayD<u16>,
}

impl PartialLabelMap {
    pub fn new(values: ArrayD<u16>) -> Self {
        PartialLabelMap { values }
    }

    pub fn values(&self) -> &ArrayD<u16> {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// One-hot teacher argmax over the old label set, stored as a class-id grid
/// plus the channel layout it indexes into.
#[derive(Debug, Clone)]
pub struct PseudoLabelMap {
    classes: ArrayD<u16>,
    channels: Vec<u16>,
}

impl PseudoLabelMap {
    pub fn classes(&self) -> &ArrayD<u16> {
        &self.classes
    }

    pub fn channels(&self) -> &[u16] {
        &self.channels
    }

    /// Channel index of the active class at a flattened voxel index.
    pub fn channel_at_flat(&self, voxel: usize) -> usize {
        let class = self.classes.as_slice().map(|s| s[voxel]).unwrap_or_else(|| {
            *self
                .classes
                .iter()
                .nth(voxel)
                .expect("voxel index in range")
        });
        self.channels
            .iter()
            .position(|&c| c == class)
            .expect("pseudo-label class is part of the channel layout")
    }
}

/// Numerically stable per-voxel softmax over the channel axis.
pub fn softmax(logits: &LogitsMap) -> ProbabilityMap {
    let mut out = logits.values.clone();
    for mut lane in out.lanes_mut(Axis(0)) {
        let m = lane.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    ProbabilityMap::new_unchecked(out, logits.channels.clone())
}

/// Folds current-stage class probabilities into background, producing the
/// distillation-side map over the old label set.
///
/// Output channel `b` carries `p_b + sum over new classes of p_c`; old
/// non-background channels are copied bit-identically.
pub fn remodel_kd(probs: &ProbabilityMap, space: &LabelSpace, t: usize) -> Result<ProbabilityMap> {
    if t == 0 {
        return Err(Error::NoPreviousStage("remodel_kd"));
    }
    space.check_channels(&probs.channels, t, true)?;
    let old_n = space.old_channel_count(t);
    let total = space.num_channels_at(t);
    let mut out = probs
        .values
        .slice_axis(Axis(0), Slice::from(0..old_n))
        .to_owned();
    {
        let mut bg = out.index_axis_mut(Axis(0), 0);
        for c in old_n..total {
            bg += &probs.values.index_axis(Axis(0), c);
        }
    }
    Ok(ProbabilityMap::new_unchecked(
        out,
        space.channels_at(t - 1),
    ))
}

/// Folds old-class probabilities (background included) into background,
/// producing the segmentation-side map over the full stage-`t` layout.
///
/// Old non-background channels become exactly zero; new channels are copied
/// bit-identically. At stage 0 the fold is the identity.
pub fn remodel_seg(probs: &ProbabilityMap, space: &LabelSpace, t: usize) -> Result<ProbabilityMap> {
    space.check_channels(&probs.channels, t, true)?;
    let old_n = space.old_channel_count(t);
    let total = space.num_channels_at(t);
    let mut out = ArrayD::zeros(probs.values.raw_dim());
    {
        let mut bg = out.index_axis_mut(Axis(0), 0);
        for c in 0..old_n {
            bg += &probs.values.index_axis(Axis(0), c);
        }
    }
    for c in old_n..total {
        out.index_axis_mut(Axis(0), c)
            .assign(&probs.values.index_axis(Axis(0), c));
    }
    Ok(ProbabilityMap::new_unchecked(out, probs.channels.clone()))
}

/// Background fold applied additively on raw logits: the output background
/// logit is `q_b + sum over new classes of q_c`, old channels are copied, and
/// the channel set shrinks to the old layout.
///
/// Unlike [`remodel_kd`] this is *not* a probability fold; it feeds the
/// confidence-rescaled corrective loss, which multiplies logits by a weight
/// map before the softmax.
pub fn remodel_logits_corr(logits: &LogitsMap, space: &LabelSpace, t: usize) -> Result<LogitsMap> {
    if t == 0 {
        return Err(Error::NoPreviousStage("remodel_logits_corr"));
    }
    space.check_channels(&logits.channels, t, true)?;
    let old_n = space.old_channel_count(t);
    let total = space.num_channels_at(t);
    let mut out = logits
        .values
        .slice_axis(Axis(0), Slice::from(0..old_n))
        .to_owned();
    {
        let mut bg = out.index_axis_mut(Axis(0), 0);
        for c in old_n..total {
            bg += &logits.values.index_axis(Axis(0), c);
        }
    }
    Ok(LogitsMap {
        values: out,
        channels: space.channels_at(t - 1),
    })
}

/// Per-voxel one-hot argmax of teacher logits over the old label set.
/// Ties break toward the lowest channel index.
pub fn pseudo_labels(old_logits: &LogitsMap) -> PseudoLabelMap {
    let spatial: Vec<usize> = old_logits.spatial_shape().to_vec();
    let mut classes = ArrayD::<u16>::zeros(ndarray::IxDyn(&spatial));
    for (lane, slot) in old_logits
        .values
        .lanes(Axis(0))
        .into_iter()
        .zip(classes.iter_mut())
    {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in lane.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        *slot = old_logits.channels[best];
    }
    PseudoLabelMap {
        classes,
        channels: old_logits.channels.clone(),
    }
}

/// Literal exponential form of the distillation-side background fold,
/// computed from raw logits: the background entry is
/// `exp(q_b + sum over new q_c) / sum over all channels exp(q_c)`.
///
/// With any nonempty new-class set the per-voxel channel sums are below 1,
/// so the result is returned as a raw array rather than a probability map.
pub fn remodel_kd_literal(logits: &LogitsMap, space: &LabelSpace, t: usize) -> Result<ArrayD<f64>> {
    if t == 0 {
        return Err(Error::NoPreviousStage("remodel_kd_literal"));
    }
    space.check_channels(&logits.channels, t, true)?;
    let old_n = space.old_channel_count(t);
    let total = space.num_channels_at(t);
    let spatial: Vec<usize> = logits.spatial_shape().to_vec();
    let mut shape = vec![old_n];
    shape.extend_from_slice(&spatial);
    let mut out = ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
    for (lane, mut out_lane) in logits
        .values
        .lanes(Axis(0))
        .into_iter()
        .zip(out.lanes_mut(Axis(0)))
    {
        let m = lane.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = lane.iter().map(|&v| (v - m).exp()).sum();
        let folded_bg: f64 = lane[0] + lane.iter().skip(old_n).take(total - old_n).sum::<f64>();
        out_lane[0] = (folded_bg - m).exp() / denom;
        for c in 1..old_n {
            out_lane[c] = (lane[c] - m).exp() / denom;
        }
    }
    Ok(out)
}

/// Literal exponential form of the segmentation-side background fold; see
/// [`remodel_kd_literal`] for the normalization caveat.
pub fn remodel_seg_literal(
    logits: &LogitsMap,
    space: &LabelSpace,
    t: usize,
) -> Result<ArrayD<f64>> {
    space.check_channels(&logits.channels, t, true)?;
    let old_n = space.old_channel_count(t);
    let total = space.num_channels_at(t);
    let mut out = ArrayD::<f64>::zeros(logits.values.raw_dim());
    for (lane, mut out_lane) in logits
        .values
        .lanes(Axis(0))
        .into_iter()
        .zip(out.lanes_mut(Axis(0)))
    {
        let m = lane.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = lane.iter().map(|&v| (v - m).exp()).sum();
        let folded_bg: f64 = lane.iter().take(old_n).sum::<f64>();
        out_lane[0] = (folded_bg - m).exp() / denom;
        for c in old_n..total {
            out_lane[c] = (lane[c] - m).exp() / denom;
        }
    }
    Ok(out)
}
