//! Compact encoder-decoder segmentation network with a per-stage expandable
//! classifier head, plus frozen-teacher evaluation and checkpoint I/O.

mod checkpoint;
mod layers;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, sha256_hex, sha256_hex_of_file,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelspace::LogitsMap;
use layers::{
    leaky_relu, leaky_relu_backward, maxpool2, maxpool2_backward, upsample2, upsample2_backward,
    Conv, ConvCache, Head, HeadCache, InstanceNorm, NormCache, PoolCache,
};

/// Network architecture knobs.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Spatial dimensionality: 2 or 3.
    pub dims: usize,
    /// Resolution levels (2..=4); input extents must divide by
    /// `2^(levels - 1)`.
    pub levels: usize,
    /// Feature width at the top level (8..=32); deeper levels double it.
    pub base_width: usize,
    /// Image channels (1 for the scalar phantom volumes).
    pub in_channels: usize,
    /// Trunk initialization seed.
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            dims: 2,
            levels: 2,
            base_width: 8,
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dims == 2 || self.dims == 3) {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if !(2..=4).contains(&self.levels) {
            return Err(Error::Config(format!(
                "levels must lie in 2..=4, got {}",
                self.levels
            )));
        }
        if !(8..=32).contains(&self.base_width) {
            return Err(Error::Config(format!(
                "base_width must lie in 8..=32, got {}",
                self.base_width
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Required divisor of every spatial extent.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv,
    norm1: InstanceNorm,
    conv2: Conv,
    norm2: InstanceNorm,
}

struct BlockCache {
    c1: ConvCache,
    n1: NormCache,
    m1: Vec<bool>,
    c2: ConvCache,
    n2: NormCache,
    m2: Vec<bool>,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, dims: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv1: Conv::new(c_in, c_out, dims, rng),
            norm1: InstanceNorm::new(c_out),
            conv2: Conv::new(c_out, c_out, dims, rng),
            norm2: InstanceNorm::new(c_out),
        }
    }

    fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, BlockCache) {
        let (y1, c1) = self.conv1.forward(x);
        let (y1, n1) = self.norm1.forward(&y1);
        let (y1, m1) = leaky_relu(&y1);
        let (y2, c2) = self.conv2.forward(&y1);
        let (y2, n2) = self.norm2.forward(&y2);
        let (y2, m2) = leaky_relu(&y2);
        (y2, BlockCache { c1, n1, m1, c2, n2, m2 })
    }

    fn backward(
        &self,
        cache: &BlockCache,
        dy: &ArrayD<f64>,
        grads: &mut ModelGrads,
        prefix: &str,
    ) -> ArrayD<f64> {
        let dy = leaky_relu_backward(dy, &cache.m2);
        let (dy, dg2, db2) = self.norm2.backward(&cache.n2, &dy);
        grads.insert(format!("{prefix}.norm2.gamma"), dg2.into_dyn());
        grads.insert(format!("{prefix}.norm2.beta"), db2.into_dyn());
        let (dy, dw2, dbias2) = self.conv2.backward(&cache.c2, &dy);
        grads.insert(format!("{prefix}.conv2.weight"), dw2.into_dyn());
        grads.insert(format!("{prefix}.conv2.bias"), dbias2.into_dyn());
        let dy = leaky_relu_backward(&dy, &cache.m1);
        let (dy, dg1, db1) = self.norm1.backward(&cache.n1, &dy);
        grads.insert(format!("{prefix}.norm1.gamma"), dg1.into_dyn());
        grads.insert(format!("{prefix}.norm1.beta"), db1.into_dyn());
        let (dx, dw1, dbias1) = self.conv1.backward(&cache.c1, &dy);
        grads.insert(format!("{prefix}.conv1.weight"), dw1.into_dyn());
        grads.insert(format!("{prefix}.conv1.bias"), dbias1.into_dyn());
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        f(format!("{prefix}.conv1.weight"), &self.conv1.weight.clone().into_dyn());
        f(format!("{prefix}.conv1.bias"), &self.conv1.bias.clone().into_dyn());
        f(format!("{prefix}.norm1.gamma"), &self.norm1.gamma.clone().into_dyn());
        f(format!("{prefix}.norm1.beta"), &self.norm1.beta.clone().into_dyn());
        f(format!("{prefix}.conv2.weight"), &self.conv2.weight.clone().into_dyn());
        f(format!("{prefix}.conv2.bias"), &self.conv2.bias.clone().into_dyn());
        f(format!("{prefix}.norm2.gamma"), &self.norm2.gamma.clone().into_dyn());
        f(format!("{prefix}.norm2.beta"), &self.norm2.beta.clone().into_dyn());
    }
}

/// Named parameter gradients, keyed the same way checkpoints name blocks.
#[derive(Debug, Default)]
pub struct ModelGrads {
    entries: std::collections::BTreeMap<String, ArrayD<f64>>,
}

impl ModelGrads {
    fn insert(&mut self, name: String, grad: ArrayD<f64>) {
        self.entries.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    /// Accumulates `other` into `self` (missing keys are inserted).
    pub fn accumulate(&mut self, other: &ModelGrads) {
        for (name, grad) in other.entries.iter() {
            match self.entries.get_mut(name) {
                Some(slot) => *slot += grad,
                None => {
                    self.entries.insert(name.clone(), grad.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.entries.values_mut() {
            grad.mapv_inplace(|v| v * factor);
        }
    }
}

/// Activation caches of one training forward pass.
pub struct TrainCache {
    enc: Vec<BlockCache>,
    pools: Vec<PoolCache>,
    dec: Vec<BlockCache>,
    skip_channels: Vec<usize>,
    head: HeadCache,
}

/// Encoder-decoder segmentation model over a staged class layout.
///
/// The classifier head holds one weight vector and bias per class in the
/// current layout; [`SegmentationModel::expand_classifier`] appends channels
/// for a new stage without touching any existing parameter.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    arch: ArchConfig,
    channels: Vec<u16>,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Head,
}

impl SegmentationModel {
    /// Fresh model for the first stage. `channels` is the stage-0 layout
    /// (background first); head biases start at zero.
    pub fn new(arch: ArchConfig, channels: Vec<u16>) -> Result<Self> {
        arch.validate()?;
        if channels.first() != Some(&0) {
            return Err(Error::Config(
                "channel layout must start with background (0)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let widths: Vec<usize> = (0..arch.levels).map(|l| arch.base_width << l).collect();
        let mut enc = Vec::with_capacity(arch.levels);
        for l in 0..arch.levels {
            let c_in = if l == 0 { arch.in_channels } else { widths[l - 1] };
            enc.push(ConvBlock::new(c_in, widths[l], arch.dims, &mut rng));
        }
        let mut dec = Vec::with_capacity(arch.levels - 1);
        for l in 0..arch.levels - 1 {
            dec.push(ConvBlock::new(
                widths[l] + widths[l + 1],
                widths[l],
                arch.dims,
                &mut rng,
            ));
        }
        let head = Head::new(widths[0], channels.len(), &mut rng);
        Ok(SegmentationModel {
            arch,
            channels,
            enc,
            dec,
            head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// The class-id layout of the head (background first).
    pub fn channels(&self) -> &[u16] {
        &self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    /// Feature width feeding the classifier head.
    pub fn head_input_width(&self) -> usize {
        self.arch.base_width
    }

    fn check_input(&self, image: &ArrayD<f64>) -> Result<()> {
        if image.ndim() != self.arch.dims {
            return Err(Error::ShapeMismatch {
                context: "image dimensionality vs network dims",
                left: image.shape().to_vec(),
                right: vec![self.arch.dims],
            });
        }
        let div = self.arch.spatial_divisor();
        if image.shape().iter().any(|&s| s % div != 0 || s == 0) {
            return Err(Error::IncompatibleShape {
                got: image.shape().to_vec(),
                required: div,
                levels: self.arch.levels,
            });
        }
        Ok(())
    }

    fn run_forward(&self, image: &ArrayD<f64>) -> Result<(ArrayD<f64>, TrainCache)> {
        self.check_input(image)?;
        let mut shape = vec![self.arch.in_channels];
        shape.extend_from_slice(image.shape());
        let mut cur = image
            .to_shape(IxDyn(&shape))
            .expect("channel axis insertion")
            .to_owned();

        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut pools = Vec::with_capacity(self.enc.len() - 1);
        let mut skips: Vec<ArrayD<f64>> = Vec::with_capacity(self.enc.len() - 1);
        for (l, block) in self.enc.iter().enumerate() {
            let (y, cache) = block.forward(&cur);
            enc_caches.push(cache);
            if l + 1 < self.enc.len() {
                let (pooled, pc) = maxpool2(&y);
                skips.push(y);
                pools.push(pc);
                cur = pooled;
            } else {
                cur = y;
            }
        }

        let mut dec_caches: Vec<Option<BlockCache>> = (0..self.dec.len()).map(|_| None).collect();
        let mut skip_channels = vec![0usize; self.dec.len()];
        for l in (0..self.dec.len()).rev() {
            let up = upsample2(&cur);
            let skip = &skips[l];
            skip_channels[l] = skip.shape()[0];
            let cat = ndarray::concatenate(
                ndarray::Axis(0),
                &[skip.view(), up.view()],
            )
            .expect("skip concat");
            let (y, cache) = self.dec[l].forward(&cat);
            dec_caches[l] = Some(cache);
            cur = y;
        }

        let (logits, head_cache) = self.head.forward(&cur);
        Ok((
            logits,
            TrainCache {
                enc: enc_caches,
                pools,
                dec: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
                skip_channels,
                head: head_cache,
            },
        ))
    }

    /// Inference forward pass: one logit channel per class in the layout,
    /// same spatial shape as the input.
    pub fn predict(&self, image: &ArrayD<f64>) -> Result<LogitsMap> {
        let (logits, _) = self.run_forward(image)?;
        LogitsMap::new(logits, self.channels.clone())
    }

    /// Forward pass that retains the activation caches for [`Self::backward`].
    pub fn forward_train(&self, image: &ArrayD<f64>) -> Result<(LogitsMap, TrainCache)> {
        let (logits, cache) = self.run_forward(image)?;
        Ok((LogitsMap::new(logits, self.channels.clone())?, cache))
    }

    /// Backpropagates a loss gradient on the logits into parameter space.
    pub fn backward(&self, cache: &TrainCache, d_logits: &ArrayD<f64>) -> ModelGrads {
        let mut grads = ModelGrads::default();
        let (mut dy, dw, db) = self.head.backward(&cache.head, d_logits);
        grads.insert("head.weight".into(), dw.into_dyn());
        grads.insert("head.bias".into(), db.into_dyn());

        let mut d_skips: Vec<Option<ArrayD<f64>>> = (0..self.dec.len()).map(|_| None).collect();
        for l in 0..self.dec.len() {
            let d_cat = self.dec[l].backward(&cache.dec[l], &dy, &mut grads, &format!("dec{l}"));
            let n_skip = cache.skip_channels[l];
            let d_skip = d_cat
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..n_skip))
                .to_owned();
            let d_up = d_cat
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(n_skip..))
                .to_owned();
            d_skips[l] = Some(d_skip);
            dy = upsample2_backward(&d_up);
        }

        for l in (0..self.enc.len()).rev() {
            if l + 1 < self.enc.len() {
                let mut d_out = maxpool2_backward(&cache.pools[l], &dy);
                d_out += d_skips[l].as_ref().expect("skip gradient");
                dy = self.enc[l].backward(&cache.enc[l], &d_out, &mut grads, &format!("enc{l}"));
            } else {
                dy = self.enc[l].backward(&cache.enc[l], &dy, &mut grads, &format!("enc{l}"));
            }
        }
        grads
    }

    /// Appends head channels for the classes of a new stage.
    ///
    /// New-class weight vectors copy the background channel's weights, and
    /// the background bias together with each new-class bias becomes
    /// `b_bg - ln(|new| + 1)`. Immediately after expansion the softmax mass
    /// the old head gave to background is split equally among background and
    /// the new classes at every voxel, and every old-class logit is
    /// unchanged.
    pub fn expand_classifier(&mut self, new_classes: &[u16]) -> Result<()> {
        if new_classes.is_empty() {
            return Ok(());
        }
        for &c in new_classes {
            if self.channels.contains(&c) {
                return Err(Error::Config(format!(
                    "class {c} already present in the head"
                )));
            }
        }
        let n_new = new_classes.len();
        let c_in = self.head.weight.ncols();
        let old_out = self.head.weight.nrows();
        let shift = ((n_new + 1) as f64).ln();
        let new_bg_bias = self.head.bias[0] - shift;

        let mut weight = ndarray::Array2::<f64>::zeros((old_out + n_new, c_in));
        weight
            .slice_mut(ndarray::s![0..old_out, ..])
            .assign(&self.head.weight);
        for r in 0..n_new {
            weight
                .row_mut(old_out + r)
                .assign(&self.head.weight.row(0));
        }
        let mut bias = ndarray::Array1::<f64>::zeros(old_out + n_new);
        bias.slice_mut(ndarray::s![0..old_out])
            .assign(&self.head.bias);
        bias[0] = new_bg_bias;
        for r in 0..n_new {
            bias[old_out + r] = new_bg_bias;
        }
        self.head.weight = weight;
        self.head.bias = bias;
        self.channels.extend_from_slice(new_classes);
        Ok(())
    }

    /// Visits every parameter in a stable order with its block name.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        for (l, block) in self.enc.iter().enumerate() {
            block.visit(&format!("enc{l}"), f);
        }
        for (l, block) in self.dec.iter().enumerate() {
            block.visit(&format!("dec{l}"), f);
        }
        f("head.weight".into(), &self.head.weight.clone().into_dyn());
        f("head.bias".into(), &self.head.bias.clone().into_dyn());
    }

    /// Applies `update(name, param_flat_mut)` to every parameter in the same
    /// order as [`Self::visit_params`].
    pub fn update_params(&mut self, update: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, block) in self.enc.iter_mut().enumerate() {
            Self::update_block(block, &format!("enc{l}"), update);
        }
        for (l, block) in self.dec.iter_mut().enumerate() {
            Self::update_block(block, &format!("dec{l}"), update);
        }
        update("head.weight", self.head.weight.as_slice_mut().unwrap());
        update("head.bias", self.head.bias.as_slice_mut().unwrap());
    }

    fn update_block(block: &mut ConvBlock, prefix: &str, update: &mut dyn FnMut(&str, &mut [f64])) {
        update(
            &format!("{prefix}.conv1.weight"),
            block.conv1.weight.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.conv1.bias"),
            block.conv1.bias.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.norm1.gamma"),
            block.norm1.gamma.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.norm1.beta"),
            block.norm1.beta.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.conv2.weight"),
            block.conv2.weight.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.conv2.bias"),
            block.conv2.bias.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.norm2.gamma"),
            block.norm2.gamma.as_slice_mut().unwrap(),
        );
        update(
            &format!("{prefix}.norm2.beta"),
            block.norm2.beta.as_slice_mut().unwrap(),
        );
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Zeroes the classifier head weights (all per-voxel logits become equal
    /// and the softmax uniform); used by diagnostics and tests.
    pub fn zero_head(&mut self) {
        self.head.weight.fill(0.0);
        self.head.bias.fill(0.0);
    }

    pub(crate) fn named_param_blocks(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut blocks = Vec::new();
        self.visit_params(&mut |name, p| {
            blocks.push((name, p.shape().to_vec(), p.iter().copied().collect()));
        });
        blocks
    }

    pub(crate) fn load_param_blocks(
        &mut self,
        blocks: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        self.update_params(&mut |name, slot| {
            if let Some((_, data)) = blocks.get(name) {
                if data.len() == slot.len() {
                    slot.copy_from_slice(data);
                } else {
                    missing.push(format!("{name}: size {} vs {}", data.len(), slot.len()));
                }
            } else {
                missing.push(name.to_string());
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "checkpoint is missing or mismatches parameter blocks: {missing:?}"
            )))
        }
    }
}

/// Inference-only wrapper around a frozen previous-stage model.
///
/// The wrapped parameters are immutable by construction; outputs carry no
/// gradient path.
pub struct Teacher {
    model: SegmentationModel,
}

impl Teacher {
    pub fn predict(&self, image: &ArrayD<f64>) -> Result<LogitsMap> {
        self.model.predict(image)
    }

    pub fn channels(&self) -> &[u16] {
        self.model.channels()
    }
}

/// Loads a checkpoint as a frozen teacher.
pub fn freeze_teacher(path: &std::path::Path) -> Result<(Teacher, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    Ok((Teacher { model }, meta))
}

/// Wraps an in-memory model as a frozen teacher.
pub fn freeze_model(model: SegmentationModel) -> Teacher {
    Teacher { model }
}
