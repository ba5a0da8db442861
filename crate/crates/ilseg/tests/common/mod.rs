//! Shared test oracles: finite-difference gradients and random instances.

use ilseg::labelspace::{LabelSpace, LogitsMap, PartialLabelMap};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of a scalar function of the logits
/// (double precision, step 1e-5).
pub fn fd_grad(f: &dyn Fn(&LogitsMap) -> f64, logits: &LogitsMap) -> ArrayD<f64> {
    let h = 1e-5;
    let base = logits.values().clone();
    let channels = logits.channels().to_vec();
    let mut grad = ArrayD::<f64>::zeros(base.raw_dim());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        let mut minus = base.clone();
        minus.as_slice_mut().unwrap()[i] -= h;
        let fp = f(&LogitsMap::new(plus, channels.clone()).unwrap());
        let fm = f(&LogitsMap::new(minus, channels.clone()).unwrap());
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Norm-relative error between an analytic and a numeric gradient.
pub fn grad_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub struct RandomInstance {
    pub space: LabelSpace,
    pub stage: usize,
    pub student: LogitsMap,
    pub teacher: LogitsMap,
    pub labels: PartialLabelMap,
}

/// Random 4-channel, 2-voxel instance over a two-stage label space.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Alternate between one and two new classes at the final stage.
    let space = if seed % 2 == 0 {
        LabelSpace::new(vec![vec![1, 2], vec![3]]).unwrap()
    } else {
        LabelSpace::new(vec![vec![1], vec![2, 3]]).unwrap()
    };
    let stage = 1;
    let spatial = [2usize, 1];
    let c_total = space.num_channels_at(stage);
    let c_old = space.old_channel_count(stage);
    let student = LogitsMap::new(
        ArrayD::from_shape_fn(IxDyn(&[c_total, spatial[0], spatial[1]]), |_| {
            rng.gen_range(-2.0..2.0)
        }),
        space.channels_at(stage),
    )
    .unwrap();
    // Teacher logits keep a clear per-voxel winner so the corrective weight
    // stays moderate: a clamped weight of 1e4 would turn the 1e-5 probe step
    // into a 0.1 step in rescaled-logit space and invalidate the central
    // difference itself (the clamped regime is covered by exact scalar
    // tests).
    let mut teacher_values =
        ArrayD::from_shape_fn(IxDyn(&[c_old, spatial[0], spatial[1]]), |_| {
            rng.gen_range(-2.0..0.5)
        });
    for voxel in 0..spatial[0] * spatial[1] {
        let winner = rng.gen_range(0..c_old);
        teacher_values.as_slice_mut().unwrap()[winner * spatial[0] * spatial[1] + voxel] =
            rng.gen_range(2.0..3.0);
    }
    let teacher = LogitsMap::new(teacher_values, space.channels_at(stage - 1)).unwrap();
    let allowed: Vec<u16> = std::iter::once(0)
        .chain(space.stage_classes(stage).iter().copied())
        .collect();
    let labels = PartialLabelMap::new(ArrayD::from_shape_fn(
        IxDyn(&spatial),
        |_| allowed[rng.gen_range(0..allowed.len())],
    ));
    RandomInstance {
        space,
        stage,
        student,
        teacher,
        labels,
    }
}
