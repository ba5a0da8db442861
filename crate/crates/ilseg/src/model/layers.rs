//! Network building blocks with explicit forward/backward passes.
//!
//! All activations are channel-major `f64` arrays of shape `(C, spatial...)`
//! with 2-D or 3-D spatial grids. Convolutions are 3^d kernels with unit
//! stride and zero padding of 1, computed as im2col plus a GEMM.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

fn kernel_volume(dims: usize) -> usize {
    3usize.pow(dims as u32)
}

fn spatial_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// Lowers a padded 3^d neighborhood around every voxel into a column matrix
/// of shape `(c_in * 3^d, n_voxels)`.
fn im2col(x: &ArrayD<f64>, dims: usize) -> Array2<f64> {
    let shape = x.shape();
    let c = shape[0];
    let kv = kernel_volume(dims);
    let n = spatial_len(shape);
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((c * kv, n));
    let cs = col.as_slice_mut().expect("standard layout");
    match dims {
        2 => {
            let (h, w) = (shape[1], shape[2]);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let j = ((dy + 1) * 3 + (dx + 1)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as i64 - dx.max(0)) as usize;
                    for ci in 0..c {
                        let row = (ci * kv + j) * n;
                        let src_ch = ci * n;
                        for y in 0..h {
                            let sy = y as i64 + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let src = src_ch + sy as usize * w;
                            let dst = row + y * w;
                            let s0 = (x0 as i64 + dx) as usize;
                            cs[dst + x0..dst + x1]
                                .copy_from_slice(&xs[src + s0..src + s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (shape[1], shape[2], shape[3]);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let j = (((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as i64 - dx.max(0)) as usize;
                        for ci in 0..c {
                            let row = (ci * kv + j) * n;
                            let src_ch = ci * n;
                            for z in 0..d {
                                let sz = z as i64 + dz;
                                if sz < 0 || sz >= d as i64 {
                                    continue;
                                }
                                for y in 0..h {
                                    let sy = y as i64 + dy;
                                    if sy < 0 || sy >= h as i64 {
                                        continue;
                                    }
                                    let src = src_ch + (sz as usize * h + sy as usize) * w;
                                    let dst = row + (z * h + y) * w;
                                    let s0 = (x0 as i64 + dx) as usize;
                                    cs[dst + x0..dst + x1]
                                        .copy_from_slice(&xs[src + s0..src + s0 + (x1 - x0)]);
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("dims checked at construction"),
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto the input grid; the exact
/// adjoint of [`im2col`].
fn col2im(dcol: &Array2<f64>, in_shape: &[usize], dims: usize) -> ArrayD<f64> {
    let c = in_shape[0];
    let kv = kernel_volume(dims);
    let n = spatial_len(in_shape);
    let mut dx_arr = ArrayD::<f64>::zeros(IxDyn(in_shape));
    let dxs = dx_arr.as_slice_mut().expect("standard layout");
    let dc = dcol.as_slice().expect("standard layout");
    match dims {
        2 => {
            let (h, w) = (in_shape[1], in_shape[2]);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let j = ((dy + 1) * 3 + (dx + 1)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as i64 - dx.max(0)) as usize;
                    for ci in 0..c {
                        let row = (ci * kv + j) * n;
                        let dst_ch = ci * n;
                        for y in 0..h {
                            let sy = y as i64 + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let dst = dst_ch + sy as usize * w;
                            let src = row + y * w;
                            let s0 = (x0 as i64 + dx) as usize;
                            for i in 0..(x1 - x0) {
                                dxs[dst + s0 + i] += dc[src + x0 + i];
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let j = (((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as i64 - dx.max(0)) as usize;
                        for ci in 0..c {
                            let row = (ci * kv + j) * n;
                            let dst_ch = ci * n;
                            for z in 0..d {
                                let sz = z as i64 + dz;
                                if sz < 0 || sz >= d as i64 {
                                    continue;
                                }
                                for y in 0..h {
                                    let sy = y as i64 + dy;
                                    if sy < 0 || sy >= h as i64 {
                                        continue;
                                    }
                                    let dst = dst_ch + (sz as usize * h + sy as usize) * w;
                                    let src = row + (z * h + y) * w;
                                    let s0 = (x0 as i64 + dx) as usize;
                                    for i in 0..(x1 - x0) {
                                        dxs[dst + s0 + i] += dc[src + x0 + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    dx_arr
}

/// 3^d convolution, padding 1, stride 1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    dims: usize,
}

pub struct ConvCache {
    col: Array2<f64>,
    in_shape: Vec<usize>,
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, dims: usize, rng: &mut impl Rng) -> Self {
        let kv = kernel_volume(dims);
        let fan_in = c_in * kv;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight =
            Array2::from_shape_fn((c_out, fan_in), |_| rng.gen_range(-bound..bound));
        Conv {
            weight,
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
            dims,
        }
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, ConvCache) {
        debug_assert_eq!(x.shape()[0], self.c_in);
        let col = im2col(x, self.dims);
        let mut y_mat = self.weight.dot(&col);
        for (mut row, &b) in y_mat.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = self.c_out;
        let y = y_mat
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("conv output shape");
        (
            y,
            ConvCache {
                col,
                in_shape: x.shape().to_vec(),
            },
        )
    }

    /// Returns the input gradient along with `(d_weight, d_bias)`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, Array2<f64>, Array1<f64>) {
        let n = spatial_len(&cache.in_shape);
        let dy_mat = dy
            .to_shape((self.c_out, n))
            .expect("gradient shape")
            .to_owned();
        let d_weight = dy_mat.dot(&cache.col.t());
        let d_bias = dy_mat.sum_axis(Axis(1));
        let dcol = self.weight.t().dot(&dy_mat);
        let dx = col2im(&dcol, &cache.in_shape, self.dims);
        (dx, d_weight, d_bias)
    }
}

/// Instance normalization: per-channel standardization over the spatial grid
/// with learned scale and shift. Chosen over batch statistics so tiny batch
/// sizes cannot leak across samples.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct NormCache {
    xhat: ArrayD<f64>,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, NormCache) {
        let c = x.shape()[0];
        let n = spatial_len(x.shape()) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(c);
        for (ci, mut ch) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            ch.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let _ = ci;
        }
        let mut y = xhat.clone();
        for (ci, mut ch) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            ch.mapv_inplace(|v| g * v + b);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        dy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, Array1<f64>, Array1<f64>) {
        let c = dy.shape()[0];
        let n = spatial_len(dy.shape()) as f64;
        let mut d_gamma = Array1::<f64>::zeros(c);
        let mut d_beta = Array1::<f64>::zeros(c);
        let mut dx = dy.clone();
        for ci in 0..c {
            let xhat = cache.xhat.index_axis(Axis(0), ci);
            let dy_ch = dy.index_axis(Axis(0), ci);
            let sum_dy: f64 = dy_ch.sum();
            let sum_dy_xhat: f64 = dy_ch.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
            d_gamma[ci] = sum_dy_xhat;
            d_beta[ci] = sum_dy;
            let scale = self.gamma[ci] * cache.inv_std[ci];
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            let mut dx_ch = dx.index_axis_mut(Axis(0), ci);
            for (slot, (&g, &xh)) in dx_ch.iter_mut().zip(dy_ch.iter().zip(xhat.iter())) {
                *slot = scale * (g - mean_dy - xh * mean_dy_xhat);
            }
        }
        (dx, d_gamma, d_beta)
    }
}

pub fn leaky_relu(x: &ArrayD<f64>) -> (ArrayD<f64>, Vec<bool>) {
    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let y = x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
    (y, mask)
}

pub fn leaky_relu_backward(dy: &ArrayD<f64>, mask: &[bool]) -> ArrayD<f64> {
    let mut dx = dy.clone();
    for (slot, &m) in dx.iter_mut().zip(mask.iter()) {
        if !m {
            *slot *= LEAKY_SLOPE;
        }
    }
    dx
}

pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

/// 2^d max pooling with stride 2; spatial extents must be even.
pub fn maxpool2(x: &ArrayD<f64>) -> (ArrayD<f64>, PoolCache) {
    let shape = x.shape().to_vec();
    let dims = shape.len() - 1;
    let mut out_shape = shape.clone();
    for s in out_shape[1..].iter_mut() {
        *s /= 2;
    }
    let xs = x.as_slice().expect("standard layout");
    let mut y = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let out_n: usize = out_shape[1..].iter().product();
    let mut argmax = vec![0usize; out_shape[0] * out_n];
    {
        let ys = y.as_slice_mut().expect("standard layout");
        match dims {
            2 => {
                let (h, w) = (shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                for c in 0..shape[0] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for iy in 0..2 {
                                for ix in 0..2 {
                                    let idx = c * h * w + (2 * oy + iy) * w + 2 * ox + ix;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                            let o = c * oh * ow + oy * ow + ox;
                            ys[o] = best;
                            argmax[o] = best_i;
                        }
                    }
                }
            }
            3 => {
                let (d, h, w) = (shape[1], shape[2], shape[3]);
                let (od, oh, ow) = (d / 2, h / 2, w / 2);
                for c in 0..shape[0] {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_i = 0;
                                for iz in 0..2 {
                                    for iy in 0..2 {
                                        for ix in 0..2 {
                                            let idx = c * d * h * w
                                                + ((2 * oz + iz) * h + 2 * oy + iy) * w
                                                + 2 * ox
                                                + ix;
                                            if xs[idx] > best {
                                                best = xs[idx];
                                                best_i = idx;
                                            }
                                        }
                                    }
                                }
                                let o = c * od * oh * ow + (oz * oh + oy) * ow + ox;
                                ys[o] = best;
                                argmax[o] = best_i;
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    (
        y,
        PoolCache {
            argmax,
            in_shape: shape,
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&cache.in_shape));
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (&src, &g) in cache.argmax.iter().zip(dy.iter()) {
        dxs[src] += g;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let shape = x.shape().to_vec();
    let dims = shape.len() - 1;
    let mut out_shape = shape.clone();
    for s in out_shape[1..].iter_mut() {
        *s *= 2;
    }
    let mut y = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    match dims {
        2 => {
            let (h, w) = (shape[1], shape[2]);
            let (nh, nw) = (2 * h, 2 * w);
            for c in 0..shape[0] {
                for y_ in 0..nh {
                    for x_ in 0..nw {
                        ys[c * nh * nw + y_ * nw + x_] = xs[c * h * w + (y_ / 2) * w + x_ / 2];
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (shape[1], shape[2], shape[3]);
            let (nd, nh, nw) = (2 * d, 2 * h, 2 * w);
            for c in 0..shape[0] {
                for z_ in 0..nd {
                    for y_ in 0..nh {
                        for x_ in 0..nw {
                            ys[c * nd * nh * nw + (z_ * nh + y_) * nw + x_] =
                                xs[c * d * h * w + ((z_ / 2) * h + y_ / 2) * w + x_ / 2];
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    y
}

pub fn upsample2_backward(dy: &ArrayD<f64>) -> ArrayD<f64> {
    let shape = dy.shape().to_vec();
    let dims = shape.len() - 1;
    let mut in_shape = shape.clone();
    for s in in_shape[1..].iter_mut() {
        *s /= 2;
    }
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
    let dys = dy.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    match dims {
        2 => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (nh, nw) = (2 * h, 2 * w);
            for c in 0..shape[0] {
                for y_ in 0..nh {
                    for x_ in 0..nw {
                        dxs[c * h * w + (y_ / 2) * w + x_ / 2] +=
                            dys[c * nh * nw + y_ * nw + x_];
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
            let (nd, nh, nw) = (2 * d, 2 * h, 2 * w);
            for c in 0..shape[0] {
                for z_ in 0..nd {
                    for y_ in 0..nh {
                        for x_ in 0..nw {
                            dxs[c * d * h * w + ((z_ / 2) * h + y_ / 2) * w + x_ / 2] +=
                                dys[c * nd * nh * nw + (z_ * nh + y_) * nw + x_];
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    dx
}

/// 1x1 convolution: the classifier head. Each output class owns one weight
/// vector over the feature channels plus a bias.
#[derive(Debug, Clone)]
pub struct Head {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct HeadCache {
    input: ArrayD<f64>,
}

impl Head {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / c_in as f64).sqrt();
        let weight = Array2::from_shape_fn((c_out, c_in), |_| rng.gen_range(-bound..bound));
        Head {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, HeadCache) {
        let n = spatial_len(x.shape());
        let x_mat = x.to_shape((x.shape()[0], n)).expect("head input");
        let mut y_mat = self.weight.dot(&x_mat);
        for (mut row, &b) in y_mat.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = self.weight.nrows();
        let y = y_mat
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("head output shape");
        (y, HeadCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &HeadCache,
        dy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, Array2<f64>, Array1<f64>) {
        let n = spatial_len(cache.input.shape());
        let x_mat = cache
            .input
            .to_shape((cache.input.shape()[0], n))
            .expect("head input");
        let dy_mat = dy.to_shape((self.weight.nrows(), n)).expect("head grad");
        let d_weight = dy_mat.dot(&x_mat.t());
        let d_bias = dy_mat.sum_axis(Axis(1));
        let dx_mat = self.weight.t().dot(&dy_mat);
        let dx = dx_mat
            .into_shape_with_order(cache.input.raw_dim())
            .expect("head input grad");
        (dx, d_weight, d_bias)
    }
}
