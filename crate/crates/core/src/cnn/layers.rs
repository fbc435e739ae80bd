//! Forward and reverse-mode passes for the three layer kinds: 3x3x3 "same"
//! convolution, per-channel normalization, and ReLU.
//!
//! Convolutions are cross-correlations with one voxel of zero padding per
//! side, so spatial dimensions are preserved. Kernel storage is
//! `[out][in][kz][ky][kx]` with kx fastest.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance guard used by the normalization layers.
pub const NORM_EPS: f64 = 1e-5;

pub const KERNEL_EDGE: usize = 3;
pub const KERNEL_VOLUME: usize = KERNEL_EDGE * KERNEL_EDGE * KERNEL_EDGE;

/// Iterates the 27 kernel taps as (flat index, dz, dy, dx) offsets.
#[inline]
fn kernel_taps() -> impl Iterator<Item = (usize, isize, isize, isize)> {
    (0..KERNEL_VOLUME).map(|k| {
        let kz = k / 9;
        let ky = (k / 3) % 3;
        let kx = k % 3;
        (k, kz as isize - 1, ky as isize - 1, kx as isize - 1)
    })
}

/// Valid output index range along one axis for a tap offset `d`, so that the
/// source index stays in bounds.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = len - if d > 0 { d as usize } else { 0 };
    (lo, hi)
}

fn check_conv_shapes(input: &Tensor, kernel: &[f64], bias: &[f64]) -> Result<usize> {
    let out_channels = bias.len();
    let expected = out_channels * input.channels * KERNEL_VOLUME;
    if kernel.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} values, expected {out_channels} x {} x {KERNEL_VOLUME}",
            kernel.len(),
            input.channels
        )));
    }
    if out_channels == 0 {
        return Err(Error::ShapeMismatch("conv needs at least one filter".into()));
    }
    Ok(out_channels)
}

/// 3x3x3 cross-correlation with zero "same" padding.
pub fn conv3d_same(input: &Tensor, kernel: &[f64], bias: &[f64]) -> Result<Tensor> {
    let out_channels = check_conv_shapes(input, kernel, bias)?;
    let (nx, ny, nz) = input.dims;
    let spatial = input.spatial_len();
    let mut out = Tensor::zeros(out_channels, input.dims);

    for o in 0..out_channels {
        out.channel_mut(o).fill(bias[o]);
    }
    for o in 0..out_channels {
        for i in 0..input.channels {
            let src = input.channel(i);
            let kbase = (o * input.channels + i) * KERNEL_VOLUME;
            let dst = &mut out.data[o * spatial..(o + 1) * spatial];
            for (k, dz, dy, dx) in kernel_taps() {
                let w = kernel[kbase + k];
                let (z0, z1) = valid_range(nz, dz);
                let (y0, y1) = valid_range(ny, dy);
                let (x0, x1) = valid_range(nx, dx);
                if x0 >= x1 {
                    continue;
                }
                for z in z0..z1 {
                    let sz = (z as isize + dz) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = nx * (y + ny * z);
                        let srow = nx * (sy + ny * sz);
                        let s0 = (x0 as isize + dx) as usize;
                        let d = &mut dst[drow + x0..drow + x1];
                        let s = &src[srow + s0..srow + s0 + (x1 - x0)];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its parameters.
#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Reverse pass of [`conv3d_same`]: gradient w.r.t. the input plus parameter
/// gradients, given the upstream gradient `gout`.
pub fn conv3d_same_backward(
    input: &Tensor,
    kernel: &[f64],
    out_channels: usize,
    gout: &Tensor,
) -> Result<(Tensor, Conv3dGrads)> {
    if gout.channels != out_channels || gout.dims != input.dims {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient shape {} x {:?} does not match conv output {out_channels} x {:?}",
            gout.channels, gout.dims, input.dims
        )));
    }
    let (nx, ny, nz) = input.dims;
    let mut gin = Tensor::zeros(input.channels, input.dims);
    let mut gkernel = vec![0.0; kernel.len()];
    let mut gbias = vec![0.0; out_channels];

    for o in 0..out_channels {
        gbias[o] = gout.channel(o).iter().sum();
    }
    for o in 0..out_channels {
        let g = gout.channel(o);
        for i in 0..input.channels {
            let src = input.channel(i);
            let kbase = (o * input.channels + i) * KERNEL_VOLUME;
            let spatial = input.spatial_len();
            let gin_ch = &mut gin.data[i * spatial..(i + 1) * spatial];
            for (k, dz, dy, dx) in kernel_taps() {
                let w = kernel[kbase + k];
                let (z0, z1) = valid_range(nz, dz);
                let (y0, y1) = valid_range(ny, dy);
                let (x0, x1) = valid_range(nx, dx);
                if x0 >= x1 {
                    continue;
                }
                let mut gw = 0.0;
                for z in z0..z1 {
                    let sz = (z as isize + dz) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = nx * (y + ny * z);
                        let srow = nx * (sy + ny * sz);
                        let s0 = (x0 as isize + dx) as usize;
                        let gr = &g[grow + x0..grow + x1];
                        let sr = &src[srow + s0..srow + s0 + (x1 - x0)];
                        let gi = &mut gin_ch[srow + s0..srow + s0 + (x1 - x0)];
                        for ((gv, sv), giv) in gr.iter().zip(sr).zip(gi.iter_mut()) {
                            gw += gv * sv;
                            *giv += w * gv;
                        }
                    }
                }
                gkernel[kbase + k] = gw;
            }
        }
    }
    Ok((
        gin,
        Conv3dGrads {
            kernel: gkernel,
            bias: gbias,
        },
    ))
}

/// Per-channel normalization statistics retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    /// Standardized activations (before the affine transform).
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<f64>,
}

/// Standardizes each channel over its spatial extent and applies the optional
/// affine transform. This is normalization of a single instance, independent
/// of any batch.
pub fn instance_norm(
    input: &Tensor,
    scale: Option<&[f64]>,
    shift: Option<&[f64]>,
    eps: f64,
) -> (Tensor, NormStats) {
    let spatial = input.spatial_len() as f64;
    let mut xhat = Tensor::zeros(input.channels, input.dims);
    let mut inv_std = Vec::with_capacity(input.channels);
    for c in 0..input.channels {
        let x = input.channel(c);
        let mean = x.iter().sum::<f64>() / spatial;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / spatial;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (o, &v) in xhat.channel_mut(c).iter_mut().zip(x) {
            *o = (v - mean) * istd;
        }
    }
    let mut out = xhat.clone();
    if let (Some(scale), Some(shift)) = (scale, shift) {
        for c in 0..out.channels {
            let (s, b) = (scale[c], shift[c]);
            for v in out.channel_mut(c) {
                *v = s * *v + b;
            }
        }
    }
    (
        out,
        NormStats {
            xhat,
            inv_std,
        },
    )
}

/// Affine gradients of a normalization layer.
#[derive(Debug, Clone, Default)]
pub struct NormGrads {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Reverse pass of [`instance_norm`] for one sample.
pub fn instance_norm_backward(
    stats: &NormStats,
    scale: Option<&[f64]>,
    gout: &Tensor,
) -> (Tensor, NormGrads) {
    let n = gout.spatial_len() as f64;
    let mut gin = Tensor::zeros(gout.channels, gout.dims);
    let mut grads = NormGrads::default();
    if scale.is_some() {
        grads.scale = vec![0.0; gout.channels];
        grads.shift = vec![0.0; gout.channels];
    }
    for c in 0..gout.channels {
        let g = gout.channel(c);
        let xh = stats.xhat.channel(c);
        let istd = stats.inv_std[c];
        let s = scale.map_or(1.0, |sc| sc[c]);
        if let Some(_sc) = scale {
            grads.scale[c] = g.iter().zip(xh).map(|(&gv, &xv)| gv * xv).sum();
            grads.shift[c] = g.iter().sum();
        }
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(&gv, &xv)| gv * xv).sum();
        let out = gin.channel_mut(c);
        for i in 0..g.len() {
            out[i] = s * istd * (g[i] - sum_g / n - xh[i] * sum_gx / n);
        }
    }
    (gin, grads)
}

/// Batch-statistics normalization: standardizes each channel over the whole
/// batch plus spatial extent. With a batch of one this coincides with
/// [`instance_norm`].
pub fn batch_norm(
    batch: &[Tensor],
    scale: Option<&[f64]>,
    shift: Option<&[f64]>,
    eps: f64,
) -> (Vec<Tensor>, NormStats) {
    let channels = batch[0].channels;
    let spatial = batch[0].spatial_len();
    let n = (batch.len() * spatial) as f64;
    let mut inv_std = Vec::with_capacity(channels);
    let mut means = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for t in batch {
            for &v in t.channel(c) {
                sum += v;
                sum2 += v * v;
            }
        }
        let mean = sum / n;
        let var = (sum2 / n - mean * mean).max(0.0);
        means.push(mean);
        inv_std.push(1.0 / (var + eps).sqrt());
    }
    // xhat for every sample, stored concatenated along a fake batch channel
    let mut xhat_all = Tensor::zeros(batch.len() * channels, batch[0].dims);
    let mut outputs = Vec::with_capacity(batch.len());
    for (bi, t) in batch.iter().enumerate() {
        let mut out = Tensor::zeros(channels, t.dims);
        for c in 0..channels {
            let istd = inv_std[c];
            let mean = means[c];
            let xh = xhat_all.channel_mut(bi * channels + c);
            let (s, b) = match (scale, shift) {
                (Some(s), Some(b)) => (s[c], b[c]),
                _ => (1.0, 0.0),
            };
            for ((o, xv), &v) in out.channel_mut(c).iter_mut().zip(xh.iter_mut()).zip(t.channel(c)) {
                let h = (v - mean) * istd;
                *xv = h;
                *o = s * h + b;
            }
        }
        outputs.push(out);
    }
    (
        outputs,
        NormStats {
            xhat: xhat_all,
            inv_std,
        },
    )
}

/// Reverse pass of [`batch_norm`], coupling gradients across the batch.
pub fn batch_norm_backward(
    stats: &NormStats,
    scale: Option<&[f64]>,
    gouts: &[Tensor],
) -> (Vec<Tensor>, NormGrads) {
    let channels = gouts[0].channels;
    let spatial = gouts[0].spatial_len();
    let n = (gouts.len() * spatial) as f64;
    let mut grads = NormGrads::default();
    if scale.is_some() {
        grads.scale = vec![0.0; channels];
        grads.shift = vec![0.0; channels];
    }
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for (bi, g) in gouts.iter().enumerate() {
        for c in 0..channels {
            let xh = stats.xhat.channel(bi * channels + c);
            for (&gv, &xv) in g.channel(c).iter().zip(xh) {
                sum_g[c] += gv;
                sum_gx[c] += gv * xv;
            }
        }
    }
    if scale.is_some() {
        grads.scale.copy_from_slice(&sum_gx);
        grads.shift.copy_from_slice(&sum_g);
    }
    let mut gins = Vec::with_capacity(gouts.len());
    for (bi, g) in gouts.iter().enumerate() {
        let mut gin = Tensor::zeros(channels, g.dims);
        for c in 0..channels {
            let xh = stats.xhat.channel(bi * channels + c);
            let istd = stats.inv_std[c];
            let s = scale.map_or(1.0, |sc| sc[c]);
            let out = gin.channel_mut(c);
            let gch = g.channel(c);
            for i in 0..gch.len() {
                out[i] = s * istd * (gch[i] - sum_g[c] / n - xh[i] * sum_gx[c] / n);
            }
        }
        gins.push(gin);
    }
    (gins, grads)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        channels: input.channels,
        dims: input.dims,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn relu_backward(input: &Tensor, gout: &Tensor) -> Tensor {
    Tensor {
        channels: gout.channels,
        dims: gout.dims,
        data: input
            .data
            .iter()
            .zip(gout.data.iter())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(channels: usize, dims: (usize, usize, usize), seed: u64, span: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * dims.0 * dims.1 * dims.2;
        Tensor {
            channels,
            dims,
            data: (0..n).map(|_| rng.random_range(-span..span)).collect(),
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let input = random_tensor(1, (5, 5, 5), 1, 1.0);
        let mut kernel = vec![0.0; 27];
        kernel[13] = 1.0; // center tap
        let out = conv3d_same(&input, &kernel, &[0.0]).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_all_ones_interior_and_corner() {
        let c = 2.5;
        let bias = 0.75;
        let input = Tensor {
            channels: 1,
            dims: (5, 5, 5),
            data: vec![c; 125],
        };
        let kernel = vec![1.0; 27];
        let out = conv3d_same(&input, &kernel, &[bias]).unwrap();
        let at = |x: usize, y: usize, z: usize| out.data[x + 5 * (y + 5 * z)];
        assert!((at(2, 2, 2) - (27.0 * c + bias)).abs() < 1e-12);
        assert!((at(0, 0, 0) - (8.0 * c + bias)).abs() < 1e-12);
        assert!((at(4, 4, 4) - (8.0 * c + bias)).abs() < 1e-12);
        // edge voxel: 2 in-bounds taps on one axis, 3 on the others
        assert!((at(0, 2, 2) - (18.0 * c + bias)).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let input = random_tensor(2, (4, 4, 4), 1, 1.0);
        let kernel = vec![0.0; 27]; // sized for 1 input channel
        assert!(conv3d_same(&input, &kernel, &[0.0]).is_err());
    }

    #[test]
    fn instance_norm_standardizes() {
        let input = random_tensor(3, (6, 6, 6), 2, 30.0);
        let scale = vec![1.0; 3];
        let shift = vec![0.0; 3];
        let (out, _) = instance_norm(&input, Some(&scale), Some(&shift), NORM_EPS);
        for c in 0..3 {
            let ch = out.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let input = Tensor {
            channels: 1,
            dims: (4, 4, 4),
            data: vec![3.5; 64],
        };
        let (out, _) = instance_norm(&input, None, None, NORM_EPS);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_independent_of_batch_partner() {
        // process two different patches; each result must be exactly what the
        // patch produces alone, whatever its batch partner is
        let a = random_tensor(2, (5, 5, 5), 3, 10.0);
        let b = random_tensor(2, (5, 5, 5), 4, 10.0);
        let c = random_tensor(2, (5, 5, 5), 5, 10.0);
        let (alone, _) = instance_norm(&a, None, None, NORM_EPS);
        for partner in [&b, &c] {
            let (with_partner, _) = instance_norm(&a, None, None, NORM_EPS);
            let (_, _) = instance_norm(partner, None, None, NORM_EPS);
            assert_eq!(alone.data, with_partner.data);
        }
    }

    #[test]
    fn batch_norm_of_one_matches_instance_norm() {
        let t = random_tensor(3, (5, 5, 5), 6, 10.0);
        let (inst, _) = instance_norm(&t, None, None, NORM_EPS);
        let (batch, _) = batch_norm(std::slice::from_ref(&t), None, None, NORM_EPS);
        for (a, b) in inst.data.iter().zip(&batch[0].data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_couples_samples() {
        let a = random_tensor(1, (4, 4, 4), 7, 10.0);
        let b = random_tensor(1, (4, 4, 4), 8, 10.0);
        let (alone, _) = batch_norm(std::slice::from_ref(&a), None, None, NORM_EPS);
        let (paired, _) = batch_norm(&[a.clone(), b], None, None, NORM_EPS);
        assert_ne!(alone[0].data, paired[0].data);
    }

    #[test]
    fn relu_clamps_and_gates() {
        let input = Tensor {
            channels: 1,
            dims: (2, 2, 1),
            data: vec![-1.0, 0.0, 2.0, -0.5],
        };
        let out = relu(&input);
        assert_eq!(out.data, vec![0.0, 0.0, 2.0, 0.0]);
        let g = Tensor {
            channels: 1,
            dims: (2, 2, 1),
            data: vec![1.0, 1.0, 1.0, 1.0],
        };
        let gin = relu_backward(&input, &g);
        assert_eq!(gin.data, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
