//! Dense 3D scalar volumes plus the moment-map, normalization and patch-grid
//! machinery the denoising pipeline is built on.
//!
//! Voxel data is stored x-fastest: `data[x + nx * (y + ny * z)]`. All
//! operations here are pure; a [`Volume`] is never mutated once handed to a
//! caller, so values can be shared freely across threads.

use crate::error::{Error, Result};

/// Dense 3D scalar field. The universal carrier for clean, noisy, denoised,
/// residual and map images.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    voxel_size: (f64, f64, f64),
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume from raw data in x-fastest order.
    ///
    /// Fails if the dimensions are zero, the buffer length does not match, or
    /// any value is non-finite.
    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        let expected = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::InvalidArgument(format!("volume dims overflow: {dims:?}")))?;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {dims:?} ({expected} voxels)",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume data contains non-finite values".into(),
            ));
        }
        Ok(Self {
            dims,
            voxel_size: (1.0, 1.0, 1.0),
            data,
        })
    }

    /// Constant-valued volume.
    pub fn filled(dims: (usize, usize, usize), value: f64) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Self::from_vec(dims, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_vec(dims, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_size(&self) -> (f64, f64, f64) {
        self.voxel_size
    }

    pub fn set_voxel_size(&mut self, voxel_size: (f64, f64, f64)) {
        self.voxel_size = voxel_size;
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// New volume with `f` applied voxelwise. Metadata is preserved.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Volume {
        Volume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Voxelwise combination of two same-shaped volumes.
    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        check_same_dims(self, other)?;
        Ok(Volume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population (divide-by-n) standard deviation over the whole volume.
    /// Accumulates on first-voxel-shifted data so constant volumes come out
    /// exactly zero.
    pub fn global_std(&self) -> f64 {
        let shift = self.data[0];
        let n = self.data.len() as f64;
        let m = self.data.iter().map(|&v| v - shift).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v - shift - m;
                d * d
            })
            .sum::<f64>()
            / n;
        var.max(0.0).sqrt()
    }
}

fn check_same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch {
            expected: a.dims,
            actual: b.dims,
        });
    }
    Ok(())
}

/// Boolean voxel selection sharing the layout of a [`Volume`].
#[derive(Debug, Clone)]
pub struct Mask {
    dims: (usize, usize, usize),
    data: Vec<bool>,
}

impl Mask {
    /// Selects every voxel.
    pub fn all(dims: (usize, usize, usize)) -> Mask {
        Mask {
            dims,
            data: vec![true; dims.0 * dims.1 * dims.2],
        }
    }

    /// Selects voxels whose intensity is strictly above `threshold`.
    pub fn from_threshold(vol: &Volume, threshold: f64) -> Mask {
        Mask {
            dims: vol.dims,
            data: vol.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Local mean and standard deviation maps of a volume, produced by
/// [`local_moments`].
#[derive(Debug, Clone)]
pub struct MomentMaps {
    pub mean_map: Volume,
    pub std_map: Volume,
    pub window: usize,
}

/// Window offsets for an edge length `window`.
///
/// Odd windows are symmetric. Even windows have no center voxel; the
/// neighborhood spans `[-window/2, window/2 - 1]` per axis, a fixed
/// convention so that normalization round-trips are reproducible.
#[inline]
pub(crate) fn window_offsets(window: usize) -> (usize, usize) {
    let lo = window / 2;
    let hi = window - 1 - lo;
    (lo, hi)
}

/// 1D sliding-window sums along one axis with border truncation, via per-line
/// prefix sums. `stride_axis` is the element stride along the filtered axis.
fn sliding_sum_axis(
    data: &[f64],
    out: &mut [f64],
    len_axis: usize,
    stride_axis: usize,
    line_starts: &[usize],
    lo: usize,
    hi: usize,
    prefix: &mut Vec<f64>,
) {
    prefix.resize(len_axis + 1, 0.0);
    for &start in line_starts {
        prefix[0] = 0.0;
        let mut acc = 0.0;
        for i in 0..len_axis {
            acc += data[start + i * stride_axis];
            prefix[i + 1] = acc;
        }
        for i in 0..len_axis {
            let a = i.saturating_sub(lo);
            let b = (i + hi).min(len_axis - 1);
            out[start + i * stride_axis] = prefix[b + 1] - prefix[a];
        }
    }
}

/// Separable truncated box sum over all three axes.
fn box_sum(vol_data: &[f64], dims: (usize, usize, usize), window: usize) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (lo, hi) = window_offsets(window);
    let mut cur = vol_data.to_vec();
    let mut out = vec![0.0; cur.len()];
    let mut prefix = Vec::new();

    // x axis: one line per (y, z)
    let starts_x: Vec<usize> = (0..ny * nz).map(|yz| yz * nx).collect();
    sliding_sum_axis(&cur, &mut out, nx, 1, &starts_x, lo, hi, &mut prefix);
    std::mem::swap(&mut cur, &mut out);

    // y axis: one line per (x, z)
    let starts_y: Vec<usize> = (0..nz)
        .flat_map(|z| (0..nx).map(move |x| x + nx * ny * z))
        .collect();
    sliding_sum_axis(&cur, &mut out, ny, nx, &starts_y, lo, hi, &mut prefix);
    std::mem::swap(&mut cur, &mut out);

    // z axis: one line per (x, y)
    let starts_z: Vec<usize> = (0..nx * ny).collect();
    sliding_sum_axis(&cur, &mut out, nz, nx * ny, &starts_z, lo, hi, &mut prefix);
    out
}

/// In-bounds voxel count of the truncated window at each position along one axis.
fn axis_counts(len: usize, lo: usize, hi: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let a = i.saturating_sub(lo);
            let b = (i + hi).min(len - 1);
            (b - a + 1) as f64
        })
        .collect()
}

fn window_counts(dims: (usize, usize, usize), window: usize) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (lo, hi) = window_offsets(window);
    let cx = axis_counts(nx, lo, hi);
    let cy = axis_counts(ny, lo, hi);
    let cz = axis_counts(nz, lo, hi);
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            let cyz = cy[y] * cz[z];
            for x in cx.iter().take(nx) {
                out.push(x * cyz);
            }
        }
    }
    out
}

/// Truncated box-car mean with edge length `window`; only in-bounds voxels
/// contribute near the borders.
pub fn box_mean(vol: &Volume, window: usize) -> Result<Volume> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let sums = box_sum(vol.as_slice(), vol.dims, window);
    let counts = window_counts(vol.dims, window);
    let data = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &n)| s / n)
        .collect();
    let mut out = Volume::from_vec(vol.dims, data)?;
    out.set_voxel_size(vol.voxel_size);
    Ok(out)
}

/// Local mean and population standard deviation over a truncated box-car
/// neighborhood of edge length `window`.
///
/// The variance accumulators run on intensities shifted by the first voxel
/// value, which keeps constant volumes at an exact zero standard deviation.
pub fn local_moments(vol: &Volume, window: usize) -> Result<MomentMaps> {
    let (nx, ny, nz) = vol.dims;
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if window > nx && window > ny && window > nz {
        return Err(Error::InvalidArgument(format!(
            "window {window} larger than every dimension {:?}",
            vol.dims
        )));
    }
    let shift = vol.data[0];
    let shifted: Vec<f64> = vol.data.iter().map(|&v| v - shift).collect();
    let squared: Vec<f64> = shifted.iter().map(|&v| v * v).collect();
    let s1 = box_sum(&shifted, vol.dims, window);
    let s2 = box_sum(&squared, vol.dims, window);
    let counts = window_counts(vol.dims, window);

    let mut mean = Vec::with_capacity(vol.len());
    let mut std = Vec::with_capacity(vol.len());
    for i in 0..vol.len() {
        let n = counts[i];
        let m = s1[i] / n;
        let var = (s2[i] / n - m * m).max(0.0);
        mean.push(m + shift);
        std.push(var.sqrt());
    }
    let mut mean_map = Volume::from_vec(vol.dims, mean)?;
    let mut std_map = Volume::from_vec(vol.dims, std)?;
    mean_map.set_voxel_size(vol.voxel_size);
    std_map.set_voxel_size(vol.voxel_size);
    Ok(MomentMaps {
        mean_map,
        std_map,
        window,
    })
}

/// Local variance with the unbiased (divide by n-1) normalization over a
/// truncated box-car neighborhood; single-voxel neighborhoods give zero.
/// Used by noise-level estimators where the small-sample attenuation of the
/// population form would bias the level systematically low.
pub(crate) fn local_unbiased_variance(vol: &Volume, window: usize) -> Result<Volume> {
    let (nx, ny, nz) = vol.dims();
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if window > nx && window > ny && window > nz {
        return Err(Error::InvalidArgument(format!(
            "window {window} larger than every dimension {:?}",
            vol.dims()
        )));
    }
    let shift = vol.data[0];
    let shifted: Vec<f64> = vol.data.iter().map(|&v| v - shift).collect();
    let squared: Vec<f64> = shifted.iter().map(|&v| v * v).collect();
    let s1 = box_sum(&shifted, vol.dims, window);
    let s2 = box_sum(&squared, vol.dims, window);
    let counts = window_counts(vol.dims, window);
    let data = (0..vol.len())
        .map(|i| {
            let n = counts[i];
            if n < 2.0 {
                return 0.0;
            }
            let m = s1[i] / n;
            ((s2[i] / n - m * m) * n / (n - 1.0)).max(0.0)
        })
        .collect();
    let mut out = Volume::from_vec(vol.dims(), data)?;
    out.set_voxel_size(vol.voxel_size());
    Ok(out)
}

/// Division guard for normalization: a small fraction of the global intensity
/// spread, floored to stay positive on constant volumes.
pub fn normalization_eps(vol: &Volume) -> f64 {
    (1e-5 * vol.global_std()).max(1e-12)
}

/// `(vol - mean_map) / max(std_map, eps)` voxelwise.
pub fn normalize(vol: &Volume, maps: &MomentMaps, eps: f64) -> Result<Volume> {
    check_same_dims(vol, &maps.mean_map)?;
    check_same_dims(vol, &maps.std_map)?;
    let data = vol
        .data
        .iter()
        .zip(maps.mean_map.data.iter())
        .zip(maps.std_map.data.iter())
        .map(|((&v, &m), &s)| (v - m) / s.max(eps))
        .collect();
    let mut out = Volume::from_vec(vol.dims, data)?;
    out.set_voxel_size(vol.voxel_size);
    Ok(out)
}

/// Inverse of [`normalize`]: `norm_vol * max(std_map, eps) + mean_map`.
pub fn denormalize(norm_vol: &Volume, maps: &MomentMaps, eps: f64) -> Result<Volume> {
    check_same_dims(norm_vol, &maps.mean_map)?;
    check_same_dims(norm_vol, &maps.std_map)?;
    let data = norm_vol
        .data
        .iter()
        .zip(maps.mean_map.data.iter())
        .zip(maps.std_map.data.iter())
        .map(|((&v, &m), &s)| v * s.max(eps) + m)
        .collect();
    let mut out = Volume::from_vec(norm_vol.dims, data)?;
    out.set_voxel_size(norm_vol.voxel_size);
    Ok(out)
}

/// Patch origin lattice over a volume, with the clamped final origin per axis
/// so every voxel is covered.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    origins: Vec<(usize, usize, usize)>,
    dims: (usize, usize, usize),
}

impl PatchGrid {
    /// Origins in deterministic z-outer, y, x-inner order.
    pub fn origins(&self) -> &[(usize, usize, usize)] {
        &self.origins
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Grid with explicit origins; every patch must fit in `dims`.
    pub fn from_origins(
        dims: (usize, usize, usize),
        patch_size: usize,
        origins: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        for &(x, y, z) in &origins {
            if x + patch_size > dims.0 || y + patch_size > dims.1 || z + patch_size > dims.2 {
                return Err(Error::InvalidArgument(format!(
                    "patch at ({x}, {y}, {z}) with size {patch_size} exceeds dims {dims:?}"
                )));
            }
        }
        Ok(PatchGrid {
            patch_size,
            stride: patch_size,
            origins,
            dims,
        })
    }

    /// How many patches cover each voxel.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let (nx, ny, nz) = self.dims;
        let mut counts = vec![0u32; nx * ny * nz];
        let p = self.patch_size;
        for &(ox, oy, oz) in &self.origins {
            for z in oz..oz + p {
                for y in oy..oy + p {
                    let row = nx * (y + ny * z);
                    for x in ox..ox + p {
                        counts[row + x] += 1;
                    }
                }
            }
        }
        counts
    }
}

fn axis_origins(dim: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch_size;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("at least origin 0") < last {
        origins.push(last);
    }
    origins
}

/// Strided patch origins with a clamped final patch per axis; guarantees full
/// voxel coverage.
pub fn build_patch_grid(
    dims: (usize, usize, usize),
    patch_size: usize,
    stride: usize,
) -> Result<PatchGrid> {
    let (nx, ny, nz) = dims;
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "patch_size and stride must be >= 1".into(),
        ));
    }
    if stride > patch_size {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} larger than patch size {patch_size} cannot cover every voxel"
        )));
    }
    if patch_size > nx || patch_size > ny || patch_size > nz {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds volume dims {dims:?}"
        )));
    }
    let xs = axis_origins(nx, patch_size, stride);
    let ys = axis_origins(ny, patch_size, stride);
    let zs = axis_origins(nz, patch_size, stride);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((x, y, z));
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        stride,
        origins,
        dims,
    })
}

/// Copies the cubic patch at `origin` into a flat x-fastest buffer.
pub fn extract_patch(vol: &Volume, origin: (usize, usize, usize), patch_size: usize) -> Vec<f64> {
    let (ox, oy, oz) = origin;
    let (nx, ny, _) = vol.dims;
    let mut out = Vec::with_capacity(patch_size * patch_size * patch_size);
    for z in oz..oz + patch_size {
        for y in oy..oy + patch_size {
            let row = nx * (y + ny * z);
            out.extend_from_slice(&vol.data[row + ox..row + ox + patch_size]);
        }
    }
    out
}

/// Reassembles a volume from per-origin patches, averaging every overlapping
/// estimate per voxel. Accumulation runs in grid order, so the result is
/// deterministic.
pub fn aggregate_patches(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<Volume> {
    if patches.len() != grid.origins.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} patches for {} grid origins",
            patches.len(),
            grid.origins.len()
        )));
    }
    let p = grid.patch_size;
    let expected = p * p * p;
    let (nx, ny, nz) = grid.dims;
    let mut sums = vec![0.0f64; nx * ny * nz];
    let mut counts = vec![0u32; nx * ny * nz];
    for (patch, &(ox, oy, oz)) in patches.iter().zip(grid.origins.iter()) {
        if patch.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "patch has {} values, expected {expected}",
                patch.len()
            )));
        }
        let mut src = 0;
        for z in oz..oz + p {
            for y in oy..oy + p {
                let row = nx * (y + ny * z);
                for x in ox..ox + p {
                    sums[row + x] += patch[src];
                    counts[row + x] += 1;
                    src += 1;
                }
            }
        }
    }
    debug_assert!(counts.iter().all(|&c| c >= 1));
    let data = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| s / c as f64)
        .collect();
    Volume::from_vec(grid.dims, data)
}
