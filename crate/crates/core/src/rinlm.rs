//! Rotationally invariant non-local means filtering of a noisy volume, guided
//! by a prefiltered image.
//!
//! Similarity between voxels i and j combines their guide intensities with
//! 3x-weighted guide patch means, making the weight insensitive to patch
//! orientation:
//!
//! `w(i,j) = exp(-[(g(i)-g(j))^2 + 3*(mu_i - mu_j)^2] / (4 h_i^2))`
//!
//! with `h_i = h_scale * sigma(i)`. The averaged quantity is always the noisy
//! volume, never the guide. The Rician variant averages squared intensities
//! and removes the `2 sigma^2` bias under the square root.

use crate::error::{Error, Result};
use crate::volume::{box_mean, Volume};
use rayon::prelude::*;

/// Exponent normalization of the similarity weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExponentForm {
    /// `distance / (4 h^2)`; the default.
    #[default]
    Literal,
    /// `distance / (6 h^2)`: the distance additionally divided by the number
    /// of spatial dimensions.
    DimensionNormalized,
}

/// Filter parameters. Defaults: 11^3 search window, 3^3 patch means,
/// `h = sigma(i)`.
#[derive(Debug, Clone)]
pub struct RinlmConfig {
    /// Search half-width in voxels; the window is `(2r+1)^3` clipped at
    /// volume borders.
    pub search_radius: usize,
    /// Patch-mean half-width in voxels.
    pub mean_radius: usize,
    /// Multiplier on `sigma(i)` defining the filtering strength `h_i`.
    pub h_scale: f64,
    pub exponent: ExponentForm,
    /// Voxels whose sigma is at or below this floor pass through unfiltered.
    pub sigma_floor: f64,
}

impl Default for RinlmConfig {
    fn default() -> Self {
        RinlmConfig {
            search_radius: 5,
            mean_radius: 1,
            h_scale: 1.0,
            exponent: ExponentForm::Literal,
            sigma_floor: 1e-12,
        }
    }
}

/// Box-car mean of the guide over `(2 * mean_radius + 1)^3` neighborhoods,
/// truncated at borders.
pub fn guide_mean_map(guide: &Volume, mean_radius: usize) -> Result<Volume> {
    box_mean(guide, 2 * mean_radius + 1)
}

fn validate(noisy: &Volume, guide: &Volume, sigma_map: &Volume, cfg: &RinlmConfig) -> Result<()> {
    for other in [guide, sigma_map] {
        if other.dims() != noisy.dims() {
            return Err(Error::DimensionMismatch {
                expected: noisy.dims(),
                actual: other.dims(),
            });
        }
    }
    if sigma_map.min_value() < 0.0 {
        return Err(Error::InvalidArgument(
            "sigma map must be non-negative".into(),
        ));
    }
    if cfg.search_radius == 0 || cfg.mean_radius == 0 {
        return Err(Error::InvalidArgument("radii must be >= 1".into()));
    }
    if cfg.h_scale <= 0.0 {
        return Err(Error::InvalidArgument("h_scale must be positive".into()));
    }
    Ok(())
}

fn run_filter(
    noisy: &Volume,
    guide: &Volume,
    sigma_map: &Volume,
    cfg: &RinlmConfig,
    rician: bool,
) -> Result<Volume> {
    validate(noisy, guide, sigma_map, cfg)?;
    let means = guide_mean_map(guide, cfg.mean_radius)?;
    let (nx, ny, nz) = noisy.dims();
    let r = cfg.search_radius;
    let y_data = noisy.as_slice();
    let g_data = guide.as_slice();
    let m_data = means.as_slice();
    let s_data = sigma_map.as_slice();

    let mut out = vec![0.0f64; noisy.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            let z0 = z.saturating_sub(r);
            let z1 = (z + r).min(nz - 1);
            for y in 0..ny {
                let y0 = y.saturating_sub(r);
                let y1 = (y + r).min(ny - 1);
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let sigma = s_data[i];
                    if sigma <= cfg.sigma_floor {
                        slab[x + nx * y] = y_data[i];
                        continue;
                    }
                    let h = cfg.h_scale * sigma;
                    let denom = match cfg.exponent {
                        ExponentForm::Literal => 4.0 * h * h,
                        ExponentForm::DimensionNormalized => 6.0 * h * h,
                    };
                    let (gi, mi) = (g_data[i], m_data[i]);
                    let x0 = x.saturating_sub(r);
                    let x1 = (x + r).min(nx - 1);
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for zz in z0..=z1 {
                        for yy in y0..=y1 {
                            let row = nx * (yy + ny * zz);
                            for j in row + x0..=row + x1 {
                                let dg = gi - g_data[j];
                                let dm = mi - m_data[j];
                                let w = (-(dg * dg + 3.0 * dm * dm) / denom).exp();
                                den += w;
                                let v = y_data[j];
                                num += w * if rician { v * v } else { v };
                            }
                        }
                    }
                    slab[x + nx * y] = if rician {
                        (num / den - 2.0 * sigma * sigma).max(0.0).sqrt()
                    } else {
                        num / den
                    };
                }
            }
        });
    let mut vol = Volume::from_vec(noisy.dims(), out)?;
    vol.set_voxel_size(noisy.voxel_size());
    Ok(vol)
}

/// Guided non-local means for Gaussian noise: the weighted average of noisy
/// intensities over the search window.
pub fn rinlm_denoise(
    noisy: &Volume,
    guide: &Volume,
    sigma_map: &Volume,
    cfg: &RinlmConfig,
) -> Result<Volume> {
    run_filter(noisy, guide, sigma_map, cfg, false)
}

/// Rician variant: averages squared intensities and removes the `2 sigma^2`
/// magnitude bias, `sqrt(max(E_w[y^2] - 2 sigma(i)^2, 0))`.
pub fn rinlm_denoise_rician(
    noisy: &Volume,
    guide: &Volume,
    sigma_map: &Volume,
    cfg: &RinlmConfig,
) -> Result<Volume> {
    if noisy.min_value() < 0.0 {
        return Err(Error::InvalidArgument(
            "magnitude images must be non-negative".into(),
        ));
    }
    run_filter(noisy, guide, sigma_map, cfg, true)
}
