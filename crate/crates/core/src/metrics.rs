//! Quality metrics: RMSE, PSNR and 3D SSIM with optional foreground masks.

use crate::error::{Error, Result};
use crate::volume::{box_mean, Mask, Volume};

/// SSIM window shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindowKind {
    /// Uniform box window (the default).
    Box,
    /// Separable Gaussian window with the given standard deviation in voxels.
    Gaussian { sigma: f64 },
}

/// Metric parameters. `mask` restricts every reduction to the selected voxels;
/// `None` means the whole volume.
#[derive(Debug, Clone)]
pub struct MetricConfig {
    pub peak: f64,
    pub mask: Option<Mask>,
    pub ssim_window: usize,
    pub ssim_window_kind: SsimWindowKind,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            peak: 255.0,
            mask: None,
            ssim_window: 7,
            ssim_window_kind: SsimWindowKind::Box,
        }
    }
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

fn check_mask(vol: &Volume, mask: Option<&Mask>) -> Result<()> {
    if let Some(m) = mask {
        if m.dims() != vol.dims() {
            return Err(Error::DimensionMismatch {
                expected: vol.dims(),
                actual: m.dims(),
            });
        }
        if m.count() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

fn masked_mean(values: impl Iterator<Item = f64>, mask: Option<&Mask>) -> f64 {
    match mask {
        None => {
            let mut sum = 0.0;
            let mut n = 0usize;
            for v in values {
                sum += v;
                n += 1;
            }
            sum / n as f64
        }
        Some(m) => {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (v, &keep) in values.zip(m.as_slice()) {
                if keep {
                    sum += v;
                    n += 1;
                }
            }
            sum / n as f64
        }
    }
}

/// Root mean squared difference over the mask.
pub fn rmse(reference: &Volume, test: &Volume, mask: Option<&Mask>) -> Result<f64> {
    check_dims(reference, test)?;
    check_mask(reference, mask)?;
    let mse = masked_mean(
        reference
            .as_slice()
            .iter()
            .zip(test.as_slice())
            .map(|(&a, &b)| (a - b) * (a - b)),
        mask,
    );
    Ok(mse.sqrt())
}

/// Peak signal-to-noise ratio in dB: `20 log10(peak / rmse)` over the mask.
/// Identical volumes give positive infinity.
pub fn psnr(reference: &Volume, test: &Volume, cfg: &MetricConfig) -> Result<f64> {
    let r = rmse(reference, test, cfg.mask.as_ref())?;
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (cfg.peak / r).log10())
}

/// Separable weighted local mean with border truncation (weights renormalized
/// over the in-bounds taps).
fn weighted_mean(vol: &Volume, kernel: &[f64], center: usize) -> Volume {
    let (nx, ny, nz) = vol.dims();
    let apply_axis = |data: &[f64], len: usize, stride: usize, line_starts: &[usize]| {
        let mut out = vec![0.0; data.len()];
        for &start in line_starts {
            for i in 0..len {
                let mut num = 0.0;
                let mut den = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = i as isize + k as isize - center as isize;
                    if j >= 0 && (j as usize) < len {
                        num += w * data[start + j as usize * stride];
                        den += w;
                    }
                }
                out[start + i * stride] = num / den;
            }
        }
        out
    };
    let starts_x: Vec<usize> = (0..ny * nz).map(|yz| yz * nx).collect();
    let starts_y: Vec<usize> = (0..nz)
        .flat_map(|z| (0..nx).map(move |x| x + nx * ny * z))
        .collect();
    let starts_z: Vec<usize> = (0..nx * ny).collect();
    let a = apply_axis(vol.as_slice(), nx, 1, &starts_x);
    let b = apply_axis(&a, ny, nx, &starts_y);
    let c = apply_axis(&b, nz, nx * ny, &starts_z);
    Volume::from_vec(vol.dims(), c).expect("filtered volume keeps its shape")
}

fn local_mean(vol: &Volume, cfg: &MetricConfig) -> Result<Volume> {
    match cfg.ssim_window_kind {
        SsimWindowKind::Box => box_mean(vol, cfg.ssim_window),
        SsimWindowKind::Gaussian { sigma } => {
            if sigma <= 0.0 {
                return Err(Error::InvalidArgument(
                    "gaussian window sigma must be positive".into(),
                ));
            }
            let w = cfg.ssim_window;
            let center = (w - 1) / 2;
            let kernel: Vec<f64> = (0..w)
                .map(|i| {
                    let d = i as f64 - center as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            Ok(weighted_mean(vol, &kernel, center))
        }
    }
}

/// Mean structural similarity over the mask, computed from 3D sliding-window
/// first and second moments.
pub fn ssim(reference: &Volume, test: &Volume, cfg: &MetricConfig) -> Result<f64> {
    check_dims(reference, test)?;
    check_mask(reference, cfg.mask.as_ref())?;
    if cfg.ssim_window == 0 {
        return Err(Error::InvalidArgument("ssim window must be >= 1".into()));
    }
    let c1 = (SSIM_K1 * cfg.peak) * (SSIM_K1 * cfg.peak);
    let c2 = (SSIM_K2 * cfg.peak) * (SSIM_K2 * cfg.peak);

    let mx = local_mean(reference, cfg)?;
    let my = local_mean(test, cfg)?;
    let mxx = local_mean(&reference.map(|v| v * v), cfg)?;
    let myy = local_mean(&test.map(|v| v * v), cfg)?;
    let xy = reference.zip_map(test, |a, b| a * b)?;
    let mxy = local_mean(&xy, cfg)?;

    let n = reference.len();
    let mut ssim_map = Vec::with_capacity(n);
    for i in 0..n {
        let (ux, uy) = (mx.as_slice()[i], my.as_slice()[i]);
        let vx = mxx.as_slice()[i] - ux * ux;
        let vy = myy.as_slice()[i] - uy * uy;
        let cov = mxy.as_slice()[i] - ux * uy;
        let s = ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        ssim_map.push(s);
    }
    Ok(masked_mean(ssim_map.into_iter(), cfg.mask.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisegen::{add_gaussian, make_phantom, NoiseField, NoiseKind, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_identical_is_zero() {
        let v = Volume::filled((8, 8, 8), 3.0).unwrap();
        assert_eq!(rmse(&v, &v, None).unwrap(), 0.0);
    }

    #[test]
    fn rmse_constant_difference() {
        let a = Volume::filled((8, 8, 8), 10.0).unwrap();
        let b = Volume::filled((8, 8, 8), 7.0).unwrap();
        assert!((rmse(&a, &b, None).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_of_gaussian_noise_matches_sigma() {
        let clean = Volume::filled((102, 102, 102), 100.0).unwrap();
        let field = NoiseField::stationary(clean.dims(), 2.55, NoiseKind::Gaussian).unwrap();
        let noisy = add_gaussian(&clean, &field, 13).unwrap();
        let r = rmse(&clean, &noisy, None).unwrap();
        assert!((r / 2.55 - 1.0).abs() < 0.005, "rmse {r}");
    }

    #[test]
    fn psnr_log_identity() {
        let a = Volume::filled((8, 8, 8), 25.5).unwrap();
        let b = Volume::filled((8, 8, 8), 0.0).unwrap();
        let p = psnr(&a, &b, &MetricConfig::default()).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_perfect_match_is_infinite() {
        let v = Volume::filled((8, 8, 8), 5.0).unwrap();
        assert!(psnr(&v, &v, &MetricConfig::default())
            .unwrap()
            .is_infinite());
    }

    #[test]
    fn psnr_one_percent_noise_is_40db() {
        let clean = Volume::filled((102, 102, 102), 128.0).unwrap();
        let field = NoiseField::stationary(clean.dims(), 2.55, NoiseKind::Gaussian).unwrap();
        let noisy = add_gaussian(&clean, &field, 99).unwrap();
        let p = psnr(&clean, &noisy, &MetricConfig::default()).unwrap();
        assert!((p - 40.0).abs() < 0.05, "psnr {p}");
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let vol = make_phantom(&PhantomSpec::new((32, 32, 32), 4)).unwrap();
        assert_eq!(ssim(&vol, &vol, &MetricConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_symmetry() {
        let a = make_phantom(&PhantomSpec::new((24, 24, 24), 4)).unwrap();
        let field = NoiseField::stationary(a.dims(), 12.75, NoiseKind::Gaussian).unwrap();
        let b = add_gaussian(&a, &field, 3).unwrap();
        let cfg = MetricConfig::default();
        assert_eq!(ssim(&a, &b, &cfg).unwrap(), ssim(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn ssim_penalizes_constant_shift() {
        let vol = make_phantom(&PhantomSpec::new((24, 24, 24), 4)).unwrap();
        let cfg = MetricConfig::default();
        let small = ssim(&vol, &vol.map(|v| v + 2.0), &cfg).unwrap();
        let large = ssim(&vol, &vol.map(|v| v + 10.0), &cfg).unwrap();
        assert!(small < 1.0);
        assert!(large < small);
    }

    #[test]
    fn ssim_decreases_with_noise_level() {
        let clean = make_phantom(&PhantomSpec::new((40, 40, 40), 8)).unwrap();
        let cfg = MetricConfig::default();
        let mut last = 1.0;
        for (i, percent) in [1.0, 3.0, 5.0, 7.0, 9.0].iter().enumerate() {
            let sigma = 2.55 * percent;
            let field = NoiseField::stationary(clean.dims(), sigma, NoiseKind::Gaussian).unwrap();
            let noisy = add_gaussian(&clean, &field, 40 + i as u64).unwrap();
            let s = ssim(&clean, &noisy, &cfg).unwrap();
            assert!(s < last, "ssim {s} did not decrease at {percent}%");
            last = s;
        }
    }

    #[test]
    fn gaussian_window_tracks_box_window() {
        let clean = make_phantom(&PhantomSpec::new((24, 24, 24), 8)).unwrap();
        let field = NoiseField::stationary(clean.dims(), 7.65, NoiseKind::Gaussian).unwrap();
        let noisy = add_gaussian(&clean, &field, 1).unwrap();
        let box_cfg = MetricConfig::default();
        let gauss_cfg = MetricConfig {
            ssim_window_kind: SsimWindowKind::Gaussian { sigma: 1.5 },
            ..MetricConfig::default()
        };
        let a = ssim(&clean, &noisy, &box_cfg).unwrap();
        let b = ssim(&clean, &noisy, &gauss_cfg).unwrap();
        assert!((a - b).abs() < 0.1, "box {a} vs gaussian {b}");
        assert_eq!(ssim(&clean, &clean, &gauss_cfg).unwrap(), 1.0);
    }

    #[test]
    fn mask_contract_matches_extracted_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Volume::from_fn((10, 10, 10), |_, _, _| rng.random_range(0.0..255.0)).unwrap();
        let b = Volume::from_fn((10, 10, 10), |_, _, _| rng.random_range(0.0..255.0)).unwrap();
        let mask = Mask::from_threshold(&a, 100.0);
        let masked = rmse(&a, &b, Some(&mask)).unwrap();
        let mut sq = 0.0;
        let mut n = 0usize;
        for i in 0..a.len() {
            if mask.as_slice()[i] {
                let d = a.as_slice()[i] - b.as_slice()[i];
                sq += d * d;
                n += 1;
            }
        }
        assert!((masked - (sq / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_errors() {
        let v = Volume::filled((8, 8, 8), 1.0).unwrap();
        let mask = Mask::from_threshold(&v, 10.0);
        assert!(matches!(
            rmse(&v, &v, Some(&mask)),
            Err(Error::EmptyMask)
        ));
        let cfg = MetricConfig {
            mask: Some(mask),
            ..MetricConfig::default()
        };
        assert!(matches!(ssim(&v, &v, &cfg), Err(Error::EmptyMask)));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let a = Volume::filled((8, 8, 8), 1.0).unwrap();
        let b = Volume::filled((8, 8, 9), 1.0).unwrap();
        assert!(rmse(&a, &b, None).is_err());
    }
}
