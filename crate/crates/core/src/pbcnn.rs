//! Stage one of the pipeline: local standardization, overcomplete patch-wise
//! network inference, residual reconstruction, noise-field estimation with the
//! Rician mapping, and magnitude bias removal.
//!
//! The network predicts the noise content of each standardized patch; the
//! overlapping predictions are averaged, subtracted in normalized space and
//! the standardization inverted, which yields the denoised volume and an
//! estimated noise map (the residual).

use crate::cnn::{LayerSpec, Network, Tensor};
use crate::error::{Error, Result};
use crate::noisegen::{add_gaussian, NoiseField, NoiseKind};
use crate::rinlm::{rinlm_denoise, rinlm_denoise_rician, RinlmConfig};
use crate::volume::{
    aggregate_patches, box_mean, build_patch_grid, extract_patch, local_moments,
    local_unbiased_variance, normalization_eps, normalize, denormalize, Mask, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Patch edge length used by the denoiser.
pub const PATCH_SIZE: usize = 12;
/// Box-car edge length of the standardization moment maps.
pub const MOMENT_WINDOW: usize = 6;
/// Neighborhood edge for the raw residual standard deviation.
pub const SIGMA_WINDOW: usize = 3;
/// Box-car edge used to stabilize the raw sigma field.
pub const SIGMA_SMOOTH_WINDOW: usize = 9;
/// Neighborhood edge for the local mean entering the effective SNR.
pub const SNR_WINDOW: usize = 3;

/// How many patches run through the network per inference batch.
const INFERENCE_BATCH: usize = 32;

/// Division guard for the effective SNR.
const SNR_SIGMA_FLOOR: f64 = 1e-12;

/// Stage-one output bundle.
#[derive(Debug, Clone)]
pub struct DenoiseResult {
    /// Denoised volume (bias-corrected on the Rician path).
    pub denoised: Volume,
    /// `noisy - denoised` before any bias correction; the estimated noise map.
    pub residual: Volume,
    /// Per-voxel noise standard deviation estimate, mapped through the Rician
    /// correction when requested.
    pub sigma_map: Volume,
    /// Scalar noise level: residual standard deviation (Gaussian) or the mean
    /// of the corrected sigma map (Rician).
    pub global_sigma: f64,
}

/// Effective local SNR map, `local mean / sigma`.
#[derive(Debug, Clone)]
pub struct SnrMap {
    pub gamma: Volume,
}

/// Tunable knobs of the stage-one pipeline.
#[derive(Debug, Clone)]
pub struct PbcnnConfig {
    pub stride: usize,
    pub patch_size: usize,
    pub moment_window: usize,
    pub sigma_window: usize,
    pub sigma_smooth_window: usize,
    pub snr_window: usize,
}

impl PbcnnConfig {
    pub fn with_stride(stride: usize) -> Self {
        PbcnnConfig {
            stride,
            patch_size: PATCH_SIZE,
            moment_window: MOMENT_WINDOW,
            sigma_window: SIGMA_WINDOW,
            sigma_smooth_window: SIGMA_SMOOTH_WINDOW,
            snr_window: SNR_WINDOW,
        }
    }
}

fn check_denoiser(net: &Network) -> Result<()> {
    let first_ok = matches!(net.spec().first(), Some(&LayerSpec::Conv3d { in_channels: 1, .. }));
    let last_ok = matches!(net.spec().last(), Some(&LayerSpec::Conv3d { out_channels: 1, .. }));
    if !first_ok || !last_ok {
        return Err(Error::ArchitectureMismatch(
            "denoising network must map one channel to one channel".into(),
        ));
    }
    Ok(())
}

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

/// Runs standardization, patch-wise prediction, aggregation and inversion.
/// Returns the denoised volume and the residual `noisy - denoised`.
fn predict_and_reconstruct(
    noisy: &Volume,
    net: &Network,
    cfg: &PbcnnConfig,
) -> Result<(Volume, Volume)> {
    check_denoiser(net)?;
    let maps = local_moments(noisy, cfg.moment_window)?;
    let eps = normalization_eps(noisy);
    let norm = normalize(noisy, &maps, eps)?;
    let grid = build_patch_grid(noisy.dims(), cfg.patch_size, cfg.stride)?;

    let mut predictions: Vec<Vec<f64>> = Vec::with_capacity(grid.origins().len());
    for chunk in grid.origins().chunks(INFERENCE_BATCH) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|&origin| {
                Tensor::from_patch(extract_patch(&norm, origin, cfg.patch_size), cfg.patch_size)
            })
            .collect::<Result<_>>()?;
        let outputs = net.forward_batch(&inputs)?;
        predictions.extend(outputs.into_iter().map(|t| t.data));
    }

    let noise_norm = aggregate_patches(&predictions, &grid)?;
    let cleaned_norm = norm.zip_map(&noise_norm, |a, b| a - b)?;
    let denoised = denormalize(&cleaned_norm, &maps, eps)?;
    let residual = noisy.zip_map(&denoised, |a, b| a - b)?;
    Ok((denoised, residual))
}

/// Overcomplete sliding-window denoising for Gaussian noise. The sigma map is
/// the smoothed local standard deviation of the residual; the global estimate
/// is the residual standard deviation over the whole volume.
pub fn denoise_pbcnn(noisy: &Volume, net: &Network, stride: usize) -> Result<DenoiseResult> {
    denoise_pbcnn_with(noisy, net, &PbcnnConfig::with_stride(stride))
}

pub fn denoise_pbcnn_with(
    noisy: &Volume,
    net: &Network,
    cfg: &PbcnnConfig,
) -> Result<DenoiseResult> {
    let (denoised, residual) = predict_and_reconstruct(noisy, net, cfg)?;
    let sigma_map =
        estimate_sigma_map_with(noisy, &residual, cfg.sigma_window, cfg.sigma_smooth_window)?;
    let global_sigma = estimate_global_noise(&residual, None)?;
    Ok(DenoiseResult {
        denoised,
        residual,
        sigma_map,
        global_sigma,
    })
}

/// Rician variant: the sigma map goes through the effective-SNR correction,
/// the denoised volume through squared-magnitude bias removal, and the global
/// estimate is the mean of the corrected map.
pub fn denoise_pbcnn_rician(
    noisy: &Volume,
    net: &Network,
    stride: usize,
) -> Result<DenoiseResult> {
    denoise_pbcnn_rician_with(noisy, net, &PbcnnConfig::with_stride(stride))
}

pub fn denoise_pbcnn_rician_with(
    noisy: &Volume,
    net: &Network,
    cfg: &PbcnnConfig,
) -> Result<DenoiseResult> {
    let (denoised, residual) = predict_and_reconstruct(noisy, net, cfg)?;
    let raw_sigma =
        estimate_sigma_map_with(noisy, &residual, cfg.sigma_window, cfg.sigma_smooth_window)?;
    let sigma_map =
        correct_sigma_rician_with(&raw_sigma, noisy, cfg.snr_window, cfg.sigma_smooth_window)?;
    let global_sigma = estimate_global_noise_rician(&sigma_map, None)?;
    let corrected = rician_bias_correct(&denoised.map(|v| v.max(0.0)), &sigma_map)?;
    Ok(DenoiseResult {
        denoised: corrected,
        residual,
        sigma_map,
        global_sigma,
    })
}

/// Two-stage output: the guided non-local means result plus the stage-one
/// bundle that produced the guide.
#[derive(Debug, Clone)]
pub struct PriResult {
    pub denoised: Volume,
    pub stage_one: DenoiseResult,
}

/// Full two-stage pipeline: stage one produces the guide image and noise
/// field, stage two filters the original noisy volume with the guided
/// rotationally invariant non-local means (Rician variant when `rician`).
pub fn denoise_pri_pbcnn(
    noisy: &Volume,
    net: &Network,
    stride: usize,
    rinlm_cfg: &RinlmConfig,
    rician: bool,
) -> Result<PriResult> {
    if rician {
        let stage_one = denoise_pbcnn_rician(noisy, net, stride)?;
        let denoised =
            rinlm_denoise_rician(noisy, &stage_one.denoised, &stage_one.sigma_map, rinlm_cfg)?;
        Ok(PriResult { denoised, stage_one })
    } else {
        let stage_one = denoise_pbcnn(noisy, net, stride)?;
        let denoised = rinlm_denoise(noisy, &stage_one.denoised, &stage_one.sigma_map, rinlm_cfg)?;
        Ok(PriResult { denoised, stage_one })
    }
}

/// Per-voxel standard deviation of the residual over a small neighborhood,
/// stabilized with a wider box-car smoothing pass.
///
/// The local variance uses the unbiased (n-1) normalization and smoothing
/// happens in the variance domain before the square root; both choices keep
/// the level estimate free of the small-sample attenuation a 27-voxel window
/// would otherwise introduce.
pub fn estimate_sigma_map(noisy: &Volume, residual: &Volume) -> Result<Volume> {
    estimate_sigma_map_with(noisy, residual, SIGMA_WINDOW, SIGMA_SMOOTH_WINDOW)
}

pub fn estimate_sigma_map_with(
    noisy: &Volume,
    residual: &Volume,
    sigma_window: usize,
    smooth_window: usize,
) -> Result<Volume> {
    check_dims(noisy, residual)?;
    let var = local_unbiased_variance(residual, sigma_window)?;
    let stabilized = if smooth_window <= 1 {
        var
    } else {
        box_mean(&var, smooth_window)?
    };
    Ok(stabilized.map(|v| v.max(0.0).sqrt()))
}

/// Rational correction factor mapping the effective local SNR to the ratio
/// between the true channel sigma and the locally measured magnitude
/// standard deviation. Zero at and below the fit threshold of 1.86.
pub fn phi(gamma: f64) -> f64 {
    if gamma > 1.86 {
        (0.9846 * (gamma - 1.86) + 0.1983) / ((gamma - 1.86) + 0.1175)
    } else {
        0.0
    }
}

/// Effective local SNR: box-car mean of the noisy volume divided by the sigma
/// estimate at each voxel.
pub fn snr_map(noisy: &Volume, sigma_map: &Volume, window: usize) -> Result<SnrMap> {
    check_dims(noisy, sigma_map)?;
    let mean = box_mean(noisy, window)?;
    let gamma = mean.zip_map(sigma_map, |m, s| (m / s.max(SNR_SIGMA_FLOOR)).max(0.0))?;
    Ok(SnrMap { gamma })
}

/// Applies the effective-SNR correction to a sigma map estimated from Rician
/// magnitude residuals: `sigma_hat(i) = sigma(i) * phi(gamma(i))`.
///
/// The SNR field is box-smoothed with the same stabilizer as the sigma field
/// before entering the mapping; the correction factor is steep around its
/// threshold, and a per-voxel SNR estimate is far too noisy to drive it.
pub fn correct_sigma_rician(sigma_map: &Volume, noisy: &Volume) -> Result<Volume> {
    correct_sigma_rician_with(sigma_map, noisy, SNR_WINDOW, SIGMA_SMOOTH_WINDOW)
}

pub fn correct_sigma_rician_with(
    sigma_map: &Volume,
    noisy: &Volume,
    snr_window: usize,
    stabilize_window: usize,
) -> Result<Volume> {
    let snr = snr_map(noisy, sigma_map, snr_window)?;
    let gamma = if stabilize_window <= 1 {
        snr.gamma
    } else {
        box_mean(&snr.gamma, stabilize_window)?
    };
    sigma_map.zip_map(&gamma, |s, g| s * phi(g))
}

/// Squared-magnitude bias removal: `sqrt(max(d^2 - 2 sigma^2, 0))`.
pub fn rician_bias_correct(denoised: &Volume, sigma_map: &Volume) -> Result<Volume> {
    check_dims(denoised, sigma_map)?;
    if denoised.min_value() < 0.0 {
        return Err(Error::InvalidArgument(
            "bias correction expects a non-negative magnitude image".into(),
        ));
    }
    denoised.zip_map(sigma_map, |d, s| (d * d - 2.0 * s * s).max(0.0).sqrt())
}

/// Population standard deviation of the residual over the mask (whole volume
/// when `None`).
pub fn estimate_global_noise(residual: &Volume, mask: Option<&Mask>) -> Result<f64> {
    let values: Vec<f64> = match mask {
        None => residual.as_slice().to_vec(),
        Some(m) => {
            if m.dims() != residual.dims() {
                return Err(Error::DimensionMismatch {
                    expected: residual.dims(),
                    actual: m.dims(),
                });
            }
            residual
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .filter_map(|(&v, &keep)| keep.then_some(v))
                .collect()
        }
    };
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    // first-value shift keeps constant residuals at an exact zero
    let shift = values[0];
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v - shift).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v - shift - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var.max(0.0).sqrt())
}

/// Rician global estimate: the mean of the corrected sigma map over the mask.
pub fn estimate_global_noise_rician(
    corrected_sigma_map: &Volume,
    mask: Option<&Mask>,
) -> Result<f64> {
    match mask {
        None => Ok(corrected_sigma_map.mean()),
        Some(m) => {
            if m.dims() != corrected_sigma_map.dims() {
                return Err(Error::DimensionMismatch {
                    expected: corrected_sigma_map.dims(),
                    actual: m.dims(),
                });
            }
            let mut sum = 0.0;
            let mut n = 0usize;
            for (&v, &keep) in corrected_sigma_map.as_slice().iter().zip(m.as_slice()) {
                if keep {
                    sum += v;
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(sum / n as f64)
        }
    }
}

/// Deterministic factory of training pairs: standardized noisy patches paired
/// with their standardized noise targets, both normalized by the noisy
/// volume's own moment maps (the only maps available at inference time).
#[derive(Debug, Clone)]
pub struct TrainingSampler {
    clean: Vec<Volume>,
    /// Noise level range in percent of peak 255; sigma is `2.55 * percent`.
    pub level_percent: (f64, f64),
    pub patches_per_epoch: usize,
    /// Fresh noise realizations drawn per volume per epoch.
    pub realizations_per_volume: usize,
    pub patch_size: usize,
    pub base_seed: u64,
}

impl TrainingSampler {
    pub fn new(
        clean: Vec<Volume>,
        level_percent: (f64, f64),
        patches_per_epoch: usize,
        base_seed: u64,
    ) -> Result<TrainingSampler> {
        if clean.is_empty() {
            return Err(Error::InvalidArgument("no clean volumes".into()));
        }
        let (lo, hi) = level_percent;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "noise level range must satisfy 0 < lo <= hi, got {lo}..{hi}"
            )));
        }
        for v in &clean {
            let (nx, ny, nz) = v.dims();
            if nx < PATCH_SIZE || ny < PATCH_SIZE || nz < PATCH_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "clean volume {:?} is smaller than the patch size",
                    v.dims()
                )));
            }
        }
        Ok(TrainingSampler {
            clean,
            level_percent,
            patches_per_epoch,
            realizations_per_volume: 2,
            patch_size: PATCH_SIZE,
            base_seed,
        })
    }

    /// Pairs for a training epoch; epoch index 1.. salts the stream.
    pub fn epoch_pairs(&self, epoch: usize) -> Result<Vec<(Tensor, Tensor)>> {
        self.pairs_with_seed(
            self.base_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
    }

    /// Fixed pairs (a validation set) independent of the epoch stream.
    pub fn fixed_pairs(&self, salt: u64, count: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let mut copy = self.clone();
        copy.patches_per_epoch = count;
        copy.pairs_with_seed(self.base_seed ^ 0xdead_beef_cafe_f00d ^ salt)
    }

    fn pairs_with_seed(&self, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rounds = self.clean.len() * self.realizations_per_volume.max(1);
        let per_round = self.patches_per_epoch.div_ceil(rounds).max(1);
        let mut pairs = Vec::with_capacity(self.patches_per_epoch);
        'outer: for clean in &self.clean {
            for _ in 0..self.realizations_per_volume.max(1) {
                let percent = if self.level_percent.0 == self.level_percent.1 {
                    self.level_percent.0
                } else {
                    rng.random_range(self.level_percent.0..self.level_percent.1)
                };
                let sigma = 2.55 * percent;
                let field = NoiseField::stationary(clean.dims(), sigma, NoiseKind::Gaussian)?;
                let noisy = add_gaussian(clean, &field, rng.random())?;
                let maps = local_moments(&noisy, MOMENT_WINDOW)?;
                let eps = normalization_eps(&noisy);
                let input_vol = normalize(&noisy, &maps, eps)?;
                let noise_vol = noisy.zip_map(clean, |n, c| n - c)?;
                let target_vol = noise_vol.zip_map(&maps.std_map, |n, s| n / s.max(eps))?;
                let (nx, ny, nz) = clean.dims();
                for _ in 0..per_round {
                    if pairs.len() >= self.patches_per_epoch {
                        break 'outer;
                    }
                    let origin = (
                        rng.random_range(0..=nx - self.patch_size),
                        rng.random_range(0..=ny - self.patch_size),
                        rng.random_range(0..=nz - self.patch_size),
                    );
                    let input = extract_patch(&input_vol, origin, self.patch_size);
                    let target = extract_patch(&target_vol, origin, self.patch_size);
                    pairs.push((
                        Tensor::from_patch(input, self.patch_size)?,
                        Tensor::from_patch(target, self.patch_size)?,
                    ));
                }
            }
        }
        Ok(pairs)
    }
}
