//! Batch command-line surface for the two-stage denoising pipeline.

mod files;

use clap::{Parser, Subcommand, ValueEnum};
use files::{is_volume_file, read_volume, write_volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use voxelclean_core::cnn::{
    architecture, load_weights, save_weights, train, AdamConfig, LossKind, Network, NormKind,
    TrainConfig,
};
use voxelclean_core::error::{Error, Result};
use voxelclean_core::metrics::{psnr, rmse, ssim, MetricConfig};
use voxelclean_core::noisegen::{
    add_gaussian, add_rician, make_modulation_field, make_phantom, ModulationProfile, NoiseField,
    NoiseKind, PhantomSpec,
};
use voxelclean_core::pbcnn::{
    denoise_pbcnn, denoise_pbcnn_rician, estimate_global_noise, estimate_global_noise_rician,
    TrainingSampler,
};
use voxelclean_core::rinlm::{rinlm_denoise, rinlm_denoise_rician, RinlmConfig};
use voxelclean_core::{Mask, Volume};

const THREADS_ENV: &str = "VOXELCLEAN_THREADS";

#[derive(Parser)]
#[command(
    name = "voxelclean",
    version,
    about = "Volumetric MRI denoising: patch-based residual 3D CNN prefilter plus guided rotationally invariant non-local means"
)]
struct Cli {
    /// Worker thread cap (fallback: the VOXELCLEAN_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseModel {
    Gaussian,
    Rician,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pbcnn,
    PriPbcnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    Mae,
    Mix,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> LossKind {
        match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::Mae => LossKind::Mae,
            LossArg::Mix => LossKind::Mix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Instance,
    Batch,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic test volume (peak intensity 255).
    Phantom {
        /// Cubic edge length in voxels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a clean volume with seeded Gaussian or Rician noise.
    AddNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "gaussian")]
        model: NoiseModel,
        /// Noise level in percent of peak 255: sigma = 2.55 * level.
        #[arg(long)]
        level: f64,
        /// Spatially varying modulation `LO:HI` (ramp along z).
        #[arg(long)]
        spatial: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the applied per-voxel sigma field.
        #[arg(long)]
        sigma_out: Option<PathBuf>,
    },
    /// Train a denoising network on clean volumes with on-the-fly noise.
    Train {
        /// Directory of clean .nii / .raw volumes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, value_enum, default_value = "mix")]
        loss: LossArg,
        #[arg(long, value_enum, default_value = "instance")]
        norm: NormArg,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of the volumes held out for validation.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Training noise range in percent, `LO:HI` (a single value pins it).
        #[arg(long, default_value = "1:9")]
        level: String,
        #[arg(long, default_value_t = 64)]
        filters: usize,
        #[arg(long, default_value_t = 7)]
        blocks: usize,
        #[arg(long, default_value_t = 1024)]
        patches_per_epoch: usize,
        #[arg(long, default_value_t = 256)]
        val_patches: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        /// Per-epoch loss log (default: `<out>.losses.csv`).
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Denoise a volume with a trained model.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "pri-pbcnn")]
        method: Method,
        /// Patch grid stride in voxels.
        #[arg(long, default_value_t = 3)]
        offset: usize,
        /// Rician pipeline: corrected noise field, magnitude bias removal,
        /// squared-magnitude stage-two filtering.
        #[arg(long)]
        rician: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        residual_out: Option<PathBuf>,
        #[arg(long)]
        sigma_out: Option<PathBuf>,
        /// Clamp negative output intensities to zero.
        #[arg(long)]
        clamp_nonneg: bool,
        /// Stage-two filtering strength multiplier on sigma(i).
        #[arg(long, default_value_t = 1.0)]
        h_scale: f64,
        /// Stage-two search half-width in voxels.
        #[arg(long, default_value_t = 5)]
        search_radius: usize,
        /// Testing hook: run stage two against this prefiltered guide instead
        /// of computing stage one.
        #[arg(long, hide = true)]
        guide: Option<PathBuf>,
        /// Testing hook: sigma field accompanying --guide.
        #[arg(long, hide = true)]
        sigma_in: Option<PathBuf>,
    },
    /// Estimate the global noise level of a volume with a trained model.
    EstimateNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rician: bool,
        /// Restrict the estimate to voxels above this intensity.
        #[arg(long)]
        mask_threshold: Option<f64>,
        #[arg(long, default_value_t = 3)]
        offset: usize,
        /// Also write the per-voxel sigma map.
        #[arg(long)]
        sigma_out: Option<PathBuf>,
    },
    /// Compare a test volume against a reference.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Foreground mask: reference voxels strictly above this value.
        /// Pass a negative value to evaluate the whole volume.
        #[arg(long, default_value_t = 10.0)]
        mask_threshold: f64,
        #[arg(long, default_value_t = 255.0)]
        peak: f64,
        /// Comma-separated list from psnr, ssim, rmse.
        #[arg(long, default_value = "psnr,ssim,rmse")]
        metrics: String,
    },
}

fn parse_range(text: &str, flag: &str) -> Result<(f64, f64)> {
    let parse_one = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("{flag}: '{s}' is not a number")))
    };
    match text.split_once(':') {
        Some((lo, hi)) => Ok((parse_one(lo)?, parse_one(hi)?)),
        None => {
            let v = parse_one(text)?;
            Ok((v, v))
        }
    }
}

fn check_offset(offset: usize) -> Result<()> {
    if matches!(offset, 3 | 6 | 12) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "offset must be 3, 6 or 12, got {offset}"
        )))
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let n = threads.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_phantom(size: usize, seed: u64, out: &Path) -> Result<()> {
    let vol = make_phantom(&PhantomSpec::new((size, size, size), seed))?;
    write_volume(&vol, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_add_noise(
    input: &Path,
    out: &Path,
    model: NoiseModel,
    level: f64,
    spatial: Option<&str>,
    seed: u64,
    sigma_out: Option<&Path>,
) -> Result<()> {
    if level < 0.0 {
        return Err(Error::InvalidArgument("--level must be >= 0".into()));
    }
    let clean = read_volume(input)?;
    let sigma = 2.55 * level;
    let kind = match model {
        NoiseModel::Gaussian => NoiseKind::Gaussian,
        NoiseModel::Rician => NoiseKind::Rician,
    };
    let field = match spatial {
        None => NoiseField::stationary(clean.dims(), sigma, kind)?,
        Some(range) => {
            let (lo, hi) = parse_range(range, "--spatial")?;
            let modulation =
                make_modulation_field(clean.dims(), lo, hi, ModulationProfile::RampZ)?;
            NoiseField::modulated(sigma, &modulation, kind)?
        }
    };
    let noisy = match model {
        NoiseModel::Gaussian => add_gaussian(&clean, &field, seed)?,
        NoiseModel::Rician => add_rician(&clean, &field, seed)?,
    };
    write_volume(&noisy, out)?;
    if let Some(path) = sigma_out {
        write_volume(&field.sigma, path)?;
    }
    Ok(())
}

fn list_volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_volume_file(p))
        .collect();
    files.sort();
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    epochs: usize,
    batch: usize,
    loss: LossKind,
    norm: NormKind,
    patience: usize,
    seed: u64,
    out: &Path,
    val_fraction: f64,
    level: &str,
    filters: usize,
    blocks: usize,
    patches_per_epoch: usize,
    val_patches: usize,
    learning_rate: f64,
    loss_log: Option<&Path>,
) -> Result<()> {
    let level_range = parse_range(level, "--level")?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(
            "--val-fraction must be in [0, 1)".into(),
        ));
    }
    let files = list_volume_files(data)?;
    if files.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least two volumes in {data:?} (one is held out for validation), found {}",
            files.len()
        )));
    }
    let volumes: Vec<Volume> = files.iter().map(|p| read_volume(p)).collect::<Result<_>>()?;

    // deterministic validation split by seed
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a);
    for i in (1..order.len()).rev() {
        let j = (rand::Rng::random_range(&mut rng, 0..=i as u64)) as usize;
        order.swap(i, j);
    }
    let val_count = ((volumes.len() as f64 * val_fraction).round() as usize)
        .clamp(1, volumes.len() - 1);
    let (val_idx, train_idx) = order.split_at(val_count);
    let train_vols: Vec<Volume> = train_idx.iter().map(|&i| volumes[i].clone()).collect();
    let val_vols: Vec<Volume> = val_idx.iter().map(|&i| volumes[i].clone()).collect();

    let sampler = TrainingSampler::new(train_vols, level_range, patches_per_epoch, seed)?;
    let val_sampler = TrainingSampler::new(val_vols, level_range, val_patches, seed)?;
    let validation = val_sampler.fixed_pairs(1, val_patches)?;

    let net = Network::init(architecture(filters, blocks, norm), seed)?;
    let cfg = TrainConfig {
        batch_size: batch,
        max_epochs: epochs,
        adam: AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        },
        loss,
        patience,
        seed,
        patches_per_epoch,
    };
    let outcome = train(
        net,
        |epoch| sampler.epoch_pairs(epoch).unwrap_or_default(),
        &validation,
        &cfg,
    )?;

    save_weights(&outcome.network, out)?;
    let log_path = match loss_log {
        Some(p) => p.to_path_buf(),
        None => {
            let mut s = out.as_os_str().to_os_string();
            s.push(".losses.csv");
            PathBuf::from(s)
        }
    };
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    for stat in &outcome.history {
        writeln!(log, "{},{},{}", stat.epoch, stat.train_loss, stat.val_loss).map_err(|e| {
            Error::Io {
                path: log_path.clone(),
                source: e,
            }
        })?;
    }
    for stat in &outcome.history {
        println!(
            "epoch={} train_loss={:.6} val_loss={:.6}",
            stat.epoch, stat.train_loss, stat.val_loss
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_denoise(
    input: &Path,
    model: &Path,
    method: Method,
    offset: usize,
    rician: bool,
    out: &Path,
    residual_out: Option<&Path>,
    sigma_out: Option<&Path>,
    clamp_nonneg: bool,
    h_scale: f64,
    search_radius: usize,
    guide: Option<&Path>,
    sigma_in: Option<&Path>,
) -> Result<()> {
    check_offset(offset)?;
    let noisy = read_volume(input)?;
    let net = load_weights(model)?;
    let rinlm_cfg = RinlmConfig {
        h_scale,
        search_radius,
        ..RinlmConfig::default()
    };

    let (denoised, residual, sigma_map) = match (method, guide) {
        (Method::PriPbcnn, Some(guide_path)) => {
            // testing hook: stage two only, against an externally supplied guide
            let sigma_path = sigma_in.ok_or_else(|| {
                Error::InvalidArgument("--guide requires --sigma-in".into())
            })?;
            let guide = read_volume(guide_path)?;
            let sigma_map = read_volume(sigma_path)?;
            let filtered = if rician {
                rinlm_denoise_rician(&noisy, &guide, &sigma_map, &rinlm_cfg)?
            } else {
                rinlm_denoise(&noisy, &guide, &sigma_map, &rinlm_cfg)?
            };
            (filtered, None, Some(sigma_map))
        }
        (Method::Pbcnn, _) => {
            let result = if rician {
                denoise_pbcnn_rician(&noisy, &net, offset)?
            } else {
                denoise_pbcnn(&noisy, &net, offset)?
            };
            (
                result.denoised,
                Some(result.residual),
                Some(result.sigma_map),
            )
        }
        (Method::PriPbcnn, None) => {
            let stage_one = if rician {
                denoise_pbcnn_rician(&noisy, &net, offset)?
            } else {
                denoise_pbcnn(&noisy, &net, offset)?
            };
            let filtered = if rician {
                rinlm_denoise_rician(&noisy, &stage_one.denoised, &stage_one.sigma_map, &rinlm_cfg)?
            } else {
                rinlm_denoise(&noisy, &stage_one.denoised, &stage_one.sigma_map, &rinlm_cfg)?
            };
            (
                filtered,
                Some(stage_one.residual),
                Some(stage_one.sigma_map),
            )
        }
    };

    let final_vol = if clamp_nonneg {
        denoised.map(|v| v.max(0.0))
    } else {
        denoised
    };
    write_volume(&final_vol, out)?;
    if let Some(path) = residual_out {
        match &residual {
            Some(r) => write_volume(r, path)?,
            None => {
                return Err(Error::InvalidArgument(
                    "--residual-out is unavailable with --guide".into(),
                ))
            }
        }
    }
    if let Some(path) = sigma_out {
        if let Some(s) = &sigma_map {
            write_volume(s, path)?;
        }
    }
    Ok(())
}

fn cmd_estimate_noise(
    input: &Path,
    model: &Path,
    rician: bool,
    mask_threshold: Option<f64>,
    offset: usize,
    sigma_out: Option<&Path>,
) -> Result<()> {
    check_offset(offset)?;
    let noisy = read_volume(input)?;
    let net = load_weights(model)?;
    let mask = mask_threshold.map(|t| Mask::from_threshold(&noisy, t));
    let (global, sigma_map) = if rician {
        let result = denoise_pbcnn_rician(&noisy, &net, offset)?;
        (
            estimate_global_noise_rician(&result.sigma_map, mask.as_ref())?,
            result.sigma_map,
        )
    } else {
        let result = denoise_pbcnn(&noisy, &net, offset)?;
        (
            estimate_global_noise(&result.residual, mask.as_ref())?,
            result.sigma_map,
        )
    };
    println!("global_sigma={global}");
    if let Some(path) = sigma_out {
        write_volume(&sigma_map, path)?;
    }
    Ok(())
}

fn cmd_evaluate(
    reference: &Path,
    test: &Path,
    mask_threshold: f64,
    peak: f64,
    metric_list: &str,
) -> Result<()> {
    let reference = read_volume(reference)?;
    let test = read_volume(test)?;
    let mask = if mask_threshold >= 0.0 {
        Some(Mask::from_threshold(&reference, mask_threshold))
    } else {
        None
    };
    let cfg = MetricConfig {
        peak,
        mask: mask.clone(),
        ..MetricConfig::default()
    };
    for name in metric_list.split(',') {
        match name.trim() {
            "psnr" => println!("psnr={}", psnr(&reference, &test, &cfg)?),
            "ssim" => println!("ssim={}", ssim(&reference, &test, &cfg)?),
            "rmse" => println!("rmse={}", rmse(&reference, &test, mask.as_ref())?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown metric '{other}' (choose from psnr, ssim, rmse)"
                )))
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Phantom { size, seed, out } => cmd_phantom(size, seed, &out),
        Command::AddNoise {
            input,
            out,
            model,
            level,
            spatial,
            seed,
            sigma_out,
        } => cmd_add_noise(
            &input,
            &out,
            model,
            level,
            spatial.as_deref(),
            seed,
            sigma_out.as_deref(),
        ),
        Command::Train {
            data,
            epochs,
            batch,
            loss,
            norm,
            patience,
            seed,
            out,
            val_fraction,
            level,
            filters,
            blocks,
            patches_per_epoch,
            val_patches,
            learning_rate,
            loss_log,
        } => cmd_train(
            &data,
            epochs,
            batch,
            loss.into(),
            match norm {
                NormArg::Instance => NormKind::Instance,
                NormArg::Batch => NormKind::Batch,
            },
            patience,
            seed,
            &out,
            val_fraction,
            &level,
            filters,
            blocks,
            patches_per_epoch,
            val_patches,
            learning_rate,
            loss_log.as_deref(),
        ),
        Command::Denoise {
            input,
            model,
            method,
            offset,
            rician,
            out,
            residual_out,
            sigma_out,
            clamp_nonneg,
            h_scale,
            search_radius,
            guide,
            sigma_in,
        } => cmd_denoise(
            &input,
            &model,
            method,
            offset,
            rician,
            &out,
            residual_out.as_deref(),
            sigma_out.as_deref(),
            clamp_nonneg,
            h_scale,
            search_radius,
            guide.as_deref(),
            sigma_in.as_deref(),
        ),
        Command::EstimateNoise {
            input,
            model,
            rician,
            mask_threshold,
            offset,
            sigma_out,
        } => cmd_estimate_noise(
            &input,
            &model,
            rician,
            mask_threshold,
            offset,
            sigma_out.as_deref(),
        ),
        Command::Evaluate {
            reference,
            test,
            mask_threshold,
            peak,
            metrics,
        } => cmd_evaluate(&reference, &test, mask_threshold, peak, &metrics),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
