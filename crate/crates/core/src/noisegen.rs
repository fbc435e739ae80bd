//! Ground-truth data factory: synthetic phantoms, seeded Gaussian and Rician
//! noise (stationary or spatially varying), and modulation fields.
//!
//! All generation is sequential and driven by a seeded ChaCha8 stream, so a
//! given (input, field, seed) triple always produces bit-identical output.

use crate::error::{Error, Result};
use crate::volume::{box_mean, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Statistical model of the corruption a noise field describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Rician,
}

/// Per-voxel noise standard deviation map.
#[derive(Debug, Clone)]
pub struct NoiseField {
    pub sigma: Volume,
    pub kind: NoiseKind,
}

impl NoiseField {
    /// Constant sigma everywhere.
    pub fn stationary(dims: (usize, usize, usize), sigma: f64, kind: NoiseKind) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(NoiseField {
            sigma: Volume::filled(dims, sigma)?,
            kind,
        })
    }

    /// `base_sigma` scaled voxelwise by a modulation volume.
    pub fn modulated(base_sigma: f64, modulation: &Volume, kind: NoiseKind) -> Result<Self> {
        if base_sigma < 0.0 || !base_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "base sigma must be finite and non-negative, got {base_sigma}"
            )));
        }
        if modulation.min_value() < 0.0 {
            return Err(Error::InvalidArgument(
                "modulation field must be non-negative".into(),
            ));
        }
        Ok(NoiseField {
            sigma: modulation.map(|m| base_sigma * m),
            kind,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.sigma.dims()
    }
}

/// One intensity class of the synthetic phantom: `count` ellipsoidal blobs
/// painted at `intensity`, with semi-axes drawn from `semi_axis_range`
/// (voxels).
#[derive(Debug, Clone)]
pub struct IntensityClass {
    pub intensity: f64,
    pub count: usize,
    pub semi_axis_range: (f64, f64),
}

/// Recipe for a deterministic synthetic test volume with several tissue-like
/// intensity classes on a zero background. Peak intensity is exactly 255 so
/// that a noise level of p% always means `sigma = 2.55 * p`.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub classes: Vec<IntensityClass>,
}

impl PhantomSpec {
    pub fn new(dims: (usize, usize, usize), seed: u64) -> Self {
        PhantomSpec {
            dims,
            seed,
            classes: vec![
                IntensityClass {
                    intensity: 40.0,
                    count: 3,
                    semi_axis_range: (3.0, 7.0),
                },
                IntensityClass {
                    intensity: 160.0,
                    count: 4,
                    semi_axis_range: (4.0, 9.0),
                },
                IntensityClass {
                    intensity: 255.0,
                    count: 2,
                    semi_axis_range: (5.0, 9.0),
                },
            ],
        }
    }
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
    intensity: f64,
}

impl Ellipsoid {
    fn paint(&self, vol: &mut Volume) {
        let (nx, ny, nz) = vol.dims();
        let x0 = ((self.center.0 - self.semi.0).floor().max(0.0)) as usize;
        let x1 = ((self.center.0 + self.semi.0).ceil().min(nx as f64 - 1.0)) as usize;
        let y0 = ((self.center.1 - self.semi.1).floor().max(0.0)) as usize;
        let y1 = ((self.center.1 + self.semi.1).ceil().min(ny as f64 - 1.0)) as usize;
        let z0 = ((self.center.2 - self.semi.2).floor().max(0.0)) as usize;
        let z1 = ((self.center.2 + self.semi.2).ceil().min(nz as f64 - 1.0)) as usize;
        let data = vol.as_mut_slice();
        for z in z0..=z1 {
            let dz = (z as f64 - self.center.2) / self.semi.2;
            for y in y0..=y1 {
                let dy = (y as f64 - self.center.1) / self.semi.1;
                let row = nx * (y + ny * z);
                for x in x0..=x1 {
                    let dx = (x as f64 - self.center.0) / self.semi.0;
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        data[row + x] = self.intensity;
                    }
                }
            }
        }
    }
}

/// Deterministic multi-class test phantom: a large tissue ellipsoid carrying
/// smaller class blobs, softened by one box blur pass.
///
/// Guarantees: max intensity is exactly 255, at least three distinct classes
/// are present, and the foreground fraction (intensity > 10) is at least 20%.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let (nx, ny, nz) = spec.dims;
    if nx < 16 || ny < 16 || nz < 16 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be at least 16 per axis, got {:?}",
            spec.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vol = Volume::filled(spec.dims, 0.0)?;

    let center = (
        nx as f64 / 2.0,
        ny as f64 / 2.0,
        nz as f64 / 2.0,
    );
    let body = Ellipsoid {
        center,
        semi: (0.42 * nx as f64, 0.42 * ny as f64, 0.42 * nz as f64),
        intensity: 90.0,
    };
    body.paint(&mut vol);

    for class in &spec.classes {
        for _ in 0..class.count {
            // keep blob centers well inside the body so classes stay foreground
            let cx = center.0 + rng.random_range(-0.28..0.28) * nx as f64;
            let cy = center.1 + rng.random_range(-0.28..0.28) * ny as f64;
            let cz = center.2 + rng.random_range(-0.28..0.28) * nz as f64;
            let (lo, hi) = class.semi_axis_range;
            let blob = Ellipsoid {
                center: (cx, cy, cz),
                semi: (
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                ),
                intensity: class.intensity.clamp(0.0, 255.0),
            };
            blob.paint(&mut vol);
        }
    }

    // A solid peak blob painted last; its core survives the blur untouched,
    // which pins the global maximum at exactly 255.
    let peak = Ellipsoid {
        center: (center.0 * 0.8, center.1 * 0.8, center.2),
        semi: (4.5, 4.5, 4.5),
        intensity: 255.0,
    };
    peak.paint(&mut vol);

    let blurred = box_mean(&vol, 3)?;
    debug_assert!(blurred.max_value() == 255.0);
    Ok(blurred)
}

/// Spatial profile of a modulation field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModulationProfile {
    /// Linear ramp along the z axis (the default).
    #[default]
    RampZ,
    RampX,
    RampY,
    /// Grows with distance from the volume center.
    Radial,
}

/// Smooth field running from exactly `lo` to exactly `hi` over the volume.
pub fn make_modulation_field(
    dims: (usize, usize, usize),
    lo: f64,
    hi: f64,
    profile: ModulationProfile,
) -> Result<Volume> {
    if lo <= 0.0 || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "modulation bounds must be finite with lo > 0, got lo={lo}, hi={hi}"
        )));
    }
    if hi < lo {
        return Err(Error::InvalidArgument(format!(
            "modulation hi must be >= lo, got lo={lo}, hi={hi}"
        )));
    }
    let (nx, ny, nz) = dims;
    let lerp = |t: f64| lo * (1.0 - t) + hi * t;
    match profile {
        ModulationProfile::RampZ => Volume::from_fn(dims, |_, _, z| {
            lerp(if nz > 1 { z as f64 / (nz - 1) as f64 } else { 0.0 })
        }),
        ModulationProfile::RampX => Volume::from_fn(dims, |x, _, _| {
            lerp(if nx > 1 { x as f64 / (nx - 1) as f64 } else { 0.0 })
        }),
        ModulationProfile::RampY => Volume::from_fn(dims, |_, y, _| {
            lerp(if ny > 1 { y as f64 / (ny - 1) as f64 } else { 0.0 })
        }),
        ModulationProfile::Radial => {
            let c = (
                (nx as f64 - 1.0) / 2.0,
                (ny as f64 - 1.0) / 2.0,
                (nz as f64 - 1.0) / 2.0,
            );
            let radius = |x: usize, y: usize, z: usize| {
                let dx = x as f64 - c.0;
                let dy = y as f64 - c.1;
                let dz = z as f64 - c.2;
                (dx * dx + dy * dy + dz * dz).sqrt()
            };
            let mut rmin = f64::INFINITY;
            let mut rmax = f64::NEG_INFINITY;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let r = radius(x, y, z);
                        rmin = rmin.min(r);
                        rmax = rmax.max(r);
                    }
                }
            }
            let span = (rmax - rmin).max(f64::MIN_POSITIVE);
            Volume::from_fn(dims, |x, y, z| {
                let t = ((radius(x, y, z) - rmin) / span).clamp(0.0, 1.0);
                lerp(t)
            })
        }
    }
}

fn check_field(vol: &Volume, field: &NoiseField) -> Result<()> {
    if vol.dims() != field.dims() {
        return Err(Error::DimensionMismatch {
            expected: vol.dims(),
            actual: field.dims(),
        });
    }
    Ok(())
}

/// Adds zero-mean Gaussian noise with per-voxel standard deviation
/// `field.sigma`. Deterministic for a given seed.
pub fn add_gaussian(vol: &Volume, field: &NoiseField, seed: u64) -> Result<Volume> {
    check_field(vol, field)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .as_slice()
        .iter()
        .zip(field.sigma.as_slice().iter())
        .map(|(&v, &s)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + s * n
        })
        .collect();
    let mut out = Volume::from_vec(vol.dims(), data)?;
    out.set_voxel_size(vol.voxel_size());
    Ok(out)
}

/// Corrupts a magnitude image with Rician noise: independent Gaussian noise on
/// the real and imaginary channels, followed by the magnitude.
pub fn add_rician(vol: &Volume, field: &NoiseField, seed: u64) -> Result<Volume> {
    check_field(vol, field)?;
    if vol.min_value() < 0.0 {
        return Err(Error::InvalidArgument(
            "magnitude images must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .as_slice()
        .iter()
        .zip(field.sigma.as_slice().iter())
        .map(|(&v, &s)| {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let re = v + s * n1;
            let im = s * n2;
            (re * re + im * im).sqrt()
        })
        .collect();
    let mut out = Volume::from_vec(vol.dims(), data)?;
    out.set_voxel_size(vol.voxel_size());
    Ok(out)
}
