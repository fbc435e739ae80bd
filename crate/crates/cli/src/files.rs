//! Volume file dispatch for the CLI.
//!
//! `.nii` files are single-file NIfTI-1. `.raw`/`.f32` files are headerless
//! little-endian float32 streams whose dimensions are carried in the file
//! name as a `_<nx>x<ny>x<nz>` token, e.g. `phantom_64x64x64.raw`.

use std::path::Path;
use voxelclean_core::error::{Error, Result};
use voxelclean_core::io;
use voxelclean_core::Volume;

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Parses the trailing `_<nx>x<ny>x<nz>` dimension token of a raw file name.
fn dims_from_name(path: &Path) -> Result<(usize, usize, usize)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let token = stem.rsplit('_').next().unwrap_or_default();
    let parts: Vec<Option<usize>> = token.split('x').map(|p| p.parse().ok()).collect();
    if let [Some(nx), Some(ny), Some(nz)] = parts[..] {
        if nx > 0 && ny > 0 && nz > 0 {
            return Ok((nx, ny, nz));
        }
    }
    Err(Error::InvalidArgument(format!(
        "raw volume {path:?} needs a _<nx>x<ny>x<nz> dimension token in its name"
    )))
}

pub fn is_volume_file(path: &Path) -> bool {
    matches!(extension(path).as_str(), "nii" | "raw" | "f32")
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match extension(path).as_str() {
        "nii" => io::read_nifti(path),
        "raw" | "f32" => io::read_raw(path, dims_from_name(path)?),
        other => Err(Error::InvalidArgument(format!(
            "unsupported volume extension '.{other}' for {path:?} (use .nii or .raw)"
        ))),
    }
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "nii" => io::write_nifti(vol, path),
        "raw" | "f32" => {
            let dims = dims_from_name(path)?;
            if dims != vol.dims() {
                return Err(Error::InvalidArgument(format!(
                    "file name token {dims:?} does not match volume dims {:?}",
                    vol.dims()
                )));
            }
            io::write_raw(vol, path)
        }
        other => Err(Error::InvalidArgument(format!(
            "unsupported volume extension '.{other}' for {path:?} (use .nii or .raw)"
        ))),
    }
}
