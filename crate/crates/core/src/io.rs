//! Volume persistence: a minimal single-file NIfTI-1 reader/writer plus a
//! headerless raw float format.
//!
//! Supported NIfTI datatypes are signed 16-bit integers (code 4) and 32-bit
//! floats (code 16); anything else errors loudly. Both byte orders are read
//! (detected from the header-size field); files are always written
//! little-endian. Header fields this crate does not interpret (orientation,
//! intent, ...) are preserved verbatim on read-modify-write.

use crate::error::{Error, Result};
use crate::volume::Volume;
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

const HEADER_LEN: usize = 348;
/// Single-file magic at byte 344.
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
/// Minimum data offset in a single-file volume.
const MIN_VOX_OFFSET: u64 = 352;
/// Default cap on the decoded voxel payload.
const DEFAULT_MAX_BYTES: u64 = 4 << 30;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const DESCRIP: usize = 148;
    pub const MAGIC: usize = 344;
}

/// Every multi-byte field of the NIfTI-1 header as (offset, element size,
/// element count); used to normalize big-endian headers.
const SWAP_TABLE: &[(usize, usize, usize)] = &[
    (0, 4, 1),    // sizeof_hdr
    (32, 4, 1),   // extents
    (36, 2, 1),   // session_error
    (40, 2, 8),   // dim
    (56, 4, 3),   // intent_p1..p3
    (68, 2, 1),   // intent_code
    (70, 2, 1),   // datatype
    (72, 2, 1),   // bitpix
    (74, 2, 1),   // slice_start
    (76, 4, 8),   // pixdim
    (108, 4, 1),  // vox_offset
    (112, 4, 1),  // scl_slope
    (116, 4, 1),  // scl_inter
    (120, 2, 1),  // slice_end
    (124, 4, 1),  // cal_max
    (128, 4, 1),  // cal_min
    (132, 4, 1),  // slice_duration
    (136, 4, 1),  // toffset
    (140, 4, 1),  // glmax
    (144, 4, 1),  // glmin
    (252, 2, 1),  // qform_code
    (254, 2, 1),  // sform_code
    (256, 4, 3),  // quatern_b..d
    (268, 4, 3),  // qoffset_x..z
    (280, 4, 4),  // srow_x
    (296, 4, 4),  // srow_y
    (312, 4, 4),  // srow_z
];

fn swap_header_fields(raw: &mut [u8; HEADER_LEN]) {
    for &(off, size, count) in SWAP_TABLE {
        for i in 0..count {
            raw[off + i * size..off + (i + 1) * size].reverse();
        }
    }
}

/// Decoded NIfTI-1 header. `raw` holds the little-endian-normalized header
/// bytes so unparsed fields survive a read-modify-write cycle.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    raw: [u8; HEADER_LEN],
    pub dims: (usize, usize, usize),
    pub datatype: i16,
    pub voxel_size: (f64, f64, f64),
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: u64,
    pub from_big_endian: bool,
}

fn parse_header(path: &Path, mut raw: [u8; HEADER_LEN]) -> Result<NiftiHeader> {
    let sizeof_le = LittleEndian::read_i32(&raw[offset::SIZEOF_HDR..]);
    let sizeof_be = BigEndian::read_i32(&raw[offset::SIZEOF_HDR..]);
    let from_big_endian = match (sizeof_le, sizeof_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::format(
                path,
                format!("header size field is {sizeof_le}, expected 348"),
            ))
        }
    };
    if from_big_endian {
        swap_header_fields(&mut raw);
    }

    if &raw[offset::MAGIC..offset::MAGIC + 4] != MAGIC_SINGLE {
        return Err(Error::format(path, "bad magic, expected single-file n+1"));
    }

    let dim0 = LittleEndian::read_i16(&raw[offset::DIM..]);
    if !(1..=7).contains(&dim0) {
        return Err(Error::format(path, format!("implausible dim[0] = {dim0}")));
    }
    let dim = |i: usize| LittleEndian::read_i16(&raw[offset::DIM + 2 * i..]);
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if nx <= 0 || (dim0 >= 2 && ny <= 0) || (dim0 >= 3 && nz <= 0) {
        return Err(Error::format(path, "non-positive spatial dimension"));
    }
    // a trailing volume axis is fine as long as it is a single volume
    if dim0 > 3 {
        for i in 4..=dim0 as usize {
            let d = dim(i);
            if d > 1 {
                return Err(Error::format(
                    path,
                    format!("multi-volume file (dim[{i}] = {d}) is not supported"),
                ));
            }
        }
    }
    let dims = (
        nx as usize,
        if dim0 >= 2 { ny as usize } else { 1 },
        if dim0 >= 3 { nz as usize } else { 1 },
    );

    let datatype = LittleEndian::read_i16(&raw[offset::DATATYPE..]);
    let bitpix = LittleEndian::read_i16(&raw[offset::BITPIX..]);
    let expected_bitpix = match datatype {
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported datatype code {other} (supported: 4 = int16, 16 = float32)"),
            ))
        }
    };
    if bitpix != expected_bitpix {
        return Err(Error::format(
            path,
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let pixdim = |i: usize| LittleEndian::read_f32(&raw[offset::PIXDIM + 4 * i..]);
    let vs = |i: usize| {
        let v = pixdim(i).abs() as f64;
        if v.is_finite() && v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let vox_offset_f = LittleEndian::read_f32(&raw[offset::VOX_OFFSET..]);
    if !vox_offset_f.is_finite() || vox_offset_f < MIN_VOX_OFFSET as f32 {
        return Err(Error::format(
            path,
            format!("vox_offset {vox_offset_f} below minimum {MIN_VOX_OFFSET}"),
        ));
    }
    Ok(NiftiHeader {
        dims,
        datatype,
        voxel_size: (vs(1), vs(2), vs(3)),
        scl_slope: LittleEndian::read_f32(&raw[offset::SCL_SLOPE..]),
        scl_inter: LittleEndian::read_f32(&raw[offset::SCL_INTER..]),
        vox_offset: vox_offset_f as u64,
        from_big_endian,
        raw,
    })
}

/// Reads a single-file NIfTI-1 volume with the default 4 GiB payload cap.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    Ok(read_nifti_with_header(path)?.0)
}

/// Reads the volume together with its decoded header for later
/// read-modify-write cycles.
pub fn read_nifti_with_header(path: impl AsRef<Path>) -> Result<(Volume, NiftiHeader)> {
    read_nifti_limited(path.as_ref(), DEFAULT_MAX_BYTES)
}

/// Reads with an explicit cap on the decoded payload size in bytes.
pub fn read_nifti_limited(path: &Path, max_bytes: u64) -> Result<(Volume, NiftiHeader)> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = [0u8; HEADER_LEN];
    file.read_exact(&mut raw)
        .map_err(|_| Error::format(path, "file shorter than the 348-byte header"))?;
    let header = parse_header(path, raw)?;

    let (nx, ny, nz) = header.dims;
    let voxels = nx as u64 * ny as u64 * nz as u64;
    let bytes_per = match header.datatype {
        DT_INT16 => 2u64,
        _ => 4u64,
    };
    let payload = voxels.saturating_mul(bytes_per);
    if payload > max_bytes {
        return Err(Error::format(
            path,
            format!("payload of {payload} bytes exceeds the {max_bytes}-byte cap"),
        ));
    }
    let file_len = file
        .metadata()
        .map_err(|e| Error::io(path, e))?
        .len();
    if header.vox_offset.saturating_add(payload) > file_len {
        return Err(Error::format(
            path,
            format!(
                "truncated data section: need {} bytes at offset {}, file has {file_len}",
                payload, header.vox_offset
            ),
        ));
    }
    file.seek(SeekFrom::Start(header.vox_offset))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; payload as usize];
    file.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated data section"))?;

    let slope = header.scl_slope;
    let inter = header.scl_inter;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(Error::format(path, "non-finite intensity scaling"));
    }
    let apply = |raw_value: f64| {
        if slope != 0.0 {
            raw_value * slope as f64 + inter as f64
        } else {
            raw_value
        }
    };
    let mut data = Vec::with_capacity(voxels as usize);
    match (header.datatype, header.from_big_endian) {
        (DT_INT16, false) => {
            for c in buf.chunks_exact(2) {
                data.push(apply(LittleEndian::read_i16(c) as f64));
            }
        }
        (DT_INT16, true) => {
            for c in buf.chunks_exact(2) {
                data.push(apply(BigEndian::read_i16(c) as f64));
            }
        }
        (_, false) => {
            for c in buf.chunks_exact(4) {
                data.push(apply(LittleEndian::read_f32(c) as f64));
            }
        }
        (_, true) => {
            for c in buf.chunks_exact(4) {
                data.push(apply(BigEndian::read_f32(c) as f64));
            }
        }
    }
    let mut vol = Volume::from_vec(header.dims, data)
        .map_err(|e| Error::format(path, format!("invalid voxel data: {e}")))?;
    vol.set_voxel_size(header.voxel_size);
    Ok((vol, header))
}

fn canonical_header(vol: &Volume) -> [u8; HEADER_LEN] {
    let mut raw = [0u8; HEADER_LEN];
    LittleEndian::write_i32(&mut raw[offset::SIZEOF_HDR..], HEADER_LEN as i32);
    let (nx, ny, nz) = vol.dims();
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut raw[offset::DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut raw[offset::DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut raw[offset::BITPIX..], 32);
    let (dx, dy, dz) = vol.voxel_size();
    let pixdim = [1.0f32, dx as f32, dy as f32, dz as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut raw[offset::PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut raw[offset::VOX_OFFSET..], MIN_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut raw[offset::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut raw[offset::SCL_INTER..], 0.0);
    let descrip = b"voxelclean";
    raw[offset::DESCRIP..offset::DESCRIP + descrip.len()].copy_from_slice(descrip);
    raw[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
    raw
}

fn write_nifti_raw(vol: &Volume, raw: [u8; HEADER_LEN], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(&raw).map_err(io)?;
    // four-byte extension indicator pads the data offset to 352
    w.write_all(&[0u8; 4]).map_err(io)?;
    let mut buf = [0u8; 4];
    for &v in vol.as_slice() {
        LittleEndian::write_f32(&mut buf, v as f32);
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes a single-file little-endian NIfTI-1 volume: datatype float32,
/// vox_offset 352, slope 1, intercept 0.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_raw(vol, canonical_header(vol), path.as_ref())
}

/// Like [`write_nifti`] but starts from a previously read header, so fields
/// this crate does not interpret (orientation, intent, ...) are carried over
/// byte for byte. Geometry and datatype fields are overwritten to describe
/// `vol`.
pub fn write_nifti_with_header(
    vol: &Volume,
    header: &NiftiHeader,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut raw = header.raw;
    let fresh = canonical_header(vol);
    // overwrite the fields that must describe the outgoing volume
    for &(start, len) in &[
        (offset::SIZEOF_HDR, 4),
        (offset::DIM, 16),
        (offset::DATATYPE, 2),
        (offset::BITPIX, 2),
        (offset::PIXDIM, 32),
        (offset::VOX_OFFSET, 4),
        (offset::SCL_SLOPE, 4),
        (offset::SCL_INTER, 4),
        (offset::MAGIC, 4),
    ] {
        raw[start..start + len].copy_from_slice(&fresh[start..start + len]);
    }
    write_nifti_raw(vol, raw, path.as_ref())
}

/// Reads a headerless little-endian float32 stream in x-fastest order.
pub fn read_raw(path: impl AsRef<Path>, dims: (usize, usize, usize)) -> Result<Volume> {
    let path = path.as_ref();
    let (nx, ny, nz) = dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidArgument(format!(
            "raw volume dims must be positive, got {dims:?}"
        )));
    }
    let expected = 4u64 * nx as u64 * ny as u64 * nz as u64;
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len != expected {
        return Err(Error::format(
            path,
            format!("file is {len} bytes, dims {dims:?} require exactly {expected}"),
        ));
    }
    let mut buf = vec![0u8; expected as usize];
    file.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated raw stream"))?;
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    Volume::from_vec(dims, data).map_err(|e| Error::format(path, format!("invalid voxel data: {e}")))
}

/// Writes the headerless little-endian float32 stream.
pub fn write_raw(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = [0u8; 4];
    for &v in vol.as_slice() {
        LittleEndian::write_f32(&mut buf, v as f32);
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
