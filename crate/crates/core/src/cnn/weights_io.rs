//! Weight file container.
//!
//! Layout, all integers little-endian:
//! magic `PBCN` | format version u32 | architecture fingerprint u64 |
//! tensor count u32 | per tensor: rank u32, dims u32 each, then raw f32
//! little-endian values.
//!
//! Parameters are kept at f32 precision in memory, so a save/load round trip
//! reproduces them bit for bit.

use super::{architecture, architecture_fingerprint, Network, NormKind, ParamTensor};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PBCN";
const FORMAT_VERSION: u32 = 1;
const MAX_TENSORS: u32 = 4096;
const MAX_RANK: u32 = 8;
/// Cap on total stored values (1 GiB of f32 payload).
const MAX_TOTAL_VALUES: u64 = 1 << 28;

/// Writes a network's parameters to `path`.
pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(net.fingerprint()).map_err(io)?;
    w.write_u32::<LittleEndian>(net.params().len() as u32)
        .map_err(io)?;
    for p in net.params() {
        w.write_u32::<LittleEndian>(p.dims.len() as u32).map_err(io)?;
        for &d in &p.dims {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in &p.data {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a weight file and reconstructs the network.
///
/// The topology is inferred from the tensor shapes (filter count from the
/// first kernel, block count from the tensor count) and then verified
/// against the stored architecture fingerprint; any disagreement is an error.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::format(path, reason);
    let io = |e: std::io::Error| Error::format(path, format!("truncated or unreadable: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let fingerprint = r.read_u64::<LittleEndian>().map_err(io)?;
    let tensor_count = r.read_u32::<LittleEndian>().map_err(io)?;
    if tensor_count == 0 || tensor_count > MAX_TENSORS {
        return Err(bad(&format!("implausible tensor count {tensor_count}")));
    }

    let mut params = Vec::with_capacity(tensor_count as usize);
    let mut total: u64 = 0;
    for _ in 0..tensor_count {
        let rank = r.read_u32::<LittleEndian>().map_err(io)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(&format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = r.read_u32::<LittleEndian>().map_err(io)? as u64;
            if d == 0 {
                return Err(bad("zero tensor dimension"));
            }
            len = len.saturating_mul(d);
            dims.push(d as usize);
        }
        total = total.saturating_add(len);
        if total > MAX_TOTAL_VALUES {
            return Err(bad("weight payload exceeds size cap"));
        }
        let mut data = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let v = r.read_f32::<LittleEndian>().map_err(io)? as f64;
            if !v.is_finite() {
                return Err(bad("non-finite parameter value"));
            }
            data.push(v);
        }
        params.push(ParamTensor { dims, data });
    }

    // infer the topology from the stored shapes: [filters, 1, 3, 3, 3] leads,
    // each internal block contributes four tensors, the output block two
    let first = &params[0];
    if first.dims.len() != 5 || first.dims[1] != 1 || first.dims[2..] != [3, 3, 3] {
        return Err(bad(&format!(
            "leading tensor has shape {:?}, expected a [filters, 1, 3, 3, 3] kernel",
            first.dims
        )));
    }
    let filters = first.dims[0];
    let n = params.len();
    if n < 4 || (n - 4) % 4 != 0 {
        return Err(bad(&format!(
            "tensor count {n} does not fit the block structure"
        )));
    }
    let blocks = (n - 4) / 4;

    for kind in [NormKind::Instance, NormKind::Batch] {
        let spec = architecture(filters, blocks, kind);
        if architecture_fingerprint(&spec) == fingerprint {
            return Network::from_parts(spec, params).map_err(|e| {
                Error::format(path, format!("weights do not fit their own topology: {e}"))
            });
        }
    }
    Err(Error::ArchitectureMismatch(format!(
        "fingerprint {fingerprint:#018x} does not match a {filters}-filter, {blocks}-block topology"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::architecture;

    fn toy_net(seed: u64) -> Network {
        Network::init(architecture(3, 2, NormKind::Instance), seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.pbcn");
        let net = toy_net(42);
        save_weights(&net, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded.spec(), net.spec());
        for (a, b) in loaded.params().iter().zip(net.params()) {
            assert_eq!(a.dims, b.dims);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn batch_norm_topology_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bn.pbcn");
        let net = Network::init(architecture(3, 1, NormKind::Batch), 1).unwrap();
        save_weights(&net, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded.spec(), net.spec());
    }

    #[test]
    fn truncated_file_errors_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.pbcn");
        save_weights(&toy_net(7), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 9, 17, bytes.len() / 2, bytes.len() - 1] {
            let short = dir.path().join(format!("cut{cut}.pbcn"));
            std::fs::write(&short, &bytes[..cut]).unwrap();
            assert!(load_weights(&short).is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn bad_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.pbcn");
        save_weights(&toy_net(7), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_fingerprint_is_incompatibility_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.pbcn");
        save_weights(&toy_net(7), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // corrupt the stored fingerprint (bytes 8..16)
        bytes[8] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn size_cap_rejects_huge_claims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.pbcn");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes()); // rank 2
        bytes.extend_from_slice(&(1u32 << 30).to_le_bytes());
        bytes.extend_from_slice(&(1u32 << 30).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_weights(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("size cap")),
            other => panic!("expected size-cap error, got {other:?}"),
        }
    }
}
