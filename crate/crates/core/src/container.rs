//! Binary container shared by datasets and checkpoints: an 8-byte magic,
//! a little-endian `u64` header length, a UTF-8 JSON header, then a payload
//! of little-endian `f32` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, FormatKind, Result};

/// Hex SHA-256 of the little-endian encoding of `values`.
pub fn payload_checksum(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a temporary sibling and renames it into place, so an
/// interrupted write never clobbers an existing file.
pub fn write(path: &Path, magic: &[u8; 8], header: &[u8], payload: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = Path::new(&tmp);
    fs::write(tmp, &bytes).map_err(io_err(tmp))?;
    fs::rename(tmp, path).map_err(io_err(path))
}

/// Reads a container, returning the raw header bytes and the payload.
pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(format_err(path, FormatKind::BadMagic, format!("expected {}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < 16 {
        return Err(format_err(path, FormatKind::Truncated, "missing header length"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let rest = &bytes[16..];
    if len > rest.len() {
        return Err(format_err(path, FormatKind::Truncated, format!("header of {len} bytes exceeds file")));
    }
    let header = rest[..len].to_vec();
    let body = &rest[len..];
    if body.len() % 4 != 0 {
        return Err(format_err(path, FormatKind::Truncated, "payload is not a whole number of floats"));
    }
    let payload = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write(&p, b"TESTMAGC", b"{\"a\":1}", &[1.5, -0.0, f32::MIN_POSITIVE]).unwrap();
        let (h, v) = read(&p, b"TESTMAGC").unwrap();
        assert_eq!(h, b"{\"a\":1}");
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), [1.5f32, -0.0, f32::MIN_POSITIVE].map(f32::to_bits));
        assert!(matches!(read(&p, b"OTHERMAG"), Err(crate::Error::Format { kind: FormatKind::BadMagic, .. })));
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read(&p, b"TESTMAGC"), Err(crate::Error::Format { kind: FormatKind::Truncated, .. })));
    }
}
