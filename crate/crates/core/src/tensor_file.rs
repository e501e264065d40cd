//! Container format shared by model files and lens checkpoints.
//!
//! ```text
//! ATTNLENS <kind> <version>\n
//! <header: one line of JSON>\n
//! tensor <name> <d0>x<d1>...\n <little-endian f32 payload>
//! ...
//! end\n
//! ```
//!
//! Tensors appear in the order they were written. The payload of each record
//! is exactly `product(shape) * 4` bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "ATTNLENS";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Borrowed view used when serializing without copying parameters.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub data: &'a [f32],
}

impl<'a> From<&'a NamedTensor> for TensorRef<'a> {
    fn from(t: &'a NamedTensor) -> Self {
        TensorRef {
            name: &t.name,
            shape: &t.shape,
            data: &t.data,
        }
    }
}

/// SHA-256 over names, shapes and raw little-endian payloads, hex encoded.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = TensorRef<'a>>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update(t.name.as_bytes());
        hasher.update([0u8]);
        hasher.update((t.shape.len() as u64).to_le_bytes());
        for &dim in t.shape {
            hasher.update((dim as u64).to_le_bytes());
        }
        for v in t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn encode<'a, H: Serialize>(
    kind: &str,
    version: u32,
    header: &H,
    tensors: impl IntoIterator<Item = TensorRef<'a>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC} {kind} {version}\n").as_bytes());
    let header = serde_json::to_string(header).expect("header serializes");
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for t in tensors {
        assert!(
            !t.name.is_empty() && !t.name.contains(char::is_whitespace),
            "tensor names must be non-empty and whitespace-free"
        );
        let shape = t
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        out.extend_from_slice(format!("tensor {} {}\n", t.name, shape).as_bytes());
        out.reserve(t.data.len() * 4);
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(b"end\n");
    out
}

pub fn write_file<'a, H: Serialize>(
    path: &Path,
    kind: &str,
    version: u32,
    header: &H,
    tensors: impl IntoIterator<Item = TensorRef<'a>>,
) -> Result<()> {
    write_atomic(path, &encode(kind, version, header, tensors))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct Decoded<H> {
    pub header: H,
    pub tensors: Vec<NamedTensor>,
}

impl<H> Decoded<H> {
    pub fn take(&mut self, name: &str, shape: &[usize], path: &Path) -> Result<Vec<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::corrupt(path, format!("missing tensor {name}")))?;
        let t = self.tensors.remove(pos);
        if t.shape != shape {
            return Err(Error::corrupt(
                path,
                format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape),
            ));
        }
        Ok(t.data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::corrupt(self.path, "unexpected end of file"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::corrupt(self.path, "non-UTF-8 record"))
    }

    fn payload(&mut self, n_floats: usize) -> Result<Vec<f32>> {
        let n_bytes = n_floats
            .checked_mul(4)
            .ok_or_else(|| Error::corrupt(self.path, "tensor size overflow"))?;
        if self.bytes.len() - self.pos < n_bytes {
            return Err(Error::corrupt(self.path, "truncated tensor payload"));
        }
        let raw = &self.bytes[self.pos..self.pos + n_bytes];
        self.pos += n_bytes;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    path: &Path,
    kind: &str,
    version: u32,
) -> Result<Decoded<H>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.line()?;
    let mut parts = magic.split(' ');
    if parts.next() != Some(MAGIC) || parts.next() != Some(kind) {
        return Err(Error::corrupt(path, format!("not an {MAGIC} {kind} file")));
    }
    let found: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::corrupt(path, "malformed version field"))?;
    if found != version {
        return Err(Error::Version {
            expected: version,
            found,
        });
    }
    let header: H = serde_json::from_str(cur.line()?)
        .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;

    let mut tensors = Vec::new();
    loop {
        let record = cur.line()?;
        if record == "end" {
            break;
        }
        let mut fields = record.split(' ');
        let (Some("tensor"), Some(name), Some(shape), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::corrupt(path, format!("bad tensor record {record:?}")));
        };
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::corrupt(path, format!("bad shape for {name}")))?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::corrupt(path, "tensor size overflow"))?;
        let data = cur.payload(n)?;
        tensors.push(NamedTensor::new(name, shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after end marker"));
    }
    Ok(Decoded { header, tensors })
}

pub fn read_file<H: DeserializeOwned>(path: &Path, kind: &str, version: u32) -> Result<Decoded<H>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    decode(&bytes, path, kind, version)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]),
            NamedTensor::new("b.c", vec![1], vec![7.0]),
        ]
    }

    #[test]
    fn round_trip_preserves_bits() {
        let tensors = sample();
        let bytes = encode("test", 3, &serde_json::json!({"x": 1}), tensors.iter().map(Into::into));
        let decoded: Decoded<serde_json::Value> = decode(&bytes, Path::new("mem"), "test", 3).unwrap();
        assert_eq!(decoded.header["x"], 1);
        for (a, b) in decoded.tensors.iter().zip(&tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn truncation_is_reported_as_corruption() {
        let tensors = sample();
        let bytes = encode("test", 1, &serde_json::json!({}), tensors.iter().map(Into::into));
        for cut in [5, bytes.len() / 2, bytes.len() - 1] {
            let err = decode::<serde_json::Value>(&bytes[..cut], Path::new("mem"), "test", 1).unwrap_err();
            assert!(matches!(err, Error::CorruptFile { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_and_kind_are_checked() {
        let bytes = encode("test", 2, &serde_json::json!({}), std::iter::empty());
        assert!(matches!(
            decode::<serde_json::Value>(&bytes, Path::new("mem"), "test", 1),
            Err(Error::Version { expected: 1, found: 2 })
        ));
        assert!(matches!(
            decode::<serde_json::Value>(&bytes, Path::new("mem"), "other", 2),
            Err(Error::CorruptFile { .. })
        ));
    }

    #[test]
    fn fingerprint_depends_on_names_and_values() {
        let t = sample();
        let base = fingerprint(t.iter().map(Into::into));
        assert_eq!(base, fingerprint(t.iter().map(Into::into)));
        let mut renamed = t.clone();
        renamed[1].name = "b.d".into();
        assert_ne!(base, fingerprint(renamed.iter().map(Into::into)));
        let mut nudged = t;
        nudged[0].data[0] = f32::from_bits(nudged[0].data[0].to_bits() + 1);
        assert_ne!(base, fingerprint(nudged.iter().map(Into::into)));
    }
}
