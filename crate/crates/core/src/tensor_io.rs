//! RTNS binary tensors and the JSON manifests that accompany them.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "RTNS"
//! version u8       1
//! dtype   u8       0 = f32
//! ndim    u8       1..=4
//! dims    ndim x u32, every entry >= 1
//! payload prod(dims) x f32, row-major (last dimension fastest)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTNS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const MAX_NDIM: usize = 4;

/// Conventional extension for tensor files.
pub const TENSOR_EXT: &str = "rtns";

/// Owned tensor as it lives on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape checked against an expected rank.
    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<&[usize]> {
        if self.shape.len() != rank {
            return Err(Error::Format(format!(
                "{what}: expected a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(&self.shape)
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(Error::Format(format!(
            "tensor rank must be in 1..={MAX_NDIM}, got {}",
            shape.len()
        )));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::Format(format!("invalid dimension {d} in shape {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    if numel != len {
        return Err(Error::Format(format!(
            "data length {len} does not match shape {shape:?} ({numel} elements)"
        )));
    }
    Ok(numel)
}

pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    validate_shape(shape, data.len())?;
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an RTNS byte stream. Never panics: every malformed input maps to
/// [`Error::Format`] or [`Error::Truncated`].
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!(
            "header too short: {} bytes, need at least 7",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format(format!("rank {ndim} outside 1..={MAX_NDIM}")));
    }
    let header_len = 7 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Format(format!(
            "header declares {ndim} dims but only {} bytes present",
            bytes.len()
        )));
    }
    let shape: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in shape {shape:?}")));
    }
    let expected = shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[header_len..];
    if payload.len() != expected {
        return Err(Error::Truncated { expected, actual: payload.len() });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_tensor(shape: &[usize], data: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(shape, data)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves `p` against `base` unless it is already absolute.
pub fn resolve(base: &Path, p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub image_id: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_feature_path: Option<String>,
}

/// The curated archive for one concept: the top-k retrieved images in
/// retrieval order, with the files needed to co-segment them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub concept_name: String,
    pub k: usize,
    pub image_entries: Vec<ArchiveEntry>,
}

impl ArchiveManifest {
    /// Structural checks only; file existence is checked by [`Self::validate_files`].
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Manifest("archive size k must be positive".into()));
        }
        if self.image_entries.len() != self.k {
            return Err(Error::Manifest(format!(
                "archive `{}` declares k={} but lists {} images",
                self.concept_name,
                self.k,
                self.image_entries.len()
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.image_entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image id `{}`", e.image_id)));
            }
        }
        Ok(())
    }

    /// Every referenced tensor must exist and parse.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for e in &self.image_entries {
            let paths = std::iter::once(&e.feature_path)
                .chain(e.saliency_path.iter())
                .chain(e.value_feature_path.iter());
            for p in paths {
                read_tensor(resolve(base, p))?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_json(self, path)
    }
}

/// Points at the files making up an embedding index. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    /// N x e RTNS tensor.
    pub embeddings: String,
    /// Text file, one id per line.
    pub ids: String,
    /// Optional text file, one label per line (evaluation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_is_31_bytes() {
        let bytes = encode_tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(bytes.len(), 31);
        assert_eq!(&bytes[..7], b"RTNS\x01\x00\x02");
        let t = decode_tensor(&bytes).unwrap();
        assert_eq!(t.shape, vec![2, 2]);
        assert_eq!(t.data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn half_encodes_as_ieee754() {
        let bytes = encode_tensor(&[1], &[0.5]).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x00, 0x3F]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let cut = &bytes[..15 + 12];
        match decode_tensor(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (16, 12));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_version_dtype_and_rank() {
        let good = encode_tensor(&[1], &[1.0]).unwrap();
        for (idx, val) in [(4usize, 2u8), (5, 1), (6, 0), (6, 5)] {
            let mut b = good.clone();
            b[idx] = val;
            assert!(matches!(decode_tensor(&b), Err(Error::Format(_))), "byte {idx}={val}");
        }
    }

    #[test]
    fn write_rejects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_tensor(&[2, 3], &[0.0; 5], dir.path().join("x.rtns")).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(matches!(encode_tensor(&[], &[]), Err(Error::Format(_))));
        assert!(matches!(encode_tensor(&[0], &[]), Err(Error::Format(_))));
    }

    #[test]
    fn read_missing_file_names_path() {
        let err = read_tensor("/nonexistent/dir/t.rtns").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/t.rtns"));
    }

    #[test]
    fn manifest_checks_length_and_duplicates() {
        let entry = |id: &str| ArchiveEntry {
            image_id: id.into(),
            feature_path: format!("{id}.rtns"),
            saliency_path: None,
            value_feature_path: None,
        };
        let mut m = ArchiveManifest {
            concept_name: "cat".into(),
            k: 2,
            image_entries: vec![entry("a"), entry("b")],
        };
        m.validate().unwrap();
        m.image_entries[1] = entry("a");
        assert!(m.validate().is_err());
        m.k = 3;
        assert!(m.validate().is_err());
    }

    proptest! {
        #[test]
        fn parsing_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_tensor(&bytes);
        }

        #[test]
        fn header_mutations_never_panic(idx in 0usize..15, val in any::<u8>()) {
            let mut b = encode_tensor(&[2, 1], &[1.0, 2.0]).unwrap();
            b[idx] = val;
            let _ = decode_tensor(&b);
        }

        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = shape.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>())).collect();
            let t = decode_tensor(&encode_tensor(&shape, &data).unwrap()).unwrap();
            prop_assert_eq!(&t.shape, &shape);
            let a: Vec<u32> = t.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
