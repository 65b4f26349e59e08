//! `IDPCKPT1` named-tensor checkpoint container.
//!
//! Layout: magic bytes `IDPCKPT1`, a little-endian u32 byte length, a
//! UTF-8 header, then raw little-endian row-major payloads in header
//! order. Each header line is `name<TAB>dtype<TAB>d0,d1,...` with dtype
//! `f32` or `f64`. Writers in this crate always emit f64; the reader
//! accepts both and widens f32.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{IdpError, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"IDPCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(&self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn byte_width(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Values widened to f64 regardless of the stored dtype.
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Interpret a 2-D entry as a `Matrix`, checking the expected shape.
    pub fn to_matrix(&self, expected: Option<(usize, usize)>) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(IdpError::TensorShape {
                name: self.name.clone(),
                expected: expected.map_or_else(Vec::new, |(r, c)| vec![r, c]),
                got: self.shape.clone(),
            });
        }
        if let Some((r, c)) = expected {
            if self.shape != [r, c] {
                return Err(IdpError::TensorShape {
                    name: self.name.clone(),
                    expected: vec![r, c],
                    got: self.shape.clone(),
                });
            }
        }
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone()))
    }
}

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) {
        self.push_raw(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) {
        self.push_raw(name, vec![1, v.len()], v.to_vec());
    }

    pub fn push_raw(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate tensor name {name:?}"
        );
        assert!(!name.contains(['\t', '\n']), "tensor name {name:?} contains separator");
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: Dtype::F64,
            shape,
            data,
        });
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| IdpError::MissingTensor(name.to_string()))
    }

    pub fn require_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        self.require(name)?.to_matrix(Some((rows, cols)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "{}\t{}\t{}", e.name, e.dtype.tag(), dims.join(","));
        }
        let header_bytes = header.as_bytes();
        let mut out = Vec::with_capacity(
            MAGIC.len() + 4 + header_bytes.len() + self.entries.iter().map(|e| 8 * e.data.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(header_bytes);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| IdpError::io(path, e))
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| IdpError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        let bad = |msg: &str| IdpError::Checkpoint {
            path: origin.clone(),
            msg: msg.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 {
            return Err(bad("file shorter than magic + header length"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("magic/version mismatch (expected IDPCKPT1)"));
        }
        let mut off = MAGIC.len();
        let header_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + header_len {
            return Err(bad("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[off..off + header_len])
            .map_err(|_| bad("header is not valid UTF-8"))?;
        off += header_len;

        let mut entries = Vec::new();
        for line in header.lines() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (name, dtype, dims) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(t), Some(d), None) => (n, t, d),
                _ => return Err(bad(&format!("malformed header line {line:?}"))),
            };
            let dtype = match dtype {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                other => return Err(bad(&format!("unknown dtype tag {other:?}"))),
            };
            let shape: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(&format!("bad shape in line {line:?}"))))
                .collect::<Result<_>>()?;
            let n = shape.iter().product::<usize>();
            let width = dtype.byte_width();
            if bytes.len() < off + n * width {
                return Err(bad(&format!("truncated payload for tensor {name:?}")));
            }
            let mut data = Vec::with_capacity(n);
            match dtype {
                Dtype::F64 => {
                    for chunk in bytes[off..off + n * 8].chunks_exact(8) {
                        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                    }
                }
                Dtype::F32 => {
                    for chunk in bytes[off..off + n * 4].chunks_exact(4) {
                        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                    }
                }
            }
            off += n * width;
            entries.push(TensorEntry {
                name: name.to_string(),
                dtype,
                shape,
                data,
            });
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after last tensor payload"));
        }
        Ok(Checkpoint { entries })
    }
}

/// Hex SHA-256 of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Hex SHA-256 of a file's contents.
pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdpError::io(path, e))?;
    Ok(digest_bytes(&bytes))
}
