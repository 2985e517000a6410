//! File formats and in-memory datasets.
//!
//! All multi-byte integers are little-endian. Every reader validates its
//! input completely and reports the byte offset or line of the first defect.

pub mod checkpoint;
pub mod cifar;
pub mod dataset;
pub mod igcache;
pub mod metrics;
pub mod ppm;
pub mod record;
pub mod synthetic;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::models::ModelError;

pub use dataset::Dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("CIFAR stream of {len} bytes is not a multiple of 3073 (remainder {remainder})")]
    LengthNotMultiple { len: usize, remainder: usize },
    #[error("CIFAR record {record}: label byte {label} is not a class index 0-9")]
    InvalidLabel { record: usize, label: u8 },
    #[error("{what}: bad magic {found:?} at byte 0, expected {expected:?}")]
    BadMagic {
        what: &'static str,
        found: Vec<u8>,
        expected: &'static [u8; 4],
    },
    #[error("{what}: unsupported format version {version} at byte 4")]
    UnsupportedVersion { what: &'static str, version: u16 },
    #[error(
        "{what}: truncated at byte {offset}: needed {needed} more bytes, {available} available"
    )]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{what}: {extra} unexpected trailing bytes after byte {offset}")]
    TrailingBytes {
        what: &'static str,
        offset: usize,
        extra: usize,
    },
    #[error("{what}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        what: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("{what} at byte {offset}: {message}")]
    Malformed {
        what: &'static str,
        offset: usize,
        message: String,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("teacher fingerprint mismatch: cache has {cache}, teacher is {teacher}")]
    FingerprintMismatch { cache: String, teacher: String },
    #[error("entry {index} out of range for {count} entries")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bounds-checked little-endian cursor that reports positions on failure.
pub(crate) struct ByteReader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(what: &'static str, buf: &'a [u8]) -> Self {
        ByteReader { what, buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.remaining() < n {
            return Err(DataError::Truncated {
                what: self.what,
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DataError> {
        self.array().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> Result<u32, DataError> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64, DataError> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f32(&mut self) -> Result<f32, DataError> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64, DataError> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn malformed(&self, message: impl Into<String>) -> DataError {
        DataError::Malformed {
            what: self.what,
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn expect_magic(&mut self, expected: &'static [u8; 4]) -> Result<(), DataError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(DataError::BadMagic {
                what: self.what,
                found: found.to_vec(),
                expected,
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(), DataError> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(DataError::TrailingBytes {
                what: self.what,
                offset: self.pos,
                extra,
            }),
        }
    }
}
