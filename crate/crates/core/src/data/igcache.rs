//! The "GDIG" attribution cache.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GDIG"
//!      4     2  version (1)
//!      6     4  entry_count
//!     10     2  channels
//!     12     2  height
//!     14     2  width
//!     16     4  steps
//!     20     1  target policy code
//!     21    32  teacher fingerprint
//!     53     .  entry_count maps of channels*height*width f32 values
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{hex, io_err, read_file, ByteReader, DataError};
use crate::ig::TargetPolicy;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDIG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 53;
const COUNT_OFFSET: u64 = 6;
const WHAT: &str = "IG cache";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgCacheHeader {
    pub version: u16,
    pub entry_count: u32,
    pub channels: u16,
    pub height: u16,
    pub width: u16,
    pub steps: u32,
    pub target_policy: TargetPolicy,
    pub fingerprint: [u8; 32],
}

impl IgCacheHeader {
    pub fn new(
        shape: (usize, usize, usize),
        steps: usize,
        target_policy: TargetPolicy,
        fingerprint: [u8; 32],
    ) -> Result<Self, DataError> {
        let dim = |v: usize, name: &str| {
            u16::try_from(v).map_err(|_| {
                DataError::Invalid(format!("{name} {v} does not fit the cache header"))
            })
        };
        Ok(IgCacheHeader {
            version: VERSION,
            entry_count: 0,
            channels: dim(shape.0, "channels")?,
            height: dim(shape.1, "height")?,
            width: dim(shape.2, "width")?,
            steps: u32::try_from(steps)
                .map_err(|_| DataError::Invalid(format!("steps {steps} too large")))?,
            target_policy,
            fingerprint,
        })
    }

    pub fn map_shape(&self) -> [usize; 3] {
        [
            self.channels as usize,
            self.height as usize,
            self.width as usize,
        ]
    }

    pub fn map_len(&self) -> usize {
        self.map_shape().iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.entry_count as usize * self.map_len() * 4
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..10].copy_from_slice(&self.entry_count.to_le_bytes());
        out[10..12].copy_from_slice(&self.channels.to_le_bytes());
        out[12..14].copy_from_slice(&self.height.to_le_bytes());
        out[14..16].copy_from_slice(&self.width.to_le_bytes());
        out[16..20].copy_from_slice(&self.steps.to_le_bytes());
        out[20] = self.target_policy.code();
        out[21..53].copy_from_slice(&self.fingerprint);
        out
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<Self, DataError> {
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(DataError::UnsupportedVersion {
                what: WHAT,
                version,
            });
        }
        let entry_count = r.u32()?;
        let channels = r.u16()?;
        let height = r.u16()?;
        let width = r.u16()?;
        let steps = r.u32()?;
        let code = r.u8()?;
        let target_policy = TargetPolicy::from_code(code)
            .ok_or_else(|| r.malformed(format!("unknown target policy code {code}")))?;
        let fingerprint = r.take(32)?.try_into().expect("32 bytes");
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::Malformed {
                what: WHAT,
                offset: 10,
                message: "zero map dimension".into(),
            });
        }
        Ok(IgCacheHeader {
            version,
            entry_count,
            channels,
            height,
            width,
            steps,
            target_policy,
            fingerprint,
        })
    }

    /// Fails unless this cache was built from the teacher with `fingerprint`.
    pub fn check_fingerprint(&self, fingerprint: &[u8; 32]) -> Result<(), DataError> {
        if &self.fingerprint != fingerprint {
            return Err(DataError::FingerprintMismatch {
                cache: hex(&self.fingerprint),
                teacher: hex(fingerprint),
            });
        }
        Ok(())
    }
}

fn check_map(header: &IgCacheHeader, map: &Tensor) -> Result<(), DataError> {
    if map.shape() != header.map_shape() {
        return Err(DataError::Invalid(format!(
            "map of shape {:?} does not match cache shape {:?}",
            map.shape(),
            header.map_shape()
        )));
    }
    Ok(())
}

/// Serializes `maps` under `header`; the entry count is taken from `maps`.
pub fn encode_ig_cache(header: &IgCacheHeader, maps: &[Tensor]) -> Result<Vec<u8>, DataError> {
    let mut header = header.clone();
    header.entry_count = u32::try_from(maps.len())
        .map_err(|_| DataError::Invalid("too many maps for one cache".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(&header.encode());
    for m in maps {
        check_map(&header, m)?;
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ig_cache(
    path: &Path,
    header: &IgCacheHeader,
    maps: &[Tensor],
) -> Result<(), DataError> {
    super::write_file(path, &encode_ig_cache(header, maps)?)
}

pub fn read_ig_cache(path: &Path) -> Result<IgCache, DataError> {
    IgCache::from_bytes(read_file(path)?)
}

/// A validated cache held in memory; entries are decoded on access.
#[derive(Debug, Clone)]
pub struct IgCache {
    header: IgCacheHeader,
    bytes: Vec<u8>,
}

impl IgCache {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, DataError> {
        let mut r = ByteReader::new(WHAT, &bytes);
        let header = IgCacheHeader::decode(&mut r)?;
        let payload = r.remaining();
        let expected = header.payload_len();
        if payload < expected {
            return Err(DataError::Truncated {
                what: WHAT,
                offset: bytes.len(),
                needed: expected - payload,
                available: 0,
            });
        }
        r.take(expected)?;
        r.finish()?;
        Ok(IgCache { header, bytes })
    }

    pub fn header(&self) -> &IgCacheHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.entry_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The 32-bit values of entry `index`, read at a fixed stride.
    pub fn entry_f32(&self, index: usize) -> Result<Vec<f32>, DataError> {
        if index >= self.len() {
            return Err(DataError::IndexOutOfRange {
                index,
                count: self.len(),
            });
        }
        let stride = self.header.map_len() * 4;
        let start = HEADER_LEN + index * stride;
        Ok(self.bytes[start..start + stride]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn entry(&self, index: usize) -> Result<Tensor, DataError> {
        let values = self.entry_f32(index)?.into_iter().map(f64::from).collect();
        Ok(Tensor::new(self.header.map_shape().to_vec(), values).expect("shape from header"))
    }

    /// Decodes all entries by scanning the payload front to back.
    pub fn scan(&self) -> Vec<Tensor> {
        let mut r = ByteReader::new(WHAT, &self.bytes[HEADER_LEN..]);
        let shape = self.header.map_shape().to_vec();
        (0..self.len())
            .map(|_| {
                let values = (0..self.header.map_len())
                    .map(|_| r.f32().map(f64::from).expect("length validated"))
                    .collect();
                Tensor::new(shape.clone(), values).expect("shape from header")
            })
            .collect()
    }
}

/// Streams maps to disk in order. The header's entry count is patched on
/// [`IgCacheWriter::finish`].
pub struct IgCacheWriter {
    path: PathBuf,
    file: BufWriter<File>,
    header: IgCacheHeader,
}

impl IgCacheWriter {
    pub fn create(path: &Path, header: &IgCacheHeader) -> Result<Self, DataError> {
        let mut header = header.clone();
        header.entry_count = 0;
        let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
        file.write_all(&header.encode()).map_err(io_err(path))?;
        Ok(IgCacheWriter {
            path: path.to_path_buf(),
            file,
            header,
        })
    }

    /// Reopens an existing cache for appending. The stored header must agree
    /// with `header` on teacher fingerprint, map shape, steps and policy.
    pub fn append(path: &Path, header: &IgCacheHeader) -> Result<Self, DataError> {
        let existing = read_ig_cache(path)?.header;
        existing.check_fingerprint(&header.fingerprint)?;
        if existing.map_shape() != header.map_shape()
            || existing.steps != header.steps
            || existing.target_policy != header.target_policy
        {
            return Err(DataError::Invalid(format!(
                "cannot append: cache holds {:?} maps at m={} ({}), requested {:?} at m={} ({})",
                existing.map_shape(),
                existing.steps,
                existing.target_policy,
                header.map_shape(),
                header.steps,
                header.target_policy
            )));
        }
        let mut file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        Ok(IgCacheWriter {
            path: path.to_path_buf(),
            file: BufWriter::new(file),
            header: existing,
        })
    }

    pub fn len(&self) -> usize {
        self.header.entry_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, map: &Tensor) -> Result<(), DataError> {
        check_map(&self.header, map)?;
        let mut buf = Vec::with_capacity(map.len() * 4);
        for &v in map.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.file.write_all(&buf).map_err(io_err(&self.path))?;
        self.header.entry_count = self
            .header
            .entry_count
            .checked_add(1)
            .ok_or_else(|| DataError::Invalid("entry count overflow".into()))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<IgCacheHeader, DataError> {
        let path = self.path.clone();
        self.file.flush().map_err(io_err(&path))?;
        let file = self.file.get_mut();
        file.seek(SeekFrom::Start(COUNT_OFFSET))
            .map_err(io_err(&path))?;
        file.write_all(&self.header.entry_count.to_le_bytes())
            .map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        Ok(self.header)
    }
}
