//! The CIFAR-10 binary batch format: 3073-byte records of one label byte
//! followed by 32x32 R, G and B planes, row-major within each plane.

use std::path::{Path, PathBuf};

use super::{read_file, DataError};

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<DatasetRecord>, DataError> {
    let remainder = bytes.len() % RECORD_BYTES;
    if remainder != 0 {
        return Err(DataError::LengthNotMultiple {
            len: bytes.len(),
            remainder,
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(record, chunk)| {
            let label = chunk[0];
            if label as usize >= NUM_CLASSES {
                return Err(DataError::InvalidLabel { record, label });
            }
            Ok(DatasetRecord {
                label,
                pixels: chunk[1..].to_vec(),
            })
        })
        .collect()
}

pub fn serialize_cifar10(records: &[DatasetRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        debug_assert_eq!(r.pixels.len(), IMAGE_BYTES);
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Batch files of a split, in canonical order.
pub fn batch_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Reads every batch file of `split` found in `dir` (also looking inside a
/// `cifar-10-batches-bin/` subdirectory).
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DatasetRecord>, DataError> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    if !root.is_dir() {
        return Err(DataError::Io {
            path: root,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset directory not found",
            ),
        });
    }
    let files: Vec<PathBuf> = batch_files(&root, split)
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    if files.is_empty() {
        return Err(DataError::Io {
            path: batch_files(&root, split).remove(0),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no CIFAR-10 batch files found",
            ),
        });
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(parse_cifar10(&read_file(&f)?)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_zero_record() {
        let recs = parse_cifar10(&[0u8; RECORD_BYTES]).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, 0);
        assert!(recs[0].pixels.iter().all(|&p| p == 0));
        assert_eq!(recs[0].pixels.len(), IMAGE_BYTES);
    }

    #[test]
    fn two_records_from_6146_bytes() {
        assert_eq!(parse_cifar10(&vec![1u8; 6146]).unwrap().len(), 2);
    }

    #[test]
    fn length_remainder_reported() {
        let err = parse_cifar10(&vec![0u8; RECORD_BYTES + 5]).unwrap_err();
        assert!(
            matches!(err, DataError::LengthNotMultiple { remainder: 5, .. }),
            "{err}"
        );
    }

    #[test]
    fn bad_label_names_record() {
        let mut bytes = vec![0u8; 3 * RECORD_BYTES];
        bytes[2 * RECORD_BYTES] = 10;
        let err = parse_cifar10(&bytes).unwrap_err();
        assert!(
            matches!(
                err,
                DataError::InvalidLabel {
                    record: 2,
                    label: 10
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn missing_directory_is_not_found() {
        let err = load_split(Path::new("/definitely/not/here"), Split::Train).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn serialize_parse_round_trip(seed in any::<u64>(), n in 1usize..12) {
            let records = crate::data::synthetic::records(n, 10, seed);
            let bytes = serialize_cifar10(&records);
            let back = parse_cifar10(&bytes).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(serialize_cifar10(&back), bytes);
        }
    }
}
