#![allow(dead_code)]

use std::fs;
use std::path::Path;

use gradistill::data::cifar::{serialize_cifar10, DatasetRecord, IMAGE_BYTES};
use gradistill::data::{synthetic, Dataset};
use gradistill::models::{build_model, Architecture, Model, ModelConfig};

/// Writes `data_batch_1.bin` and `test_batch.bin` under `dir`.
pub fn write_cifar_dir(dir: &Path, train: &[DatasetRecord], test: &[DatasetRecord]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("data_batch_1.bin"), serialize_cifar10(train)).unwrap();
    fs::write(dir.join("test_batch.bin"), serialize_cifar10(test)).unwrap();
}

pub fn write_synthetic_dir(dir: &Path, n_train: usize, n_test: usize, classes: usize, seed: u64) {
    let train = synthetic::records(n_train, classes, seed);
    let test = synthetic::records(n_test, classes, seed ^ 0x5eed);
    write_cifar_dir(dir, &train, &test);
}

pub fn synthetic_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    Dataset::from_records(&synthetic::records(n, classes, seed))
}

/// Solid black (label 0) and solid white (label 1) images, alternating.
pub fn black_white_records(n: usize) -> Vec<DatasetRecord> {
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            DatasetRecord {
                label,
                pixels: vec![if label == 0 { 0 } else { 255 }; IMAGE_BYTES],
            }
        })
        .collect()
}

/// A two-class micro-student that answers 0 on black inputs and 1 on anything brighter.
///
/// Positive conv weights keep every activation non-negative and growing
/// with brightness. The head reads class 1 from the pooled features and
/// breaks the all-zero tie towards class 0 with its bias.
pub fn brightness_oracle() -> Model {
    let mut model = build_model(ModelConfig::preset(Architecture::MicroStudent, 2, 0)).unwrap();
    let mut params = model.params_mut();
    let count = params.len();
    for (i, p) in params.iter_mut().enumerate() {
        let is_weight = i % 2 == 0;
        let is_head = i >= count - 2;
        let data = p.data_mut();
        match (is_head, is_weight) {
            (false, true) => data.fill(0.1),
            (false, false) => data.fill(0.0),
            (true, true) => {
                let fin = data.len() / 2;
                data[..fin].fill(-1.0);
                data[fin..].fill(1.0);
            }
            (true, false) => {
                data[0] = 1e-3;
                data[1] = 0.0;
            }
        }
    }
    model
}
