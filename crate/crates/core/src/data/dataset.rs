use super::cifar::{DatasetRecord, IMAGE_BYTES};
use super::DataError;
use crate::tensor::Tensor;

/// Images normalized to [0,1] by division by 255, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: (usize, usize, usize),
    num_classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

pub fn normalize_pixel(byte: u8) -> f64 {
    byte as f64 / 255.0
}

pub fn quantize_pixel(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl Dataset {
    pub fn new(
        shape: (usize, usize, usize),
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let per = shape.0 * shape.1 * shape.2;
        if per == 0 || images.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} image values for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    /// CIFAR records as a 10-class dataset.
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let mut images = Vec::with_capacity(records.len() * IMAGE_BYTES);
        for r in records {
            images.extend(r.pixels.iter().map(|&b| normalize_pixel(b)));
        }
        Dataset {
            shape: (3, 32, 32),
            num_classes: super::cifar::NUM_CLASSES,
            images,
            labels: records.iter().map(|r| r.label as usize).collect(),
        }
    }

    /// Keeps only images of `classes`, relabelled by their position in the list.
    pub fn select_classes(&self, classes: &[usize]) -> Dataset {
        let per = self.image_len();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(new) = classes.iter().position(|&c| c == l) {
                images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
                labels.push(new);
            }
        }
        Dataset {
            shape: self.shape,
            num_classes: classes.len(),
            images,
            labels,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Splits off the last `tail` images.
    pub fn split_tail(&self, tail: usize) -> (Dataset, Dataset) {
        let head = self.len() - tail.min(self.len());
        let cut = head * self.image_len();
        let part = |images: &[f64], labels: &[usize]| Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images: images.to_vec(),
            labels: labels.to_vec(),
        };
        (
            part(&self.images[..cut], &self.labels[..head]),
            part(&self.images[cut..], &self.labels[head..]),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        let (c, h, w) = self.shape;
        Tensor::new(vec![c, h, w], self.image(i).to_vec()).expect("shape matches")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the selected images into an `[n, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("shape matches")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}
