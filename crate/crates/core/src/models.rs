//! Teacher and student CNN classifiers.
//!
//! Every architecture is a ladder of `[conv3x3 -> relu]* -> max_pool` blocks
//! whose width doubles per block, closed by a global average pool and a dense
//! head. Students drop the deepest block of their teacher, keeping the early
//! feature extractors intact.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{kernels, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected teacher-L, student-S, micro-teacher or micro-student)")]
    UnknownArchitecture(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected batch of shape [N, {}, {}, {}], got {got:?}", expected.0, expected.1, expected.2)]
    InputShape {
        expected: (usize, usize, usize),
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The fixed architecture ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    TeacherL,
    StudentS,
    MicroTeacher,
    MicroStudent,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::TeacherL,
        Architecture::StudentS,
        Architecture::MicroTeacher,
        Architecture::MicroStudent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::TeacherL => "teacher-L",
            Architecture::StudentS => "student-S",
            Architecture::MicroTeacher => "micro-teacher",
            Architecture::MicroStudent => "micro-student",
        }
    }

    /// Channel width of the first block.
    pub fn base_width(self) -> usize {
        match self {
            Architecture::TeacherL | Architecture::StudentS => 44,
            Architecture::MicroTeacher | Architecture::MicroStudent => 8,
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            Architecture::TeacherL => 4,
            Architecture::StudentS => 3,
            Architecture::MicroTeacher => 4,
            Architecture::MicroStudent => 3,
        }
    }

    pub fn convs_per_block(self) -> usize {
        match self {
            Architecture::TeacherL | Architecture::StudentS => 2,
            Architecture::MicroTeacher | Architecture::MicroStudent => 1,
        }
    }

    /// The student paired with a teacher, or `self` for students.
    pub fn paired_student(self) -> Architecture {
        match self {
            Architecture::TeacherL => Architecture::StudentS,
            Architecture::MicroTeacher => Architecture::MicroStudent,
            s => s,
        }
    }

    pub fn is_student(self) -> bool {
        matches!(self, Architecture::StudentS | Architecture::MicroStudent)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// `(channels, height, width)` of one sample.
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub depth: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// CIFAR-shaped preset for `architecture` with its default depth and unit width.
    pub fn preset(architecture: Architecture, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            architecture,
            input_shape: (3, 32, 32),
            num_classes,
            width_multiplier: 1.0,
            depth: architecture.default_depth(),
            seed,
        }
    }

    pub fn block_widths(&self) -> Vec<usize> {
        let base = self.architecture.base_width() as f64 * self.width_multiplier;
        (0..self.depth)
            .map(|i| ((base * f64::powi(2.0, i as i32)).round() as usize).max(1))
            .collect()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {:?} must be positive",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(ModelError::InvalidConfig(
                "num_classes must be positive".into(),
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::InvalidConfig("depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
}

impl Layer {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    parameter_count: usize,
}

/// Handles produced by recording a forward pass on a tape.
pub struct Recorded {
    pub logits: Var,
    /// One handle per parameter tensor, in [`Model::params`] order.
    pub params: Vec<Var>,
}

/// Layer skeleton for a config: shapes only.
fn layer_plan(config: &ModelConfig) -> Vec<LayerPlan> {
    let (mut channels, mut h, mut w) = config.input_shape;
    let mut plan = Vec::new();
    for width in config.block_widths() {
        for _ in 0..config.architecture.convs_per_block() {
            plan.push(LayerPlan::Conv {
                cin: channels,
                cout: width,
            });
            plan.push(LayerPlan::Relu);
            channels = width;
        }
        if h >= 2 && w >= 2 {
            plan.push(LayerPlan::Pool);
            h /= 2;
            w /= 2;
        }
    }
    plan.push(LayerPlan::Gap);
    plan.push(LayerPlan::Dense {
        fin: channels,
        fout: config.num_classes,
    });
    plan
}

enum LayerPlan {
    Conv { cin: usize, cout: usize },
    Relu,
    Pool,
    Gap,
    Dense { fin: usize, fout: usize },
}

/// He-uniform weights drawn from `U(-√(6/fan_in), √(6/fan_in))`.
fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches draw count")
}

/// Builds a model with deterministic initial parameters derived from `config.seed`.
pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = layer_plan(&config)
        .into_iter()
        .map(|p| match p {
            LayerPlan::Conv { cin, cout } => Layer::Conv {
                weight: he_uniform(&mut rng, vec![cout, cin, 3, 3], cin * 9),
                bias: Tensor::zeros(vec![cout]),
                stride: 1,
                padding: 1,
            },
            LayerPlan::Relu => Layer::Relu,
            LayerPlan::Pool => Layer::MaxPool {
                kernel: 2,
                stride: 2,
            },
            LayerPlan::Gap => Layer::GlobalAvgPool,
            LayerPlan::Dense { fin, fout } => Layer::Dense {
                weight: he_uniform(&mut rng, vec![fout, fin], fin),
                bias: Tensor::zeros(vec![fout]),
            },
        })
        .collect();
    Ok(Model::from_layers(config, layers))
}

/// Parameter count of a config without allocating the model.
pub fn parameter_count(config: &ModelConfig) -> usize {
    layer_plan(config)
        .iter()
        .map(|p| match *p {
            LayerPlan::Conv { cin, cout } => cout * cin * 9 + cout,
            LayerPlan::Dense { fin, fout } => fout * fin + fout,
            _ => 0,
        })
        .sum()
}

/// Teacher parameters per student parameter.
pub fn compression_factor(teacher: &Model, student: &Model) -> f64 {
    teacher.parameter_count() as f64 / student.parameter_count() as f64
}

impl Model {
    fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Self {
        let parameter_count = layers.iter().flat_map(Layer::params).map(Tensor::len).sum();
        Model {
            config,
            layers,
            parameter_count,
        }
    }

    /// Rebuilds a model from a config and parameter tensors in [`Model::params`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Model, ModelError> {
        let mut model = build_model(config)?;
        let expected: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
        if expected.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "config needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (slot, p)) in model.params_mut().into_iter().zip(params).enumerate() {
            if slot.shape() != p.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {i} has shape {:?}, config expects {:?}",
                    p.shape(),
                    expected[i]
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Rounds every parameter to the nearest `f32`, matching a checkpoint round-trip.
    pub fn narrow_to_f32(&mut self) {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// SHA-256 over parameter shapes and their `f32` little-endian values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.params() {
            hasher.update((p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for &v in p.data() {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<(), ModelError> {
        let (c, h, w) = self.config.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(ModelError::InputShape {
                expected: self.config.input_shape,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Raw logits `[N, num_classes]` without recording a tape.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_batch(batch.shape())?;
        let mut shape = batch.shape().to_vec();
        let mut data = batch.data().to_vec();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let ws = weight.shape();
                    let g = kernels::ConvGeometry {
                        batch: shape[0],
                        in_channels: shape[1],
                        height: shape[2],
                        width: shape[3],
                        out_channels: ws[0],
                        kernel_h: ws[2],
                        kernel_w: ws[3],
                        stride: *stride,
                        padding: *padding,
                    };
                    data = kernels::conv2d_forward(&g, &data, weight.data(), Some(bias.data()));
                    shape = vec![shape[0], ws[0], g.out_height(), g.out_width()];
                }
                Layer::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::MaxPool { kernel, stride } => {
                    let (pooled, _) = kernels::max_pool2d_forward(
                        shape[0] * shape[1],
                        shape[2],
                        shape[3],
                        *kernel,
                        *stride,
                        &data,
                    );
                    data = pooled;
                    shape = vec![
                        shape[0],
                        shape[1],
                        (shape[2] - kernel) / stride + 1,
                        (shape[3] - kernel) / stride + 1,
                    ];
                }
                Layer::GlobalAvgPool => {
                    let plane = shape[2] * shape[3];
                    data = data
                        .chunks_exact(plane)
                        .map(|c| c.iter().sum::<f64>() / plane as f64)
                        .collect();
                    shape = vec![shape[0], shape[1]];
                }
                Layer::Dense { weight, bias } => {
                    let (fout, fin) = (weight.shape()[0], weight.shape()[1]);
                    data = kernels::dense_forward(
                        shape[0],
                        fin,
                        fout,
                        &data,
                        weight.data(),
                        Some(bias.data()),
                    );
                    shape = vec![shape[0], fout];
                }
            }
        }
        Ok(Tensor::new(shape, data)?)
    }

    /// Records the forward pass of `input` on `tape`.
    ///
    /// Parameters enter the tape as leaves that require gradients only when
    /// `train_params` is set; input gradients follow the input leaf's own flag.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        train_params: bool,
    ) -> Result<Recorded, ModelError> {
        self.check_batch(tape.value(input).shape())?;
        let mut h = input;
        let mut params = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone(), train_params);
                    let b = tape.leaf(bias.clone(), train_params);
                    params.extend([w, b]);
                    tape.conv2d(h, w, Some(b), *stride, *padding)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool { kernel, stride } => tape.max_pool2d(h, *kernel, *stride)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Dense { weight, bias } => {
                    let w = tape.leaf(weight.clone(), train_params);
                    let b = tape.leaf(bias.clone(), train_params);
                    params.extend([w, b]);
                    tape.dense(h, w, Some(b))?
                }
            };
        }
        Ok(Recorded { logits: h, params })
    }
}
