//! Integrated-gradients attribution.
//!
//! For a scalar output F, input x and baseline x', the attribution of input
//! coordinate i is approximated with the midpoint rule
//!
//! ```text
//! IG_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i (x' + ((k - 0.5)/m) (x - x'))
//! ```
//!
//! and its completeness gap is `|sum_i IG_i - (F(x) - F(x'))|`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::igcache::{IgCacheHeader, IgCacheWriter};
use crate::data::{DataError, Dataset};
use crate::models::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum IgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at interpolation step {step}")]
    NonFiniteGradient { step: usize },
    #[error("invalid IG config: {0}")]
    InvalidConfig(String),
    #[error("target class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("target policy true_label needs a label")]
    MissingLabel,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetPolicy {
    PredictedClass,
    TrueLabel,
}

impl TargetPolicy {
    pub fn code(self) -> u8 {
        match self {
            TargetPolicy::PredictedClass => 0,
            TargetPolicy::TrueLabel => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TargetPolicy::PredictedClass),
            1 => Some(TargetPolicy::TrueLabel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetPolicy::PredictedClass => "predicted_class",
            TargetPolicy::TrueLabel => "true_label",
        }
    }
}

impl fmt::Display for TargetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predicted_class" => Ok(TargetPolicy::PredictedClass),
            "true_label" => Ok(TargetPolicy::TrueLabel),
            _ => Err(format!(
                "unknown target policy `{s}` (expected predicted_class or true_label)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// All-zero image.
    Black,
    Custom(Tensor),
}

impl Baseline {
    pub fn materialize(&self, shape: &[usize]) -> Result<Tensor, IgError> {
        match self {
            Baseline::Black => Ok(Tensor::zeros(shape.to_vec())),
            Baseline::Custom(t) if t.shape() == shape => Ok(t.clone()),
            Baseline::Custom(t) => Err(IgError::ShapeMismatch(format!(
                "baseline {:?} vs input {shape:?}",
                t.shape()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IGConfig {
    pub steps: usize,
    pub baseline: Baseline,
    pub target_policy: TargetPolicy,
    /// Interpolation points evaluated per forward/backward pass.
    pub batch_size: usize,
}

impl Default for IGConfig {
    fn default() -> Self {
        IGConfig {
            steps: 256,
            baseline: Baseline::Black,
            target_policy: TargetPolicy::PredictedClass,
            batch_size: 32,
        }
    }
}

impl IGConfig {
    pub fn with_steps(steps: usize) -> Self {
        IGConfig {
            steps,
            ..IGConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), IgError> {
        if self.steps == 0 {
            return Err(IgError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(IgError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub target_class: usize,
    pub completeness_gap: f64,
    pub model_fingerprint: [u8; 32],
}

/// A scalar function of one input, differentiable almost everywhere,
/// evaluated over a batch of inputs stacked along a leading axis.
pub trait ScalarField {
    /// Values and input gradients for every row of `points`.
    fn value_and_grad(&self, points: &Tensor, target: usize)
        -> Result<(Vec<f64>, Tensor), IgError>;

    fn values(&self, points: &Tensor, target: usize) -> Result<Vec<f64>, IgError> {
        Ok(self.value_and_grad(points, target)?.0)
    }
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// F is the temperature-1 softmax probability of `target`.
impl ScalarField for Model {
    fn value_and_grad(
        &self,
        points: &Tensor,
        target: usize,
    ) -> Result<(Vec<f64>, Tensor), IgError> {
        let classes = self.num_classes();
        if target >= classes {
            return Err(IgError::TargetOutOfRange { target, classes });
        }
        let mut tape = Tape::new();
        let x = tape.leaf(points.clone(), true);
        let rec = self.record(&mut tape, x, false)?;
        let logits = tape.value(rec.logits).clone();
        let n = logits.shape()[0];
        let mut values = Vec::with_capacity(n);
        let mut seed = vec![0.0; n * classes];
        for i in 0..n {
            let p = softmax_row(logits.row(i));
            let pt = p[target];
            values.push(pt);
            for (j, &pj) in p.iter().enumerate() {
                let onehot = if j == target { 1.0 } else { 0.0 };
                seed[i * classes + j] = pt * (onehot - pj);
            }
        }
        tape.backward_with_seed(rec.logits, &Tensor::new(vec![n, classes], seed)?)?;
        let grad = tape.take_grad(x).expect("input requires grad");
        Ok((values, Tensor::new(points.shape().to_vec(), grad)?))
    }

    fn values(&self, points: &Tensor, target: usize) -> Result<Vec<f64>, IgError> {
        let logits = self.forward_logits(points)?;
        Ok((0..logits.shape()[0])
            .map(|i| softmax_row(logits.row(i))[target])
            .collect())
    }
}

fn batched(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Midpoint-rule attribution of `target` for any scalar field.
pub fn integrate_field<F: ScalarField + ?Sized>(
    field: &F,
    x: &Tensor,
    baseline: &Tensor,
    target: usize,
    steps: usize,
    batch_size: usize,
) -> Result<Tensor, IgError> {
    if x.shape() != baseline.shape() {
        return Err(IgError::ShapeMismatch(format!(
            "input {:?} vs baseline {:?}",
            x.shape(),
            baseline.shape()
        )));
    }
    if steps == 0 || batch_size == 0 {
        return Err(IgError::InvalidConfig(
            "steps and batch_size must be positive".into(),
        ));
    }
    let d = x.len();
    let delta: Vec<f64> = x
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut acc = vec![0.0; d];
    let mut k = 0;
    while k < steps {
        let chunk = batch_size.min(steps - k);
        let mut pts = Vec::with_capacity(chunk * d);
        for j in 0..chunk {
            let beta = ((k + j) as f64 + 0.5) / steps as f64;
            pts.extend(
                baseline
                    .data()
                    .iter()
                    .zip(&delta)
                    .map(|(b, dl)| b + beta * dl),
            );
        }
        let mut shape = vec![chunk];
        shape.extend_from_slice(x.shape());
        let (_, grads) = field.value_and_grad(&Tensor::new(shape, pts)?, target)?;
        for j in 0..chunk {
            let g = &grads.data()[j * d..(j + 1) * d];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(IgError::NonFiniteGradient { step: k + j + 1 });
            }
            for (a, gv) in acc.iter_mut().zip(g) {
                *a += gv;
            }
        }
        k += chunk;
    }
    let m = steps as f64;
    let values = acc.iter().zip(&delta).map(|(a, dl)| dl * (a / m)).collect();
    Ok(Tensor::new(x.shape().to_vec(), values)?)
}

/// `|sum(attr) - (F(x) - F(x'))|` for a scalar field.
pub fn field_completeness_gap<F: ScalarField + ?Sized>(
    field: &F,
    attr: &Tensor,
    x: &Tensor,
    baseline: &Tensor,
    target: usize,
) -> Result<f64, IgError> {
    let both = Tensor::stack(&[x, baseline])?;
    let v = field.values(&both, target)?;
    Ok((attr.sum() - (v[0] - v[1])).abs())
}

/// Chooses the attributed class for one image.
pub fn resolve_target(
    teacher: &Model,
    x: &Tensor,
    policy: TargetPolicy,
    label: Option<usize>,
) -> Result<usize, IgError> {
    match policy {
        TargetPolicy::TrueLabel => label.ok_or(IgError::MissingLabel),
        TargetPolicy::PredictedClass => {
            let logits = teacher.forward_logits(&batched(x)?)?;
            Ok(argmax(logits.row(0)))
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Attribution of a frozen teacher's T=1 class probability for one image.
pub fn integrated_gradients(
    teacher: &Model,
    x: &Tensor,
    label: Option<usize>,
    config: &IGConfig,
) -> Result<AttributionMap, IgError> {
    config.validate()?;
    let baseline = config.baseline.materialize(x.shape())?;
    let target = resolve_target(teacher, x, config.target_policy, label)?;
    let values = integrate_field(
        teacher,
        x,
        &baseline,
        target,
        config.steps,
        config.batch_size,
    )?;
    let gap = field_completeness_gap(teacher, &values, x, &baseline, target)?;
    Ok(AttributionMap {
        values,
        target_class: target,
        completeness_gap: gap,
        model_fingerprint: teacher.fingerprint(),
    })
}

pub fn completeness_gap(
    attr: &AttributionMap,
    teacher: &Model,
    x: &Tensor,
    baseline: &Tensor,
) -> Result<f64, IgError> {
    field_completeness_gap(teacher, &attr.values, x, baseline, attr.target_class)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IGCacheSummary {
    pub count: usize,
    pub appended: usize,
    pub mean_completeness_gap: f64,
    pub max_completeness_gap: f64,
    pub wall_clock_s: f64,
    pub fingerprint: [u8; 32],
}

impl fmt::Display for IGCacheSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entries={} appended={} mean_gap={:.6} max_gap={:.6} wall_clock_s={:.2} teacher={}",
            self.count,
            self.appended,
            self.mean_completeness_gap,
            self.max_completeness_gap,
            self.wall_clock_s,
            crate::data::hex(&self.fingerprint[..8])
        )
    }
}

/// Attributes every image of `dataset` in order and streams the maps to a
/// cache at `out`. With `append`, the existing cache must come from the same
/// teacher and configuration, and only the images past its current length
/// are computed. Work is spread over `workers` threads; output order never
/// depends on the worker count.
pub fn precompute_dataset(
    teacher: &Model,
    dataset: &Dataset,
    config: &IGConfig,
    out: &Path,
    workers: usize,
    append: bool,
) -> Result<IGCacheSummary, IgError> {
    config.validate()?;
    let started = Instant::now();
    let fingerprint = teacher.fingerprint();
    let header = IgCacheHeader::new(
        dataset.shape(),
        config.steps,
        config.target_policy,
        fingerprint,
    )?;
    let mut writer = if append && out.exists() {
        IgCacheWriter::append(out, &header)?
    } else {
        IgCacheWriter::create(out, &header)?
    };
    let start = writer.len();
    if start > dataset.len() {
        return Err(IgError::InvalidConfig(format!(
            "cache already holds {start} entries for a dataset of {}",
            dataset.len()
        )));
    }
    let workers = workers.max(1);
    let attribute = |i: usize| -> Result<AttributionMap, IgError> {
        integrated_gradients(
            teacher,
            &dataset.image_tensor(i),
            Some(dataset.label(i)),
            config,
        )
    };

    let mut gaps = Vec::with_capacity(dataset.len() - start);
    let round = workers * 4;
    let mut next = start;
    while next < dataset.len() {
        let end = (next + round).min(dataset.len());
        let maps: Vec<Result<AttributionMap, IgError>> = if workers == 1 {
            (next..end).map(attribute).collect()
        } else {
            let indices: Vec<usize> = (next..end).collect();
            let per = indices.len().div_ceil(workers);
            std::thread::scope(|s| {
                let handles: Vec<_> = indices
                    .chunks(per)
                    .map(|chunk| {
                        s.spawn(|| chunk.iter().map(|&i| attribute(i)).collect::<Vec<_>>())
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("IG worker panicked"))
                    .collect()
            })
        };
        for m in maps {
            let m = m?;
            gaps.push(m.completeness_gap);
            writer.push(&m.values)?;
        }
        log::debug!("attributed {end}/{} images", dataset.len());
        next = end;
    }
    let header = writer.finish()?;
    let n = gaps.len();
    Ok(IGCacheSummary {
        count: header.entry_count as usize,
        appended: n,
        mean_completeness_gap: if n == 0 {
            0.0
        } else {
            gaps.iter().sum::<f64>() / n as f64
        },
        max_completeness_gap: gaps.iter().cloned().fold(0.0, f64::max),
        wall_clock_s: started.elapsed().as_secs_f64(),
        fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::igcache::read_ig_cache;
    use crate::data::synthetic;
    use crate::models::{build_model, Architecture, ModelConfig};

    struct Affine {
        w: Vec<f64>,
        b: f64,
    }

    impl ScalarField for Affine {
        fn value_and_grad(
            &self,
            points: &Tensor,
            _target: usize,
        ) -> Result<(Vec<f64>, Tensor), IgError> {
            let d = self.w.len();
            let n = points.len() / d;
            let values = (0..n)
                .map(|i| {
                    self.b
                        + points.data()[i * d..(i + 1) * d]
                            .iter()
                            .zip(&self.w)
                            .map(|(x, w)| x * w)
                            .sum::<f64>()
                })
                .collect();
            let grads = (0..n).flat_map(|_| self.w.iter().cloned()).collect();
            Ok((values, Tensor::new(points.shape().to_vec(), grads)?))
        }
    }

    fn small_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::preset(Architecture::MicroStudent, 3, seed);
        cfg.input_shape = (3, 8, 8);
        build_model(cfg).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_at_baseline() {
        let m = small_model(1);
        let x = random_image(&mut ChaCha8Rng::seed_from_u64(2), [3, 8, 8]);
        let cfg = IGConfig {
            baseline: Baseline::Custom(x.clone()),
            steps: 7,
            ..IGConfig::default()
        };
        let a = integrated_gradients(&m, &x, None, &cfg).unwrap();
        assert!(a.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.completeness_gap, 0.0);
    }

    #[test]
    fn affine_scorer_exact_for_any_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = Affine {
            w: w.clone(),
            b: 0.3,
        };
        let x = Tensor::new(
            vec![3, 2, 2],
            (0..12).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let zero = Tensor::zeros(vec![3, 2, 2]);
        for steps in [1, 2, 5, 64] {
            let a = integrate_field(&f, &x, &zero, 0, steps, 3).unwrap();
            for ((ai, wi), xi) in a.data().iter().zip(&w).zip(x.data()) {
                assert!((ai - wi * xi).abs() < 1e-12);
            }
            assert!(field_completeness_gap(&f, &a, &x, &zero, 0).unwrap() < 1e-10);
        }
    }

    #[test]
    fn batch_size_does_not_change_maps_beyond_rounding() {
        let m = small_model(4);
        let x = random_image(&mut ChaCha8Rng::seed_from_u64(5), [3, 8, 8]);
        let zero = Tensor::zeros(vec![3, 8, 8]);
        let a = integrate_field(&m, &x, &zero, 1, 16, 16).unwrap();
        let b = integrate_field(&m, &x, &zero, 1, 16, 3).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn deterministic() {
        let m = small_model(6);
        let x = random_image(&mut ChaCha8Rng::seed_from_u64(7), [3, 8, 8]);
        let cfg = IGConfig::with_steps(9);
        assert_eq!(
            integrated_gradients(&m, &x, None, &cfg).unwrap(),
            integrated_gradients(&m, &x, None, &cfg).unwrap()
        );
    }

    #[test]
    fn gap_shrinks_with_resolution() {
        let m = small_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, [3, 8, 8])).collect();
        let mean_gap = |steps| {
            images
                .iter()
                .map(|x| {
                    integrated_gradients(&m, x, None, &IGConfig::with_steps(steps))
                        .unwrap()
                        .completeness_gap
                })
                .sum::<f64>()
                / images.len() as f64
        };
        let coarse = mean_gap(2);
        let fine = mean_gap(64);
        assert!(fine <= coarse + 1e-6, "{fine} > {coarse}");
    }

    #[test]
    fn target_policies() {
        let m = small_model(10);
        let x = random_image(&mut ChaCha8Rng::seed_from_u64(11), [3, 8, 8]);
        let cfg = IGConfig {
            target_policy: TargetPolicy::TrueLabel,
            steps: 2,
            ..IGConfig::default()
        };
        assert!(matches!(
            integrated_gradients(&m, &x, None, &cfg),
            Err(IgError::MissingLabel)
        ));
        assert_eq!(
            integrated_gradients(&m, &x, Some(2), &cfg)
                .unwrap()
                .target_class,
            2
        );
        assert!(integrated_gradients(&m, &x, Some(5), &cfg).is_err());
        for p in [TargetPolicy::PredictedClass, TargetPolicy::TrueLabel] {
            assert_eq!(TargetPolicy::from_code(p.code()), Some(p));
            assert_eq!(p.name().parse::<TargetPolicy>().unwrap(), p);
        }
    }

    #[test]
    fn shape_and_config_errors() {
        let m = small_model(12);
        let x = Tensor::zeros(vec![3, 8, 8]);
        let cfg = IGConfig {
            baseline: Baseline::Custom(Tensor::zeros(vec![3, 8, 7])),
            ..IGConfig::default()
        };
        assert!(matches!(
            integrated_gradients(&m, &x, None, &cfg),
            Err(IgError::ShapeMismatch(_))
        ));
        assert!(integrated_gradients(&m, &x, None, &IGConfig::with_steps(0)).is_err());
    }

    #[test]
    fn precompute_round_trip_and_determinism() {
        let teacher = build_model(ModelConfig::preset(Architecture::MicroStudent, 10, 13)).unwrap();
        let ds = Dataset::from_records(&synthetic::records(5, 10, 14));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.gdig"), dir.path().join("b.gdig"));
        let cfg = IGConfig::with_steps(4);
        let s = precompute_dataset(&teacher, &ds, &cfg, &a, 1, false).unwrap();
        assert_eq!(s.count, 5);
        precompute_dataset(&teacher, &ds, &cfg, &b, 3, false).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let cache = read_ig_cache(&a).unwrap();
        cache
            .header()
            .check_fingerprint(&teacher.fingerprint())
            .unwrap();
        let direct = integrated_gradients(&teacher, &ds.image_tensor(3), None, &cfg).unwrap();
        let stored = cache.entry(3).unwrap();
        for (u, v) in direct.values.data().iter().zip(stored.data()) {
            assert_eq!(*v, *u as f32 as f64);
        }
    }

    #[test]
    fn precompute_append_resumes_and_guards_teacher() {
        let teacher = build_model(ModelConfig::preset(Architecture::MicroStudent, 10, 15)).unwrap();
        let ds = Dataset::from_records(&synthetic::records(4, 10, 16));
        let dir = tempfile::tempdir().unwrap();
        let (whole, part) = (dir.path().join("w.gdig"), dir.path().join("p.gdig"));
        let cfg = IGConfig::with_steps(3);
        precompute_dataset(&teacher, &ds, &cfg, &whole, 1, false).unwrap();
        precompute_dataset(&teacher, &ds.take(2), &cfg, &part, 1, false).unwrap();
        let s = precompute_dataset(&teacher, &ds, &cfg, &part, 2, true).unwrap();
        assert_eq!((s.count, s.appended), (4, 2));
        assert_eq!(
            std::fs::read(&whole).unwrap(),
            std::fs::read(&part).unwrap()
        );

        let other = build_model(ModelConfig::preset(Architecture::MicroStudent, 10, 99)).unwrap();
        let err = precompute_dataset(&other, &ds, &cfg, &part, 1, true).unwrap_err();
        assert!(
            matches!(err, IgError::Data(DataError::FingerprintMismatch { .. })),
            "{err}"
        );
    }
}
